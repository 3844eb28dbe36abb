use riskgrid::config::RunConfig;
use riskgrid::trainer::{evaluate, train, CheckpointHeader, EvalReport, MetricsLog, Model, Variant};
use riskgrid::Error;

fn short(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::desk().with_variant(variant).with_seed(3);
    cfg.training.episodes = 4;
    cfg.training.episodes_per_update = 2;
    cfg
}

#[test]
fn training_and_evaluation_are_deterministic() {
    for variant in Variant::ALL {
        let cfg = short(variant);
        let (train_set, test_set) = cfg.build_scenarios().unwrap();
        let run = || {
            let out = train(&cfg.system, &train_set, &cfg.risk, &cfg.training).unwrap();
            let report = evaluate(&out.model, &cfg.system, &test_set, &cfg.risk, &cfg.hash(), 1).unwrap();
            (out.metrics.to_csv(&cfg.hash()), report.to_json().unwrap())
        };
        assert_eq!(run(), run(), "{variant}");
    }
}

#[test]
fn parallel_evaluation_matches_serial() {
    let cfg = short(Variant::RrlSm);
    let (train_set, test_set) = cfg.build_scenarios().unwrap();
    let out = train(&cfg.system, &train_set, &cfg.risk, &cfg.training).unwrap();
    let serial = evaluate(&out.model, &cfg.system, &test_set, &cfg.risk, "h", 1).unwrap();
    let parallel = evaluate(&out.model, &cfg.system, &test_set, &cfg.risk, "h", 3).unwrap();
    assert_eq!(serial.to_json().unwrap(), parallel.to_json().unwrap());
}

#[test]
fn checkpoints_reload_to_identical_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let cfg = short(variant);
        let (train_set, test_set) = cfg.build_scenarios().unwrap();
        let out = train(&cfg.system, &train_set, &cfg.risk, &cfg.training).unwrap();
        let path = dir.path().join(format!("{variant}.bin"));
        let header = CheckpointHeader::new(&out.model, &cfg.training, &cfg.hash());
        out.model.save(&path, &header).unwrap();
        let (loaded, read_header) = Model::load(&path, &cfg.system, &cfg.training, cfg.risk.alpha).unwrap();
        assert_eq!(read_header, header);
        let a = evaluate(&out.model, &cfg.system, &test_set, &cfg.risk, "h", 1).unwrap();
        let b = evaluate(&loaded, &cfg.system, &test_set, &cfg.risk, "h", 1).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

        let other = short(if variant == Variant::Mappo { Variant::RrlSm } else { Variant::Mappo });
        assert!(matches!(
            Model::load(&path, &other.system, &other.training, other.risk.alpha),
            Err(Error::Consistency(_))
        ));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(Variant::Mappo);
    let model = Model::new(&cfg.system, &cfg.training, cfg.risk.alpha);
    let path = dir.path().join("m.bin");
    model.save(&path, &CheckpointHeader::new(&model, &cfg.training, "h")).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Model::load(&path, &cfg.system, &cfg.training, cfg.risk.alpha).is_err());
}

#[test]
fn reports_round_trip_and_aggregate_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(Variant::RMappo);
    let (train_set, test_set) = cfg.build_scenarios().unwrap();
    let out = train(&cfg.system, &train_set, &cfg.risk, &cfg.training).unwrap();
    let report = evaluate(&out.model, &cfg.system, &test_set, &cfg.risk, &cfg.hash(), 1).unwrap();
    let path = dir.path().join("eval.json");
    report.write_json(&path).unwrap();
    assert_eq!(EvalReport::read_json(&path).unwrap(), report);

    let n = test_set.n_pv() * test_set.n_load();
    assert_eq!(report.scenarios.len(), n);
    let expected: f64 = report.scenarios.iter().map(|s| s.prob * s.cost).sum();
    assert!((report.total_cost - expected).abs() <= 1e-9 * expected.abs());
    let max_shed = report.scenarios.iter().map(|s| s.shed_kwh).fold(0.0, f64::max);
    assert!(report.risk_kwh >= report.expected_shed_kwh - 1e-9 && report.risk_kwh <= max_shed + 1e-9);
    assert!((report.risk_cost - cfg.risk.sigma * report.risk_kwh).abs() < 1e-9 * report.risk_cost.abs().max(1.0));

    let csv = report.dispatch_csv();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + n * cfg.system.horizon * cfg.system.n_agents());
    assert!(csv.starts_with(&format!("# config_hash: {}", cfg.hash())));
}

#[test]
fn metrics_csv_round_trips() {
    let cfg = short(Variant::Mappo);
    let (train_set, _) = cfg.build_scenarios().unwrap();
    let out = train(&cfg.system, &train_set, &cfg.risk, &cfg.training).unwrap();
    let text = out.metrics.to_csv("abc");
    let (log, hash) = MetricsLog::from_csv(&text).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(log, out.metrics);
    assert_eq!(log.rows().len(), 4);
    assert!(log.rows()[1].actor_loss.is_some() && log.rows()[0].actor_loss.is_none());
}
