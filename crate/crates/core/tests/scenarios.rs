use proptest::prelude::*;

use riskgrid::scenarios::{generate_ensemble, reduce_kmeans, solar_shape, NoiseSpec, ScenarioSet};

fn ensemble(seed: u64, count: usize) -> Vec<Vec<f64>> {
    let base = solar_shape(24, 1.0, 350.0);
    let noise = NoiseSpec {
        multiplicative_std: 0.2,
        additive_std: 10.0,
        profile_scale_std: 0.1,
        ..NoiseSpec::none((0.0, 350.0))
    };
    generate_ensemble(&base, &noise, count, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kmeans_is_a_weighted_partition(seed in 0u64..1000, k in 1usize..12) {
        let e = ensemble(seed, 60);
        let r = reduce_kmeans(&e, k, seed, 100, 1e-9).unwrap();
        prop_assert_eq!(r.centroids.len(), k);
        prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(r.probs.iter().all(|&p| p > 0.0));
        prop_assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        for (j, c) in r.centroids.iter().enumerate() {
            let members: Vec<&Vec<f64>> = e.iter().zip(&r.assignments).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            prop_assert!((r.probs[j] - members.len() as f64 / 60.0).abs() < 1e-12);
            for t in 0..24 {
                let mean = members.iter().map(|p| p[t]).sum::<f64>() / members.len() as f64;
                prop_assert!((c[t] - mean).abs() < 1e-6 * mean.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ensembles_respect_the_clamp(seed in 0u64..1000) {
        prop_assert!(ensemble(seed, 20).iter().flatten().all(|&x| (0.0..=350.0).contains(&x)));
    }
}

#[test]
fn ensembles_are_reproducible() {
    assert_eq!(ensemble(5, 30), ensemble(5, 30));
    assert_ne!(ensemble(5, 30), ensemble(6, 30));
}

#[test]
fn zero_noise_reproduces_the_base() {
    let base = solar_shape(24, 1.0, 350.0);
    let e = generate_ensemble(&base, &NoiseSpec::none((0.0, 350.0)), 4, 1).unwrap();
    assert!(e.iter().all(|p| *p == base));
}

#[test]
fn k_equal_to_n_keeps_every_member() {
    let e = ensemble(3, 10);
    let r = reduce_kmeans(&e, 10, 0, 50, 0.0).unwrap();
    let mut got = r.centroids.clone();
    let mut want = e.clone();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);
    assert!(r.probs.iter().all(|&p| (p - 0.1).abs() < 1e-15));
}

#[test]
fn bad_reductions_and_sets_are_rejected() {
    let e = ensemble(3, 5);
    assert!(reduce_kmeans(&e, 0, 0, 10, 0.0).is_err());
    assert!(reduce_kmeans(&e, 6, 0, 10, 0.0).is_err());
    assert!(ScenarioSet::new(vec![vec![1.0; 4]], vec![vec![1.0; 4]], vec![0.5], vec![1.0]).is_err());
}

#[test]
fn json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.json");
    let set = ScenarioSet::new(ensemble(1, 2), ensemble(2, 3), vec![0.25, 0.75], vec![0.2, 0.3, 0.5]).unwrap();
    set.write_json(&path).unwrap();
    assert_eq!(ScenarioSet::read_json(&path).unwrap(), set);
}
