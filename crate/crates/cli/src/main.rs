use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use riskgrid::config::RunConfig;
use riskgrid::scenarios::{generate_ensemble, load_profiles_csv, reduce_kmeans, NoiseSpec, ScenarioSet};
use riskgrid::shapley::{characteristic_table, coalition_key, shapley_allocate, Allocation, CharacteristicTable};
use riskgrid::trainer::{evaluate, train, CheckpointHeader, EvalReport, Model, Variant};
use riskgrid::{Error, Result};

const CHECKPOINT: &str = "checkpoint.bin";
const SCENARIOS: &str = "scenarios.json";

#[derive(Parser)]
#[command(name = "riskgrid", version, about = "Risk-sensitive multi-agent scheduling for networked microgrids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scenario generation and reduction.
    #[command(subcommand)]
    Scen(ScenCommand),
    /// Train a policy and write checkpoint and metrics.
    Train(RunArgs),
    /// Evaluate a trained policy on the test scenarios.
    Eval(RunArgs),
    /// Allocate the grand-coalition cost by Shapley values.
    Shapley(ShapleyArgs),
    /// Convert a JSON report into CSV.
    Export(ExportArgs),
}

#[derive(Subcommand)]
enum ScenCommand {
    /// Write the train and test scenario sets of a configuration, or with
    /// `--count` a raw Monte-Carlo ensemble as CSV.
    Gen(GenArgs),
    /// Reduce PV and load ensembles (CSV) to weighted scenarios by k-means.
    Reduce(ReduceArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration; defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size preset instead of the desk preset.
    #[arg(long, conflicts_with = "config")]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Solar,
    EveningPeak,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of raw profiles to draw.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_enum, default_value = "evening-peak", requires = "count")]
    source: Source,
    /// Per-step multiplicative noise standard deviation.
    #[arg(long, requires = "count")]
    noise: Option<f64>,
}

#[derive(Args)]
struct ReduceArgs {
    /// PV ensemble, one profile per row.
    #[arg(long)]
    pv: PathBuf,
    /// Load ensemble, one profile per row.
    #[arg(long)]
    load: PathBuf,
    /// PV scenario count.
    #[arg(long)]
    k: usize,
    /// Load scenario count; defaults to `--k`.
    #[arg(long)]
    k_load: Option<usize>,
    /// Skip one header line in each CSV.
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "scenarios.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ShapleyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Precomputed characteristic table; skips training.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Training episodes per coalition.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    /// eval, shapley, table or scenario JSON.
    input: PathBuf,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("riskgrid: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Consistency(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Scen(ScenCommand::Gen(a)) => scen_gen(a),
        Command::Scen(ScenCommand::Reduce(a)) => scen_reduce(a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Shapley(a) => cmd_shapley(a),
        Command::Export(a) => cmd_export(a),
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, a.paper_scale) {
        (Some(path), _) => RunConfig::read(path)?,
        (None, true) => RunConfig::paper_scale(),
        (None, false) => RunConfig::desk(),
    };
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(v) = a.variant {
        cfg = cfg.with_variant(v);
    }
    if let Some(alpha) = a.alpha {
        cfg = cfg.with_alpha(alpha);
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn eval_threads() -> Result<usize> {
    match std::env::var("RISKGRID_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("RISKGRID_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

fn print_set(name: &str, set: &ScenarioSet) {
    println!("{name}: B = {}, D = {}", set.n_pv(), set.n_load());
    let fmt = |p: &[f64]| p.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    println!("  pv probs:   {}", fmt(&set.pv_probs));
    println!("  load probs: {}", fmt(&set.load_probs));
}

/// Writes both scenario sets, tagged with the configuration hash.
fn write_scenarios(cfg: &RunConfig, train: &ScenarioSet, test: &ScenarioSet) -> Result<()> {
    let doc = json!({ "config_hash": cfg.hash(), "train": train, "test": test });
    write(&cfg.output_dir.join(SCENARIOS), &(serde_json::to_string_pretty(&doc)? + "\n"))
}

/// Scenario sets of a run directory, or freshly built ones when the
/// directory has none.
fn scenarios_for(cfg: &RunConfig) -> Result<(ScenarioSet, ScenarioSet)> {
    let path = cfg.output_dir.join(SCENARIOS);
    if !path.exists() {
        return cfg.build_scenarios();
    }
    let doc: Value = serde_json::from_str(&read(&path)?)?;
    check_hash(&path, doc.get("config_hash").and_then(Value::as_str), &cfg.hash())?;
    let set = |k: &str| -> Result<ScenarioSet> {
        let s: ScenarioSet = serde_json::from_value(doc[k].clone())?;
        s.validate()?;
        Ok(s)
    };
    Ok((set("train")?, set("test")?))
}

fn check_hash(path: &Path, found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(Error::Consistency(format!(
            "{} was produced by configuration {h}, not {expected}",
            path.display()
        ))),
        None => Err(Error::Consistency(format!("{} carries no config_hash", path.display()))),
    }
}

fn scen_gen(a: GenArgs) -> Result<()> {
    let cfg = load_config(&a.run)?;
    if let Some(count) = a.count {
        let (h, dt) = (cfg.system.horizon, cfg.system.dt);
        let source = match a.source {
            Source::Solar => &cfg.scenarios.pv,
            Source::EveningPeak => &cfg.scenarios.load,
        };
        let noise = match a.noise {
            Some(std) => NoiseSpec {
                multiplicative_std: std,
                ..NoiseSpec::none(source.noise.clamp)
            },
            None => source.noise,
        };
        let base = source.base.profile(h, dt)?;
        let profiles = generate_ensemble(&base, &noise, count, cfg.training.seed)?;
        let text: String = profiles
            .iter()
            .map(|p| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        match &a.run.out {
            Some(path) => {
                write(path, &text)?;
                eprintln!("wrote {count} profiles to {}", path.display());
            }
            None => print!("{text}"),
        }
        return Ok(());
    }
    ensure_dir(&cfg.output_dir)?;
    let (train, test) = cfg.build_scenarios()?;
    write_scenarios(&cfg, &train, &test)?;
    print_set("train", &train);
    print_set("test", &test);
    Ok(())
}

fn scen_reduce(a: ReduceArgs) -> Result<()> {
    let pv = load_profiles_csv(&a.pv, a.header)?;
    let load = load_profiles_csv(&a.load, a.header)?;
    let k_load = a.k_load.unwrap_or(a.k);
    let r_pv = reduce_kmeans(&pv, a.k, a.seed, 100, 1e-6)?;
    let r_load = reduce_kmeans(&load, k_load, a.seed.wrapping_add(1), 100, 1e-6)?;
    let set = ScenarioSet::new(r_pv.centroids, r_load.centroids, r_pv.probs, r_load.probs)?;
    set.write_json(&a.out)?;
    print_set("reduced", &set);
    Ok(())
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let hash = cfg.hash();
    ensure_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.json"), &(cfg.to_json()? + "\n"))?;
    let (train_set, test_set) = cfg.build_scenarios()?;
    write_scenarios(&cfg, &train_set, &test_set)?;
    let out = train(&cfg.system, &train_set, &cfg.risk, &cfg.training)?;
    write(&cfg.output_dir.join("metrics.csv"), &out.metrics.to_csv(&hash))?;
    let header = CheckpointHeader::new(&out.model, &cfg.training, &hash);
    out.model.save(&cfg.output_dir.join(CHECKPOINT), &header)?;
    let last = out.metrics.rows().last().map(|r| r.cum_reward).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} episodes (seed {}); last cumulative reward {last:.2}; artifacts in {}",
        cfg.training.variant,
        cfg.training.episodes,
        cfg.training.seed,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_eval(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let hash = cfg.hash();
    let path = cfg.output_dir.join(CHECKPOINT);
    let (model, header) = Model::load(&path, &cfg.system, &cfg.training, cfg.risk.alpha)?;
    check_hash(&path, Some(&header.config_hash), &hash)?;
    let (_, test_set) = scenarios_for(&cfg)?;
    let report = evaluate(&model, &cfg.system, &test_set, &cfg.risk, &hash, eval_threads()?)?;
    report.write_json(&cfg.output_dir.join("eval.json"))?;
    write(&cfg.output_dir.join("dispatch.csv"), &report.dispatch_csv())?;
    println!(
        "total_cost {:.2}  unit_cost {:.4}  risk_kwh {:.3}  (alpha {}, {} test scenarios)",
        report.total_cost,
        report.unit_cost,
        report.risk_kwh,
        report.alpha,
        report.scenarios.len()
    );
    Ok(())
}

fn cmd_shapley(a: ShapleyArgs) -> Result<()> {
    let (table, coalitions, out_dir) = match &a.table {
        Some(path) => (CharacteristicTable::read_json(path)?, Vec::new(), a.run.out.clone()),
        None => {
            let cfg = load_config(&a.run)?;
            let budget = a.budget.unwrap_or(cfg.shapley.budget);
            let (train_set, test_set) = cfg.build_scenarios()?;
            let (table, details) = characteristic_table(&cfg, &train_set, &test_set, budget)?;
            (table, details, Some(cfg.output_dir.clone()))
        }
    };
    let alloc = shapley_allocate(&table)?;
    for (i, s) in alloc.shares.iter().enumerate() {
        println!("MG {i}: {s:.4}");
    }
    println!("grand coalition: {:.4}", alloc.grand_value);
    if let Some(dir) = out_dir {
        ensure_dir(&dir)?;
        let doc = json!({
            "config_hash": table.config_hash,
            "table": table,
            "allocation": alloc,
            "coalitions": coalitions,
        });
        write(&dir.join("shapley.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    }
    Ok(())
}

fn csv_row(fields: &[String]) -> String {
    fields.join(",") + "\n"
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let doc: Value = serde_json::from_str(&read(&a.input)?)?;
    let hash = doc.get("config_hash").and_then(Value::as_str).unwrap_or("none").to_string();
    let mut out = format!("# config_hash: {hash}\n");
    if doc.get("trajectories").is_some() {
        let report: EvalReport = serde_json::from_value(doc)?;
        out = report.scenarios_csv();
    } else if let Some(alloc) = doc.get("allocation") {
        let alloc: Allocation = serde_json::from_value(alloc.clone())?;
        out.push_str("mg,share\n");
        for (i, s) in alloc.shares.iter().enumerate() {
            out.push_str(&csv_row(&[i.to_string(), s.to_string()]));
        }
    } else if doc.get("values").is_some() {
        let table: CharacteristicTable = serde_json::from_value(doc)?;
        let dense = table.dense()?;
        out.push_str("coalition,value\n");
        for (m, v) in dense.iter().enumerate().skip(1) {
            out.push_str(&csv_row(&[format!("\"{}\"", coalition_key(m, table.n)), v.to_string()]));
        }
    } else if doc.get("train").is_some() || doc.get("pv_probs").is_some() {
        let sets = if doc.get("train").is_some() {
            vec![("train", doc["train"].clone()), ("test", doc["test"].clone())]
        } else {
            vec![("reduced", doc)]
        };
        out.push_str("set,kind,index,prob,values\n");
        for (name, set) in sets {
            let set: ScenarioSet = serde_json::from_value(set)?;
            set.validate()?;
            for (kind, profiles, probs) in [
                ("pv", &set.pv_profiles, &set.pv_probs),
                ("load", &set.load_profiles, &set.load_probs),
            ] {
                for (i, (p, w)) in profiles.iter().zip(probs).enumerate() {
                    let mut row = vec![name.to_string(), kind.to_string(), i.to_string(), w.to_string()];
                    row.extend(p.iter().map(|v| v.to_string()));
                    out.push_str(&csv_row(&row));
                }
            }
        }
    } else {
        return Err(Error::Config(format!("{} is not a known report", a.input.display())));
    }
    match a.out {
        Some(path) => write(&path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}
