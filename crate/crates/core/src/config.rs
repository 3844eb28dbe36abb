//! Run configuration: one JSON document describing the system, how its
//! scenarios are produced, the risk settings and the training run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::PpoConfig;
use crate::env::{MicrogridParams, SystemParams, TariffSchedule};
use crate::error::{Error, Result};
use crate::neural::ModelDims;
use crate::risk::RiskConfig;
use crate::scenarios::{
    evening_peak_load, generate_ensemble, load_profiles_csv, reduce_kmeans, solar_shape, NoiseSpec, Profile,
    ScenarioSet,
};
use crate::trainer::{derive_seed, TrainConfig, Variant};

/// Shape that ensemble members are perturbed around.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseProfile {
    Solar { peak: f64 },
    EveningPeak { night: f64, day: f64, peak: f64 },
    Values(Vec<f64>),
}

impl BaseProfile {
    pub fn profile(&self, horizon: usize, dt: f64) -> Result<Profile> {
        match self {
            BaseProfile::Solar { peak } => Ok(solar_shape(horizon, dt, *peak)),
            BaseProfile::EveningPeak { night, day, peak } => Ok(evening_peak_load(horizon, dt, *night, *day, *peak)),
            BaseProfile::Values(v) if v.len() == horizon => Ok(v.clone()),
            BaseProfile::Values(v) => Err(Error::Config(format!(
                "base profile has {} values for a horizon of {horizon}",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSource {
    pub base: BaseProfile,
    pub noise: NoiseSpec,
}

/// How one scenario set (train or test) is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Number of reduced PV scenarios (B).
    pub pv_scenarios: usize,
    /// Number of reduced load scenarios (D).
    pub load_scenarios: usize,
    pub seed: u64,
    /// Existing ensembles to reduce instead of generating one.
    #[serde(default)]
    pub pv_csv: Option<PathBuf>,
    #[serde(default)]
    pub load_csv: Option<PathBuf>,
    /// The CSV files start with a header line.
    #[serde(default)]
    pub csv_header: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub pv: ProfileSource,
    pub load: ProfileSource,
    /// Monte-Carlo samples per ensemble.
    pub ensemble_size: usize,
    pub train: SplitSpec,
    pub test: SplitSpec,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.pv.noise.validate()?;
        self.load.noise.validate()?;
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        for (name, s) in [("train", &self.train), ("test", &self.test)] {
            if s.pv_scenarios == 0 || s.load_scenarios == 0 {
                return Err(Error::Config(format!("{name} split needs at least one PV and one load scenario")));
            }
            if s.pv_csv.is_none() && s.pv_scenarios > self.ensemble_size
                || s.load_csv.is_none() && s.load_scenarios > self.ensemble_size
            {
                return Err(Error::Config(format!("{name} split asks for more scenarios than ensemble_size")));
            }
        }
        if self.train.seed == self.test.seed && self.train.pv_csv.is_none() {
            return Err(Error::Config("train and test splits need different seeds".into()));
        }
        Ok(())
    }

    /// Monte-Carlo ensemble (or the configured CSV) for one split.
    pub fn ensemble(&self, split: &SplitSpec, pv: bool, horizon: usize, dt: f64) -> Result<Vec<Profile>> {
        let (csv, source, stream) = if pv {
            (&split.pv_csv, &self.pv, 11)
        } else {
            (&split.load_csv, &self.load, 12)
        };
        if let Some(path) = csv {
            let profiles = load_profiles_csv(path, split.csv_header)?;
            if let Some((row, p)) = profiles.iter().enumerate().find(|(_, p)| p.len() < horizon) {
                return Err(Error::Parse {
                    path: path.clone(),
                    row: row + 1,
                    message: format!("{} values, horizon needs {horizon}", p.len()),
                });
            }
            return Ok(profiles);
        }
        let base = source.base.profile(horizon, dt)?;
        generate_ensemble(&base, &source.noise, self.ensemble_size, derive_seed(split.seed, stream))
    }

    /// Generates and reduces the ensembles of one split.
    pub fn build_split(&self, split: &SplitSpec, horizon: usize, dt: f64) -> Result<ScenarioSet> {
        let reduce = |pv: bool, k: usize| -> Result<(Vec<Profile>, Vec<f64>)> {
            let ens = self.ensemble(split, pv, horizon, dt)?;
            let seed = derive_seed(split.seed, if pv { 21 } else { 22 });
            let r = reduce_kmeans(&ens, k, seed, self.kmeans_max_iters, self.kmeans_tol)?;
            Ok((r.centroids, r.probs))
        };
        let (pv_profiles, pv_probs) = reduce(true, split.pv_scenarios)?;
        let (load_profiles, load_probs) = reduce(false, split.load_scenarios)?;
        ScenarioSet::new(pv_profiles, load_profiles, pv_probs, load_probs)
    }
}

/// Settings for coalition valuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapleyConfig {
    /// Training episodes per coalition.
    pub budget: usize,
    /// Scale the aggregate grid limits by `|S| / N` for sub-coalitions
    /// instead of keeping them at their full values.
    #[serde(default)]
    pub scale_grid_limits: bool,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig {
            budget: 200,
            scale_grid_limits: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemParams,
    pub scenarios: ScenarioConfig,
    pub risk: RiskConfig,
    pub training: TrainConfig,
    #[serde(default)]
    pub shapley: ShapleyConfig,
    /// Where artifacts go; not part of the configuration hash.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Serialize)]
struct Hashed<'a> {
    system: &'a SystemParams,
    scenarios: &'a ScenarioConfig,
    risk: &'a RiskConfig,
    training: &'a TrainConfig,
    shapley: &'a ShapleyConfig,
}

impl RunConfig {
    /// Two-MG, one-day system whose aggregate import limit binds at the
    /// evening peak. Small enough to train in minutes on one core.
    pub fn desk() -> Self {
        let mg1 = MicrogridParams {
            pv_factor: 1.0,
            load_factor: 1.0,
            ..MicrogridParams::default()
        };
        let mg2 = MicrogridParams {
            pv_factor: 0.8,
            load_factor: 0.9,
            ..MicrogridParams::default()
        };
        RunConfig {
            system: SystemParams {
                mgs: vec![mg1, mg2],
                grid_buy_max: 500.0,
                grid_sell_max: 900.0,
                dt: 1.0,
                horizon: 24,
                tariff: TariffSchedule::time_of_use(),
            },
            scenarios: ScenarioConfig {
                pv: ProfileSource {
                    base: BaseProfile::Solar { peak: 350.0 },
                    noise: NoiseSpec {
                        multiplicative_std: 0.1,
                        additive_std: 5.0,
                        clamp: (0.0, 350.0),
                        profile_scale_std: 0.25,
                    },
                },
                load: ProfileSource {
                    base: BaseProfile::EveningPeak {
                        night: 150.0,
                        day: 250.0,
                        peak: 550.0,
                    },
                    noise: NoiseSpec {
                        multiplicative_std: 0.05,
                        additive_std: 5.0,
                        clamp: (0.0, 2000.0),
                        profile_scale_std: 0.15,
                    },
                },
                ensemble_size: 200,
                train: SplitSpec {
                    pv_scenarios: 5,
                    load_scenarios: 5,
                    seed: 1,
                    pv_csv: None,
                    load_csv: None,
                    csv_header: false,
                },
                test: SplitSpec {
                    pv_scenarios: 4,
                    load_scenarios: 4,
                    seed: 2,
                    pv_csv: None,
                    load_csv: None,
                    csv_header: false,
                },
                kmeans_max_iters: 100,
                kmeans_tol: 1e-6,
            },
            risk: RiskConfig::default(),
            // 500 episodes leave too few Adam steps at the full-size learning
            // rates; larger steps over four-episode batches train stably.
            training: TrainConfig {
                episodes: 500,
                episodes_per_update: 4,
                actor_lr: 1e-3,
                critic_lr: 1e-3,
                ppo: PpoConfig {
                    minibatch: Some(24),
                    ..PpoConfig::default()
                },
                dims: ModelDims {
                    d_model: 32,
                    heads: 4,
                    hidden: 32,
                },
                ..TrainConfig::default()
            },
            shapley: ShapleyConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    /// Three MGs over one week with the full-size networks and scenario
    /// counts. Expect hours of CPU time.
    pub fn paper_scale() -> Self {
        let mut cfg = RunConfig::desk();
        let mg = |pv_factor, load_factor| MicrogridParams {
            pv_factor,
            load_factor,
            ..MicrogridParams::default()
        };
        cfg.system.mgs = vec![mg(1.0, 0.8), mg(0.9, 1.0), mg(0.8, 0.9)];
        cfg.system.grid_buy_max = 900.0;
        cfg.system.horizon = 168;
        cfg.scenarios.ensemble_size = 1000;
        for split in [&mut cfg.scenarios.train, &mut cfg.scenarios.test] {
            split.pv_scenarios = 20;
            split.load_scenarios = 20;
        }
        cfg.training = TrainConfig {
            episodes: 1000,
            ..TrainConfig::default()
        };
        cfg.shapley.budget = 500;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.scenarios.validate()?;
        self.risk.validate()?;
        self.training.validate()?;
        if self.shapley.budget == 0 {
            return Err(Error::Config("shapley budget must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 over the canonical JSON of everything except the output
    /// directory, hex encoded.
    pub fn hash(&self) -> String {
        let hashed = Hashed {
            system: &self.system,
            scenarios: &self.scenarios,
            risk: &self.risk,
            training: &self.training,
            shapley: &self.shapley,
        };
        let bytes = serde_json::to_vec(&hashed).expect("configuration serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.training.variant = variant;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.risk.alpha = alpha;
        self
    }

    /// Training and test scenario sets, drawn from independent ensembles.
    pub fn build_scenarios(&self) -> Result<(ScenarioSet, ScenarioSet)> {
        let (h, dt) = (self.system.horizon, self.system.dt);
        let train = self.scenarios.build_split(&self.scenarios.train, h, dt)?;
        let test = self.scenarios.build_split(&self.scenarios.test, h, dt)?;
        Ok((train, test))
    }
}
