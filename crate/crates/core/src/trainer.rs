//! Training loop, evaluation and checkpoints.
//!
//! One episode is rolled out with the current policy, the joint risk values
//! of its states are computed with the online critic, and after every
//! `episodes_per_update` episodes the critic and the actors are updated from
//! that on-policy batch, which is then discarded.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{gae, normalize_advantages, ppo_loss, ActMode, ActionMap, ActorPolicy, PpoConfig, RolloutBuffer, Transition};
use crate::critic::{CentralCritic, CriticConfig};
use crate::env::{Env, SystemParams, Trajectory};
use crate::error::{Error, Result};
use crate::memory::{GlobalMemorySpace, MemoryConfig, ObsRow, ObsWindow, RecurrentEncoder, SharedMemory};
use crate::neural::{AdamConfig, Graph, ModelDims, NodeId, ParamStore, Tensor};
use crate::risk::{cvar_alpha, DiscreteLossDistribution, RiskConfig};
use crate::scenarios::ScenarioSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shared memory, quantile critics, risk-sensitive baseline.
    RrlSm,
    /// Private GRU encoders, quantile critics, risk-sensitive baseline.
    RMappo,
    /// Private GRU encoders, expected-value critics.
    Mappo,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::RrlSm, Variant::RMappo, Variant::Mappo];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RrlSm => "rrl_sm",
            Variant::RMappo => "r_mappo",
            Variant::Mappo => "mappo",
        }
    }

    pub fn uses_shared_memory(self) -> bool {
        self == Variant::RrlSm
    }

    /// Atom count actually used by this variant's critics.
    pub fn atoms(self, configured: usize) -> usize {
        match self {
            Variant::Mappo => 1,
            _ => configured,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected rrl_sm, r_mappo or mappo")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub episodes: usize,
    pub seed: u64,
    pub episodes_per_update: usize,
    pub dims: ModelDims,
    pub memory: MemoryConfig,
    pub critic: CriticConfig,
    pub ppo: PpoConfig,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Rewards are divided by this before they reach the networks.
    pub reward_scale: f64,
    pub init_log_std: f64,
    /// Fill the `seconds` column of the metrics log. Off by default so that
    /// runs with equal seeds produce identical files.
    #[serde(default)]
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::RrlSm,
            episodes: 500,
            seed: 0,
            episodes_per_update: 1,
            dims: ModelDims::default(),
            memory: MemoryConfig::default(),
            critic: CriticConfig::default(),
            ppo: PpoConfig::default(),
            actor_lr: 1e-4,
            critic_lr: 5e-4,
            reward_scale: 1000.0,
            init_log_std: -0.5,
            log_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.episodes_per_update == 0 {
            return Err(Error::Config("episodes and episodes_per_update must be at least 1".into()));
        }
        self.dims.validate()?;
        self.critic.validate()?;
        self.ppo.validate()?;
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("reward_scale", self.reward_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("init_log_std must be finite".into()));
        }
        Ok(())
    }
}

/// Independent seed for a named sub-stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_ACTIONS: u64 = 2;
const STREAM_SCENARIOS: u64 = 3;

/// Training scenarios `(b, d)` drawn with probability `p_b·q_d`. Depends only
/// on the seed and the set, so every variant sees the same sequence.
pub fn scenario_schedule(set: &ScenarioSet, episodes: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SCENARIOS));
    let draw = |rng: &mut ChaCha8Rng, probs: &[f64]| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    };
    (0..episodes)
        .map(|_| {
            let b = draw(&mut rng, &set.pv_probs);
            let d = draw(&mut rng, &set.load_probs);
            (b, d)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Shared(SharedMemory),
    Recurrent(RecurrentEncoder),
}

/// Actors, encoders, critic and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub dims: ModelDims,
    pub memory_config: MemoryConfig,
    pub alpha: f64,
    pub encoder: Encoder,
    pub actors: Vec<ActorPolicy>,
    pub critic: CentralCritic,
    /// Encoder and actor parameters.
    pub actor_store: ParamStore,
    pub critic_store: ParamStore,
    pub target_store: ParamStore,
    pub critic_updates: u64,
    maps: Vec<ActionMap>,
}

/// Result of one rollout.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub trajectory: Trajectory,
}

/// Losses of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
}

impl Model {
    pub fn new(system: &SystemParams, cfg: &TrainConfig, alpha: f64) -> Self {
        let n = system.n_agents();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT));
        let mut actor_store = ParamStore::new();
        let encoder = if cfg.variant.uses_shared_memory() {
            Encoder::Shared(SharedMemory::new(&mut actor_store, n, cfg.dims.d_model, cfg.memory, &mut rng))
        } else {
            Encoder::Recurrent(RecurrentEncoder::new(&mut actor_store, n, cfg.dims.d_model, &mut rng))
        };
        let actors = (0..n)
            .map(|i| {
                ActorPolicy::new(
                    &mut actor_store,
                    &format!("actor.{i}"),
                    cfg.dims.d_model,
                    cfg.dims.hidden,
                    cfg.init_log_std,
                    &mut rng,
                )
            })
            .collect();
        let mut critic_store = ParamStore::new();
        let critic = CentralCritic::new(&mut critic_store, n, cfg.dims, cfg.variant.atoms(cfg.critic.atoms), &mut rng);
        let target_store = critic_store.clone();
        Model {
            variant: cfg.variant,
            dims: cfg.dims,
            memory_config: cfg.memory,
            alpha,
            encoder,
            actors,
            critic,
            actor_store,
            critic_store,
            target_store,
            critic_updates: 0,
            maps: system.mgs.iter().map(ActionMap::new).collect(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.actors.len()
    }

    pub fn atoms(&self) -> usize {
        self.critic.atoms()
    }

    /// Risk level used for the baseline; expected-value critics ignore it.
    pub fn effective_alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shared_memory(&self) -> Option<&SharedMemory> {
        match &self.encoder {
            Encoder::Shared(m) => Some(m),
            Encoder::Recurrent(_) => None,
        }
    }

    /// Decision vectors for one step, plus the next memory snapshot.
    fn decide(&self, windows: &[ObsWindow], memory: Option<&GlobalMemorySpace>) -> (Vec<Vec<f64>>, Option<GlobalMemorySpace>) {
        match &self.encoder {
            Encoder::Shared(mem) => {
                let (f, next) = mem.step_all(&self.actor_store, windows, memory.expect("shared memory state"));
                (f, Some(next))
            }
            Encoder::Recurrent(enc) => (enc.encode_all(&self.actor_store, windows), None),
        }
    }

    /// Decision-vector nodes for every agent at a stored transition.
    fn decision_nodes(&self, g: &mut Graph, tr: &Transition) -> Vec<NodeId> {
        let windows: Vec<ObsWindow> = tr.windows.iter().map(|w| ObsWindow::from_rows(w.clone())).collect();
        match &self.encoder {
            Encoder::Shared(mem) => {
                let m = if tr.t == 0 {
                    mem.init_node(g, &self.actor_store)
                } else {
                    g.input(tr.memory.clone().expect("stored memory snapshot"))
                };
                (0..self.n_agents())
                    .map(|i| mem.forward_agent(g, &self.actor_store, i, m, &windows[i]).decision)
                    .collect()
            }
            Encoder::Recurrent(enc) => (0..self.n_agents())
                .map(|i| enc.forward_agent(g, &self.actor_store, i, &windows[i]))
                .collect(),
        }
    }

    /// Rolls out one episode. In [`ActMode::Sample`] the transitions carry
    /// the risk values of the online critic.
    pub fn run_episode<R: Rng + ?Sized>(
        &self,
        env: &Env,
        b: usize,
        d: usize,
        mode: ActMode,
        rng: &mut R,
        reward_scale: f64,
    ) -> Result<EpisodeRecord> {
        let n = self.n_agents();
        let horizon = env.params().horizon;
        let history = self.memory_config.history;
        let (mut state, mut obs) = env.reset(b, d)?;
        let mut windows: Vec<ObsWindow> = (0..n).map(|_| ObsWindow::new(history)).collect();
        let mut memory = self.shared_memory().map(|m| m.init_memory(&self.actor_store));
        let mut trajectory = Trajectory::new(env.params().dt, horizon);
        let mut transitions = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let feats: Vec<ObsRow> = env.features(&obs);
            for (w, f) in windows.iter_mut().zip(&feats) {
                w.push(*f);
            }
            let (decisions, next_memory) = self.decide(&windows, memory.as_ref());
            let mut actions = Vec::with_capacity(n);
            let mut log_probs = Vec::with_capacity(n);
            let mut physical = Vec::with_capacity(n);
            for i in 0..n {
                let (a, lp) = self.actors[i].act(&self.actor_store, &decisions[i], mode, rng);
                let raw = self.maps[i].to_physical(&a);
                physical.push(env.project_action(raw, &state, i));
                actions.push(a);
                log_probs.push(lp);
            }
            let (next, out) = env.step(&state, &physical);
            if mode == ActMode::Sample {
                transitions.push(Transition {
                    t,
                    state: feats,
                    windows: windows.iter().map(|w| w.rows().to_vec()).collect(),
                    memory: memory.as_ref().map(|m| m.tokens.clone()),
                    actions,
                    old_log_probs: log_probs,
                    team_reward: out.team_reward / reward_scale,
                    risk_value: 0.0,
                    done: t + 1 == horizon,
                });
            }
            trajectory.steps.push(out);
            state = next;
            obs = env.observe(&state);
            memory = next_memory;
        }
        if mode == ActMode::Sample {
            let states: Vec<Vec<ObsRow>> = transitions.iter().map(|tr| tr.state.clone()).collect();
            let values = self.critic.risk_values(&self.critic_store, &states, self.alpha);
            for (tr, v) in transitions.iter_mut().zip(values) {
                tr.risk_value = v;
            }
        }
        Ok(EpisodeRecord {
            transitions,
            trajectory,
        })
    }

    /// Critic and actor updates from one on-policy batch.
    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &RolloutBuffer, cfg: &TrainConfig, rng: &mut R) -> Result<UpdateStats> {
        let ppo = &cfg.ppo;
        let mut advantages = Vec::with_capacity(buffer.len());
        for ep in buffer.episodes() {
            let rewards: Vec<f64> = ep.iter().map(|t| t.team_reward).collect();
            let values: Vec<f64> = ep.iter().map(|t| t.risk_value).collect();
            advantages.extend(gae(&rewards, &values, ppo.gamma, ppo.gae_lambda)?);
        }
        if ppo.normalize_advantages {
            normalize_advantages(&mut advantages);
        }
        let batch: Vec<&Transition> = buffer.episodes().iter().flatten().collect();
        let mut stats = UpdateStats {
            actor_loss: 0.0,
            critic_loss: 0.0,
        };
        for _ in 0..ppo.epochs {
            stats.critic_loss = self.critic_step(buffer, cfg)?;
            let mut order: Vec<usize> = (0..batch.len()).collect();
            let size = ppo.minibatch.unwrap_or(batch.len()).min(batch.len());
            if size < batch.len() {
                order.shuffle(rng);
            }
            for chunk in order.chunks(size) {
                let mb: Vec<&Transition> = chunk.iter().map(|&k| batch[k]).collect();
                let adv: Vec<f64> = chunk.iter().map(|&k| advantages[k]).collect();
                stats.actor_loss = self.actor_step(&mb, &adv, cfg)?;
            }
        }
        Ok(stats)
    }

    fn critic_step(&mut self, buffer: &RolloutBuffer, cfg: &TrainConfig) -> Result<f64> {
        let mut g = Graph::new();
        let mut total: Option<NodeId> = None;
        for ep in buffer.episodes() {
            let states: Vec<Vec<ObsRow>> = ep.iter().map(|t| t.state.clone()).collect();
            let rewards: Vec<f64> = ep.iter().map(|t| t.team_reward).collect();
            let l = self.critic.loss(
                &mut g,
                &self.critic_store,
                &self.target_store,
                &states,
                &rewards,
                cfg.ppo.gamma,
                cfg.critic.kappa,
            );
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let total = total.ok_or_else(|| Error::Contract("critic update on an empty buffer".into()))?;
        let loss = g.scale(total, 1.0 / buffer.episodes().len() as f64);
        let value = g.value(loss).item();
        check_finite("critic loss", value)?;
        self.critic_store.zero_grad();
        g.backward(loss, &mut self.critic_store);
        let norm = self.critic_store.clip_grad_norm(cfg.ppo.max_grad_norm);
        check_finite("critic gradient norm", norm)?;
        self.critic_store.adam_step(&AdamConfig::with_lr(cfg.critic_lr));
        self.critic_updates += 1;
        if self.critic_updates % cfg.critic.sync_interval as u64 == 0 {
            self.target_store.copy_values_from(&self.critic_store);
        }
        Ok(value)
    }

    fn actor_step(&mut self, batch: &[&Transition], advantages: &[f64], cfg: &TrainConfig) -> Result<f64> {
        let mut g = Graph::new();
        let per_step: Vec<Vec<NodeId>> = batch.iter().map(|tr| self.decision_nodes(&mut g, tr)).collect();
        let mut total: Option<NodeId> = None;
        for (i, actor) in self.actors.iter().enumerate() {
            let rows: Vec<NodeId> = per_step.iter().map(|d| d[i]).collect();
            let f = g.concat_rows(&rows);
            let acts = Tensor::from_rows(&batch.iter().map(|tr| tr.actions[i].to_vec()).collect::<Vec<_>>());
            let lp = actor.log_prob(&mut g, &self.actor_store, f, &acts);
            let old: Vec<f64> = batch.iter().map(|tr| tr.old_log_probs[i]).collect();
            let ent = actor.entropy(&mut g, &self.actor_store);
            let obj = ppo_loss(&mut g, lp, &old, advantages, ent, &cfg.ppo);
            total = Some(match total {
                None => obj,
                Some(acc) => g.add(acc, obj),
            });
        }
        let loss = g.scale(total.expect("at least one agent"), -1.0);
        let value = g.value(loss).item();
        check_finite("actor loss", value)?;
        self.actor_store.zero_grad();
        g.backward(loss, &mut self.actor_store);
        let norm = self.actor_store.clip_grad_norm(cfg.ppo.max_grad_norm);
        check_finite("actor gradient norm", norm)?;
        self.actor_store.adam_step(&AdamConfig::with_lr(cfg.actor_lr));
        Ok(value)
    }

    /// Mean-action rollout on one scenario.
    pub fn evaluate_scenario(&self, env: &Env, b: usize, d: usize) -> Result<Trajectory> {
        // mean mode draws nothing from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.run_episode(env, b, d, ActMode::Mean, &mut rng, 1.0)?.trajectory)
    }

    fn all_stores(&self) -> [(&'static str, &ParamStore); 3] {
        [
            ("actor", &self.actor_store),
            ("critic", &self.critic_store),
            ("target", &self.target_store),
        ]
    }

    /// Writes all parameters into one container.
    pub fn save(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        let mut merged = ParamStore::new();
        for (prefix, store) in self.all_stores() {
            for id in store.ids() {
                merged.add(format!("{prefix}/{}", store.name(id)), store.value(id).clone());
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let header = serde_json::to_value(header)?;
        merged
            .write_container(BufWriter::new(file), &header)
            .map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model for `system`/`cfg` and fills it from a checkpoint.
    /// Any disagreement between the checkpoint and the configuration is a
    /// consistency error.
    pub fn load(path: &Path, system: &SystemParams, cfg: &TrainConfig, alpha: f64) -> Result<(Model, CheckpointHeader)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (loaded, header) = ParamStore::read_container(BufReader::new(file))?;
        let header: CheckpointHeader = serde_json::from_value(header)
            .map_err(|e| Error::Consistency(format!("checkpoint header is not readable: {e}")))?;
        header.check_against(system, cfg)?;
        let mut model = Model::new(system, cfg, alpha);
        for (prefix, store) in [
            ("actor", &mut model.actor_store),
            ("critic", &mut model.critic_store),
            ("target", &mut model.target_store),
        ] {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let name = format!("{prefix}/{}", store.name(id));
                let src = loaded
                    .id(&name)
                    .ok_or_else(|| Error::Consistency(format!("checkpoint lacks parameter {name}")))?;
                let value = loaded.value(src);
                if value.shape() != store.value(id).shape() {
                    return Err(Error::Consistency(format!(
                        "parameter {name} has shape {:?} in the checkpoint but {:?} in the model",
                        value.shape(),
                        store.value(id).shape()
                    )));
                }
                *store.value_mut(id) = value.clone();
            }
        }
        if loaded.len() != model.actor_store.len() + model.critic_store.len() + model.target_store.len() {
            return Err(Error::Consistency("checkpoint holds parameters the model does not have".into()));
        }
        Ok((model, header))
    }
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

/// Self-description stored next to checkpoint weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub variant: Variant,
    pub n_agents: usize,
    pub dims: ModelDims,
    pub memory: MemoryConfig,
    pub atoms: usize,
    pub seed: u64,
    pub episodes: usize,
    pub config_hash: String,
}

impl CheckpointHeader {
    pub fn new(model: &Model, cfg: &TrainConfig, config_hash: &str) -> Self {
        CheckpointHeader {
            variant: model.variant,
            n_agents: model.n_agents(),
            dims: model.dims,
            memory: model.memory_config,
            atoms: model.atoms(),
            seed: cfg.seed,
            episodes: cfg.episodes,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn check_against(&self, system: &SystemParams, cfg: &TrainConfig) -> Result<()> {
        let mismatch = |what: &str, ckpt: String, conf: String| {
            Err(Error::Consistency(format!(
                "checkpoint {what} is {ckpt} but the configuration says {conf}"
            )))
        };
        if self.n_agents != system.n_agents() {
            return mismatch("agent count", self.n_agents.to_string(), system.n_agents().to_string());
        }
        if self.variant != cfg.variant {
            return mismatch("variant", self.variant.to_string(), cfg.variant.to_string());
        }
        if self.dims != cfg.dims {
            return mismatch("model dimensions", format!("{:?}", self.dims), format!("{:?}", cfg.dims));
        }
        if self.memory != cfg.memory {
            return mismatch("memory settings", format!("{:?}", self.memory), format!("{:?}", cfg.memory));
        }
        let atoms = cfg.variant.atoms(cfg.critic.atoms);
        if self.atoms != atoms {
            return mismatch("atom count", self.atoms.to_string(), atoms.to_string());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    /// Sum of team rewards over the episode, currency per hour summed over steps.
    pub cum_reward: f64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub seconds: Option<f64>,
}

/// Per-episode training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

const METRICS_HEADER: [&str; 5] = ["episode", "cum_reward", "actor_loss", "critic_loss", "seconds"];

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.episode <= last.episode {
                return Err(Error::Contract(format!(
                    "metrics episode {} does not follow {}",
                    row.episode, last.episode
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// CSV text; the first line carries the configuration hash as a comment.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = format!("# config_hash: {config_hash}\n{}\n", METRICS_HEADER.join(","));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.episode,
                r.cum_reward,
                opt(r.actor_loss),
                opt(r.critic_loss),
                opt(r.seconds)
            );
        }
        out
    }

    /// Parses [`MetricsLog::to_csv`] output, returning the log and its hash.
    pub fn from_csv(text: &str) -> Result<(MetricsLog, String)> {
        let first = text.lines().next().unwrap_or_default();
        let hash = first
            .strip_prefix("# config_hash: ")
            .ok_or_else(|| Error::Consistency("metrics file lacks a config_hash line".into()))?
            .trim()
            .to_string();
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let mut log = MetricsLog::new();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Contract(format!("metrics row {}: {e}", k + 1)))?;
            let num = |j: usize| -> Result<Option<f64>> {
                let s = rec.get(j).unwrap_or("");
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| Error::Contract(format!("metrics row {}: bad number {s:?}", k + 1)))
                }
            };
            let episode = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Contract(format!("metrics row {}: bad episode", k + 1)))?;
            log.push(MetricsRow {
                episode,
                cum_reward: num(1)?.unwrap_or(f64::NAN),
                actor_loss: num(2)?,
                critic_loss: num(3)?,
                seconds: num(4)?,
            })?;
        }
        Ok((log, hash))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: MetricsLog,
}

/// Runs the full training loop on the training scenario set.
pub fn train(system: &SystemParams, train_set: &ScenarioSet, risk: &RiskConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    risk.validate()?;
    let env = Env::new(system.clone(), train_set.clone())?;
    let mut model = Model::new(system, cfg, risk.alpha);
    let schedule = scenario_schedule(train_set, cfg.episodes, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ACTIONS));
    let mut buffer = RolloutBuffer::new(system.horizon, cfg.episodes_per_update);
    let mut metrics = MetricsLog::new();
    let mut last_cum = f64::NAN;
    for (episode, &(b, d)) in schedule.iter().enumerate() {
        let start = cfg.log_wall_clock.then(Instant::now);
        let record = model.run_episode(&env, b, d, ActMode::Sample, &mut rng, cfg.reward_scale)?;
        let cum_reward: f64 = record.trajectory.steps.iter().map(|s| s.team_reward).sum();
        buffer.push_episode(record.transitions)?;
        let mut row = MetricsRow {
            episode,
            cum_reward,
            actor_loss: None,
            critic_loss: None,
            seconds: None,
        };
        if buffer.is_full() || episode + 1 == cfg.episodes {
            let stats = model.update(&buffer, cfg, &mut rng).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!(
                    "{m} at episode {episode} (scenario {b},{d}; cumulative reward {cum_reward}, previous {last_cum})"
                )),
                other => other,
            })?;
            buffer.clear();
            row.actor_loss = Some(stats.actor_loss);
            row.critic_loss = Some(stats.critic_loss);
        }
        row.seconds = start.map(|s| s.elapsed().as_secs_f64());
        metrics.push(row)?;
        last_cum = cum_reward;
    }
    Ok(TrainOutcome { model, metrics })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub pv: usize,
    pub load: usize,
    pub prob: f64,
    pub cost: f64,
    pub shed_kwh: f64,
    pub served_kwh: f64,
}

/// Test-grid evaluation of one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub config_hash: String,
    pub alpha: f64,
    pub sigma: f64,
    /// Probability-weighted episode cost, currency.
    pub total_cost: f64,
    /// `total_cost` per expected kWh served.
    pub unit_cost: f64,
    /// CVaR_α of shed energy over the test grid, kWh.
    pub risk_kwh: f64,
    /// `σ · risk_kwh`, currency.
    pub risk_cost: f64,
    pub expected_shed_kwh: f64,
    pub scenarios: Vec<ScenarioResult>,
    pub trajectories: Vec<Trajectory>,
}

impl EvalReport {
    /// Builds the report from per-scenario trajectories; `grid` lists
    /// `(b, d, p_b·q_d)` in the same order.
    pub fn from_trajectories(
        variant: Variant,
        config_hash: &str,
        grid: &[(usize, usize, f64)],
        trajectories: Vec<Trajectory>,
        risk: &RiskConfig,
    ) -> Result<Self> {
        if grid.len() != trajectories.len() {
            return Err(Error::Contract(format!(
                "{} scenarios but {} trajectories",
                grid.len(),
                trajectories.len()
            )));
        }
        let mut scenarios = Vec::with_capacity(grid.len());
        for (&(pv, load, prob), tr) in grid.iter().zip(&trajectories) {
            scenarios.push(ScenarioResult {
                pv,
                load,
                prob,
                cost: tr.episode_cost()?,
                shed_kwh: tr.shed_energy()?,
                served_kwh: tr.served_energy()?,
            });
        }
        let weighted = |f: fn(&ScenarioResult) -> f64| scenarios.iter().map(|s| s.prob * f(s)).sum::<f64>();
        let total_cost = weighted(|s| s.cost);
        let served = weighted(|s| s.served_kwh);
        let expected_shed_kwh = weighted(|s| s.shed_kwh);
        let dist = DiscreteLossDistribution::new(
            scenarios.iter().map(|s| s.shed_kwh).collect(),
            scenarios.iter().map(|s| s.prob).collect(),
        )?;
        let risk_kwh = cvar_alpha(&dist, risk.alpha)?.max(0.0);
        Ok(EvalReport {
            variant,
            config_hash: config_hash.to_string(),
            alpha: risk.alpha,
            sigma: risk.sigma,
            total_cost,
            unit_cost: if served > 0.0 { total_cost / served } else { 0.0 },
            risk_kwh,
            risk_cost: risk.sigma * risk_kwh,
            expected_shed_kwh,
            scenarios,
            trajectories,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Per-step dispatch of every scenario, one row per microgrid.
    pub fn dispatch_csv(&self) -> String {
        let mut out = format!(
            "# config_hash: {}\npv_scenario,load_scenario,t,mg,pv,load,p_mt,p_es,soc,p_gb,p_gs,p_tl\n",
            self.config_hash
        );
        for (s, tr) in self.scenarios.iter().zip(&self.trajectories) {
            for step in &tr.steps {
                for (i, m) in step.mgs.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{},{}",
                        s.pv, s.load, step.t, i, m.pv, m.load, m.p_mt, m.p_es, m.soc, m.p_gb, m.p_gs, m.p_tl
                    );
                }
            }
        }
        out
    }

    /// Per-scenario summary rows.
    pub fn scenarios_csv(&self) -> String {
        let mut out = format!(
            "# config_hash: {}\npv_scenario,load_scenario,prob,cost,shed_kwh,served_kwh\n",
            self.config_hash
        );
        for s in &self.scenarios {
            let _ = writeln!(out, "{},{},{},{},{},{}", s.pv, s.load, s.prob, s.cost, s.shed_kwh, s.served_kwh);
        }
        out
    }
}

/// Mean-action rollouts on every `(b, d)` pair of the test set. With more
/// than one thread the scenarios run in parallel; results keep grid order.
pub fn evaluate(
    model: &Model,
    system: &SystemParams,
    test_set: &ScenarioSet,
    risk: &RiskConfig,
    config_hash: &str,
    threads: usize,
) -> Result<EvalReport> {
    risk.validate()?;
    let env = Env::new(system.clone(), test_set.clone())?;
    let grid = test_set.grid();
    let run = |&(b, d, _): &(usize, usize, f64)| model.evaluate_scenario(&env, b, d);
    let trajectories: Vec<Trajectory> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} evaluation threads: {e}")))?;
        pool.install(|| grid.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        grid.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    EvalReport::from_trajectories(model.variant, config_hash, &grid, trajectories, risk)
}
