//! Centralized distributional critic.
//!
//! Per-agent quantile networks map local observations to `J` return atoms.
//! An attention mixer turns the episode-so-far global state into simplex
//! weights `k(s)`, and the joint atoms are `θ_j(s) = Σ_i k_i(s)·θ_{i,j}(o_i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::OBS_DIM;
use crate::error::{Error, Result};
use crate::memory::ObsRow;
use crate::neural::{GruCell, Graph, Linear, Mlp, ModelDims, MultiHeadAttention, NodeId, ParamId, ParamStore, Tensor};
use crate::risk::{midpoint_levels, tail_mean};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub atoms: usize,
    pub kappa: f64,
    /// Critic updates between hard target-network copies.
    pub sync_interval: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            atoms: 32,
            kappa: 10.0,
            sync_interval: 10,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms == 0 {
            return Err(Error::Config("critic needs at least one atom".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.sync_interval == 0 {
            return Err(Error::Config("sync_interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Observation → `J` atoms, two tanh hidden layers.
#[derive(Clone, Debug)]
pub struct QuantileCritic {
    pub net: Mlp,
}

impl QuantileCritic {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, atoms: usize, rng: &mut R) -> Self {
        QuantileCritic {
            net: Mlp::new(store, name, &[OBS_DIM, hidden, hidden, atoms], rng),
        }
    }

    /// Rows of observations to rows of atoms.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, obs: NodeId) -> NodeId {
        self.net.forward(g, store, obs)
    }
}

/// `k_i(s) = softmax_i(uᵀ tanh(W·c_i + b))` where `c` is multi-head
/// attention over rows `X_i = GRU(s^{1:t}) + Linear(o_i)`.
#[derive(Clone, Debug)]
pub struct AttentionMixer {
    pub gru: GruCell,
    pub obs_proj: Linear,
    pub attention: MultiHeadAttention,
    pub score: Linear,
    pub u: ParamId,
    n_agents: usize,
}

impl AttentionMixer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_agents: usize, dims: ModelDims, rng: &mut R) -> Self {
        let d = dims.d_model;
        AttentionMixer {
            gru: GruCell::new(store, "mixer.gru", n_agents * OBS_DIM, d, rng),
            obs_proj: Linear::new(store, "mixer.obs_proj", OBS_DIM, d, rng),
            attention: MultiHeadAttention::new(store, "mixer.attention", d, dims.heads, rng),
            score: Linear::new(store, "mixer.score", d, d, rng),
            u: store.add("mixer.u", Tensor::fan_in_uniform(rng, d, 1, d)),
            n_agents,
        }
    }

    /// GRU hidden after each prefix of the global-state sequence.
    pub fn encode_history(&self, g: &mut Graph, store: &ParamStore, states: &[Vec<ObsRow>]) -> Vec<NodeId> {
        let inputs: Vec<NodeId> = states
            .iter()
            .map(|s| {
                assert_eq!(s.len(), self.n_agents, "global state must hold one observation per agent");
                g.input(Tensor::row_vector(&s.iter().flatten().copied().collect::<Vec<_>>()))
            })
            .collect();
        let h0 = g.input(Tensor::zeros(1, self.gru.hidden_size()));
        self.gru.unroll(g, store, &inputs, h0)
    }

    /// Weights `1 × N` from a history encoding and the current observations `N × OBS_DIM`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, history: NodeId, obs: NodeId) -> NodeId {
        let proj = self.obs_proj.forward(g, store, obs);
        let x = g.add_row(proj, history);
        let c = self.attention.forward(g, store, x);
        let pre = self.score.forward(g, store, c);
        let act = g.tanh(pre);
        let u = g.param(store, self.u);
        let scores = g.matmul(act, u);
        let row = g.transpose(scores);
        g.softmax_rows(row)
    }
}

/// Per-agent critics plus mixer. Parameters live in an external store, so the
/// same wiring evaluates both the online and the target copy.
#[derive(Clone, Debug)]
pub struct CentralCritic {
    pub critics: Vec<QuantileCritic>,
    pub mixer: AttentionMixer,
    pub levels: Vec<f64>,
}

/// Graph nodes for a whole episode.
#[derive(Clone, Debug)]
pub struct EpisodeValues {
    /// `T × J` joint atoms.
    pub joint: NodeId,
    /// `T × N` mixer weights.
    pub weights: NodeId,
    /// Per agent, `T × J` atoms.
    pub agent_atoms: Vec<NodeId>,
}

impl CentralCritic {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_agents: usize, dims: ModelDims, atoms: usize, rng: &mut R) -> Self {
        let critics = (0..n_agents)
            .map(|i| QuantileCritic::new(store, &format!("critic.{i}"), dims.hidden, atoms, rng))
            .collect();
        let mixer = AttentionMixer::new(store, n_agents, dims, rng);
        CentralCritic {
            critics,
            mixer,
            levels: midpoint_levels(atoms),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.critics.len()
    }

    pub fn atoms(&self) -> usize {
        self.levels.len()
    }

    /// Joint distributions for every prefix of `states` (`states[t][i]` is
    /// agent `i`'s normalized observation at step `t`).
    pub fn episode(&self, g: &mut Graph, store: &ParamStore, states: &[Vec<ObsRow>]) -> EpisodeValues {
        let n = self.n_agents();
        let t_len = states.len();
        assert!(t_len > 0, "empty episode");
        let agent_atoms: Vec<NodeId> = (0..n)
            .map(|i| {
                let rows: Vec<f64> = states.iter().flat_map(|s| s[i]).collect();
                let obs = g.input(Tensor::from_vec(t_len, OBS_DIM, rows));
                self.critics[i].forward(g, store, obs)
            })
            .collect();
        let history = self.mixer.encode_history(g, store, states);
        let mut joint_rows = Vec::with_capacity(t_len);
        let mut weight_rows = Vec::with_capacity(t_len);
        for (t, s) in states.iter().enumerate() {
            let obs = g.input(Tensor::from_rows(&s.iter().map(|o| o.to_vec()).collect::<Vec<_>>()));
            let k = self.mixer.weights(g, store, history[t], obs);
            let per_agent: Vec<NodeId> = agent_atoms.iter().map(|&a| g.slice_rows(a, t, 1)).collect();
            let theta = if n == 1 { per_agent[0] } else { g.concat_rows(&per_agent) };
            joint_rows.push(mix(g, k, theta));
            weight_rows.push(k);
        }
        EpisodeValues {
            joint: g.concat_rows(&joint_rows),
            weights: g.concat_rows(&weight_rows),
            agent_atoms,
        }
    }

    /// Joint atoms as plain values, `T` rows of `J`.
    pub fn joint_atoms(&self, store: &ParamStore, states: &[Vec<ObsRow>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let ep = self.episode(&mut g, store, states);
        let v = g.value(ep.joint);
        (0..v.rows()).map(|r| v.row(r).to_vec()).collect()
    }

    /// `φ_α` of the joint distribution at every step.
    pub fn risk_values(&self, store: &ParamStore, states: &[Vec<ObsRow>], alpha: f64) -> Vec<f64> {
        self.joint_atoms(store, states)
            .iter()
            .map(|atoms| risk_value(atoms, alpha))
            .collect()
    }

    /// Quantile-Huber loss of the online joint atoms against
    /// `r_t + γ·θ_j(s_{t+1})` from the target copy; the last step of the
    /// episode bootstraps with zero.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        target_store: &ParamStore,
        states: &[Vec<ObsRow>],
        rewards: &[f64],
        gamma: f64,
        kappa: f64,
    ) -> NodeId {
        assert_eq!(states.len(), rewards.len(), "one reward per state");
        let target_atoms = self.joint_atoms(target_store, states);
        let targets = td_targets(&target_atoms, rewards, gamma);
        let ep = self.episode(g, store, states);
        g.quantile_huber_loss(ep.joint, targets, &self.levels, kappa)
    }
}

/// `θ_j = Σ_i k_i·θ_{i,j}` for `k: 1 × N` and `θ: N × J`.
pub fn mix(g: &mut Graph, k: NodeId, theta: NodeId) -> NodeId {
    g.matmul(k, theta)
}

/// [`mix`] on plain values.
pub fn mix_values(atoms: &[Vec<f64>], k: &[f64]) -> Result<Vec<f64>> {
    if atoms.len() != k.len() || atoms.is_empty() {
        return Err(Error::Contract(format!("{} atom rows for {} weights", atoms.len(), k.len())));
    }
    let j = atoms[0].len();
    if atoms.iter().any(|a| a.len() != j) {
        return Err(Error::Contract("agents disagree on the atom count".into()));
    }
    Ok((0..j).map(|c| atoms.iter().zip(k).map(|(a, w)| w * a[c]).sum()).collect())
}

/// Risk-sensitive value `φ_α` of joint return atoms.
pub fn risk_value(atoms: &[f64], alpha: f64) -> f64 {
    tail_mean(atoms, alpha)
}

/// TD targets `T × J` for atoms of `s_0..s_{T-1}`.
pub fn td_targets(next_atoms: &[Vec<f64>], rewards: &[f64], gamma: f64) -> Tensor {
    let t_len = rewards.len();
    let j = next_atoms[0].len();
    let mut out = Tensor::zeros(t_len, j);
    for t in 0..t_len {
        for c in 0..j {
            let boot = if t + 1 < t_len { gamma * next_atoms[t + 1][c] } else { 0.0 };
            out.set(t, c, rewards[t] + boot);
        }
    }
    out
}
