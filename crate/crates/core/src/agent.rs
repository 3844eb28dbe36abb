//! Decentralized Gaussian actors and the PPO machinery around them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, MicrogridParams};
use crate::error::{Error, Result};
use crate::memory::ObsRow;
use crate::neural::{Graph, Mlp, NodeId, ParamId, ParamStore, Tensor};

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    /// Transitions per gradient step; `None` uses the whole batch.
    #[serde(default)]
    pub minibatch: Option<usize>,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs: 4,
            minibatch: None,
            entropy_coef: 0.01,
            normalize_advantages: true,
            max_grad_norm: 10.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.epochs == 0 || self.minibatch == Some(0) {
            return bad("epochs and minibatch must be positive".into());
        }
        if !(self.entropy_coef >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("entropy_coef must be non-negative and max_grad_norm positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

/// Affine map from the normalized box `[-1, 1]²` to physical set-points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionMap {
    pub center: [f64; ACTION_DIM],
    pub half_width: [f64; ACTION_DIM],
}

impl ActionMap {
    pub fn new(mg: &MicrogridParams) -> Self {
        let es = (-mg.ess_charge_max, mg.ess_discharge_max);
        let mt = (mg.mt_min, mg.mt_max);
        ActionMap {
            center: [(es.0 + es.1) / 2.0, (mt.0 + mt.1) / 2.0],
            half_width: [(es.1 - es.0) / 2.0, (mt.1 - mt.0) / 2.0],
        }
    }

    pub fn to_physical(&self, a: &[f64]) -> Action {
        Action {
            p_es: self.center[0] + self.half_width[0] * a[0],
            p_mt: self.center[1] + self.half_width[1] * a[1],
        }
    }
}

/// Per-agent policy head: decision vector → tanh mean, plus a state-free
/// log standard deviation.
#[derive(Clone, Debug)]
pub struct ActorPolicy {
    pub net: Mlp,
    pub log_std: ParamId,
}

impl ActorPolicy {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, init_log_std: f64, rng: &mut R) -> Self {
        let net = Mlp::new(store, &format!("{name}.net"), &[input, hidden, ACTION_DIM], rng);
        let log_std = store.add(format!("{name}.log_std"), Tensor::filled(1, ACTION_DIM, init_log_std));
        ActorPolicy { net, log_std }
    }

    /// Means for rows of decision vectors.
    pub fn mean(&self, g: &mut Graph, store: &ParamStore, f: NodeId) -> NodeId {
        let raw = self.net.forward(g, store, f);
        g.tanh(raw)
    }

    fn clamped_log_std(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        let ls = g.param(store, self.log_std);
        g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)
    }

    pub fn log_std_values(&self, store: &ParamStore) -> [f64; ACTION_DIM] {
        let v = store.value(self.log_std).data();
        [v[0].clamp(LOG_STD_MIN, LOG_STD_MAX), v[1].clamp(LOG_STD_MIN, LOG_STD_MAX)]
    }

    /// Column of log-densities of `actions` (`B × 2`) under the policy at `f` (`B × d`).
    pub fn log_prob(&self, g: &mut Graph, store: &ParamStore, f: NodeId, actions: &Tensor) -> NodeId {
        let mu = self.mean(g, store, f);
        let ls = self.clamped_log_std(g, store);
        let a = g.input(actions.clone());
        let diff = g.sub(a, mu);
        let neg_ls = g.scale(ls, -1.0);
        let inv_std = g.exp(neg_ls);
        let z = g.mul_row(diff, inv_std);
        let z2 = g.mul(z, z);
        let quad = g.scale(z2, -0.5);
        let per_dim = g.add_row(quad, neg_ls);
        let sums = g.row_sums(per_dim);
        g.affine(sums, 1.0, -(ACTION_DIM as f64) * HALF_LOG_2PI)
    }

    /// Differential entropy of the diagonal Gaussian, `Σ (log σ + ½ log 2πe)`.
    pub fn entropy(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        let ls = self.clamped_log_std(g, store);
        let s = g.sum(ls);
        g.affine(s, 1.0, ACTION_DIM as f64 * (HALF_LOG_2PI + 0.5))
    }

    /// Normalized action and its log-probability for one decision vector.
    pub fn act<R: Rng + ?Sized>(&self, store: &ParamStore, f: &[f64], mode: ActMode, rng: &mut R) -> ([f64; ACTION_DIM], f64) {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(f));
        let mu_node = self.mean(&mut g, store, x);
        let mu = g.value(mu_node).data();
        let ls = self.log_std_values(store);
        let mut a = [0.0; ACTION_DIM];
        let mut lp = 0.0;
        for d in 0..ACTION_DIM {
            let eps: f64 = match mode {
                ActMode::Sample => StandardNormal.sample(rng),
                ActMode::Mean => 0.0,
            };
            a[d] = mu[d] + ls[d].exp() * eps;
            lp += -0.5 * eps * eps - ls[d] - HALF_LOG_2PI;
        }
        (a, lp)
    }
}

/// Generalized advantage estimates by backward recursion; the value after
/// the last step is zero.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::Contract(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    Ok(adv)
}

/// Shift to mean 0 and scale to unit standard deviation (left unscaled when
/// the spread vanishes).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-8 {
            *a /= std;
        }
    }
}

/// PPO objective (to maximize) for one agent: clipped surrogate plus entropy bonus.
pub fn ppo_loss(
    g: &mut Graph,
    log_prob: NodeId,
    old_log_prob: &[f64],
    advantages: &[f64],
    entropy: NodeId,
    cfg: &PpoConfig,
) -> NodeId {
    let surrogate = g.ppo_clip_objective(log_prob, old_log_prob, advantages, cfg.clip);
    let bonus = g.scale(entropy, cfg.entropy_coef);
    g.add(surrogate, bonus)
}

/// One environment step as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub t: usize,
    /// `N` normalized observations, the global state.
    pub state: Vec<ObsRow>,
    /// Per agent, the observation window ending at this step.
    pub windows: Vec<Vec<ObsRow>>,
    /// Memory snapshot read at this step, if the variant keeps one.
    pub memory: Option<Tensor>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub old_log_probs: Vec<f64>,
    pub team_reward: f64,
    pub risk_value: f64,
    pub done: bool,
}

/// On-policy storage for whole episodes, cleared after every update.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    episodes: Vec<Vec<Transition>>,
    capacity: usize,
    horizon: usize,
}

impl RolloutBuffer {
    pub fn new(horizon: usize, episodes: usize) -> Self {
        RolloutBuffer {
            episodes: Vec::with_capacity(episodes),
            capacity: horizon * episodes,
            horizon,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.capacity
    }

    /// Append a complete episode.
    pub fn push_episode(&mut self, episode: Vec<Transition>) -> Result<()> {
        if episode.len() != self.horizon {
            return Err(Error::Contract(format!(
                "episode has {} steps, expected {}",
                episode.len(),
                self.horizon
            )));
        }
        if !episode.last().is_some_and(|t| t.done) || episode[..episode.len() - 1].iter().any(|t| t.done) {
            return Err(Error::Contract("only the last step of an episode may be terminal".into()));
        }
        if self.len() + episode.len() > self.capacity {
            return Err(Error::Contract("rollout buffer is full".into()));
        }
        self.episodes.push(episode);
        Ok(())
    }

    pub fn episodes(&self) -> &[Vec<Transition>] {
        &self.episodes
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_hand_values() {
        assert_eq!(gae(&[1.0], &[0.0], 0.99, 0.95).unwrap(), vec![1.0]);
        let r = [0.5, -1.0, 2.0];
        let v = [0.3, 0.1, -0.4];
        let a = gae(&r, &v, 0.9, 0.0).unwrap();
        assert!((a[0] - (0.5 + 0.9 * 0.1 - 0.3)).abs() < 1e-15);
        assert!((a[2] - (2.0 + 0.4)).abs() < 1e-15);
        assert!(gae(&[1.0, 2.0], &[0.0], 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_constant_value_closed_form() {
        let (gamma, lambda, v, n) = (0.9, 0.8, 2.0, 6usize);
        let a = gae(&vec![0.0; n], &vec![v; n], gamma, lambda).unwrap();
        for t in 0..n {
            // every δ is (γ-1)V except the last, which is -V
            let mut expected = 0.0;
            for l in 0..n - t {
                let delta = if t + l + 1 < n { (gamma - 1.0) * v } else { -v };
                expected += (gamma * lambda).powi(l as i32) * delta;
            }
            assert!((a[t] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_mode_is_deterministic_with_gaussian_log_prob() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = ActorPolicy::new(&mut store, "actor.0", 4, 8, -0.5, &mut rng);
        let f = [0.1, -0.3, 0.7, 0.2];
        let (a1, lp1) = actor.act(&store, &f, ActMode::Mean, &mut rng);
        let (a2, lp2) = actor.act(&store, &f, ActMode::Mean, &mut rng);
        assert_eq!(a1, a2);
        assert_eq!(lp1, lp2);
        assert!((lp1 - 2.0 * (0.5 - HALF_LOG_2PI)).abs() < 1e-12);
    }

    #[test]
    fn graph_log_prob_matches_sampling() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = ActorPolicy::new(&mut store, "actor.0", 3, 5, 0.3, &mut rng);
        let f = [0.4, 0.0, -0.2];
        let (a, lp) = actor.act(&store, &f, ActMode::Sample, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(&f));
        let node = actor.log_prob(&mut g, &store, x, &Tensor::row_vector(&a));
        assert!((g.value(node).item() - lp).abs() < 1e-12);
    }

    #[test]
    fn identity_ratio_gives_mean_advantage() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = ActorPolicy::new(&mut store, "actor.0", 2, 4, 0.0, &mut rng);
        let f = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.5, 0.3]]);
        let acts = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.2, -0.1]]);
        let mut g = Graph::new();
        let x = g.input(f);
        let lp = actor.log_prob(&mut g, &store, x, &acts);
        let old = g.value(lp).data().to_vec();
        let obj = g.ppo_clip_objective(lp, &old, &[1.0, -3.0], 0.2);
        assert!((g.value(obj).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn action_map_covers_the_physical_box() {
        let mg = MicrogridParams::default();
        let m = ActionMap::new(&mg);
        let lo = m.to_physical(&[-1.0, -1.0]);
        let hi = m.to_physical(&[1.0, 1.0]);
        assert_eq!(lo.p_es, -mg.ess_charge_max);
        assert_eq!(hi.p_es, mg.ess_discharge_max);
        assert_eq!(lo.p_mt, mg.mt_min);
        assert_eq!(hi.p_mt, mg.mt_max);
    }

    #[test]
    fn normalization_preserves_order() {
        let mut a = vec![3.0, -1.0, 0.5, 7.0];
        normalize_advantages(&mut a);
        assert!(a[3] > a[0] && a[0] > a[2] && a[2] > a[1]);
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn buffer_accepts_whole_episodes_only() {
        let step = |done| Transition {
            t: 0,
            state: vec![],
            windows: vec![],
            memory: None,
            actions: vec![],
            old_log_probs: vec![],
            team_reward: 0.0,
            risk_value: 0.0,
            done,
        };
        let mut b = RolloutBuffer::new(2, 1);
        assert!(b.push_episode(vec![step(false)]).is_err());
        assert!(b.push_episode(vec![step(true), step(true)]).is_err());
        b.push_episode(vec![step(false), step(true)]).unwrap();
        assert!(b.is_full());
        assert!(b.push_episode(vec![step(false), step(true)]).is_err());
        b.clear();
        assert!(b.is_empty());
    }
}
