//! Shared-memory coordination.
//!
//! Each agent owns one memory token. At every step the agent reads its private
//! sequence `[m_i, o_{t-h}, .., o_t]` with self-attention, queries the tokens of
//! all agents with cross-attention, and emits a decision vector for its actor
//! plus its next memory token. Every agent reads the same snapshot `M_t`;
//! the written tokens form `M_{t+1}` only after all agents have run.
//!
//! Gradients do not cross steps: a snapshot enters the graph as a constant,
//! except at `t = 0` where the learned initial tokens are used directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::OBS_DIM;
use crate::neural::{attention, GruCell, Graph, LayerNorm, Linear, NodeId, ParamId, ParamStore, Tensor};

pub type ObsRow = [f64; OBS_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Past observations kept in the private sequence.
    pub history: usize,
    /// Normalize `SelfAttn + CrossAttn` instead of `CrossAttn` alone.
    pub residual: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            history: 8,
            residual: true,
        }
    }
}

impl MemoryConfig {
    /// Private sequence length `L = h + 2`.
    pub fn seq_len(&self) -> usize {
        self.history + 2
    }
}

/// Sliding window of the last `h + 1` observations of one agent, oldest
/// first. Slots before the episode start hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsWindow {
    rows: Vec<ObsRow>,
}

impl ObsWindow {
    pub fn new(history: usize) -> Self {
        ObsWindow {
            rows: vec![[0.0; OBS_DIM]; history + 1],
        }
    }

    /// Window holding exactly `rows`, oldest first.
    pub fn from_rows(rows: Vec<ObsRow>) -> Self {
        assert!(!rows.is_empty(), "observation window must hold at least the current observation");
        ObsWindow { rows }
    }

    pub fn push(&mut self, obs: ObsRow) {
        self.rows.remove(0);
        self.rows.push(obs);
    }

    pub fn rows(&self) -> &[ObsRow] {
        &self.rows
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.rows.len(), OBS_DIM, self.rows.iter().flatten().copied().collect())
    }
}

/// The `N` memory tokens, one row per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMemorySpace {
    pub tokens: Tensor,
}

impl GlobalMemorySpace {
    pub fn n_agents(&self) -> usize {
        self.tokens.rows()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.tokens.row(i)
    }
}

/// Per-agent parameters of the memory pipeline.
#[derive(Clone, Debug)]
pub struct AgentMemory {
    pub init: ParamId,
    pub embed: Linear,
    pub position: ParamId,
    pub self_query: Linear,
    pub self_key: Linear,
    pub self_value: Linear,
    pub cross_query: Linear,
    pub cross_key: Linear,
    pub cross_value: Linear,
    pub norm: LayerNorm,
    pub write: ParamId,
}

/// One [`AgentMemory`] per agent.
#[derive(Clone, Debug)]
pub struct SharedMemory {
    pub agents: Vec<AgentMemory>,
    pub config: MemoryConfig,
    d_model: usize,
}

/// Everything one agent produced in one step.
#[derive(Clone, Copy, Debug)]
pub struct MemoryPass {
    pub self_out: NodeId,
    pub cross_out: NodeId,
    pub hidden: NodeId,
    pub next_token: NodeId,
    pub decision: NodeId,
}

impl SharedMemory {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_agents: usize,
        d_model: usize,
        config: MemoryConfig,
        rng: &mut R,
    ) -> Self {
        assert!(n_agents >= 1, "shared memory needs at least one agent");
        let l = config.seq_len();
        let agents = (0..n_agents)
            .map(|i| {
                let p = format!("memory.{i}");
                AgentMemory {
                    init: store.add(format!("{p}.init"), Tensor::fan_in_uniform(rng, 1, d_model, 1)),
                    embed: Linear::new(store, &format!("{p}.embed"), OBS_DIM, d_model, rng),
                    position: store.add(format!("{p}.position"), Tensor::fan_in_uniform(rng, l, d_model, d_model)),
                    self_query: Linear::new(store, &format!("{p}.self_query"), d_model, d_model, rng),
                    self_key: Linear::new(store, &format!("{p}.self_key"), d_model, d_model, rng),
                    self_value: Linear::new(store, &format!("{p}.self_value"), d_model, d_model, rng),
                    cross_query: Linear::new(store, &format!("{p}.cross_query"), d_model, d_model, rng),
                    cross_key: Linear::new(store, &format!("{p}.cross_key"), d_model, d_model, rng),
                    cross_value: Linear::new(store, &format!("{p}.cross_value"), d_model, d_model, rng),
                    norm: LayerNorm::new(store, &format!("{p}.norm"), d_model),
                    write: store.add(format!("{p}.write"), Tensor::fan_in_uniform(rng, d_model, d_model, d_model)),
                }
            })
            .collect();
        SharedMemory {
            agents,
            config,
            d_model,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// `M_0` from the learned initial tokens.
    pub fn init_memory(&self, store: &ParamStore) -> GlobalMemorySpace {
        let rows: Vec<Vec<f64>> = self.agents.iter().map(|a| store.value(a.init).data().to_vec()).collect();
        GlobalMemorySpace {
            tokens: Tensor::from_rows(&rows),
        }
    }

    /// Graph node holding the learned initial tokens, `N × d_model`.
    pub fn init_node(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        let rows: Vec<NodeId> = self.agents.iter().map(|a| g.param(store, a.init)).collect();
        if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)
        }
    }

    /// `[m_i; Linear(o_{t-h}); ..; Linear(o_t)] + positions`, `L × d_model`.
    pub fn private_sequence(&self, g: &mut Graph, store: &ParamStore, i: usize, token: NodeId, window: &ObsWindow) -> NodeId {
        let a = &self.agents[i];
        assert_eq!(window.rows().len(), self.config.history + 1, "observation window length");
        let obs = g.input(window.tensor());
        let emb = a.embed.forward(g, store, obs);
        let seq = g.concat_rows(&[token, emb]);
        let pos = g.param(store, a.position);
        g.add(seq, pos)
    }

    pub fn self_attend(&self, g: &mut Graph, store: &ParamStore, i: usize, seq: NodeId) -> NodeId {
        let a = &self.agents[i];
        let q = a.self_query.forward(g, store, seq);
        let k = a.self_key.forward(g, store, seq);
        let v = a.self_value.forward(g, store, seq);
        attention(g, q, k, v)
    }

    pub fn cross_attend(&self, g: &mut Graph, store: &ParamStore, i: usize, self_out: NodeId, memory: NodeId) -> NodeId {
        let a = &self.agents[i];
        let q = a.cross_query.forward(g, store, self_out);
        let k = a.cross_key.forward(g, store, memory);
        let v = a.cross_value.forward(g, store, memory);
        attention(g, q, k, v)
    }

    /// `H = LayerNorm(..)`, next token `H[0]·W_m`, decision vector `H[-1]`.
    pub fn update(&self, g: &mut Graph, store: &ParamStore, i: usize, self_out: NodeId, cross_out: NodeId) -> (NodeId, NodeId, NodeId) {
        let a = &self.agents[i];
        let pre = if self.config.residual {
            g.add(self_out, cross_out)
        } else {
            cross_out
        };
        let h = a.norm.forward(g, store, pre);
        let rows = g.value(h).rows();
        let first = g.slice_rows(h, 0, 1);
        let w = g.param(store, a.write);
        let next = g.matmul(first, w);
        let decision = g.slice_rows(h, rows - 1, 1);
        (h, next, decision)
    }

    /// Full pipeline for agent `i` reading the memory node `memory` (`N × d`).
    pub fn forward_agent(&self, g: &mut Graph, store: &ParamStore, i: usize, memory: NodeId, window: &ObsWindow) -> MemoryPass {
        let token = g.slice_rows(memory, i, 1);
        let seq = self.private_sequence(g, store, i, token, window);
        let self_out = self.self_attend(g, store, i, seq);
        let cross_out = self.cross_attend(g, store, i, self_out, memory);
        let (hidden, next_token, decision) = self.update(g, store, i, self_out, cross_out);
        MemoryPass {
            self_out,
            cross_out,
            hidden,
            next_token,
            decision,
        }
    }

    /// One synchronous step for all agents: returns the decision vectors and
    /// `M_{t+1}`.
    pub fn step_all(&self, store: &ParamStore, windows: &[ObsWindow], memory: &GlobalMemorySpace) -> (Vec<Vec<f64>>, GlobalMemorySpace) {
        assert_eq!(windows.len(), self.n_agents(), "one observation window per agent");
        assert_eq!(memory.n_agents(), self.n_agents(), "one memory token per agent");
        let mut g = Graph::new();
        let m = g.input(memory.tokens.clone());
        let mut decisions = Vec::with_capacity(windows.len());
        let mut next = Vec::with_capacity(windows.len());
        for (i, w) in windows.iter().enumerate() {
            let pass = self.forward_agent(&mut g, store, i, m, w);
            decisions.push(g.value(pass.decision).data().to_vec());
            next.push(g.value(pass.next_token).data().to_vec());
        }
        (
            decisions,
            GlobalMemorySpace {
                tokens: Tensor::from_rows(&next),
            },
        )
    }
}

/// Private recurrent encoders: agent `i` summarizes its own observation
/// window with a GRU and hands the final hidden state to its actor.
#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    pub cells: Vec<GruCell>,
}

impl RecurrentEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_agents: usize, hidden: usize, rng: &mut R) -> Self {
        let cells = (0..n_agents)
            .map(|i| GruCell::new(store, &format!("encoder.{i}"), OBS_DIM, hidden, rng))
            .collect();
        RecurrentEncoder { cells }
    }

    pub fn hidden_size(&self) -> usize {
        self.cells[0].hidden_size()
    }

    pub fn forward_agent(&self, g: &mut Graph, store: &ParamStore, i: usize, window: &ObsWindow) -> NodeId {
        let cell = &self.cells[i];
        let inputs: Vec<NodeId> = window.rows().iter().map(|r| g.input(Tensor::row_vector(r))).collect();
        let h0 = g.input(Tensor::zeros(1, cell.hidden_size()));
        cell.sequence(g, store, &inputs, h0)
    }

    pub fn encode_all(&self, store: &ParamStore, windows: &[ObsWindow]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        windows
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let h = self.forward_agent(&mut g, store, i, w);
                g.value(h).data().to_vec()
            })
            .collect()
    }
}
