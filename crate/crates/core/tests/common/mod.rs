#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskgrid::critic::CentralCritic;
use riskgrid::env::OBS_DIM;
use riskgrid::memory::{MemoryConfig, ObsWindow, SharedMemory};
use riskgrid::neural::{
    attention, Graph, GruCell, LayerNorm, Linear, Mlp, ModelDims, MultiHeadAttention, NodeId, ParamStore, Tensor,
};
use riskgrid::risk::midpoint_levels;

/// Largest relative error between backprop and central differences over
/// every scalar of every parameter in `store`.
pub fn max_rel_error<F>(store: &mut ParamStore, h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    store.zero_grad();
    g.backward(loss, store);
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(store, &build);
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(store, &build);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn eval<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.value(loss).item()
}

pub struct GradCase {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const KINKED_TOL: f64 = 1e-3;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Scalar `Σ w ⊙ x` with fixed random weights, so that no output direction
/// is left untested.
pub fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let v = g.value(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(random_tensor(&mut rng, v.rows(), v.cols(), -1.0, 1.0));
    let p = g.mul(x, w);
    g.sum(p)
}

fn unary(name: &'static str, lo: f64, hi: f64, op: fn(&mut Graph, NodeId) -> NodeId) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&mut rng, 3, 4, lo, hi));
    let error = max_rel_error(&mut store, STEP, |g, s| {
        let x = g.param(s, a);
        let y = op(g, x);
        project(g, y, 2)
    });
    GradCase { name, error, tolerance: TOL }
}

fn binary(name: &'static str, shapes: ([usize; 2], [usize; 2]), op: fn(&mut Graph, NodeId, NodeId) -> NodeId) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let (sa, sb) = shapes;
    let a = store.add("a", random_tensor(&mut rng, sa[0], sa[1], -1.0, 1.0));
    let b = store.add("b", random_tensor(&mut rng, sb[0], sb[1], -1.0, 1.0));
    let error = max_rel_error(&mut store, STEP, |g, s| {
        let x = g.param(s, a);
        let y = g.param(s, b);
        let z = op(g, x, y);
        project(g, z, 4)
    });
    GradCase { name, error, tolerance: TOL }
}

fn with_store(name: &'static str, tolerance: f64, setup: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Graph, &ParamStore) -> NodeId>) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let build = setup(&mut store, &mut rng);
    let error = max_rel_error(&mut store, STEP, build);
    GradCase { name, error, tolerance }
}

/// Every differentiable primitive and layer, plus the composed memory and
/// critic pipelines.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = vec![
        binary("matmul", ([3, 4], [4, 2]), |g, a, b| g.matmul(a, b)),
        binary("add", ([3, 4], [3, 4]), |g, a, b| g.add(a, b)),
        binary("sub", ([3, 4], [3, 4]), |g, a, b| g.sub(a, b)),
        binary("mul", ([3, 4], [3, 4]), |g, a, b| g.mul(a, b)),
        binary("add_row", ([3, 4], [1, 4]), |g, a, b| g.add_row(a, b)),
        binary("mul_row", ([3, 4], [1, 4]), |g, a, b| g.mul_row(a, b)),
        binary("concat_rows", ([3, 4], [2, 4]), |g, a, b| g.concat_rows(&[a, b])),
        binary("concat_cols", ([3, 4], [3, 2]), |g, a, b| g.concat_cols(&[a, b])),
        binary("attention_qk", ([3, 4], [5, 4]), |g, q, k| {
            let v = g.scale(k, 0.5);
            attention(g, q, k, v)
        }),
        unary("transpose", -1.0, 1.0, |g, a| g.transpose(a)),
        unary("affine", -1.0, 1.0, |g, a| g.affine(a, -1.7, 0.3)),
        unary("scale", -1.0, 1.0, |g, a| g.scale(a, 2.5)),
        unary("tanh", -2.0, 2.0, |g, a| g.tanh(a)),
        unary("sigmoid", -3.0, 3.0, |g, a| g.sigmoid(a)),
        unary("exp", -1.0, 1.0, |g, a| g.exp(a)),
        unary("clamp", -0.9, 0.9, |g, a| g.clamp(a, -0.5, 0.5)),
        unary("softmax_rows", -2.0, 2.0, |g, a| g.softmax_rows(a)),
        unary("normalize_rows", -2.0, 2.0, |g, a| g.normalize_rows(a, 1e-5)),
        unary("slice_rows", -1.0, 1.0, |g, a| g.slice_rows(a, 1, 2)),
        unary("slice_cols", -1.0, 1.0, |g, a| g.slice_cols(a, 1, 2)),
        unary("sum", -1.0, 1.0, |g, a| {
            let s = g.sum(a);
            g.mul(s, s)
        }),
        unary("mean", -1.0, 1.0, |g, a| {
            let s = g.mean(a);
            g.mul(s, s)
        }),
        unary("row_sums", -1.0, 1.0, |g, a| g.row_sums(a)),
    ];
    cases.push(with_store("linear", TOL, |store, rng| {
        let l = Linear::new(store, "l", 4, 3, rng);
        let x = random_tensor(rng, 5, 4, -1.0, 1.0);
        Box::new(move |g, s| {
            let xi = g.input(x.clone());
            let y = l.forward(g, s, xi);
            project(g, y, 6)
        })
    }));
    cases.push(with_store("mlp", TOL, |store, rng| {
        let m = Mlp::new(store, "m", &[4, 6, 6, 3], rng);
        let x = random_tensor(rng, 5, 4, -1.0, 1.0);
        Box::new(move |g, s| {
            let xi = g.input(x.clone());
            let y = m.forward(g, s, xi);
            project(g, y, 7)
        })
    }));
    cases.push(with_store("layer_norm", TOL, |store, rng| {
        let ln = LayerNorm::new(store, "ln", 4);
        let x = store.add("x", random_tensor(rng, 3, 4, -2.0, 2.0));
        Box::new(move |g, s| {
            let xi = g.param(s, x);
            let y = ln.forward(g, s, xi);
            project(g, y, 8)
        })
    }));
    cases.push(with_store("multi_head_attention", TOL, |store, rng| {
        let mha = MultiHeadAttention::new(store, "mha", 4, 2, rng);
        let x = store.add("x", random_tensor(rng, 3, 4, -1.0, 1.0));
        Box::new(move |g, s| {
            let xi = g.param(s, x);
            let y = mha.forward(g, s, xi);
            project(g, y, 9)
        })
    }));
    cases.push(with_store("gru", TOL, |store, rng| {
        let cell = GruCell::new(store, "gru", 3, 4, rng);
        let xs: Vec<Tensor> = (0..4).map(|_| random_tensor(rng, 1, 3, -1.0, 1.0)).collect();
        Box::new(move |g, s| {
            let inputs: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
            let h0 = g.input(Tensor::zeros(1, 4));
            let h = cell.sequence(g, s, &inputs, h0);
            project(g, h, 10)
        })
    }));
    cases.push(with_store("quantile_huber_loss", KINKED_TOL, |store, rng| {
        let levels = midpoint_levels(4);
        // residuals kept away from 0 and from ±kappa
        let pred = random_tensor(rng, 3, 4, -1.0, 1.0);
        let mut target = pred.clone();
        for v in target.data_mut() {
            let mag = rng.random_range(0.2..3.0);
            *v += if rng.random::<bool>() { mag } else { -mag };
        }
        let p = store.add("pred", pred);
        Box::new(move |g, s| {
            let pi = g.param(s, p);
            g.quantile_huber_loss(pi, target.clone(), &levels, 1.0)
        })
    }));
    cases.push(with_store("ppo_clip_objective", KINKED_TOL, |store, rng| {
        // ratios kept away from 1 ± clip
        let old: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..0.0)).collect();
        let log_ratio = [-0.5, -0.1, 0.05, 0.1, 0.4, -0.3];
        let new: Vec<f64> = old.iter().zip(log_ratio).map(|(o, r)| o + r).collect();
        let adv = vec![1.0, -1.0, 0.5, -2.0, 1.5, 0.7];
        let lp = store.add("lp", Tensor::from_vec(6, 1, new));
        Box::new(move |g, s| {
            let x = g.param(s, lp);
            g.ppo_clip_objective(x, &old, &adv, 0.2)
        })
    }));
    cases.push(memory_case());
    cases.push(critic_case());
    cases
}

fn random_window(rng: &mut ChaCha8Rng, history: usize) -> ObsWindow {
    let mut w = ObsWindow::new(history);
    for _ in 0..history + 1 {
        let mut row = [0.0; OBS_DIM];
        row.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
        w.push(row);
    }
    w
}

/// Two memory steps in one graph: the second reads the tokens written by
/// the first, so gradients flow through write, cross-attention and init.
fn memory_case() -> GradCase {
    with_store("shared_memory", TOL, |store, rng| {
        let cfg = MemoryConfig { history: 2, residual: true };
        let mem = SharedMemory::new(store, 2, 4, cfg, rng);
        let w0: Vec<ObsWindow> = (0..2).map(|_| random_window(rng, 2)).collect();
        let w1: Vec<ObsWindow> = (0..2).map(|_| random_window(rng, 2)).collect();
        Box::new(move |g, s| {
            let m0 = mem.init_node(g, s);
            let first: Vec<_> = (0..2).map(|i| mem.forward_agent(g, s, i, m0, &w0[i])).collect();
            let next: Vec<NodeId> = first.iter().map(|p| p.next_token).collect();
            let m1 = g.concat_rows(&next);
            let second: Vec<NodeId> = (0..2).map(|i| mem.forward_agent(g, s, i, m1, &w1[i]).decision).collect();
            let d = g.concat_rows(&second);
            project(g, d, 11)
        })
    })
}

fn critic_case() -> GradCase {
    with_store("critic_loss", KINKED_TOL, |store, rng| {
        let dims = ModelDims { d_model: 4, heads: 2, hidden: 5 };
        let critic = CentralCritic::new(store, 2, dims, 4, rng);
        let target = store.clone();
        let states: Vec<Vec<[f64; OBS_DIM]>> = (0..4)
            .map(|_| {
                (0..2)
                    .map(|_| {
                        let mut row = [0.0; OBS_DIM];
                        row.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
                        row
                    })
                    .collect()
            })
            .collect();
        let rewards: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..-1.0)).collect();
        Box::new(move |g, s| critic.loss(g, s, &target, &states, &rewards, 0.99, 10.0))
    })
}
