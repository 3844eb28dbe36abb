use rand::Rng;

use super::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: in × out`, applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::fan_in_uniform(rng, inputs, outputs, inputs));
        let bias = store.add(format!("{name}.bias"), Tensor::fan_in_uniform(rng, 1, outputs, inputs));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn inputs(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    pub fn outputs(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }
}

/// Linear layers with `tanh` between them; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        h
    }
}

/// Learned per-feature scale and shift after row normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, width, 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let n = g.normalize_rows(x, LAYER_NORM_EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, shift)
    }
}

/// Attention weights `softmax(Q·Kᵀ/√d_k)`, one row per query.
pub fn attention_weights(g: &mut Graph, q: NodeId, k: NodeId) -> NodeId {
    let dk = g.value(q).cols();
    assert_eq!(dk, g.value(k).cols(), "query/key width mismatch");
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
    g.softmax_rows(scaled)
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V`.
pub fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
    assert_eq!(g.value(k).rows(), g.value(v).rows(), "key/value length mismatch");
    let w = attention_weights(g, q, k);
    g.matmul(w, v)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// `Concat(head_1..head_H)·W^O`, each head attending over linearly projected
/// copies of the same input sequence.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadProjections>,
    pub output: ParamId,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must be divisible by the head count");
        let dk = d_model / heads;
        let heads = (0..heads)
            .map(|h| HeadProjections {
                query: store.add(format!("{name}.head{h}.query"), Tensor::fan_in_uniform(rng, d_model, dk, d_model)),
                key: store.add(format!("{name}.head{h}.key"), Tensor::fan_in_uniform(rng, d_model, dk, d_model)),
                value: store.add(format!("{name}.head{h}.value"), Tensor::fan_in_uniform(rng, d_model, dk, d_model)),
            })
            .collect();
        let output = store.add(format!("{name}.output"), Tensor::fan_in_uniform(rng, d_model, d_model, d_model));
        MultiHeadAttention { heads, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let outs: Vec<NodeId> = self
            .heads
            .iter()
            .map(|h| {
                let wq = g.param(store, h.query);
                let wk = g.param(store, h.key);
                let wv = g.param(store, h.value);
                let q = g.matmul(x, wq);
                let k = g.matmul(x, wk);
                let v = g.matmul(x, wv);
                attention(g, q, k, v)
            })
            .collect();
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let wo = g.param(store, self.output);
        g.matmul(cat, wo)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z = σ(x·W_z + h·U_z + b_z)
/// r = σ(x·W_r + h·U_r + b_r)
/// n = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
/// h' = (1 - z) ⊙ h + z ⊙ n
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_update: ParamId,
    pub input_reset: ParamId,
    pub input_candidate: ParamId,
    pub hidden_update: ParamId,
    pub hidden_reset: ParamId,
    pub hidden_candidate: ParamId,
    pub bias_update: ParamId,
    pub bias_reset: ParamId,
    pub bias_candidate: ParamId,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = |suffix: &str, rows: usize, cols: usize| {
            store.add(format!("{name}.{suffix}"), Tensor::fan_in_uniform(rng, rows, cols, hidden))
        };
        GruCell {
            input_update: w("input_update", inputs, hidden),
            input_reset: w("input_reset", inputs, hidden),
            input_candidate: w("input_candidate", inputs, hidden),
            hidden_update: w("hidden_update", hidden, hidden),
            hidden_reset: w("hidden_reset", hidden, hidden),
            hidden_candidate: w("hidden_candidate", hidden, hidden),
            bias_update: w("bias_update", 1, hidden),
            bias_reset: w("bias_reset", 1, hidden),
            bias_candidate: w("bias_candidate", 1, hidden),
            hidden,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId) -> NodeId {
        let gate = |g: &mut Graph, wx: ParamId, uh: ParamId, b: ParamId, hin: NodeId| {
            let wx = g.param(store, wx);
            let uh = g.param(store, uh);
            let b = g.param(store, b);
            let a = g.matmul(x, wx);
            let c = g.matmul(hin, uh);
            let s = g.add(a, c);
            g.add_row(s, b)
        };
        let z_pre = gate(g, self.input_update, self.hidden_update, self.bias_update, h);
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, self.input_reset, self.hidden_reset, self.bias_reset, h);
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h);
        let n_pre = gate(g, self.input_candidate, self.hidden_candidate, self.bias_candidate, rh);
        let n = g.tanh(n_pre);
        let keep = g.affine(z, -1.0, 1.0);
        let kept = g.mul(keep, h);
        let fresh = g.mul(z, n);
        g.add(kept, fresh)
    }

    /// Runs the recurrence over `inputs` (each `1 × in`) and returns every
    /// hidden state, so `result[t]` summarizes `inputs[..=t]`.
    pub fn unroll(&self, g: &mut Graph, store: &ParamStore, inputs: &[NodeId], h0: NodeId) -> Vec<NodeId> {
        let mut h = h0;
        inputs
            .iter()
            .map(|&x| {
                h = self.step(g, store, x, h);
                h
            })
            .collect()
    }

    /// Final hidden state after consuming a non-empty sequence.
    pub fn sequence(&self, g: &mut Graph, store: &ParamStore, inputs: &[NodeId], h0: NodeId) -> NodeId {
        assert!(!inputs.is_empty(), "GRU sequence must be non-empty");
        *self.unroll(g, store, inputs, h0).last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_linear_is_a_no_op() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 3, &mut rng);
        *store.value_mut(lin.weight) = Tensor::identity(3);
        *store.value_mut(lin.bias) = Tensor::zeros(1, 3);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]));
        let y = lin.forward(&mut g, &store, x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn hand_attention_is_uniform_average() {
        let mut g = Graph::new();
        let q = g.input(Tensor::from_rows(&[vec![0.0]]));
        let k = g.input(Tensor::from_rows(&[vec![0.0], vec![0.0]]));
        let v = g.input(Tensor::from_rows(&[vec![1.0], vec![3.0]]));
        let out = attention(&mut g, q, k, v);
        assert_eq!(g.value(out).item(), 2.0);
    }

    #[test]
    fn single_pair_attention_returns_the_value() {
        let mut g = Graph::new();
        let q = g.input(Tensor::from_rows(&[vec![5.0, -1.0], vec![0.3, 0.2]]));
        let k = g.input(Tensor::row_vector(&[0.7, 9.0]));
        let v = g.input(Tensor::row_vector(&[4.0, -4.0]));
        let out = attention(&mut g, q, k, v);
        assert_eq!(g.value(out).data(), &[4.0, -4.0, 4.0, -4.0]);
    }

    #[test]
    fn zero_gru_halves_the_hidden_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = GruCell::new(&mut store, "gru", 2, 3, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let [r, c] = store.value(id).shape();
            *store.value_mut(id) = Tensor::zeros(r, c);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(&[1.0, 2.0]));
        let h0 = g.input(Tensor::row_vector(&[2.0, -4.0, 1.0]));
        let h1 = gru.step(&mut g, &store, x, h0);
        assert_eq!(g.value(h1).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 10.0], vec![-3.0, 0.5, 0.5, 7.0, 2.0]]));
        let y = ln.forward(&mut g, &store, x);
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-10);
            // eps = 1e-5 shrinks the variance slightly below one
            let x_var = {
                let xr = g.value(x).row(r);
                let m = xr.iter().sum::<f64>() / 5.0;
                xr.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0
            };
            assert!((var - x_var / (x_var + LAYER_NORM_EPS)).abs() < 1e-10);
        }
    }
}
