//! Causal transformer policy whose pre-softmax outputs are read as Q values.
//!
//! The network consumes a state sequence only. Each output row `t` depends on
//! `s_1 ..= s_t`: attention uses a causal softmax whose masked entries are
//! exactly zero, so appending states never changes earlier rows, bit for bit.
//!
//! `π(a|s) = softmax(q(s, ·))` and `v(s) = Σ_a π(a|s) q(s, a)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::math;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },
    #[error("state dimension {got} does not match model ({expected})")]
    StateDim { got: usize, expected: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_count: usize,
    pub embed_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    /// Hidden width of each feed-forward block.
    pub ffn_dim: usize,
}

impl PolicyConfig {
    /// Desk-scale defaults for a given state and action space.
    pub fn small(state_dim: usize, action_count: usize) -> Self {
        Self {
            state_dim,
            action_count,
            embed_dim: 32,
            layer_count: 1,
            head_count: 2,
            dropout: 0.1,
            max_seq_len: 512,
            ffn_dim: 64,
        }
    }

    /// Transformer sizes used for the LunarLander-scale setting.
    pub fn lunar_lander(state_dim: usize, action_count: usize) -> Self {
        Self {
            embed_dim: 256,
            layer_count: 1,
            head_count: 4,
            ffn_dim: 1024,
            ..Self::small(state_dim, action_count)
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.into()));
        if self.state_dim == 0 || self.action_count == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.head_count == 0 || self.embed_dim % self.head_count != 0 {
            return bad("embed_dim must be divisible by head_count");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Names and shapes of every parameter array, in declared order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (d, f, a) = (self.embed_dim, self.ffn_dim, self.action_count);
        let mut out = vec![
            ("input.weight".into(), [self.state_dim, d]),
            ("input.bias".into(), [1, d]),
            ("position".into(), [self.max_seq_len, d]),
        ];
        for l in 0..self.layer_count {
            let p = |n: &str| format!("layer{l}.{n}");
            out.extend([
                (p("ln1.gain"), [1, d]),
                (p("ln1.bias"), [1, d]),
                (p("attn.query"), [d, d]),
                (p("attn.key"), [d, d]),
                (p("attn.value"), [d, d]),
                (p("attn.out.weight"), [d, d]),
                (p("attn.out.bias"), [1, d]),
                (p("ln2.gain"), [1, d]),
                (p("ln2.bias"), [1, d]),
                (p("ffn.up.weight"), [d, f]),
                (p("ffn.up.bias"), [1, f]),
                (p("ffn.down.weight"), [f, d]),
                (p("ffn.down.bias"), [1, d]),
            ]);
        }
        out.extend([
            ("final_ln.gain".into(), [1, d]),
            ("final_ln.bias".into(), [1, d]),
            ("head.weight".into(), [d, a]),
            ("head.bias".into(), [1, a]),
        ]);
        out
    }
}

const PER_LAYER: usize = 13;
const LN_EPS: f64 = 1e-5;

/// Per-step Q values, `T x |A|`.
#[derive(Debug, Clone, PartialEq)]
pub struct QSequence(pub Tensor);

impl QSequence {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn action_count(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row_slice(t)
    }
}

/// Softmax of one Q row, stabilized by max subtraction.
pub fn softmax(q: &[f64]) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|&v| math::exp(v - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `π(·|s_t)` for every step.
pub fn policy_probs(q: &QSequence) -> Vec<Vec<f64>> {
    (0..q.len()).map(|t| softmax(q.row(t))).collect()
}

/// `v(s) = Σ_a π(a|s) q(s, a)` for a single Q row.
pub fn state_value(q: &[f64]) -> f64 {
    softmax(q).iter().zip(q).map(|(p, v)| p * v).sum()
}

pub fn state_values(q: &QSequence) -> Vec<f64> {
    (0..q.len()).map(|t| state_value(q.row(t))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerPolicy {
    pub config: PolicyConfig,
    params: Vec<Tensor>,
}

impl TransformerPolicy {
    /// Random initialization: weights uniform in `±1/√fan_in`, biases zero,
    /// layer-norm gains one.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut r = rng::stream(seed, 0x9017);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, [rows, cols])| {
                if name.ends_with("gain") {
                    Tensor::filled(rows, cols, 1.0)
                } else if name.ends_with("bias") {
                    Tensor::zeros(rows, cols)
                } else if name == "position" {
                    Tensor::uniform(rows, cols, 1.0 / math::sqrt(cols as f64), &mut r)
                } else {
                    Tensor::uniform(rows, cols, 1.0 / math::sqrt(rows as f64), &mut r)
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored arrays, checking them against the layout.
    pub fn from_parts(config: PolicyConfig, params: Vec<Tensor>) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(PolicyError::Layout(format!("expected {} arrays, got {}", layout.len(), params.len())));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != *shape {
                return Err(PolicyError::Layout(format!("{name}: expected {shape:?}, got {:?}", p.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.constant(p.clone())).collect()
    }

    fn check_states(&self, states: &Tensor) -> Result<(), PolicyError> {
        let t = states.rows();
        if t == 0 || t > self.config.max_seq_len {
            return Err(PolicyError::SequenceLength { len: t, max: self.config.max_seq_len });
        }
        if states.cols() != self.config.state_dim {
            return Err(PolicyError::StateDim { got: states.cols(), expected: self.config.state_dim });
        }
        Ok(())
    }

    /// Builds the forward pass on `graph` using parameters bound by
    /// [`bind`](Self::bind) and returns the `T x |A|` Q-value node.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        params: &[Var],
        states: &Tensor,
        train: bool,
        seed: u64,
    ) -> Result<Var, PolicyError> {
        self.check_states(states)?;
        if params.len() != self.params.len() {
            return Err(PolicyError::Layout(format!("{} bound parameters for {} arrays", params.len(), self.params.len())));
        }
        let c = &self.config;
        let t = states.rows();
        let head_dim = c.embed_dim / c.head_count;
        let inv_sqrt = 1.0 / math::sqrt(head_dim as f64);
        let mut site = 0u64;
        let mut dropout = |g: &mut Graph, x: Var| -> Result<Var, AutodiffError> {
            site += 1;
            g.dropout(x, c.dropout, rng::derive_seed(seed, site), train)
        };

        let s = graph.constant(states.clone());
        let positions: Vec<usize> = (0..t).collect();
        let x = graph.matmul(s, params[0])?;
        let x = graph.add(x, params[1])?;
        let pos = graph.gather_rows(params[2], &positions)?;
        let mut x = graph.add(x, pos)?;
        x = dropout(graph, x)?;

        for l in 0..c.layer_count {
            let p = &params[3 + l * PER_LAYER..3 + (l + 1) * PER_LAYER];
            let h = graph.layer_norm(x, p[0], p[1], LN_EPS)?;
            let q = graph.matmul(h, p[2])?;
            let k = graph.matmul(h, p[3])?;
            let v = graph.matmul(h, p[4])?;
            let mut heads = Vec::with_capacity(c.head_count);
            for hd in 0..c.head_count {
                let (qh, kh, vh) = (
                    graph.slice_cols(q, hd * head_dim, head_dim)?,
                    graph.slice_cols(k, hd * head_dim, head_dim)?,
                    graph.slice_cols(v, hd * head_dim, head_dim)?,
                );
                let kt = graph.transpose(kh)?;
                let scores = graph.matmul(qh, kt)?;
                let scores = graph.scale(scores, inv_sqrt)?;
                let attn = graph.causal_softmax(scores)?;
                let attn = dropout(graph, attn)?;
                heads.push(graph.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { graph.concat_cols(&heads)? };
            let o = graph.matmul(cat, p[5])?;
            let o = graph.add(o, p[6])?;
            let o = dropout(graph, o)?;
            x = graph.add(x, o)?;

            let h = graph.layer_norm(x, p[7], p[8], LN_EPS)?;
            let u = graph.matmul(h, p[9])?;
            let u = graph.add(u, p[10])?;
            let u = graph.gelu(u)?;
            let dn = graph.matmul(u, p[11])?;
            let dn = graph.add(dn, p[12])?;
            let dn = dropout(graph, dn)?;
            x = graph.add(x, dn)?;
        }
        let base = 3 + c.layer_count * PER_LAYER;
        let h = graph.layer_norm(x, params[base], params[base + 1], LN_EPS)?;
        let q = graph.matmul(h, params[base + 2])?;
        Ok(graph.add(q, params[base + 3])?)
    }

    /// Stand-alone forward pass without gradient tracking.
    pub fn forward(&self, states: &Tensor, train: bool, seed: u64) -> Result<QSequence, PolicyError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let q = self.forward_graph(&mut g, &p, states, train, seed)?;
        Ok(QSequence(g.value(q).clone()))
    }

    /// Eval-mode Q values for a list of state vectors.
    pub fn q_values(&self, states: &[Vec<f64>]) -> Result<QSequence, PolicyError> {
        let t = states_tensor(states, self.config.state_dim)?;
        self.forward(&t, false, 0)
    }
}

/// Stacks state vectors into a `T x dim` tensor.
pub fn states_tensor(states: &[Vec<f64>], dim: usize) -> Result<Tensor, PolicyError> {
    let mut data = Vec::with_capacity(states.len() * dim);
    for s in states {
        if s.len() != dim {
            return Err(PolicyError::StateDim { got: s.len(), expected: dim });
        }
        data.extend_from_slice(s);
    }
    Ok(Tensor::new(states.len(), dim, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn toy() -> TransformerPolicy {
        let cfg = PolicyConfig { layer_count: 2, max_seq_len: 16, embed_dim: 8, ffn_dim: 12, ..PolicyConfig::small(3, 4) };
        TransformerPolicy::new(cfg, 5).unwrap()
    }

    fn random_states(t: usize, dim: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 1);
        Tensor::new(t, dim, (0..t * dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn causal_prefix_is_bitwise_stable() {
        let m = toy();
        let s5 = random_states(5, 3, 1);
        let s3 = Tensor::new(3, 3, s5.data()[..9].to_vec()).unwrap();
        let q5 = m.forward(&s5, false, 0).unwrap();
        let q3 = m.forward(&s3, false, 0).unwrap();
        for t in 0..3 {
            let a: Vec<u64> = q5.row(t).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q3.row(t).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shapes_and_errors() {
        let m = toy();
        let q = m.forward(&random_states(7, 3, 2), false, 0).unwrap();
        assert_eq!((q.len(), q.action_count()), (7, 4));
        assert!(q.0.is_finite());
        assert!(matches!(m.forward(&random_states(17, 3, 2), false, 0), Err(PolicyError::SequenceLength { .. })));
        assert!(matches!(m.forward(&random_states(4, 2, 2), false, 0), Err(PolicyError::StateDim { .. })));
        let bad = PolicyConfig { head_count: 3, ..PolicyConfig::small(2, 5) };
        assert!(TransformerPolicy::new(bad, 0).is_err());
    }

    #[test]
    fn eval_is_pure_and_train_is_seeded() {
        let m = toy();
        let s = random_states(6, 3, 3);
        assert_eq!(m.forward(&s, false, 1).unwrap(), m.forward(&s, false, 2).unwrap());
        assert_eq!(m.forward(&s, true, 4).unwrap(), m.forward(&s, true, 4).unwrap());
        assert_ne!(m.forward(&s, true, 4).unwrap(), m.forward(&s, false, 4).unwrap());
    }

    #[test]
    fn policy_and_value_examples() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[core::f64::consts::LN_2, 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = softmax(&[core::f64::consts::LN_2 + 40.0, 40.0]);
        assert!((shifted[0] - p[0]).abs() < 1e-15);
        assert_eq!(state_value(&[0.0, 0.0]), 0.0);
        assert!((state_value(&[1.0, 1.0]) - 1.0).abs() < 1e-15);
        let e2 = math::exp(2.0);
        assert!((state_value(&[2.0, 0.0]) - 2.0 * e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((state_value(&[2.0, 0.0]) - 1.7616).abs() < 1e-4);
    }

    #[test]
    fn value_never_exceeds_max_q_and_argmax_agrees() {
        let m = toy();
        let q = m.forward(&random_states(9, 3, 8), false, 0).unwrap();
        let probs = policy_probs(&q);
        for (t, v) in state_values(&q).into_iter().enumerate() {
            let row = q.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(max - v >= 0.0);
            let argmax = |xs: &[f64]| xs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax(row), argmax(&probs[t]));
            assert!((probs[t].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
