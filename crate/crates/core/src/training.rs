//! Action loss, differentiable Spearman monotonicity loss and the two-stage
//! training schedule.
//!
//! Every iteration takes one action-loss step. Once the iteration index
//! exceeds `monotonicity_start`, a monotonicity-loss step on whole
//! trajectories follows, with its own optimizer state and learning rate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, AutodiffError, Graph, Tensor, Var};
use crate::math;
use crate::policy::{states_tensor, PolicyError, QSequence, TransformerPolicy};
use crate::rng;
use crate::traj::{Dataset, Label, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyData,
    #[error("training data contains non-normal trajectory {0}")]
    AnomalousData(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid action {action} at step {step} (action_count = {count})")]
    InvalidAction { action: usize, step: usize, count: usize },
    #[error("sequence of length {0} is too short for a rank correlation")]
    TooShort(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Triangular cyclical schedule between `low` and `high` with a
    /// half-cycle of `step_size` iterations.
    Triangular { low: f64, high: f64, step_size: usize },
}

impl LrSchedule {
    /// Learning rate for the zero-based step count `it`.
    pub fn at(&self, it: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Triangular { low, high, step_size } => {
                let ss = step_size.max(1) as f64;
                let cycle = math::floor(1.0 + it as f64 / (2.0 * ss));
                let x = math::abs(it as f64 / ss - 2.0 * cycle + 1.0);
                low + (high - low) * (1.0 - x).max(0.0)
            }
        }
    }
}

/// Which objectives take part in training (the ablation arms).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objectives {
    ActionOnly,
    MonotonicityOnly,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total iterations `n`.
    pub iterations: usize,
    /// Monotonicity steps run for iterations `> n₁`; `None` means `n / 2`.
    pub monotonicity_start: Option<usize>,
    /// Entropy regularization `α`.
    pub alpha: f64,
    /// Trajectories per action-loss step.
    pub batch_size: usize,
    /// Trajectories per monotonicity-loss step.
    pub monotonicity_batch: usize,
    pub action_lr: LrSchedule,
    pub monotonicity_lr: LrSchedule,
    pub optimizer: AdamWConfig,
    /// Soft-rank regularization strength `ε`.
    pub rank_strength: f64,
    /// Global gradient-norm clip applied to each step.
    pub clip_norm: Option<f64>,
    pub objectives: Objectives,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            monotonicity_start: None,
            alpha: 0.05,
            batch_size: 16,
            monotonicity_batch: 16,
            action_lr: LrSchedule::Constant { lr: 1e-3 },
            monotonicity_lr: LrSchedule::Constant { lr: 2e-4 },
            optimizer: AdamWConfig::default(),
            rank_strength: 1.0,
            clip_norm: Some(1.0),
            objectives: Objectives::Both,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn monotonicity_start(&self) -> usize {
        self.monotonicity_start.unwrap_or(self.iterations / 2)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.monotonicity_start() > self.iterations {
            return bad(format!("monotonicity_start {} exceeds iterations {}", self.monotonicity_start(), self.iterations));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.batch_size == 0 || self.monotonicity_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.rank_strength > 0.0) {
            return bad(format!("rank strength must be positive, got {}", self.rank_strength));
        }
        Ok(())
    }
}

/// Per-row action loss on the graph: `−log π(a_t|s_t) − α·H(π(·|s_t))` as a
/// `T x 1` column.
pub fn action_loss_rows(g: &mut Graph, q: Var, actions: &[usize], alpha: f64) -> Result<Var, TrainError> {
    let count = g.value(q).cols();
    if let Some((step, &action)) = actions.iter().enumerate().find(|(_, &a)| a >= count) {
        return Err(TrainError::InvalidAction { action, step, count });
    }
    let logp = g.row_log_softmax(q)?;
    let picked = g.pick_per_row(logp, actions)?;
    let nll = g.scale(picked, -1.0)?;
    if alpha == 0.0 {
        return Ok(nll);
    }
    let p = g.exp(logp)?;
    let plogp = g.mul(p, logp)?;
    let neg_entropy = g.row_sum(plogp)?;
    let reg = g.scale(neg_entropy, alpha)?;
    Ok(g.add(nll, reg)?)
}

/// `v_t = Σ_a π(a|s_t) q(s_t, a)` on the graph, as a `T x 1` column.
pub fn state_values_graph(g: &mut Graph, q: Var) -> Result<Var, TrainError> {
    let p = g.row_softmax(q)?;
    let pq = g.mul(p, q)?;
    Ok(g.row_sum(pq)?)
}

/// Negative Spearman coefficient between soft ranks of `values` (a vector
/// node) and the time index. Returns a constant zero when the soft ranks
/// have no variance.
pub fn spearman_loss_graph(g: &mut Graph, values: Var, strength: f64) -> Result<Var, TrainError> {
    let n = g.value(values).len();
    if n < 2 {
        return Err(TrainError::TooShort(n));
    }
    let ranks = g.soft_rank(values, strength)?;
    let shape = g.value(values).shape();
    let mid = (n as f64 + 1.0) / 2.0;
    let centered_time: Vec<f64> = (1..=n).map(|t| t as f64 - mid).collect();
    let time_norm = math::sqrt(centered_time.iter().map(|t| t * t).sum::<f64>());
    let tc = g.constant(Tensor::new(shape[0], shape[1], centered_time)?);
    let mean = g.mean(ranks)?;
    let rc = g.sub(ranks, mean)?;
    let sq = g.mul(rc, rc)?;
    let ss = g.sum(sq)?;
    if g.value(ss).item() <= 1e-18 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let cross = g.mul(rc, tc)?;
    let num = g.sum(cross)?;
    let den = g.sqrt(ss)?;
    let corr = g.div(num, den)?;
    Ok(g.scale(corr, -1.0 / time_norm)?)
}

/// Mean action loss of a Q sequence against observed actions.
pub fn action_loss(q: &QSequence, actions: &[usize], alpha: f64) -> Result<f64, TrainError> {
    if actions.len() != q.len() {
        return Err(TrainError::Config(format!("{} actions for {} Q rows", actions.len(), q.len())));
    }
    let mut g = Graph::new();
    let qv = g.constant(q.0.clone());
    let rows = action_loss_rows(&mut g, qv, actions, alpha)?;
    let m = g.mean(rows)?;
    Ok(g.value(m).item())
}

/// Negative soft Spearman coefficient of `values` against time.
pub fn spearman_loss(values: &[f64], strength: f64) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::column(values.to_vec()));
    let l = spearman_loss_graph(&mut g, v, strength)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub action_loss: Option<f64>,
    pub monotonicity_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

struct Sample {
    states: Tensor,
    actions: Vec<usize>,
}

/// Stateful trainer; [`train`] drives it for the configured iterations.
pub struct Trainer {
    pub model: TransformerPolicy,
    cfg: TrainConfig,
    chunks: Vec<Sample>,
    sequences: Vec<Tensor>,
    action_opt: AdamW,
    mono_opt: AdamW,
    action_steps: usize,
    mono_steps: usize,
    pub history: TrainHistory,
}

fn clip(grads: &mut [Vec<f64>], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = math::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

impl Trainer {
    pub fn new(model: TransformerPolicy, data: &Dataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        if let Some(t) = data.trajectories.iter().find(|t| t.label != Label::Normal) {
            return Err(TrainError::AnomalousData(t.id.clone()));
        }
        let mc = model.config;
        let mut chunks = Vec::new();
        let mut sequences = Vec::new();
        for t in &data.trajectories {
            t.validate(mc.action_count).map_err(|e| TrainError::Config(format!("{e}")))?;
            let states = t.states();
            let actions = t.actions();
            for start in (0..t.len()).step_by(mc.max_seq_len) {
                let end = (start + mc.max_seq_len).min(t.len());
                chunks.push(Sample {
                    states: states_tensor(&states[start..end], mc.state_dim)?,
                    actions: actions[start..end].to_vec(),
                });
            }
            if t.len() >= 2 {
                let end = t.len().min(mc.max_seq_len);
                sequences.push(states_tensor(&states[..end], mc.state_dim)?);
            }
        }
        Ok(Self {
            model,
            action_opt: AdamW::new(cfg.optimizer),
            mono_opt: AdamW::new(cfg.optimizer),
            cfg,
            chunks,
            sequences,
            action_steps: 0,
            mono_steps: 0,
            history: TrainHistory::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn collect_grads(g: &Graph, vars: &[Var], params: &[Tensor]) -> Vec<Vec<f64>> {
        vars.iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect()
    }

    fn action_step(&mut self, iteration: usize) -> Result<f64, TrainError> {
        let mut r = rng::stream(self.cfg.seed, 2 * iteration as u64);
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let mut terms = Vec::with_capacity(self.cfg.batch_size);
        let mut steps = 0usize;
        for b in 0..self.cfg.batch_size {
            let sample = &self.chunks[r.gen_range(0..self.chunks.len())];
            let seed = rng::derive_seed(self.cfg.seed ^ 0xa1, (iteration * self.cfg.batch_size + b) as u64);
            let q = self.model.forward_graph(&mut g, &vars, &sample.states, true, seed)?;
            let rows = action_loss_rows(&mut g, q, &sample.actions, self.cfg.alpha)?;
            terms.push(g.sum(rows)?);
            steps += sample.actions.len();
        }
        let cat = g.concat_cols(&terms)?;
        let total = g.sum(cat)?;
        let loss = g.scale(total, 1.0 / steps as f64)?;
        g.backward(loss)?;
        let mut grads = Self::collect_grads(&g, &vars, self.model.params());
        clip(&mut grads, self.cfg.clip_norm);
        let lr = self.cfg.action_lr.at(self.action_steps);
        self.action_opt.step(self.model.params_mut(), &grads, lr)?;
        self.action_steps += 1;
        Ok(g.value(loss).item())
    }

    fn monotonicity_step(&mut self, iteration: usize) -> Result<Option<f64>, TrainError> {
        if self.sequences.is_empty() {
            return Ok(None);
        }
        let mut r = rng::stream(self.cfg.seed, 2 * iteration as u64 + 1);
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let mut terms = Vec::with_capacity(self.cfg.monotonicity_batch);
        for b in 0..self.cfg.monotonicity_batch {
            let states = &self.sequences[r.gen_range(0..self.sequences.len())];
            let seed = rng::derive_seed(self.cfg.seed ^ 0xb2, (iteration * self.cfg.monotonicity_batch + b) as u64);
            let q = self.model.forward_graph(&mut g, &vars, states, true, seed)?;
            let v = state_values_graph(&mut g, q)?;
            terms.push(spearman_loss_graph(&mut g, v, self.cfg.rank_strength)?);
        }
        let cat = g.concat_cols(&terms)?;
        let loss = g.mean(cat)?;
        g.backward(loss)?;
        let mut grads = Self::collect_grads(&g, &vars, self.model.params());
        clip(&mut grads, self.cfg.clip_norm);
        let lr = self.cfg.monotonicity_lr.at(self.mono_steps);
        self.mono_opt.step(self.model.params_mut(), &grads, lr)?;
        self.mono_steps += 1;
        Ok(Some(g.value(loss).item()))
    }

    /// Runs iteration `iteration` (1-based).
    pub fn step(&mut self, iteration: usize) -> Result<HistoryRow, TrainError> {
        let n1 = self.cfg.monotonicity_start();
        let (use_action, use_mono) = match self.cfg.objectives {
            Objectives::Both => (true, iteration > n1),
            Objectives::ActionOnly => (true, false),
            Objectives::MonotonicityOnly => (false, true),
        };
        let action_loss = if use_action { Some(self.action_step(iteration)?) } else { None };
        let monotonicity_loss = if use_mono { self.monotonicity_step(iteration)? } else { None };
        let row = HistoryRow { iteration, action_loss, monotonicity_loss };
        self.history.rows.push(row);
        Ok(row)
    }

    pub fn finish(self) -> (TransformerPolicy, TrainHistory) {
        (self.model, self.history)
    }
}

/// Trains `model` on normal trajectories. Deterministic given `cfg.seed`.
pub fn train(
    model: TransformerPolicy,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TransformerPolicy, TrainHistory), TrainError> {
    let mut trainer = Trainer::new(model, data, cfg.clone())?;
    for it in 1..=cfg.iterations {
        trainer.step(it)?;
    }
    Ok(trainer.finish())
}

/// Fraction of steps where the model's argmax action equals the recorded
/// action.
pub fn action_accuracy(model: &TransformerPolicy, trajectories: &[Trajectory]) -> Result<f64, TrainError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in trajectories {
        let q = model.q_values(&t.states())?;
        for (i, st) in t.steps.iter().enumerate() {
            let row = q.row(i);
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|x| x.0).unwrap_or(0);
            hit += usize::from(best == st.a);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    #[test]
    fn uniform_policy_loss_is_ln_four() {
        let q = QSequence(Tensor::zeros(3, 4));
        let l = action_loss(&q, &[0, 1, 3], 0.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        // entropy term: ln 4 - α ln 4
        let l = action_loss(&q, &[0, 1, 3], 0.5).unwrap();
        assert!((l - 0.5 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_policy_has_vanishing_loss() {
        let q = QSequence(Tensor::new(2, 3, vec![60.0, 0.0, 0.0, 0.0, 0.0, 60.0]).unwrap());
        assert!(action_loss(&q, &[0, 2], 0.0).unwrap() < 1e-20);
        assert!(action_loss(&q, &[0, 5], 0.0).is_err());
    }

    #[test]
    fn spearman_loss_examples() {
        assert!((spearman_loss(&[1.0, 2.0, 3.0, 4.0], 1e-3).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman_loss(&[4.0, 3.0, 2.0, 1.0], 1e-3).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_loss(&[1.0, 3.0, 2.0], 1e-3).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(spearman_loss(&[2.0, 2.0, 2.0], 1.0).unwrap(), 0.0);
        assert!(matches!(spearman_loss(&[1.0], 1.0), Err(TrainError::TooShort(1))));
    }

    #[test]
    fn spearman_loss_is_rank_invariant() {
        let v = [0.3, -1.2, 4.0, 2.2, 2.9, -0.5];
        let w: Vec<f64> = v.iter().map(|x| 2.0 * x + 7.0).collect();
        let a = spearman_loss(&v, 1e-3).unwrap();
        let b = spearman_loss(&w, 1e-3).unwrap();
        assert!((a - b).abs() < 1e-3);
        let hard_a = crate::stats::spearman_vs_time(&v).unwrap();
        let hard_b = crate::stats::spearman_vs_time(&w).unwrap();
        assert_eq!(hard_a, hard_b);
    }

    #[test]
    fn triangular_schedule() {
        let s = LrSchedule::Triangular { low: 1e-7, high: 1e-3, step_size: 10 };
        assert_eq!(s.at(0), 1e-7);
        assert!((s.at(10) - 1e-3).abs() < 1e-18);
        assert!((s.at(5) - (1e-7 + (1e-3 - 1e-7) * 0.5)).abs() < 1e-18);
        assert_eq!(s.at(20), 1e-7);
    }

    #[test]
    fn refuses_anomalies_and_zero_iterations_is_identity() {
        let model = TransformerPolicy::new(PolicyConfig::small(2, 5), 1).unwrap();
        let t = Trajectory {
            id: "x".into(),
            label: Label::Normal,
            steps: vec![crate::traj::Step { s: vec![0.0, 0.0], a: 1 }, crate::traj::Step { s: vec![0.1, 0.0], a: 1 }],
            meta: Default::default(),
        };
        let mut bad = t.clone();
        bad.label = Label::PerturbedAnomaly;
        let ds = Dataset::new(vec![t.clone(), bad]);
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        assert!(matches!(train(model.clone(), &ds, &cfg), Err(TrainError::AnomalousData(_))));
        let ds = Dataset::new(vec![t]);
        let (out, hist) = train(model.clone(), &ds, &cfg).unwrap();
        assert_eq!(out, model);
        assert!(hist.rows.is_empty());
        assert!(matches!(train(model, &Dataset::default(), &cfg), Err(TrainError::EmptyData)));
    }

    #[test]
    fn invalid_configs() {
        let cfg = TrainConfig { iterations: 10, monotonicity_start: Some(11), ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { alpha: -0.1, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
