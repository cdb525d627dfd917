//! Two-dimensional behaviour features over sliding windows.
//!
//! - Action optimality `f_AO ≤ 0`: minus the area between the optimal Q
//!   curve `max_a q(s_t, a)` and the taken-action curve `q(s_t, a_t)`. Both
//!   curves share unit-spaced timesteps, so the area is the trapezoidal
//!   integral of the pointwise gap.
//! - Sequential association `f_SA ∈ [−1, 1]`: hard Spearman coefficient
//!   between the window's state values and the time index.
//!
//! Every window is scored with the trajectory prefix as causal context. When
//! the two window lengths differ, one point is emitted per position of the
//! larger window and the smaller-window feature is reduced over the small
//! windows it spans.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::policy::{state_value, PolicyError, QSequence, TransformerPolicy};
use crate::stats;
use crate::traj::{Step, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid window configuration: {0}")]
    Config(String),
    #[error("window of {0} steps is too short (need at least 2)")]
    WindowTooShort(usize),
    #[error("trajectory {0} is empty")]
    Empty(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How small-window features are reduced inside a large window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Downsample {
    /// Minimum value, i.e. the most anomalous small window.
    #[default]
    MostAnomalous,
    LargestValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub w_q: usize,
    pub w_v: usize,
    pub step: usize,
    #[serde(default)]
    pub downsample: Downsample,
}

impl WindowConfig {
    pub fn new(w_q: usize, w_v: usize, step: usize) -> Self {
        Self { w_q, w_v, step, downsample: Downsample::MostAnomalous }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.w_q < 2 || self.w_v < 2 {
            return Err(FeatureError::Config(format!("window sizes must be >= 2 (w_q = {}, w_v = {})", self.w_q, self.w_v)));
        }
        if self.step == 0 {
            return Err(FeatureError::Config("step must be >= 1".into()));
        }
        Ok(())
    }

    pub fn large(&self) -> usize {
        self.w_q.max(self.w_v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub traj_id: String,
    /// Index of the last step of the (large) window.
    pub window_end: usize,
    pub f_ao: f64,
    pub f_sa: f64,
    /// The Spearman coefficient was undefined (constant values) and set to 0.
    pub degenerate: bool,
    /// The trajectory was shorter than the windows and scored as a whole.
    pub fallback: bool,
}

impl FeaturePoint {
    pub fn as_pair(&self) -> [f64; 2] {
        [self.f_ao, self.f_sa]
    }
}

/// Gap between the best and the taken action's Q value.
fn gap(q: &[f64], action: usize) -> f64 {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    best - q[action]
}

/// Negative trapezoidal area under the per-step gaps.
pub fn negative_gap_area(gaps: &[f64]) -> Result<f64, FeatureError> {
    if gaps.len() < 2 {
        return Err(FeatureError::WindowTooShort(gaps.len()));
    }
    let area: f64 = gaps.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(-area)
}

/// `f_AO` of a window given its Q rows and taken actions.
pub fn action_optimality_from_q(rows: &[&[f64]], actions: &[usize]) -> Result<f64, FeatureError> {
    let gaps: Vec<f64> = rows.iter().zip(actions).map(|(q, &a)| gap(q, a)).collect();
    negative_gap_area(&gaps)
}

/// `f_SA` of a window of state values; `(0, true)` when undefined.
pub fn sequential_association_from_values(values: &[f64]) -> Result<(f64, bool), FeatureError> {
    if values.len() < 2 {
        return Err(FeatureError::WindowTooShort(values.len()));
    }
    Ok(match stats::spearman_vs_time(values) {
        Some(c) => (c, false),
        None => (0.0, true),
    })
}

fn forward_prefix(model: &TransformerPolicy, context: &[Step], window: &[Step]) -> Result<QSequence, FeatureError> {
    let states: Vec<Vec<f64>> = context.iter().chain(window).map(|s| s.s.clone()).collect();
    let max = model.config.max_seq_len;
    let from = states.len().saturating_sub(max);
    Ok(model.q_values(&states[from..])?)
}

/// `f_AO` of `window` with `context` (the preceding steps) as causal input.
pub fn action_optimality(model: &TransformerPolicy, context: &[Step], window: &[Step]) -> Result<f64, FeatureError> {
    if window.len() < 2 {
        return Err(FeatureError::WindowTooShort(window.len()));
    }
    let q = forward_prefix(model, context, window)?;
    let off = q.len() - window.len();
    let rows: Vec<&[f64]> = (off..q.len()).map(|t| q.row(t)).collect();
    let actions: Vec<usize> = window.iter().map(|s| s.a).collect();
    action_optimality_from_q(&rows, &actions)
}

/// `f_SA` of `window` with `context` as causal input.
pub fn sequential_association(
    model: &TransformerPolicy,
    context: &[Step],
    window: &[Step],
) -> Result<(f64, bool), FeatureError> {
    if window.len() < 2 {
        return Err(FeatureError::WindowTooShort(window.len()));
    }
    let q = forward_prefix(model, context, window)?;
    let off = q.len() - window.len();
    let values: Vec<f64> = (off..q.len()).map(|t| state_value(q.row(t))).collect();
    sequential_association_from_values(&values)
}

fn reduce(values: impl Iterator<Item = f64>, rule: Downsample) -> f64 {
    match rule {
        Downsample::MostAnomalous => values.fold(f64::INFINITY, f64::min),
        Downsample::LargestValue => values.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Both features for the large window `[start, start + large)` of per-step
/// Q rows and actions.
fn score_window(
    rows: &[&[f64]],
    actions: &[usize],
    values: &[f64],
    start: usize,
    cfg: &WindowConfig,
) -> Result<(f64, f64, bool), FeatureError> {
    let large = cfg.large();
    let ao_at = |s: usize| action_optimality_from_q(&rows[s..s + cfg.w_q], &actions[s..s + cfg.w_q]);
    let sa_at = |s: usize| sequential_association_from_values(&values[s..s + cfg.w_v]);
    // small windows inside the large one, on the global step grid
    let inner = |w: usize| (start..=start + large - w).step_by(cfg.step);
    let (f_ao, f_sa, degenerate) = if cfg.w_q == cfg.w_v {
        let (sa, d) = sa_at(start)?;
        (ao_at(start)?, sa, d)
    } else if cfg.w_q < cfg.w_v {
        let aos = inner(cfg.w_q).map(ao_at).collect::<Result<Vec<_>, _>>()?;
        let (sa, d) = sa_at(start)?;
        (reduce(aos.into_iter(), cfg.downsample), sa, d)
    } else {
        let sas = inner(cfg.w_v).map(sa_at).collect::<Result<Vec<_>, _>>()?;
        let degenerate = sas.iter().all(|s| s.1);
        (ao_at(start)?, reduce(sas.into_iter().map(|s| s.0), cfg.downsample), degenerate)
    };
    Ok((f_ao, f_sa, degenerate))
}

/// Feature points of every window position of `traj`.
///
/// Trajectories shorter than the large window are scored once as a whole
/// (`fallback` set).
pub fn windowed_features(
    model: &TransformerPolicy,
    traj: &Trajectory,
    cfg: &WindowConfig,
) -> Result<Vec<FeaturePoint>, FeatureError> {
    cfg.validate()?;
    let t = traj.len();
    if t == 0 {
        return Err(FeatureError::Empty(traj.id.clone()));
    }
    let actions = traj.actions();
    let max = model.config.max_seq_len;
    let point = |end: usize, s: (f64, f64, bool), fallback: bool| FeaturePoint {
        traj_id: traj.id.clone(),
        window_end: end,
        f_ao: s.0,
        f_sa: s.1,
        degenerate: s.2,
        fallback,
    };

    if t < cfg.large() {
        let q = forward_prefix(model, &[], &traj.steps)?;
        let rows: Vec<&[f64]> = (0..q.len()).map(|i| q.row(i)).collect();
        let acts = &actions[t - q.len()..];
        let values: Vec<f64> = rows.iter().map(|r| state_value(r)).collect();
        let score = if rows.len() < 2 {
            (-gap(rows[0], acts[0]), 0.0, true)
        } else {
            let whole = WindowConfig { w_q: rows.len(), w_v: rows.len(), ..*cfg };
            score_window(&rows, acts, &values, 0, &whole)?
        };
        return Ok(alloc::vec![point(t - 1, score, true)]);
    }

    let large = cfg.large();
    let starts: Vec<usize> = (0..=t - large).step_by(cfg.step).collect();
    let mut out = Vec::with_capacity(starts.len());
    if t <= max {
        let q = model.q_values(&traj.states())?;
        let rows: Vec<&[f64]> = (0..t).map(|i| q.row(i)).collect();
        let values: Vec<f64> = rows.iter().map(|r| state_value(r)).collect();
        for s in starts {
            out.push(point(s + large - 1, score_window(&rows, &actions, &values, s, cfg)?, false));
        }
    } else {
        // capped context: recompute the prefix ending at each window
        for s in starts {
            let end = s + large;
            let q = forward_prefix(model, &traj.steps[..s], &traj.steps[s..end])?;
            let off = q.len() - large;
            let rows: Vec<&[f64]> = (off..q.len()).map(|i| q.row(i)).collect();
            let values: Vec<f64> = rows.iter().map(|r| state_value(r)).collect();
            out.push(point(end - 1, score_window(&rows, &actions[s..end], &values, 0, cfg)?, false));
        }
    }
    Ok(out)
}

/// Incremental scorer for one trajectory stream: emits a feature point as
/// soon as a window completes. Context is capped at the model's
/// `max_seq_len` most recent steps, so per-step cost does not grow with the
/// stream length.
pub struct StreamingFeatures<'m> {
    model: &'m TransformerPolicy,
    cfg: WindowConfig,
    traj_id: String,
    buffer: VecDeque<Step>,
    seen: usize,
}

impl<'m> StreamingFeatures<'m> {
    pub fn new(model: &'m TransformerPolicy, cfg: WindowConfig, traj_id: impl Into<String>) -> Result<Self, FeatureError> {
        cfg.validate()?;
        if cfg.large() > model.config.max_seq_len {
            return Err(FeatureError::Config("window exceeds the model's max_seq_len".into()));
        }
        Ok(Self { model, cfg, traj_id: traj_id.into(), buffer: VecDeque::new(), seen: 0 })
    }

    pub fn steps_seen(&self) -> usize {
        self.seen
    }

    pub fn push(&mut self, step: Step) -> Result<Option<FeaturePoint>, FeatureError> {
        self.buffer.push_back(step);
        self.seen += 1;
        while self.buffer.len() > self.model.config.max_seq_len {
            self.buffer.pop_front();
        }
        let large = self.cfg.large();
        if self.seen < large || (self.seen - large) % self.cfg.step != 0 {
            return Ok(None);
        }
        let steps: Vec<Step> = self.buffer.iter().cloned().collect();
        let q = forward_prefix(self.model, &[], &steps)?;
        let off = q.len() - large;
        let rows: Vec<&[f64]> = (off..q.len()).map(|i| q.row(i)).collect();
        let actions: Vec<usize> = steps[steps.len() - large..].iter().map(|s| s.a).collect();
        let values: Vec<f64> = rows.iter().map(|r| state_value(r)).collect();
        let (f_ao, f_sa, degenerate) = score_window(&rows, &actions, &values, 0, &self.cfg)?;
        Ok(Some(FeaturePoint {
            traj_id: self.traj_id.clone(),
            window_end: self.seen - 1,
            f_ao,
            f_sa,
            degenerate,
            fallback: false,
        }))
    }
}
