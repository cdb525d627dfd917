//! Detection metrics, trajectory verdicts and model diagnostics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::features::{self, FeatureError, FeaturePoint, WindowConfig};
use crate::iforest::{ForestError, ForestParams, IsoForest};
use crate::math;
use crate::mdp::MdpSpec;
use crate::policy::{state_values, PolicyConfig, PolicyError, TransformerPolicy};
use crate::rng;
use crate::stats;
use crate::training::{self, Objectives, TrainConfig, TrainError};
use crate::traj::{Dataset, Label, TrajError, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no window predictions for trajectory")]
    NoWindows,
    #[error("need at least 3 paired values, got {0}")]
    TooFewPairs(usize),
    #[error("correlation undefined (constant series)")]
    Undefined,
    #[error("invalid evaluation setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Traj(#[from] TrajError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Records one verdict against its ground truth.
    pub fn record(&mut self, predicted_anomaly: bool, actual_anomaly: bool) {
        match (predicted_anomaly, actual_anomaly) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A denominator was zero and the affected metric was set to 0.
    pub degenerate: bool,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let mut degenerate = p.is_none() || r.is_none();
    let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Metrics { precision, recall, f1, degenerate }
}

/// Rule turning window predictions into a trajectory verdict.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictRule {
    #[default]
    AnyWindow,
    /// Anomalous when at least this fraction of windows is anomalous.
    Fraction(f64),
}

pub fn trajectory_verdict(windows: &[bool], rule: VerdictRule) -> Result<bool, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::NoWindows);
    }
    Ok(match rule {
        VerdictRule::AnyWindow => windows.iter().any(|&w| w),
        VerdictRule::Fraction(phi) => {
            let k = windows.iter().filter(|&&w| w).count();
            k as f64 >= phi * windows.len() as f64
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pcc: f64,
    pub scc: f64,
    pub pairs: usize,
}

/// Pearson and Spearman coefficients between paired series.
pub fn correlate(model_values: &[f64], truth: &[f64]) -> Result<Correlation, EvalError> {
    if model_values.len() != truth.len() {
        return Err(EvalError::Setup(format!("{} model values vs {} truth values", model_values.len(), truth.len())));
    }
    if truth.len() < 3 {
        return Err(EvalError::TooFewPairs(truth.len()));
    }
    let pcc = stats::pearson(model_values, truth).ok_or(EvalError::Undefined)?;
    let scc = stats::spearman(model_values, truth).ok_or(EvalError::Undefined)?;
    Ok(Correlation { pcc, scc, pairs: truth.len() })
}

/// Correlation between the model's state values and the ground-truth
/// values `truth[state]` over every visited `(trajectory, step)` pair.
pub fn value_correlation(
    model: &TransformerPolicy,
    env: &MdpSpec,
    trajectories: &[Trajectory],
    truth: &[f64],
) -> Result<Correlation, EvalError> {
    let (mut mv, mut tv) = (Vec::new(), Vec::new());
    for t in trajectories {
        let ids = t.state_ids(env)?;
        let max = model.config.max_seq_len;
        for chunk_start in (0..t.len()).step_by(max) {
            let end = (chunk_start + max).min(t.len());
            let q = model.q_values(&t.states()[chunk_start..end])?;
            mv.extend(state_values(&q));
            tv.extend(ids[chunk_start..end].iter().map(|&s| truth[s]));
        }
    }
    correlate(&mv, &tv)
}

/// Per-step check of `r_{t+1} ≤ Σ_{k=t+2..T} (1−γ) γ^{k−t−2} r_k` for the
/// reward sequence `r_1..r_T` (`rewards[i] = r_{i+1}`).
///
/// One boolean per transition that has a successor, i.e. `T − 1` entries.
pub fn increasing_value_condition(rewards: &[f64], gamma: f64) -> Vec<bool> {
    let t_len = rewards.len();
    (0..t_len.saturating_sub(1))
        .map(|t| {
            let rhs: f64 = (t + 1..t_len).map(|k| (1.0 - gamma) * math::powi(gamma, (k - t - 1) as i32) * rewards[k]).sum();
            rewards[t] <= rhs + 1e-12 * rhs.abs().max(1.0)
        })
        .collect()
}

/// Settings of the window-feature boundary detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub window: WindowConfig,
    pub forest: ForestParams,
    pub verdict: VerdictRule,
}

pub fn trajectory_features(
    model: &TransformerPolicy,
    trajectories: &[Trajectory],
    window: &WindowConfig,
) -> Result<Vec<Vec<FeaturePoint>>, EvalError> {
    trajectories.iter().map(|t| Ok(features::windowed_features(model, t, window)?)).collect()
}

/// Fits the boundary on every window of the (normal) training trajectories.
pub fn fit_boundary(
    model: &TransformerPolicy,
    normals: &[Trajectory],
    cfg: &DetectConfig,
) -> Result<IsoForest, EvalError> {
    if let Some(t) = normals.iter().find(|t| t.label != Label::Normal) {
        return Err(EvalError::Setup(format!("boundary training data contains anomalous trajectory {}", t.id)));
    }
    let points: Vec<[f64; 2]> = trajectory_features(model, normals, &cfg.window)?
        .iter()
        .flatten()
        .map(FeaturePoint::as_pair)
        .collect();
    Ok(IsoForest::fit(&points, &cfg.forest)?)
}

/// Window predictions and the trajectory verdict for one trajectory.
pub fn detect(
    model: &TransformerPolicy,
    forest: &IsoForest,
    traj: &Trajectory,
    cfg: &DetectConfig,
) -> Result<(Vec<bool>, bool), EvalError> {
    let pts = features::windowed_features(model, traj, &cfg.window)?;
    let preds = pts.iter().map(|p| forest.predict(&p.as_pair())).collect::<Result<Vec<_>, _>>()?;
    let verdict = trajectory_verdict(&preds, cfg.verdict)?;
    Ok((preds, verdict))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: Label,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn class(&self, label: Label) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn mean_f1(&self) -> f64 {
        stats::mean(&self.classes.iter().map(|c| c.metrics.f1).collect::<Vec<_>>())
    }
}

const ANOMALY_CLASSES: [Label; 2] = [Label::PolicyAnomaly, Label::PerturbedAnomaly];

/// Per-class report: each anomaly class is scored against all normal
/// trajectories of the set.
pub fn report_from_verdicts(labels: &[Label], verdicts: &[bool], seed: u64) -> EvalReport {
    let classes = ANOMALY_CLASSES
        .iter()
        .filter(|c| labels.contains(c))
        .map(|&class| {
            let mut counts = ConfusionCounts::default();
            for (&l, &v) in labels.iter().zip(verdicts) {
                if l == Label::Normal || l == class {
                    counts.record(v, l == class);
                }
            }
            ClassReport { label: class, counts, metrics: metrics(&counts) }
        })
        .collect();
    EvalReport { classes, seed, config: BTreeMap::new() }
}

pub fn evaluate(
    model: &TransformerPolicy,
    forest: &IsoForest,
    test: &Dataset,
    cfg: &DetectConfig,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut verdicts = Vec::with_capacity(test.len());
    for t in &test.trajectories {
        verdicts.push(detect(model, forest, t, cfg)?.1);
    }
    let labels: Vec<Label> = test.trajectories.iter().map(|t| t.label).collect();
    Ok(report_from_verdicts(&labels, &verdicts, seed))
}

/// Test sets drawn repeatedly from a larger pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestProtocol {
    pub normals: usize,
    /// Anomalies drawn per anomaly class.
    pub anomalies_per_class: usize,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for TestProtocol {
    fn default() -> Self {
        Self { normals: 180, anomalies_per_class: 10, resamples: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledReport {
    pub runs: Vec<EvalReport>,
    /// Mean metrics per anomaly class over the runs.
    pub mean: Vec<ClassReport>,
}

impl ResampledReport {
    pub fn mean_class(&self, label: Label) -> Option<&Metrics> {
        self.mean.iter().find(|c| c.label == label).map(|c| &c.metrics)
    }

    pub fn mean_f1(&self) -> f64 {
        stats::mean(&self.mean.iter().map(|c| c.metrics.f1).collect::<Vec<_>>())
    }
}

/// Evaluates `resamples` test sets drawn without replacement from `pool`.
/// Each pool trajectory is scored once; the resamples only pick indices.
pub fn resampled_evaluate(
    model: &TransformerPolicy,
    forest: &IsoForest,
    pool: &Dataset,
    cfg: &DetectConfig,
    protocol: &TestProtocol,
) -> Result<ResampledReport, EvalError> {
    let mut verdicts = Vec::with_capacity(pool.len());
    for t in &pool.trajectories {
        verdicts.push(detect(model, forest, t, cfg)?.1);
    }
    resample_verdicts(pool, &verdicts, protocol)
}

pub fn resample_verdicts(pool: &Dataset, verdicts: &[bool], protocol: &TestProtocol) -> Result<ResampledReport, EvalError> {
    if protocol.resamples == 0 {
        return Err(EvalError::Setup("resamples must be >= 1".into()));
    }
    let by_label = |l: Label| -> Vec<usize> { (0..pool.len()).filter(|&i| pool.trajectories[i].label == l).collect() };
    let normals = by_label(Label::Normal);
    if normals.len() < protocol.normals {
        return Err(EvalError::Setup(format!("pool has {} normal trajectories, need {}", normals.len(), protocol.normals)));
    }
    let mut runs = Vec::new();
    for run in 0..protocol.resamples {
        let mut r = rng::stream(protocol.seed, run as u64);
        let mut picked: Vec<usize> = normals.choose_multiple(&mut r, protocol.normals).copied().collect();
        for class in ANOMALY_CLASSES {
            let ix = by_label(class);
            if ix.is_empty() {
                continue;
            }
            if ix.len() < protocol.anomalies_per_class {
                return Err(EvalError::Setup(format!(
                    "pool has {} {} trajectories, need {}",
                    ix.len(),
                    class.as_str(),
                    protocol.anomalies_per_class
                )));
            }
            picked.extend(ix.choose_multiple(&mut r, protocol.anomalies_per_class));
        }
        picked.sort_unstable();
        let labels: Vec<Label> = picked.iter().map(|&i| pool.trajectories[i].label).collect();
        let v: Vec<bool> = picked.iter().map(|&i| verdicts[i]).collect();
        runs.push(report_from_verdicts(&labels, &v, rng::derive_seed(protocol.seed, run as u64)));
    }
    let mean = runs[0]
        .classes
        .iter()
        .map(|c| {
            let avg = |f: fn(&Metrics) -> f64| {
                stats::mean(&runs.iter().filter_map(|r| r.class(c.label)).map(|cr| f(&cr.metrics)).collect::<Vec<_>>())
            };
            let counts = runs.iter().filter_map(|r| r.class(c.label)).fold(ConfusionCounts::default(), |a, b| {
                ConfusionCounts { tp: a.tp + b.counts.tp, fp: a.fp + b.counts.fp, tn: a.tn + b.counts.tn, fn_: a.fn_ + b.counts.fn_ }
            });
            let degenerate = runs.iter().filter_map(|r| r.class(c.label)).any(|cr| cr.metrics.degenerate);
            ClassReport {
                label: c.label,
                counts,
                metrics: Metrics { precision: avg(|m| m.precision), recall: avg(|m| m.recall), f1: avg(|m| m.f1), degenerate },
            }
        })
        .collect();
    Ok(ResampledReport { runs, mean })
}

/// One arm of the objective ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub objectives: Objectives,
    pub report: ResampledReport,
}

/// Trains one model per objective set with identical seeds and evaluates
/// each identically.
pub fn ablation_run(
    train_data: &Dataset,
    pool: &Dataset,
    model_cfg: &PolicyConfig,
    model_seed: u64,
    train_cfg: &TrainConfig,
    detect_cfg: &DetectConfig,
    protocol: &TestProtocol,
) -> Result<Vec<AblationRow>, EvalError> {
    let normals: Vec<Trajectory> = train_data.normals().cloned().collect();
    [Objectives::ActionOnly, Objectives::MonotonicityOnly, Objectives::Both]
        .into_iter()
        .map(|objectives| {
            let cfg = TrainConfig { objectives, ..train_cfg.clone() };
            let model = TransformerPolicy::new(model_cfg.clone(), model_seed)?;
            let (model, _) = training::train(model, train_data, &cfg)?;
            let forest = fit_boundary(&model, &normals, detect_cfg)?;
            let report = resampled_evaluate(&model, &forest, pool, detect_cfg, protocol)?;
            Ok(AblationRow { objectives, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub report: ResampledReport,
}

/// Re-extracts features and re-fits the boundary for each window size
/// (`w_q = w_v = w`).
pub fn window_sweep(
    model: &TransformerPolicy,
    train_normals: &[Trajectory],
    pool: &Dataset,
    windows: &[usize],
    base: &DetectConfig,
    protocol: &TestProtocol,
) -> Result<Vec<SweepRow>, EvalError> {
    windows
        .iter()
        .map(|&w| {
            let cfg = DetectConfig { window: WindowConfig { w_q: w, w_v: w, ..base.window }, ..*base };
            let forest = fit_boundary(model, train_normals, &cfg)?;
            let report = resampled_evaluate(model, &forest, pool, &cfg, protocol)?;
            Ok(SweepRow { window: w, report })
        })
        .collect()
}

/// Window sizes at the given proportions of the mean trajectory length,
/// clamped to `[2, shortest length]` and deduplicated.
pub fn proportional_windows(trajectories: &[Trajectory], proportions: &[f64]) -> Vec<usize> {
    if trajectories.is_empty() {
        return Vec::new();
    }
    let lens: Vec<f64> = trajectories.iter().map(|t| t.len() as f64).collect();
    let mean = stats::mean(&lens);
    let min = trajectories.iter().map(Trajectory::len).min().unwrap_or(2).max(2);
    let mut out: Vec<usize> =
        proportions.iter().map(|p| (math::round(p * mean) as usize).clamp(2, min)).collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let c = ConfusionCounts { tp: 8, fp: 2, tn: 0, fn_: 2 };
        let m = metrics(&c);
        assert!((m.precision - 0.8).abs() < 1e-15 && (m.recall - 0.8).abs() < 1e-15 && (m.f1 - 0.8).abs() < 1e-15);
        assert!(!m.degenerate);
        let z = metrics(&ConfusionCounts::default());
        assert_eq!((z.precision, z.recall, z.f1, z.degenerate), (0.0, 0.0, 0.0, true));
        let k = ConfusionCounts { tp: 24, fp: 6, tn: 5, fn_: 6 };
        assert_eq!(metrics(&k).f1, m.f1);
    }

    #[test]
    fn verdict_rules() {
        let mut w = [false; 50];
        assert!(!trajectory_verdict(&w, VerdictRule::AnyWindow).unwrap());
        w[17] = true;
        assert!(trajectory_verdict(&w, VerdictRule::AnyWindow).unwrap());
        w[1] = true;
        w[2] = true;
        w[3] = true;
        assert!(!trajectory_verdict(&w, VerdictRule::Fraction(0.1)).unwrap());
        assert!(trajectory_verdict(&[], VerdictRule::AnyWindow).is_err());
    }

    #[test]
    fn theorem_examples() {
        for g in [0.0, 0.5, 0.9, 0.99] {
            assert!(increasing_value_condition(&[-1.0; 30], g).iter().all(|&b| b));
        }
        assert_eq!(increasing_value_condition(&[-1.0, -1.0, 10.0], 0.9), vec![true, true]);
        assert!(!increasing_value_condition(&[5.0, -1.0, -1.0], 0.9)[0]);
        assert!(increasing_value_condition(&[-1.0], 0.9).is_empty());
    }

    #[test]
    fn affine_and_random_correlation() {
        let truth: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let affine: Vec<f64> = truth.iter().map(|v| 3.0 * v - 2.0).collect();
        let c = correlate(&affine, &truth).unwrap();
        assert!((c.pcc - 1.0).abs() < 1e-12 && (c.scc - 1.0).abs() < 1e-12);
        use rand::Rng as _;
        let mut r = rng::stream(5, 0);
        let a: Vec<f64> = (0..1000).map(|_| r.gen()).collect();
        let b: Vec<f64> = (0..1000).map(|_| r.gen()).collect();
        assert!(correlate(&a, &b).unwrap().pcc.abs() < 0.1);
        assert!(matches!(correlate(&a[..2], &b[..2]), Err(EvalError::TooFewPairs(2))));
    }

    #[test]
    fn per_class_reports() {
        let labels = [Label::Normal, Label::Normal, Label::PolicyAnomaly, Label::PerturbedAnomaly];
        let r = report_from_verdicts(&labels, &[false, true, true, false], 0);
        let p = r.class(Label::PolicyAnomaly).unwrap();
        assert_eq!(p.counts, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 0 });
        let q = r.class(Label::PerturbedAnomaly).unwrap();
        assert_eq!(q.counts, ConfusionCounts { tp: 0, fp: 1, tn: 1, fn_: 1 });
    }
}
