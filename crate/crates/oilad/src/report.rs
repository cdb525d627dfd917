//! CSV tables and console summaries.

use std::path::Path;

use oilad_core::eval::{AblationRow, ClassReport, ResampledReport, SweepRow};
use oilad_core::features::FeaturePoint;
use oilad_core::training::TrainHistory;
use oilad_core::traj::Label;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::atomic_write;

fn to_csv<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Pipeline(e.to_string()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    atomic_write(path, &to_csv(rows)?)
}

#[derive(Serialize)]
struct HistoryCsv {
    iteration: usize,
    action_loss: Option<f64>,
    monotonicity_loss: Option<f64>,
}

pub fn history_rows(h: &TrainHistory) -> impl Iterator<Item = impl Serialize> + '_ {
    h.rows.iter().map(|r| HistoryCsv {
        iteration: r.iteration,
        action_loss: r.action_loss,
        monotonicity_loss: r.monotonicity_loss,
    })
}

#[derive(Serialize)]
pub struct FeatureCsv<'a> {
    pub traj_id: &'a str,
    pub window_end: usize,
    #[serde(rename = "f_AO")]
    pub f_ao: f64,
    #[serde(rename = "f_SA")]
    pub f_sa: f64,
    pub label: &'static str,
}

impl<'a> FeatureCsv<'a> {
    pub fn new(p: &'a FeaturePoint, label: Label) -> Self {
        Self { traj_id: &p.traj_id, window_end: p.window_end, f_ao: p.f_ao, f_sa: p.f_sa, label: label.as_str() }
    }
}

#[derive(Serialize)]
struct ClassCsv {
    class: &'static str,
    recall: f64,
    precision: f64,
    f1: f64,
    tp: u64,
    fp: u64,
    tn: u64,
    #[serde(rename = "fn")]
    fn_: u64,
}

fn class_row(c: &ClassReport) -> ClassCsv {
    ClassCsv {
        class: c.label.as_str(),
        recall: c.metrics.recall,
        precision: c.metrics.precision,
        f1: c.metrics.f1,
        tp: c.counts.tp,
        fp: c.counts.fp,
        tn: c.counts.tn,
        fn_: c.counts.fn_,
    }
}

/// Mean per-class metrics; the counts are summed over all resamples.
pub fn report_csv(path: &Path, r: &ResampledReport) -> Result<()> {
    write_csv(path, r.mean.iter().map(class_row))
}

fn f1_of(r: &ResampledReport, l: Label) -> Option<f64> {
    r.mean_class(l).map(|m| m.f1)
}

#[derive(Serialize)]
struct AblationCsv {
    objectives: &'static str,
    policy_anomaly_f1: Option<f64>,
    perturbed_anomaly_f1: Option<f64>,
    mean_f1: f64,
}

pub fn ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(
        path,
        rows.iter().map(|r| AblationCsv {
            objectives: match r.objectives {
                oilad_core::training::Objectives::ActionOnly => "action_only",
                oilad_core::training::Objectives::MonotonicityOnly => "monotonicity_only",
                oilad_core::training::Objectives::Both => "both",
            },
            policy_anomaly_f1: f1_of(&r.report, Label::PolicyAnomaly),
            perturbed_anomaly_f1: f1_of(&r.report, Label::PerturbedAnomaly),
            mean_f1: r.report.mean_f1(),
        }),
    )
}

#[derive(Serialize)]
struct SweepCsv {
    window: usize,
    policy_anomaly_f1: Option<f64>,
    perturbed_anomaly_f1: Option<f64>,
    mean_f1: f64,
}

pub fn sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(
        path,
        rows.iter().map(|r| SweepCsv {
            window: r.window,
            policy_anomaly_f1: f1_of(&r.report, Label::PolicyAnomaly),
            perturbed_anomaly_f1: f1_of(&r.report, Label::PerturbedAnomaly),
            mean_f1: r.report.mean_f1(),
        }),
    )
}

/// Recall, precision and F1 (percent) per anomaly class.
pub fn format_table(r: &ResampledReport) -> String {
    let mut s = format!("{:<20} {:>7} {:>7} {:>7}\n", "class", "R", "P", "F1");
    for c in &r.mean {
        s.push_str(&format!(
            "{:<20} {:>7.1} {:>7.1} {:>7.1}{}\n",
            c.label.as_str(),
            100.0 * c.metrics.recall,
            100.0 * c.metrics.precision,
            100.0 * c.metrics.f1,
            if c.metrics.degenerate { "  (degenerate)" } else { "" }
        ));
    }
    s
}
