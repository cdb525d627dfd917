//! Run configuration (TOML).
//!
//! Every field has a default, so an empty file (or no file) is a valid
//! configuration for the built-in 15×15 three-goal gridworld. Individual
//! fields can be overridden with `--set section.key=value`.
//!
//! ```toml
//! seed = 0
//!
//! [env]
//! name = "three-goal-15"     # "three-goal-15" | "taxi" | "grid"
//! grid_file = "world.txt"    # required when name = "grid"
//! discount = 0.9             # taxi only; grid files carry their own
//! max_len = 200
//!
//! [data]
//! train_normal = 2000
//! test_normal = 900
//! test_policy = 100
//! test_perturbed = 100
//! detour_distance = 6.0
//! detour_proportion = 0.5
//! perturbation = "random-actions"   # or "state-noise"
//! random_action_prob = 0.4
//! state_noise_sigma = 0.05
//! perturbed_max_len = 100
//!
//! [model]
//! embed_dim = 32
//! layer_count = 1
//! head_count = 2
//! dropout = 0.1
//! max_seq_len = 512
//! ffn_dim = 64
//!
//! [train]
//! iterations = 600
//! # monotonicity_start = 300   (default: iterations / 2)
//! alpha = 0.05
//! batch_size = 16
//! monotonicity_batch = 16
//! action_lr = 1e-3
//! monotonicity_lr = 2e-4
//! schedule = "constant"      # or "triangular"
//! cycle_floor = 0.1          # triangular: lowest lr as a fraction of the peak
//! cycle_steps = 100          # triangular: half-cycle length in iterations
//! weight_decay = 0.01
//! rank_strength = 1.0
//! clip_norm = 1.0            # 0 disables clipping
//! objectives = "both"        # "action_only" | "monotonicity_only" | "both"
//!
//! [detect]
//! w_q = 5
//! w_v = 5
//! step = 1
//! downsample = "most-anomalous"
//! n_trees = 100
//! # subsample = 256          (default: min(256, N))
//! contamination = 0.002
//! # verdict_fraction = 0.1   (default: any window)
//!
//! [eval]
//! test_normals = 180
//! anomalies_per_class = 10
//! resamples = 5
//!
//! [paths]
//! train_data = "data/train.jsonl"
//! test_data = "data/test.jsonl"
//! checkpoint = "model.ckpt"
//! forest = "forest.json"
//! reports = "reports"
//! ```

use std::path::{Path, PathBuf};

use oilad_core::autodiff::AdamWConfig;
use oilad_core::eval::{DetectConfig, TestProtocol, VerdictRule};
use oilad_core::features::{Downsample, WindowConfig};
use oilad_core::iforest::ForestParams;
use oilad_core::mdp::{GridWorld, MdpSpec, TaxiWorld};
use oilad_core::policy::PolicyConfig;
use oilad_core::rng::derive_seed;
use oilad_core::training::{LrSchedule, Objectives, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "OILAD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub env: EnvSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub detect: DetectSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub name: String,
    pub grid_file: Option<PathBuf>,
    pub discount: f64,
    pub max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    RandomActions,
    StateNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_policy: usize,
    pub test_perturbed: usize,
    pub detour_distance: f64,
    pub detour_proportion: f64,
    pub perturbation: Perturbation,
    pub random_action_prob: f64,
    pub state_noise_sigma: f64,
    pub perturbed_max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Triangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub monotonicity_start: Option<usize>,
    pub alpha: f64,
    pub batch_size: usize,
    pub monotonicity_batch: usize,
    pub action_lr: f64,
    pub monotonicity_lr: f64,
    pub schedule: Schedule,
    pub cycle_floor: f64,
    pub cycle_steps: usize,
    pub weight_decay: f64,
    pub rank_strength: f64,
    pub clip_norm: f64,
    pub objectives: Objectives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub w_q: usize,
    pub w_v: usize,
    pub step: usize,
    pub downsample: Downsample,
    pub n_trees: usize,
    pub subsample: Option<usize>,
    pub contamination: f64,
    pub verdict_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub test_normals: usize,
    pub anomalies_per_class: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub checkpoint: PathBuf,
    pub forest: PathBuf,
    pub reports: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            env: EnvSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            detect: DetectSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Default for EnvSection {
    fn default() -> Self {
        Self { name: "three-goal-15".into(), grid_file: None, discount: 0.9, max_len: 200 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_normal: 2000,
            test_normal: 900,
            test_policy: 100,
            test_perturbed: 100,
            detour_distance: 6.0,
            detour_proportion: 0.5,
            perturbation: Perturbation::RandomActions,
            random_action_prob: 0.4,
            state_noise_sigma: 0.05,
            perturbed_max_len: 100,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = PolicyConfig::small(1, 1);
        Self {
            embed_dim: p.embed_dim,
            layer_count: p.layer_count,
            head_count: p.head_count,
            dropout: p.dropout,
            max_seq_len: p.max_seq_len,
            ffn_dim: p.ffn_dim,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let lr = |s: LrSchedule| match s {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Triangular { high, .. } => high,
        };
        Self {
            iterations: t.iterations,
            monotonicity_start: None,
            alpha: t.alpha,
            batch_size: t.batch_size,
            monotonicity_batch: t.monotonicity_batch,
            action_lr: lr(t.action_lr),
            monotonicity_lr: lr(t.monotonicity_lr),
            schedule: Schedule::Constant,
            cycle_floor: 0.1,
            cycle_steps: 100,
            weight_decay: t.optimizer.weight_decay,
            rank_strength: t.rank_strength,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            objectives: t.objectives,
        }
    }
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            w_q: 5,
            w_v: 5,
            step: 1,
            downsample: Downsample::MostAnomalous,
            n_trees: 100,
            subsample: None,
            contamination: 0.002,
            verdict_fraction: None,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = TestProtocol::default();
        Self { test_normals: p.normals, anomalies_per_class: p.anomalies_per_class, resamples: p.resamples }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            train_data: "data/train.jsonl".into(),
            test_data: "data/test.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            forest: "forest.json".into(),
            reports: "reports".into(),
        }
    }
}

/// Sub-seed indices of the pipeline stages.
pub mod stage {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const TRAINING: u64 = 4;
    pub const FOREST: u64 = 5;
    pub const PROTOCOL: u64 = 6;
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{raw}` must look like section.key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    let text = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()));
    Ok((path, parsed))
}

impl RunConfig {
    /// Parses TOML text and applies `section.key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            let mut cursor = &mut table;
            for part in &path[..path.len() - 1] {
                cursor = cursor
                    .entry(part.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Usage(format!("`{part}` in override `{raw}` is not a section")))?;
            }
            cursor.insert(path[path.len() - 1].clone(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let (Some(p), Some(grid)) = (path, cfg.env.grid_file.as_ref()) {
            if grid.is_relative() {
                if let Some(dir) = p.parent() {
                    cfg.env.grid_file = Some(dir.join(grid));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.env.name.as_str() {
            "three-goal-15" | "taxi" => {}
            "grid" if self.env.grid_file.is_some() => {}
            "grid" => return bad("env.name = \"grid\" requires env.grid_file".into()),
            other => return bad(format!("unknown env.name `{other}`")),
        }
        if !(0.0..1.0).contains(&self.env.discount) {
            return bad(format!("env.discount must lie in [0, 1), got {}", self.env.discount));
        }
        if self.env.max_len == 0 || self.data.perturbed_max_len == 0 {
            return bad("episode length limits must be positive".into());
        }
        self.window().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..0.5).contains(&self.detect.contamination) {
            return bad(format!("detect.contamination must lie in [0, 0.5), got {}", self.detect.contamination));
        }
        if let Some(phi) = self.detect.verdict_fraction {
            if !(phi > 0.0 && phi <= 1.0) {
                return bad(format!("detect.verdict_fraction must lie in (0, 1], got {phi}"));
            }
        }
        if self.train.schedule == Schedule::Triangular && (self.train.cycle_steps == 0 || !(self.train.cycle_floor > 0.0)) {
            return bad("triangular schedule needs cycle_steps > 0 and cycle_floor > 0".into());
        }
        self.train_config(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Flag value, then the config file, then `OILAD_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn environment(&self) -> Result<MdpSpec> {
        let spec = match self.env.name.as_str() {
            "three-goal-15" => GridWorld::three_goal_15().compile()?,
            "taxi" => TaxiWorld::new(self.env.discount).compile()?,
            _ => {
                let path = self.env.grid_file.as_ref().expect("validated");
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                GridWorld::parse(&text).map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?.compile()?
            }
        };
        Ok(spec)
    }

    pub fn policy_config(&self, env: &MdpSpec) -> PolicyConfig {
        let m = &self.model;
        PolicyConfig {
            state_dim: env.state_dim(),
            action_count: env.action_count(),
            embed_dim: m.embed_dim,
            layer_count: m.layer_count,
            head_count: m.head_count,
            dropout: m.dropout,
            max_seq_len: m.max_seq_len,
            ffn_dim: m.ffn_dim,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        let sched = |lr: f64| match t.schedule {
            Schedule::Constant => LrSchedule::Constant { lr },
            Schedule::Triangular => LrSchedule::Triangular { low: lr * t.cycle_floor, high: lr, step_size: t.cycle_steps },
        };
        TrainConfig {
            iterations: t.iterations,
            monotonicity_start: t.monotonicity_start,
            alpha: t.alpha,
            batch_size: t.batch_size,
            monotonicity_batch: t.monotonicity_batch,
            action_lr: sched(t.action_lr),
            monotonicity_lr: sched(t.monotonicity_lr),
            optimizer: AdamWConfig { weight_decay: t.weight_decay, ..AdamWConfig::default() },
            rank_strength: t.rank_strength,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            objectives: t.objectives,
            seed: derive_seed(seed, stage::TRAINING),
        }
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig { w_q: self.detect.w_q, w_v: self.detect.w_v, step: self.detect.step, downsample: self.detect.downsample }
    }

    pub fn detect_config(&self, seed: u64) -> DetectConfig {
        DetectConfig {
            window: self.window(),
            forest: ForestParams {
                n_trees: self.detect.n_trees,
                subsample: self.detect.subsample,
                contamination: self.detect.contamination,
                seed: derive_seed(seed, stage::FOREST),
            },
            verdict: self.detect.verdict_fraction.map_or(VerdictRule::AnyWindow, VerdictRule::Fraction),
        }
    }

    pub fn protocol(&self, seed: u64) -> TestProtocol {
        TestProtocol {
            normals: self.eval.test_normals,
            anomalies_per_class: self.eval.anomalies_per_class,
            resamples: self.eval.resamples,
            seed: derive_seed(seed, stage::PROTOCOL),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = RunConfig::from_toml("[train]\niterations = 10\n", &["detect.w_q=7".into(), "env.name=taxi".into()]).unwrap();
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.detect.w_q, 7);
        assert_eq!(cfg.env.name, "taxi");
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["detect.contamination=0.7".into()]).is_err());
        assert!(RunConfig::from_toml("", &["env.name=grid".into()]).is_err());
        assert!(RunConfig::from_toml("", &["detect.w_v=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["nokey".into()]).is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(4);
        assert_eq!(cfg.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(cfg.resolve_seed(None).unwrap(), 4);
    }
}
