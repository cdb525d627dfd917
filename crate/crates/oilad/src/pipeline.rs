//! Pipeline stages driven by a [`RunConfig`].

use oilad_core::eval::{self, DetectConfig, ResampledReport};
use oilad_core::iforest::IsoForest;
use oilad_core::mdp::{self, MdpSpec, ValueTables};
use oilad_core::policy::TransformerPolicy;
use oilad_core::rng::{self, derive_seed};
use oilad_core::training::{self, TrainHistory};
use oilad_core::traj::{self, Dataset, Trajectory};

use crate::config::{stage, Perturbation, RunConfig};
use crate::error::{Error, Result};

/// Environment plus its exact value tables.
pub struct World {
    pub env: MdpSpec,
    pub tables: ValueTables,
}

impl World {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let env = cfg.environment()?;
        let tables = mdp::value_iteration(&env, 1e-12);
        Ok(Self { env, tables })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

/// Normal trajectories (train split) or a labelled test pool.
pub fn generate(world: &World, cfg: &RunConfig, split: Split, seed: u64) -> Result<Dataset> {
    let d = &cfg.data;
    let max_len = cfg.env.max_len;
    match split {
        Split::Train => Ok(traj::gen_normal(&world.env, &world.tables, d.train_normal, max_len, derive_seed(seed, stage::TRAIN_DATA))?),
        Split::Test => {
            let base = derive_seed(seed, stage::TEST_DATA);
            let mut out = traj::gen_normal(&world.env, &world.tables, d.test_normal, max_len, derive_seed(base, 0))?.trajectories;
            out.extend(policy_anomalies(world, cfg, d.test_policy, derive_seed(base, 1))?);
            out.extend(perturbed_anomalies(world, cfg, d.test_perturbed, derive_seed(base, 2))?);
            Ok(Dataset::new(out))
        }
    }
}

/// Detoured copies of fresh normal trajectories. Sources admitting no detour
/// of the requested length are skipped.
pub fn policy_anomalies(world: &World, cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let d = &cfg.data;
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        if attempt > 20 * n as u64 + 100 {
            return Err(Error::Pipeline(format!(
                "could not place {n} detours of length {} (placed {})",
                d.detour_distance,
                out.len()
            )));
        }
        let src = traj::gen_normal(&world.env, &world.tables, 1, cfg.env.max_len, derive_seed(seed, 2 * attempt))?;
        match traj::inject_detour(&src.trajectories[0], &world.env, d.detour_distance, d.detour_proportion, derive_seed(seed, 2 * attempt + 1)) {
            Ok(mut t) => {
                t.id = format!("policy-{seed}-{}", out.len());
                out.push(t);
            }
            Err(traj::TrajError::NoDetour { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        attempt += 1;
    }
    Ok(out)
}

pub fn perturbed_anomalies(world: &World, cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let d = &cfg.data;
    let mut r = rng::stream(seed, 0);
    (0..n)
        .map(|i| {
            let s = derive_seed(seed, 1 + i as u64);
            let mut t = match d.perturbation {
                Perturbation::RandomActions => {
                    let start = world.env.sample_start(&mut r);
                    traj::perturb_actions(&world.env, &world.tables, start, d.random_action_prob, d.perturbed_max_len, s)?
                }
                Perturbation::StateNoise => {
                    let src = traj::gen_normal(&world.env, &world.tables, 1, cfg.env.max_len, s)?;
                    traj::perturb_states(&src.trajectories[0], d.state_noise_sigma, derive_seed(s, 1))?
                }
            };
            t.id = format!("perturbed-{seed}-{i}");
            Ok(t)
        })
        .collect()
}

pub fn train(world: &World, cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<(TransformerPolicy, TrainHistory)> {
    let model = TransformerPolicy::new(cfg.policy_config(&world.env), derive_seed(seed, stage::MODEL_INIT))?;
    Ok(training::train(model, data, &cfg.train_config(seed))?)
}

pub fn fit_boundary(model: &TransformerPolicy, train: &Dataset, detect: &DetectConfig) -> Result<IsoForest> {
    let normals: Vec<Trajectory> = train.normals().cloned().collect();
    if normals.is_empty() {
        return Err(Error::Pipeline("boundary fitting needs normal trajectories".into()));
    }
    Ok(eval::fit_boundary(model, &normals, detect)?)
}

pub fn evaluate(
    model: &TransformerPolicy,
    forest: &IsoForest,
    test: &Dataset,
    cfg: &RunConfig,
    detect: &DetectConfig,
    seed: u64,
) -> Result<ResampledReport> {
    Ok(eval::resampled_evaluate(model, forest, test, detect, &cfg.protocol(seed))?)
}
