//! Trajectories, expert datasets and the two anomaly classes.
//!
//! Policy anomalies replace a contiguous part of a normal trajectory with a
//! longer detour between the same endpoints. Perturbed anomalies either take
//! random actions with probability `ω` or add Gaussian measurement noise to
//! recorded states.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mdp::{self, MdpError, MdpSpec, Rollout, ValueTables};
use crate::math;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajError {
    #[error("invalid anomaly parameters: {0}")]
    InvalidParams(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("trajectory {0} is not labelled normal")]
    NotNormal(String),
    #[error("state vector of trajectory {id} at step {step} is not a state of the environment")]
    UnknownState { id: String, step: usize },
    #[error("no detour with extra length >= {d} between the segment endpoints")]
    NoDetour { d: f64 },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    PolicyAnomaly,
    PerturbedAnomaly,
}

impl Label {
    pub fn is_anomaly(self) -> bool {
        self != Label::Normal
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::PolicyAnomaly => "policy_anomaly",
            Label::PerturbedAnomaly => "perturbed_anomaly",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub s: Vec<f64>,
    pub a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub label: Label,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.s.clone()).collect()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.a).collect()
    }

    /// Encodes a rollout over state ids. The final (post-action) state is
    /// not a step.
    pub fn from_rollout(env: &MdpSpec, roll: &Rollout, id: impl Into<String>, label: Label) -> Self {
        let steps = roll
            .states
            .iter()
            .zip(&roll.actions)
            .map(|(&s, &a)| Step { s: env.encode(s).to_vec(), a })
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("env".into(), env.name.clone());
        Self { id: id.into(), label, steps, meta }
    }

    /// State ids of every step, by exact encoding match.
    pub fn state_ids(&self, env: &MdpSpec) -> Result<Vec<usize>, TrajError> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, st)| env.decode(&st.s).ok_or(TrajError::UnknownState { id: self.id.clone(), step: i }))
            .collect()
    }

    /// Structural invariants: non-empty, consistent state width, valid
    /// actions.
    pub fn validate(&self, action_count: usize) -> Result<(), TrajError> {
        let Some(first) = self.steps.first() else {
            return Err(TrajError::Config(format!("trajectory {} is empty", self.id)));
        };
        let dim = first.s.len();
        for (i, st) in self.steps.iter().enumerate() {
            if st.s.len() != dim {
                return Err(TrajError::Config(format!("trajectory {} step {i}: state width changes", self.id)));
            }
            if st.a >= action_count {
                return Err(TrajError::Config(format!("trajectory {} step {i}: action {} out of range", self.id, st.a)));
            }
        }
        Ok(())
    }

    /// Whether each recorded action leads to the next recorded state.
    pub fn is_dynamics_consistent(&self, env: &MdpSpec) -> bool {
        let Ok(ids) = self.state_ids(env) else { return false };
        ids.windows(2).zip(&self.steps).all(|(w, st)| env.step(w[0], st.a).map(|t| t.next == w[1]).unwrap_or(false))
    }
}

/// Parameters of one anomaly injection. `ρ` is the detoured proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnomalyParams {
    Detour { distance: f64, proportion: f64 },
    RandomActions { prob: f64 },
    StateNoise { sigma: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Fraction of trajectories with an anomaly label.
    pub fn anomaly_rate(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let n = self.trajectories.iter().filter(|t| t.label.is_anomaly()).count();
        n as f64 / self.trajectories.len() as f64
    }

    pub fn normals(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.label == Label::Normal)
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(move |t| t.label == label)
    }

    /// Seeded shuffle split; the first part receives `round(frac · n)`
    /// trajectories.
    pub fn split(&self, frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, 0x5911));
        let k = math::round(frac.clamp(0.0, 1.0) * self.len() as f64) as usize;
        let pick = |ix: &[usize]| Dataset::new(ix.iter().map(|&i| self.trajectories[i].clone()).collect());
        (pick(&idx[..k]), pick(&idx[k..]))
    }
}

/// `n` expert trajectories from starts drawn from the start distribution.
/// Degenerate (zero-step) rollouts are resampled.
pub fn gen_normal(
    env: &MdpSpec,
    tables: &ValueTables,
    n: usize,
    max_len: usize,
    seed: u64,
) -> Result<Dataset, TrajError> {
    if env.start_states().iter().all(|&(s, w)| env.is_terminal(s) || w == 0.0) {
        return Err(TrajError::Config("no non-terminal start state".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        let roll = loop {
            let start = env.sample_start(&mut r);
            let roll = mdp::greedy_rollout(env, tables, start, max_len)?;
            if !roll.is_empty() {
                break roll;
            }
        };
        let mut t = Trajectory::from_rollout(env, &roll, format!("normal-{seed}-{i}"), Label::Normal);
        t.meta.insert("seed".into(), seed.to_string());
        t.meta.insert("start".into(), roll.states[0].to_string());
        out.push(t);
    }
    Ok(Dataset::new(out))
}

/// Replaces a contiguous part of proportion `proportion` of `traj` by a
/// detour whose length exceeds the replaced part by at least `distance`.
///
/// The first and last steps are kept, so the segment spans at most `T − 1`
/// transitions. The detour routes through a random waypoint via shortest
/// paths; waypoints giving an extra length in `[d, d + 2]` are preferred.
pub fn inject_detour(
    traj: &Trajectory,
    env: &MdpSpec,
    distance: f64,
    proportion: f64,
    seed: u64,
) -> Result<Trajectory, TrajError> {
    if !(distance > 0.0) {
        return Err(TrajError::InvalidParams(format!("detour distance must be positive, got {distance}")));
    }
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(TrajError::InvalidParams(format!("detour proportion must lie in (0, 1], got {proportion}")));
    }
    if traj.label != Label::Normal {
        return Err(TrajError::NotNormal(traj.id.clone()));
    }
    let ids = traj.state_ids(env)?;
    let t = ids.len();
    if t < 2 {
        return Err(TrajError::NoDetour { d: distance });
    }
    let mut r = rng::stream(seed, 0xde70);
    let seg = (math::round(proportion * t as f64) as usize).clamp(1, t - 1);
    let i = r.gen_range(0..=t - 1 - seg);
    let j = i + seg;
    let (from, to) = (ids[i], ids[j]);
    let d_from = env.distances_from(from);
    let d_to = env.distances_to(to);
    let mut candidates: Vec<(usize, usize)> = (0..env.state_count())
        .filter(|&w| !env.is_terminal(w))
        .filter_map(|w| {
            let total = d_from[w]? + d_to[w]?;
            (total >= seg && (total - seg) as f64 >= distance).then_some((w, total - seg))
        })
        .collect();
    if candidates.is_empty() {
        return Err(TrajError::NoDetour { d: distance });
    }
    let snug: Vec<(usize, usize)> =
        candidates.iter().copied().filter(|&(_, extra)| (extra as f64) <= distance + 2.0).collect();
    if !snug.is_empty() {
        candidates = snug;
    } else {
        let least = candidates.iter().map(|c| c.1).min().unwrap_or(0);
        candidates.retain(|c| c.1 == least);
    }
    let (waypoint, extra) = candidates[r.gen_range(0..candidates.len())];
    let first = env.shortest_path(from, waypoint).ok_or(TrajError::NoDetour { d: distance })?;
    let second = env.shortest_path(waypoint, to).ok_or(TrajError::NoDetour { d: distance })?;

    let mut steps: Vec<Step> = traj.steps[..i].to_vec();
    steps.extend(first.iter().chain(&second).map(|&(s, a)| Step { s: env.encode(s).to_vec(), a }));
    steps.extend_from_slice(&traj.steps[j..]);
    let mut meta = traj.meta.clone();
    meta.insert("source".into(), traj.id.clone());
    meta.insert("detour_d".into(), distance.to_string());
    meta.insert("detour_rho".into(), proportion.to_string());
    meta.insert("detour_extra".into(), extra.to_string());
    meta.insert("detour_segment".into(), format!("{i}..{j}"));
    Ok(Trajectory { id: format!("{}-detour", traj.id), label: Label::PolicyAnomaly, steps, meta })
}

/// Rollout taking a uniformly random action with probability `prob` and the
/// greedy action otherwise. Accepts `prob = 0` (the greedy rollout).
pub fn random_action_rollout(
    env: &MdpSpec,
    tables: &ValueTables,
    start: usize,
    prob: f64,
    max_len: usize,
    seed: u64,
) -> Result<Rollout, TrajError> {
    let mut r = rng::stream(seed, 0xacc7);
    let na = env.action_count();
    Ok(mdp::rollout_with(env, start, max_len, |s| {
        if prob > 0.0 && r.gen::<f64>() < prob {
            r.gen_range(0..na)
        } else {
            tables.policy[s]
        }
    })?)
}

/// Perturbed-anomaly rollout with random-action probability `prob` in
/// `(0, 1]`, truncated at `max_len` when the goal is not reached.
pub fn perturb_actions(
    env: &MdpSpec,
    tables: &ValueTables,
    start: usize,
    prob: f64,
    max_len: usize,
    seed: u64,
) -> Result<Trajectory, TrajError> {
    if !(prob > 0.0 && prob <= 1.0) {
        return Err(TrajError::InvalidParams(format!("random-action probability must lie in (0, 1], got {prob}")));
    }
    let roll = random_action_rollout(env, tables, start, prob, max_len, seed)?;
    let mut t = Trajectory::from_rollout(env, &roll, format!("perturbed-{seed}"), Label::PerturbedAnomaly);
    t.meta.insert("omega".into(), prob.to_string());
    t.meta.insert("seed".into(), seed.to_string());
    t.meta.insert("start".into(), start.to_string());
    Ok(t)
}

/// Adds independent `N(0, σ²)` noise to every recorded state component.
/// Actions are unchanged.
pub fn perturb_states(traj: &Trajectory, sigma: f64, seed: u64) -> Result<Trajectory, TrajError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TrajError::InvalidParams(format!("noise sigma must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| TrajError::InvalidParams(format!("{e}")))?;
    let mut r = rng::stream(seed, 0x5e7a);
    let mut out = traj.clone();
    for st in &mut out.steps {
        for x in &mut st.s {
            *x += normal.sample(&mut r);
        }
    }
    out.id = format!("{}-noise", traj.id);
    out.label = Label::PerturbedAnomaly;
    out.meta.insert("source".into(), traj.id.clone());
    out.meta.insert("state_noise_sigma".into(), sigma.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{value_iteration, GridWorld};

    fn setup() -> (GridWorld, MdpSpec, ValueTables) {
        let g = GridWorld::three_goal_15();
        let env = g.compile().unwrap();
        let vt = value_iteration(&env, 1e-8);
        (g, env, vt)
    }

    #[test]
    fn gen_normal_single_start_and_determinism() {
        let mut g = GridWorld::open(5, 5, alloc::vec![((4, 4), 0.0)], -1.0, 0.9);
        g.starts = alloc::vec![(0, 0)];
        let env = g.compile().unwrap();
        let vt = value_iteration(&env, 1e-8);
        let ds = gen_normal(&env, &vt, 1, 100, 4).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.trajectories[0].label, Label::Normal);
        assert_eq!(ds.trajectories[0].len(), 8);
        assert_eq!(ds.anomaly_rate(), 0.0);

        let (_, env, vt) = setup();
        assert_eq!(gen_normal(&env, &vt, 30, 200, 9).unwrap(), gen_normal(&env, &vt, 30, 200, 9).unwrap());
    }

    #[test]
    fn every_expert_trajectory_reaches_a_goal() {
        let (_, env, vt) = setup();
        let ds = gen_normal(&env, &vt, 2000, 200, 1).unwrap();
        for t in &ds.trajectories {
            let ids = t.state_ids(&env).unwrap();
            let last = *ids.last().unwrap();
            let next = env.step(last, t.steps.last().unwrap().a).unwrap();
            assert!(next.done, "{} does not end in a goal", t.id);
            assert!(t.is_dynamics_consistent(&env));
        }
    }

    #[test]
    fn detour_adds_required_extra_length() {
        let (_, env, vt) = setup();
        let ds = gen_normal(&env, &vt, 200, 200, 2).unwrap();
        let mut made = 0;
        for (k, t) in ds.trajectories.iter().enumerate() {
            let Ok(a) = inject_detour(t, &env, 4.0, 0.5, k as u64) else { continue };
            made += 1;
            assert_eq!(a.label, Label::PolicyAnomaly);
            assert!(a.is_dynamics_consistent(&env));
            assert_eq!(a.steps[0].s, t.steps[0].s);
            assert_eq!(a.steps.last().unwrap().s, t.steps.last().unwrap().s);
            // recompute the replaced and replacement lengths independently
            let extra = a.len() as i64 - t.len() as i64;
            let seg: Vec<usize> =
                a.meta["detour_segment"].split("..").map(|x| x.parse().unwrap()).collect();
            let replaced = seg[1] - seg[0];
            let replacement = replaced as i64 + extra;
            assert!(extra >= 4, "extra {extra}");
            assert!(replacement > replaced as i64);
        }
        assert!(made > 150);
    }

    #[test]
    fn detour_preconditions() {
        let (_, env, vt) = setup();
        let t = &gen_normal(&env, &vt, 1, 200, 3).unwrap().trajectories[0];
        assert!(matches!(inject_detour(t, &env, 4.0, 0.0, 0), Err(TrajError::InvalidParams(_))));
        assert!(matches!(inject_detour(t, &env, 0.0, 0.5, 0), Err(TrajError::InvalidParams(_))));
        let mut anomalous = t.clone();
        anomalous.label = Label::PolicyAnomaly;
        assert!(matches!(inject_detour(&anomalous, &env, 4.0, 0.5, 0), Err(TrajError::NotNormal(_))));
        assert!(matches!(inject_detour(t, &env, 1e6, 0.5, 0), Err(TrajError::NoDetour { .. })));
    }

    #[test]
    fn zero_random_probability_is_the_greedy_rollout() {
        let (_, env, vt) = setup();
        for &(s, _) in env.start_states() {
            let greedy = mdp::greedy_rollout(&env, &vt, s, 200).unwrap();
            let r = random_action_rollout(&env, &vt, s, 0.0, 200, 99).unwrap();
            assert_eq!(greedy, r);
        }
        assert!(perturb_actions(&env, &vt, env.start_states()[0].0, 0.0, 200, 0).is_err());
    }

    #[test]
    fn fully_random_actions_hit_expected_frequency() {
        let (_, env, vt) = setup();
        let start = env.start_states()[0].0;
        let (mut off, mut total) = (0usize, 0usize);
        let mut seed = 0;
        while total < 10_000 {
            let t = perturb_actions(&env, &vt, start, 1.0, 500, seed).unwrap();
            let ids = t.state_ids(&env).unwrap();
            for (s, st) in ids.iter().zip(&t.steps) {
                total += 1;
                off += usize::from(st.a != vt.policy[*s]);
            }
            seed += 1;
        }
        let frac = off as f64 / total as f64;
        assert!((frac - 0.8).abs() < 0.02, "{frac}");
    }

    #[test]
    fn state_noise_moments() {
        let (_, env, vt) = setup();
        let t = &gen_normal(&env, &vt, 1, 200, 5).unwrap().trajectories[0];
        assert!(perturb_states(t, 0.0, 1).is_err());
        let mut samples = Vec::new();
        let mut seed = 0;
        while samples.len() < 100_000 {
            let n = perturb_states(t, 0.1, seed).unwrap();
            assert_eq!(n.actions(), t.actions());
            assert_eq!(n.label, Label::PerturbedAnomaly);
            for (a, b) in n.steps.iter().zip(&t.steps) {
                samples.extend(a.s.iter().zip(&b.s).map(|(x, y)| x - y));
            }
            seed += 1;
        }
        let m = samples.iter().sum::<f64>() / samples.len() as f64;
        let sd = (samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / samples.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.002, "{sd}");
    }

    #[test]
    fn labels_partition_the_dataset() {
        let (_, env, vt) = setup();
        let mut ds = gen_normal(&env, &vt, 40, 200, 6).unwrap();
        let a = inject_detour(&ds.trajectories[0], &env, 4.0, 0.5, 1).unwrap();
        ds.trajectories.push(a);
        let normal: Vec<_> = ds.normals().map(|t| t.id.clone()).collect();
        let anomalous: Vec<_> = ds.trajectories.iter().filter(|t| t.label.is_anomaly()).map(|t| t.id.clone()).collect();
        assert!(normal.iter().all(|id| !anomalous.contains(id)));
        assert!((ds.anomaly_rate() - 1.0 / 41.0).abs() < 1e-12);
        let (a, b) = ds.split(0.75, 3);
        assert_eq!(a.len() + b.len(), ds.len());
        assert_eq!(a.len(), 31);
    }
}
