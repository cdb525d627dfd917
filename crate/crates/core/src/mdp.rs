//! Deterministic tabular MDPs and their ground-truth oracles.
//!
//! An [`MdpSpec`] is the compiled form shared by every environment: a
//! deterministic transition table, a reward per `(state, action)` (the next
//! state is implied), a discount, a start distribution, absorbing terminals
//! and a real-vector encoding per state that the policy network consumes.
//! [`GridWorld`] and [`TaxiWorld`] compile into it.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MdpError {
    #[error("state {state} out of range (state_count = {count})")]
    InvalidState { state: usize, count: usize },
    #[error("action {action} out of range (action_count = {count})")]
    InvalidAction { action: usize, count: usize },
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("grid parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Result of a single deterministic step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub name: String,
    state_count: usize,
    action_count: usize,
    /// `transition[s * action_count + a]`
    transition: Vec<usize>,
    reward: Vec<f64>,
    discount: f64,
    start_states: Vec<(usize, f64)>,
    terminal: Vec<bool>,
    state_dim: usize,
    encoding: Vec<f64>,
}

impl MdpSpec {
    /// Builds and validates an MDP.
    ///
    /// `encoding` holds `state_count * state_dim` values, row per state.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        state_count: usize,
        action_count: usize,
        transition: Vec<usize>,
        reward: Vec<f64>,
        discount: f64,
        start_states: Vec<(usize, f64)>,
        terminal_states: &[usize],
        state_dim: usize,
        encoding: Vec<f64>,
    ) -> Result<Self, MdpError> {
        let invalid = |m: String| Err(MdpError::Invalid(m));
        if state_count == 0 || action_count == 0 {
            return invalid("state_count and action_count must be positive".into());
        }
        let sa = state_count * action_count;
        if transition.len() != sa || reward.len() != sa {
            return invalid(format!("transition/reward tables must have {sa} entries"));
        }
        if let Some(&bad) = transition.iter().find(|&&n| n >= state_count) {
            return invalid(format!("transition targets unknown state {bad}"));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return invalid("rewards must be finite".into());
        }
        if !(0.0..1.0).contains(&discount) {
            return invalid(format!("discount {discount} must lie in [0, 1)"));
        }
        if start_states.is_empty() {
            return invalid("start distribution is empty".into());
        }
        let total: f64 = start_states.iter().map(|&(_, w)| w).sum();
        if math::abs(total - 1.0) > 1e-9 || start_states.iter().any(|&(_, w)| w < 0.0) {
            return invalid(format!("start weights must be non-negative and sum to 1 (got {total})"));
        }
        let mut terminal = vec![false; state_count];
        for &t in terminal_states {
            if t >= state_count {
                return invalid(format!("terminal state {t} out of range"));
            }
            terminal[t] = true;
        }
        for &(s, _) in &start_states {
            if s >= state_count {
                return invalid(format!("start state {s} out of range"));
            }
        }
        for (s, _) in terminal.iter().enumerate().filter(|(_, &t)| t) {
            for a in 0..action_count {
                let i = s * action_count + a;
                if transition[i] != s || reward[i] != 0.0 {
                    return invalid(format!("terminal state {s} is not absorbing with zero reward"));
                }
            }
        }
        if state_dim == 0 || encoding.len() != state_count * state_dim {
            return invalid("encoding must hold state_count * state_dim values".into());
        }
        Ok(Self {
            name: name.into(),
            state_count,
            action_count,
            transition,
            reward,
            discount,
            start_states,
            terminal,
            state_dim,
            encoding,
        })
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn start_states(&self) -> &[(usize, f64)] {
        &self.start_states
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal.get(s).copied().unwrap_or(false)
    }

    pub fn terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        self.terminal.iter().enumerate().filter(|(_, &t)| t).map(|(s, _)| s)
    }

    /// Real-vector encoding of `s` as fed to the policy network.
    pub fn encode(&self, s: usize) -> &[f64] {
        &self.encoding[s * self.state_dim..(s + 1) * self.state_dim]
    }

    /// Inverse of [`encode`](Self::encode) by exact match.
    pub fn decode(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.state_dim {
            return None;
        }
        (0..self.state_count).find(|&s| self.encode(s) == x)
    }

    fn check(&self, s: usize, a: usize) -> Result<(), MdpError> {
        if s >= self.state_count {
            return Err(MdpError::InvalidState { state: s, count: self.state_count });
        }
        if a >= self.action_count {
            return Err(MdpError::InvalidAction { action: a, count: self.action_count });
        }
        Ok(())
    }

    pub fn step(&self, s: usize, a: usize) -> Result<Transition, MdpError> {
        self.check(s, a)?;
        let i = s * self.action_count + a;
        let next = self.transition[i];
        Ok(Transition { next, reward: self.reward[i], done: self.terminal[next] })
    }

    fn next_of(&self, s: usize, a: usize) -> usize {
        self.transition[s * self.action_count + a]
    }

    /// Samples a start state from the start distribution.
    pub fn sample_start(&self, rng: &mut rng::Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(s, w) in &self.start_states {
            acc += w;
            if u < acc {
                return s;
            }
        }
        self.start_states[self.start_states.len() - 1].0
    }

    /// Breadth-first step distances from `from`. Terminal states are reached
    /// but never expanded; self-loops are ignored.
    pub fn distances_from(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.state_count];
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(s) = queue.pop_front() {
            if self.terminal[s] && s != from {
                continue;
            }
            let d = dist[s].unwrap_or(0);
            for a in 0..self.action_count {
                let n = self.next_of(s, a);
                if dist[n].is_none() {
                    dist[n] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Breadth-first step distances from every state to `to`, moving only
    /// through non-terminal states.
    pub fn distances_to(&self, to: usize) -> Vec<Option<usize>> {
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); self.state_count];
        for s in (0..self.state_count).filter(|&s| !self.terminal[s]) {
            for a in 0..self.action_count {
                let n = self.next_of(s, a);
                if n != s {
                    preds[n].push(s);
                }
            }
        }
        let mut dist = vec![None; self.state_count];
        dist[to] = Some(0);
        let mut queue = VecDeque::from([to]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n].unwrap_or(0);
            for &p in &preds[n] {
                if dist[p].is_none() {
                    dist[p] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }

    /// Shortest action path from `from` to `to` that never passes through a
    /// terminal state before arriving. Ties resolve towards lower action
    /// indices. Returns `(state, action)` pairs; the final state is `to`.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<Vec<(usize, usize)>> {
        if from == to {
            return Some(Vec::new());
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.state_count];
        let mut seen = vec![false; self.state_count];
        seen[from] = true;
        let mut queue = VecDeque::from([from]);
        while let Some(s) = queue.pop_front() {
            if s == to {
                break;
            }
            if self.terminal[s] {
                continue;
            }
            for a in 0..self.action_count {
                let n = self.next_of(s, a);
                if !seen[n] {
                    seen[n] = true;
                    parent[n] = Some((s, a));
                    queue.push_back(n);
                }
            }
        }
        if !seen[to] {
            return None;
        }
        let mut path = Vec::new();
        let mut cur = to;
        while cur != from {
            let (p, a) = parent[cur]?;
            path.push((p, a));
            cur = p;
        }
        path.reverse();
        Some(path)
    }
}

/// Optimal value tables produced by [`value_iteration`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub v: Vec<f64>,
    /// `q[s * action_count + a]`
    pub q: Vec<f64>,
    pub policy: Vec<usize>,
    pub action_count: usize,
}

impl ValueTables {
    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.action_count..(s + 1) * self.action_count]
    }
}

/// Actions whose value is within this (relative) distance of the maximum count
/// as tied; the lowest such index wins.
const TIE_TOLERANCE: f64 = 1e-9;

fn greedy_action(row: &[f64]) -> usize {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOLERANCE * best.abs().max(1.0);
    row.iter().position(|&q| q >= best - tol).unwrap_or(0)
}

/// Jacobi value iteration until the sup-norm Bellman residual drops below
/// `tol`. The greedy policy breaks ties towards the lowest action index.
pub fn value_iteration(env: &MdpSpec, tol: f64) -> ValueTables {
    let (ns, na) = (env.state_count, env.action_count);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let tol = if tol > 0.0 { tol } else { 1e-8 };
    loop {
        let mut residual: f64 = 0.0;
        for s in 0..ns {
            if env.terminal[s] {
                continue;
            }
            for a in 0..na {
                let i = s * na + a;
                q[i] = env.reward[i] + env.discount * v[env.transition[i]];
            }
        }
        for s in 0..ns {
            if env.terminal[s] {
                continue;
            }
            let best = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max(math::abs(best - v[s]));
            v[s] = best;
        }
        if residual < tol {
            break;
        }
    }
    // final Q consistent with the returned V
    for s in 0..ns {
        for a in 0..na {
            let i = s * na + a;
            q[i] = if env.terminal[s] { 0.0 } else { env.reward[i] + env.discount * v[env.transition[i]] };
        }
    }
    let policy = (0..ns).map(|s| greedy_action(&q[s * na..(s + 1) * na])).collect();
    ValueTables { v, q, policy, action_count: na }
}

/// A rollout over state ids, before encoding into a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `s_0 .. s_{T-1}`
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// `r_1 .. r_T`
    pub rewards: Vec<f64>,
    /// `s_T`
    pub final_state: usize,
    pub reached_terminal: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Full state path `s_0 .. s_T`.
    pub fn path(&self) -> Vec<usize> {
        let mut p = self.states.clone();
        p.push(self.final_state);
        p
    }
}

/// Runs `choose` from `start` until a terminal state or `max_len` steps.
pub fn rollout_with(
    env: &MdpSpec,
    start: usize,
    max_len: usize,
    mut choose: impl FnMut(usize) -> usize,
) -> Result<Rollout, MdpError> {
    env.check(start, 0)?;
    let mut out = Rollout {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        final_state: start,
        reached_terminal: env.terminal[start],
    };
    let mut s = start;
    while !env.terminal[s] && out.actions.len() < max_len {
        let a = choose(s);
        let t = env.step(s, a)?;
        out.states.push(s);
        out.actions.push(a);
        out.rewards.push(t.reward);
        s = t.next;
        out.reached_terminal = t.done;
    }
    out.final_state = s;
    Ok(out)
}

/// Follows the greedy policy of `tables`. A start that is already terminal
/// yields an empty (degenerate) rollout.
pub fn greedy_rollout(
    env: &MdpSpec,
    tables: &ValueTables,
    start: usize,
    max_len: usize,
) -> Result<Rollout, MdpError> {
    rollout_with(env, start, max_len, |s| tables.policy[s])
}

/// Stochastic policy table: `probs[s * action_count + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub probs: Vec<f64>,
    pub action_count: usize,
}

impl PolicyTable {
    /// Deterministic table from a greedy action per state.
    pub fn deterministic(policy: &[usize], action_count: usize) -> Self {
        let mut probs = vec![0.0; policy.len() * action_count];
        for (s, &a) in policy.iter().enumerate() {
            probs[s * action_count + a] = 1.0;
        }
        Self { probs, action_count }
    }

    /// Greedy with probability `1 - eps`, uniform otherwise.
    pub fn epsilon_greedy(policy: &[usize], action_count: usize, eps: f64) -> Self {
        let mut t = Self::deterministic(policy, action_count);
        for p in &mut t.probs {
            *p = *p * (1.0 - eps) + eps / action_count as f64;
        }
        t
    }

    fn sample(&self, s: usize, rng: &mut rng::Rng) -> usize {
        let row = &self.probs[s * self.action_count..(s + 1) * self.action_count];
        // deterministic rows consume no randomness
        if let Some(a) = row.iter().position(|&p| p == 1.0) {
            return a;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        self.action_count - 1
    }
}

/// First-visit Monte-Carlo prediction of state values.
///
/// Each episode starts from the start distribution and runs until a terminal
/// state or `max_len` steps. States never visited are absent from the map.
pub fn mc_first_visit(
    env: &MdpSpec,
    policy: &PolicyTable,
    episodes: usize,
    max_len: usize,
    seed: u64,
) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for ep in 0..episodes.max(1) {
        let mut r = rng::stream(seed, ep as u64);
        let start = env.sample_start(&mut r);
        let Ok(roll) = rollout_with(env, start, max_len, |s| policy.sample(s, &mut r)) else {
            continue;
        };
        let returns = discounted_returns(&roll.rewards, env.discount);
        let mut seen = BTreeSet::new();
        for (t, &s) in roll.states.iter().enumerate() {
            if seen.insert(s) {
                let e = sums.entry(s).or_insert((0.0, 0));
                e.0 += returns[t];
                e.1 += 1;
            }
        }
    }
    sums.into_iter().map(|(s, (total, n))| (s, total / n as f64)).collect()
}

/// `G_t = r_{t+1} + γ G_{t+1}` for every step, computed backwards.
pub fn discounted_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + discount * g;
        out[t] = g;
    }
    out
}

/// Goal-reaching gridworld with a constant negative step reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub walls: BTreeSet<(usize, usize)>,
    /// `(cell, terminal reward)`; a reward of zero means the step reward is
    /// paid on entry instead.
    pub goals: Vec<((usize, usize), f64)>,
    pub starts: Vec<(usize, usize)>,
    pub step_reward: f64,
    pub discount: f64,
}

impl GridWorld {
    pub const NORTH: usize = 0;
    pub const EAST: usize = 1;
    pub const SOUTH: usize = 2;
    pub const WEST: usize = 3;
    pub const STAY: usize = 4;
    pub const ACTIONS: usize = 5;

    /// Open grid with every non-goal cell as a start candidate.
    pub fn open(width: usize, height: usize, goals: Vec<((usize, usize), f64)>, step_reward: f64, discount: f64) -> Self {
        let goal_cells: BTreeSet<_> = goals.iter().map(|g| g.0).collect();
        let starts = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .filter(|c| !goal_cells.contains(c))
            .collect();
        Self { width, height, walls: BTreeSet::new(), goals, starts, step_reward, discount }
    }

    pub fn state_of(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.width + cell.0
    }

    pub fn cell_of(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }

    fn is_goal(&self, cell: (usize, usize)) -> Option<f64> {
        self.goals.iter().find(|g| g.0 == cell).map(|g| g.1)
    }

    /// Target cell of `action` from `cell`; walls and edges keep the agent
    /// in place.
    pub fn move_cell(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        let (x, y) = cell;
        let target = match action {
            Self::NORTH if y > 0 => (x, y - 1),
            Self::EAST if x + 1 < self.width => (x + 1, y),
            Self::SOUTH if y + 1 < self.height => (x, y + 1),
            Self::WEST if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        if self.walls.contains(&target) {
            cell
        } else {
            target
        }
    }

    pub fn compile(&self) -> Result<MdpSpec, MdpError> {
        if self.width == 0 || self.height == 0 {
            return Err(MdpError::Invalid("grid must be non-empty".into()));
        }
        if self.step_reward >= 0.0 {
            return Err(MdpError::Invalid("step reward must be negative".into()));
        }
        let in_bounds = |c: &(usize, usize)| c.0 < self.width && c.1 < self.height;
        for &(g, r) in &self.goals {
            if !in_bounds(&g) || self.walls.contains(&g) || r < 0.0 {
                return Err(MdpError::Invalid(format!("bad goal {g:?}")));
            }
        }
        let starts: Vec<_> =
            self.starts.iter().copied().filter(|c| self.is_goal(*c).is_none()).collect();
        if starts.is_empty() {
            return Err(MdpError::Invalid("no start cells".into()));
        }
        for c in &starts {
            if !in_bounds(c) || self.walls.contains(c) {
                return Err(MdpError::Invalid(format!("bad start {c:?}")));
            }
        }
        let ns = self.width * self.height;
        let na = Self::ACTIONS;
        let mut transition = vec![0; ns * na];
        let mut reward = vec![0.0; ns * na];
        let mut terminals = Vec::new();
        for s in 0..ns {
            let cell = self.cell_of(s);
            let terminal = self.is_goal(cell).is_some();
            if terminal {
                terminals.push(s);
            }
            for a in 0..na {
                let i = s * na + a;
                if terminal || self.walls.contains(&cell) {
                    transition[i] = s;
                    reward[i] = if terminal { 0.0 } else { self.step_reward };
                    continue;
                }
                let next = self.move_cell(cell, a);
                transition[i] = self.state_of(next);
                reward[i] = match self.is_goal(next) {
                    Some(r) if r > 0.0 => r,
                    _ => self.step_reward,
                };
            }
        }
        let w = 1.0 / starts.len() as f64;
        let start_states = starts.iter().map(|&c| (self.state_of(c), w)).collect();
        let sx = (self.width.max(2) - 1) as f64;
        let sy = (self.height.max(2) - 1) as f64;
        let encoding = (0..ns)
            .flat_map(|s| {
                let (x, y) = self.cell_of(s);
                [x as f64 / sx, y as f64 / sy]
            })
            .collect();
        MdpSpec::new(
            "gridworld",
            ns,
            na,
            transition,
            reward,
            self.discount,
            start_states,
            &terminals,
            2,
            encoding,
        )
    }

    /// Parses the text grid format:
    ///
    /// ```text
    /// step_reward = -1
    /// discount = 0.9
    /// grid:
    /// S..#G(10)
    /// S...G.
    /// ```
    ///
    /// `#` wall, `.` free, `S` start candidate, `G(k)` goal with terminal
    /// reward `k` (bare `G` means zero). Lines starting with `//` are ignored.
    /// When no `S` cell is present every free cell is a start candidate.
    pub fn parse(text: &str) -> Result<Self, MdpError> {
        let mut step_reward = None;
        let mut discount = None;
        let mut rows: Vec<Vec<char>> = Vec::new();
        let mut in_grid = false;
        let mut first_grid_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            if in_grid {
                rows.push(line.chars().collect());
                continue;
            }
            if line == "grid:" {
                in_grid = true;
                first_grid_line = line_no + 1;
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(MdpError::Parse { line: line_no, msg: format!("expected `key = value`, got `{line}`") });
            };
            let value: f64 = v.trim().parse().map_err(|_| MdpError::Parse {
                line: line_no,
                msg: format!("`{}` is not a number", v.trim()),
            })?;
            match k.trim() {
                "step_reward" => step_reward = Some(value),
                "discount" => discount = Some(value),
                other => {
                    return Err(MdpError::Parse { line: line_no, msg: format!("unknown field `{other}`") })
                }
            }
        }
        let step_reward = step_reward.ok_or(MdpError::Parse { line: 0, msg: "missing step_reward".into() })?;
        let discount = discount.ok_or(MdpError::Parse { line: 0, msg: "missing discount".into() })?;
        if rows.is_empty() {
            return Err(MdpError::Parse { line: 0, msg: "missing grid".into() });
        }
        let mut walls = BTreeSet::new();
        let mut goals = Vec::new();
        let mut starts = Vec::new();
        let mut free = Vec::new();
        let mut width = None;
        for (y, row) in rows.iter().enumerate() {
            let line = first_grid_line + y;
            let mut x = 0;
            let mut i = 0;
            while i < row.len() {
                let c = row[i];
                i += 1;
                match c {
                    '#' => {
                        walls.insert((x, y));
                    }
                    '.' => free.push((x, y)),
                    'S' => starts.push((x, y)),
                    'G' => {
                        let mut r = 0.0;
                        if row.get(i) == Some(&'(') {
                            let Some(close) = row[i..].iter().position(|&c| c == ')') else {
                                return Err(MdpError::Parse { line, msg: "unclosed goal reward `(`".into() });
                            };
                            let digits: String = row[i + 1..i + close].iter().collect();
                            r = digits.trim().parse().map_err(|_| MdpError::Parse {
                                line,
                                msg: format!("bad goal reward `{digits}`"),
                            })?;
                            i += close + 1;
                        }
                        goals.push(((x, y), r));
                    }
                    other => {
                        return Err(MdpError::Parse { line, msg: format!("unexpected cell `{other}`") })
                    }
                }
                x += 1;
            }
            match width {
                None => width = Some(x),
                Some(w) if w != x => {
                    return Err(MdpError::Parse { line, msg: format!("row has {x} cells, expected {w}") })
                }
                _ => {}
            }
        }
        if starts.is_empty() {
            starts = free;
        }
        Ok(Self {
            width: width.unwrap_or(0),
            height: rows.len(),
            walls,
            goals,
            starts,
            step_reward,
            discount,
        })
    }

    /// Serializes back to the text grid format.
    pub fn to_text(&self) -> String {
        let starts: BTreeSet<_> = self.starts.iter().copied().collect();
        let mut out = format!("step_reward = {}\ndiscount = {}\ngrid:\n", self.step_reward, self.discount);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = (x, y);
                if let Some(r) = self.is_goal(c) {
                    out.push('G');
                    if r != 0.0 {
                        out.push_str(&format!("({r})"));
                    }
                } else if self.walls.contains(&c) {
                    out.push('#');
                } else if starts.contains(&c) {
                    out.push('S');
                } else {
                    out.push('.');
                }
            }
            out.push('\n');
        }
        out
    }

    /// 15×15 grid with three goals on the right edge, a few wall segments and
    /// start cells in the two leftmost columns.
    pub fn three_goal_15() -> Self {
        let mut walls = BTreeSet::new();
        for y in 2..7 {
            walls.insert((5, y));
        }
        for y in 9..13 {
            walls.insert((9, y));
        }
        for x in 7..11 {
            walls.insert((x, 4));
        }
        let goals = vec![((14, 1), 0.0), ((14, 7), 0.0), ((14, 13), 0.0)];
        let starts = (0..15).flat_map(|y| [(0, y), (1, y)]).collect();
        Self { width: 15, height: 15, walls, goals, starts, step_reward: -1.0, discount: 0.9 }
    }
}

/// Taxi pickup/dropoff world on the classic 5×5 map.
///
/// Actions: south, north, east, west, pickup, dropoff. Each move costs `-1`,
/// an illegal pickup or dropoff costs `-10`, and a correct dropoff pays `+20`
/// and ends the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxiWorld {
    pub discount: f64,
}

impl TaxiWorld {
    pub const LOCATIONS: [(usize, usize); 4] = [(0, 0), (0, 4), (4, 0), (4, 3)];
    pub const ACTIONS: usize = 6;
    pub const STATE_DIM: usize = 11;
    const SIZE: usize = 5;
    /// Terminal state index; regular states are `0..500`.
    pub const TERMINAL: usize = 500;

    pub fn new(discount: f64) -> Self {
        Self { discount }
    }

    /// `((row, col), passenger 0..=4 with 4 = in taxi, destination 0..4)`
    pub fn decode_state(s: usize) -> ((usize, usize), usize, usize) {
        let dest = s % 4;
        let pass = (s / 4) % 5;
        let col = (s / 20) % 5;
        let row = s / 100;
        ((row, col), pass, dest)
    }

    pub fn encode_state(taxi: (usize, usize), pass: usize, dest: usize) -> usize {
        ((taxi.0 * 5 + taxi.1) * 5 + pass) * 4 + dest
    }

    // vertical walls sit east of these cells
    fn wall_east(row: usize, col: usize) -> bool {
        matches!((row, col), (0, 1) | (1, 1) | (3, 0) | (4, 0) | (3, 2) | (4, 2))
    }

    pub fn compile(&self) -> Result<MdpSpec, MdpError> {
        let ns = Self::TERMINAL + 1;
        let na = Self::ACTIONS;
        let mut transition = vec![0; ns * na];
        let mut reward = vec![0.0; ns * na];
        let mut encoding = vec![0.0; ns * Self::STATE_DIM];
        let mut starts = Vec::new();
        for s in 0..Self::TERMINAL {
            let ((row, col), pass, dest) = Self::decode_state(s);
            let e = &mut encoding[s * Self::STATE_DIM..(s + 1) * Self::STATE_DIM];
            e[0] = row as f64 / 4.0;
            e[1] = col as f64 / 4.0;
            e[2 + pass] = 1.0;
            e[7 + dest] = 1.0;
            if pass < 4 && pass != dest {
                starts.push(s);
            }
            for a in 0..na {
                let i = s * na + a;
                let (next, r) = match a {
                    0 => (Self::encode_state(((row + 1).min(Self::SIZE - 1), col), pass, dest), -1.0),
                    1 => (Self::encode_state((row.saturating_sub(1), col), pass, dest), -1.0),
                    2 => {
                        let c = if col + 1 < Self::SIZE && !Self::wall_east(row, col) { col + 1 } else { col };
                        (Self::encode_state((row, c), pass, dest), -1.0)
                    }
                    3 => {
                        let c = if col > 0 && !Self::wall_east(row, col - 1) { col - 1 } else { col };
                        (Self::encode_state((row, c), pass, dest), -1.0)
                    }
                    4 => {
                        if pass < 4 && Self::LOCATIONS[pass] == (row, col) {
                            (Self::encode_state((row, col), 4, dest), -1.0)
                        } else {
                            (s, -10.0)
                        }
                    }
                    _ => {
                        if pass == 4 && Self::LOCATIONS[dest] == (row, col) {
                            (Self::TERMINAL, 20.0)
                        } else {
                            (s, -10.0)
                        }
                    }
                };
                transition[i] = next;
                reward[i] = r;
            }
        }
        for a in 0..na {
            transition[Self::TERMINAL * na + a] = Self::TERMINAL;
        }
        let w = 1.0 / starts.len() as f64;
        let start_states = starts.into_iter().map(|s| (s, w)).collect();
        MdpSpec::new(
            "taxi",
            ns,
            na,
            transition,
            reward,
            self.discount,
            start_states,
            &[Self::TERMINAL],
            Self::STATE_DIM,
            encoding,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid5(goal_reward: f64) -> GridWorld {
        GridWorld::open(5, 5, vec![((4, 4), goal_reward)], -1.0, 0.9)
    }

    #[test]
    fn step_examples() {
        let g = grid5(0.0);
        let env = g.compile().unwrap();
        let t = env.step(g.state_of((0, 0)), GridWorld::EAST).unwrap();
        assert_eq!(t, Transition { next: g.state_of((1, 0)), reward: -1.0, done: false });
        // outer wall: stay and pay
        let t = env.step(g.state_of((0, 0)), GridWorld::NORTH).unwrap();
        assert_eq!(t, Transition { next: g.state_of((0, 0)), reward: -1.0, done: false });

        let g10 = grid5(10.0);
        let env10 = g10.compile().unwrap();
        let t = env10.step(g10.state_of((3, 4)), GridWorld::EAST).unwrap();
        assert_eq!(t, Transition { next: g10.state_of((4, 4)), reward: 10.0, done: true });
    }

    #[test]
    fn step_rejects_bad_indices() {
        let env = grid5(0.0).compile().unwrap();
        assert!(matches!(env.step(25, 0), Err(MdpError::InvalidState { .. })));
        assert!(matches!(env.step(0, 5), Err(MdpError::InvalidAction { .. })));
    }

    #[test]
    fn interior_walls_block_moves() {
        let mut g = grid5(0.0);
        g.walls.insert((1, 0));
        g.starts.retain(|c| *c != (1, 0));
        let env = g.compile().unwrap();
        let t = env.step(g.state_of((0, 0)), GridWorld::EAST).unwrap();
        assert_eq!(t.next, g.state_of((0, 0)));
    }

    #[test]
    fn value_iteration_hand_backups() {
        let g = grid5(0.0);
        let env = g.compile().unwrap();
        let vt = value_iteration(&env, 1e-8);
        assert!((vt.v[g.state_of((3, 4))] - -1.0).abs() < 1e-12);
        assert!((vt.v[g.state_of((2, 4))] - -1.9).abs() < 1e-12);
        assert_eq!(vt.v[g.state_of((4, 4))], 0.0);
        for s in 0..env.state_count() {
            let best = vt.q_row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !env.is_terminal(s) {
                assert!((vt.v[s] - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_rollout_edge_cases() {
        let g = grid5(0.0);
        let env = g.compile().unwrap();
        let vt = value_iteration(&env, 1e-8);
        let r = greedy_rollout(&env, &vt, g.state_of((4, 3)), 100).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.final_state, g.state_of((4, 4)));
        assert!(r.reached_terminal);
        let r = greedy_rollout(&env, &vt, g.state_of((4, 4)), 100).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn greedy_path_length_matches_bfs_on_15x15() {
        let g = GridWorld::open(15, 15, vec![((14, 14), 0.0)], -1.0, 0.9);
        let env = g.compile().unwrap();
        let vt = value_iteration(&env, 1e-8);
        let goal = g.state_of((14, 14));
        for s in 0..env.state_count() {
            // independent oracle: breadth-first search to the goal
            let bfs = env.distances_from(s)[goal];
            let r = greedy_rollout(&env, &vt, s, 1000).unwrap();
            let (x, y) = g.cell_of(s);
            let manhattan = (14 - x) + (14 - y);
            assert_eq!(r.len(), manhattan);
            assert_eq!(Some(manhattan), bfs);
        }
    }

    #[test]
    fn mc_matches_closed_form_and_vi() {
        let g = grid5(0.0);
        let env = g.compile().unwrap();
        let vt = value_iteration(&env, 1e-12);
        let pol = PolicyTable::deterministic(&vt.policy, env.action_count());
        let est = mc_first_visit(&env, &pol, 200, 100, 3);
        assert!(!est.is_empty());
        for (&s, &v) in &est {
            assert!((v - vt.v[s]).abs() < 1e-9);
            let (x, y) = g.cell_of(s);
            let t = ((4 - x) + (4 - y)) as i32;
            let closed = -(1.0 - math::powi(0.9, t)) / 0.1;
            assert!((v - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn mc_is_deterministic_under_seed() {
        let env = grid5(0.0).compile().unwrap();
        let vt = value_iteration(&env, 1e-8);
        let pol = PolicyTable::epsilon_greedy(&vt.policy, env.action_count(), 0.3);
        let a = mc_first_visit(&env, &pol, 50, 200, 11);
        let b = mc_first_visit(&env, &pol, 50, 200, 11);
        assert_eq!(a.len(), b.len());
        for ((s1, v1), (s2, v2)) in a.iter().zip(b.iter()) {
            assert_eq!(s1, s2);
            assert_eq!(v1.to_bits(), v2.to_bits());
        }
    }

    #[test]
    fn scaling_rewards_preserves_greedy_policy() {
        let g = GridWorld::three_goal_15();
        let env = g.compile().unwrap();
        let mut scaled = g.clone();
        scaled.step_reward *= 3.5;
        let a = value_iteration(&env, 1e-10);
        let b = value_iteration(&scaled.compile().unwrap(), 1e-10);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut g = grid5(0.0);
        g.discount = 1.0;
        assert!(g.compile().is_err());
        let mut g = grid5(0.0);
        g.step_reward = 0.5;
        assert!(g.compile().is_err());
        let err = MdpSpec::new("x", 1, 1, vec![0], vec![0.0], 0.5, vec![(0, 0.5)], &[], 1, vec![0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn parse_round_trip() {
        let text = "step_reward = -1\ndiscount = 0.9\ngrid:\nS..#G(10).\nS....G\n";
        let g = GridWorld::parse(text).unwrap();
        assert_eq!(g.width, 6);
        assert_eq!(g.height, 2);
        assert_eq!(g.goals, vec![((4, 0), 10.0), ((5, 1), 0.0)]);
        assert!(g.walls.contains(&(3, 0)));
        assert_eq!(g.starts, vec![(0, 0), (0, 1)]);
        let again = GridWorld::parse(&g.to_text()).unwrap();
        assert_eq!(g, again);
        assert!(matches!(GridWorld::parse("discount = 0.9\ngrid:\n..G\n"), Err(MdpError::Parse { .. })));
        assert!(matches!(
            GridWorld::parse("step_reward = -1\ndiscount = 0.9\ngrid:\n..G\n.x.\n"),
            Err(MdpError::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn taxi_compiles_and_solves() {
        let env = TaxiWorld::new(0.9).compile().unwrap();
        assert_eq!(env.state_count(), 501);
        assert_eq!(env.start_states().len(), 300);
        let vt = value_iteration(&env, 1e-10);
        for &(s, _) in env.start_states() {
            let r = greedy_rollout(&env, &vt, s, 200).unwrap();
            assert!(r.reached_terminal);
            assert_eq!(*r.rewards.last().unwrap(), 20.0);
            assert!(r.len() <= 20);
        }
        // wall east of (0,1)
        let s = TaxiWorld::encode_state((0, 1), 0, 1);
        assert_eq!(env.step(s, 2).unwrap().next, s);
    }
}
