use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use oilad_core::eval::{self, Correlation};
use oilad_core::features::{self, StreamingFeatures};
use oilad_core::mdp::{self, GridWorld, MdpSpec, TaxiWorld};
use oilad_core::policy::{state_values, TransformerPolicy};
use oilad_core::traj::{Dataset, Label, Step, Trajectory};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, ForestFile, StepRecord};
use crate::manifest::{Manifest, OutputLock};
use crate::pipeline::{self, Split, World};
use crate::report::{self, FeatureCsv};

#[derive(Debug, Parser)]
#[command(name = "oilad", version, about = "Trajectory anomaly detection from offline imitation learning")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration (all fields optional).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set train.iterations=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Global seed; falls back to the config file, then OILAD_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a training set of normal trajectories or a labelled test pool.
    Gen {
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the policy network on normal trajectories.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loss history CSV (default: `<out>.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Write the window features of a dataset as CSV.
    Features {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the isolation-forest boundary on features of normal trajectories.
    FitBoundary {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score trajectories window by window.
    Score {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        forest: Option<PathBuf>,
        /// Dataset to score (batch mode).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Streaming mode: read step records (`{"traj_id","s","a"}` per line)
        /// from `--input` or stdin and emit a verdict per completed window.
        #[arg(long)]
        follow: bool,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate detection on a labelled test pool over seeded resamples.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        forest: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with action loss only, monotonicity loss only and both, and compare.
    Ablate {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection F1 against the sliding-window size.
    Sweep {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Explicit window sizes.
        #[arg(long, value_delimiter = ',')]
        windows: Vec<usize>,
        /// Window sizes as proportions of the mean trajectory length.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        proportions: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate the model's state values with exact ground-truth values.
    VerifyValues {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use first-visit Monte-Carlo estimates with this many episodes per
        /// start instead of value iteration.
        #[arg(long)]
        mc_episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the value-monotonicity condition along every optimal trajectory.
    CheckTheorem {
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.9,0.99")]
        gammas: Vec<f64>,
        /// Replace every goal's terminal reward (gridworlds only).
        #[arg(long)]
        goal_reward: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit plotting data as CSV.
    PlotData {
        #[command(subcommand)]
        kind: PlotKind,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlotKind {
    /// (f_AO, f_SA, label) points of every window.
    Latent {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model and ground-truth state values per step.
    Values {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Boundary score of every window with the threshold.
    Scores {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        forest: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    args: Vec<String>,
}

impl Ctx {
    fn manifest(&self, command: &str) -> Manifest {
        let mut cfg = self.cfg.clone();
        cfg.seed = Some(self.seed);
        Manifest::new(command, self.args.clone(), self.seed, cfg.to_toml())
    }

    fn or<'a>(&self, flag: &'a Option<PathBuf>, default: &'a Path) -> &'a Path {
        flag.as_deref().unwrap_or(default)
    }

    fn reports(&self, name: &str) -> PathBuf {
        self.cfg.paths.reports.join(name)
    }
}

fn load_dataset(m: &mut Manifest, path: &Path) -> Result<Dataset> {
    let d = io::read_dataset(path)?;
    m.input(path)?;
    Ok(d)
}

fn load_model(m: &mut Manifest, path: &Path) -> Result<TransformerPolicy> {
    let model = io::read_checkpoint(path)?;
    m.input(path)?;
    Ok(model)
}

fn load_forest(m: &mut Manifest, path: &Path) -> Result<ForestFile> {
    let f = io::read_forest(path)?;
    m.input(path)?;
    Ok(f)
}

fn label_of(data: &Dataset) -> BTreeMap<&str, Label> {
    data.trajectories.iter().map(|t| (t.id.as_str(), t.label)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Pipeline(e.to_string()))?;
    bytes.push(b'\n');
    io::atomic_write(path, &bytes)
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    let cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    let seed = cfg.resolve_seed(cli.common.seed)?;
    let ctx = Ctx { cfg, seed, args };
    match cli.command {
        Command::Gen { split, out } => gen(&ctx, split, out),
        Command::Train { data, out, history } => train(&ctx, data, out, history),
        Command::Features { model, data, out } => latent(&ctx, "features", model, data, out),
        Command::FitBoundary { model, data, out } => fit_boundary(&ctx, model, data, out),
        Command::Score { model, forest, data, follow, input, out } => {
            if follow {
                score_follow(&ctx, model, forest, input, out)
            } else {
                score_batch(&ctx, "score", model, forest, data, out)
            }
        }
        Command::Eval { model, forest, data, out } => evaluate(&ctx, model, forest, data, out),
        Command::Ablate { train, data, out } => ablate(&ctx, train, data, out),
        Command::Sweep { model, train, data, windows, proportions, out } => {
            sweep(&ctx, model, train, data, windows, proportions, out)
        }
        Command::VerifyValues { model, data, mc_episodes, out } => verify_values(&ctx, model, data, mc_episodes, out),
        Command::CheckTheorem { gammas, goal_reward, out } => check_theorem(&ctx, &gammas, goal_reward, out),
        Command::PlotData { kind } => match kind {
            PlotKind::Latent { model, data, out } => latent(&ctx, "plot-data latent", model, data, out),
            PlotKind::Values { model, data, out } => plot_values(&ctx, model, data, out),
            PlotKind::Scores { model, forest, data, out } => {
                score_batch(&ctx, "plot-data scores", model, forest, data, Some(out))
            }
        },
    }
}

fn gen(ctx: &Ctx, split: Split, out: Option<PathBuf>) -> Result<()> {
    let p = &ctx.cfg.paths;
    let out = out.unwrap_or_else(|| if split == Split::Train { p.train_data.clone() } else { p.test_data.clone() });
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("gen");
    let world = World::new(&ctx.cfg)?;
    let data = pipeline::generate(&world, &ctx.cfg, split, ctx.seed)?;
    io::write_dataset(&out, &data)?;
    m.output(&out)?;
    m.write(&out)?;
    println!("wrote {} trajectories to {}", data.len(), out.display());
    Ok(())
}

fn train(ctx: &Ctx, data: Option<PathBuf>, out: Option<PathBuf>, history: Option<PathBuf>) -> Result<()> {
    let data_path = ctx.or(&data, &ctx.cfg.paths.train_data).to_path_buf();
    let out = ctx.or(&out, &ctx.cfg.paths.checkpoint).to_path_buf();
    let history = history.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("train");
    let data = load_dataset(&mut m, &data_path)?;
    let world = World::new(&ctx.cfg)?;
    let (model, hist) = pipeline::train(&world, &ctx.cfg, &data, ctx.seed)?;
    io::write_checkpoint(&out, &model)?;
    report::write_csv(&history, report::history_rows(&hist))?;
    m.output(&out)?;
    m.output(&history)?;
    m.write(&out)?;
    let last = hist.rows.last();
    println!(
        "trained {} parameters for {} iterations; final action loss {:?}, monotonicity loss {:?}",
        model.param_count(),
        hist.rows.len(),
        last.and_then(|r| r.action_loss),
        last.and_then(|r| r.monotonicity_loss)
    );
    Ok(())
}

fn latent(ctx: &Ctx, name: &str, model: Option<PathBuf>, data: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest(name);
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let data = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.test_data))?;
    let window = ctx.cfg.window();
    let mut rows = Vec::new();
    for t in &data.trajectories {
        rows.push((features::windowed_features(&model, t, &window)?, t.label));
    }
    report::write_csv(&out, rows.iter().flat_map(|(pts, l)| pts.iter().map(|p| FeatureCsv::new(p, *l))))?;
    m.output(&out)?;
    m.write(&out)?;
    println!("wrote {} feature points to {}", rows.iter().map(|r| r.0.len()).sum::<usize>(), out.display());
    Ok(())
}

fn fit_boundary(ctx: &Ctx, model: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let out = ctx.or(&out, &ctx.cfg.paths.forest).to_path_buf();
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("fit-boundary");
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let data = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.train_data))?;
    let detect = ctx.cfg.detect_config(ctx.seed);
    let forest = pipeline::fit_boundary(&model, &data, &detect)?;
    let threshold = forest.threshold;
    io::write_forest(&out, &ForestFile::new(detect.window, detect.verdict, forest))?;
    m.output(&out)?;
    m.write(&out)?;
    println!("boundary fitted: threshold {threshold:.6}");
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    traj_id: &'a str,
    window_end: usize,
    #[serde(rename = "f_AO")]
    f_ao: f64,
    #[serde(rename = "f_SA")]
    f_sa: f64,
    score: f64,
    threshold: f64,
    anomalous: bool,
    label: &'static str,
}

fn score_batch(
    ctx: &Ctx,
    name: &str,
    model: Option<PathBuf>,
    forest: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.reports("scores.csv"));
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest(name);
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let ff = load_forest(&mut m, ctx.or(&forest, &ctx.cfg.paths.forest))?;
    let data = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.test_data))?;
    let mut points = Vec::new();
    let mut flagged = 0;
    for t in &data.trajectories {
        let pts = features::windowed_features(&model, t, &ff.window)?;
        let mut preds = Vec::with_capacity(pts.len());
        for p in pts {
            let s = ff.forest.score(&p.as_pair())?;
            preds.push(s > ff.forest.threshold);
            points.push((p, s, t.label));
        }
        flagged += usize::from(eval::trajectory_verdict(&preds, ff.verdict)?);
    }
    report::write_csv(
        &out,
        points.iter().map(|(p, s, l)| ScoreRow {
            traj_id: &p.traj_id,
            window_end: p.window_end,
            f_ao: p.f_ao,
            f_sa: p.f_sa,
            score: *s,
            threshold: ff.forest.threshold,
            anomalous: *s > ff.forest.threshold,
            label: l.as_str(),
        }),
    )?;
    m.output(&out)?;
    m.write(&out)?;
    println!("{flagged} of {} trajectories flagged; window scores in {}", data.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct StreamVerdict<'a> {
    traj_id: &'a str,
    window_end: usize,
    f_ao: f64,
    f_sa: f64,
    score: f64,
    anomalous: bool,
    trajectory_anomalous: bool,
}

fn score_follow(
    ctx: &Ctx,
    model: Option<PathBuf>,
    forest: Option<PathBuf>,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let _lock = out.as_deref().map(OutputLock::acquire).transpose()?;
    let mut m = ctx.manifest("score --follow");
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let ff = load_forest(&mut m, ctx.or(&forest, &ctx.cfg.paths.forest))?;
    let reader: Box<dyn BufRead> = match input.as_deref() {
        Some(p) if p != Path::new("-") => {
            Box::new(std::io::BufReader::new(std::fs::File::open(p).map_err(|e| Error::io(p, e))?))
        }
        _ => Box::new(std::io::stdin().lock()),
    };
    let src = input.clone().unwrap_or_else(|| PathBuf::from("<stdin>"));
    let mut log = Vec::new();
    let stdout = std::io::stdout();
    let mut streams: BTreeMap<String, (StreamingFeatures<'_>, Vec<bool>)> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&src, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: src.clone(), line: idx + 1, msg: e.to_string() })?;
        if !streams.contains_key(&rec.traj_id) {
            let s = StreamingFeatures::new(&model, ff.window, rec.traj_id.clone())?;
            streams.insert(rec.traj_id.clone(), (s, Vec::new()));
        }
        let (stream, preds) = streams.get_mut(&rec.traj_id).expect("inserted");
        if let Some(p) = stream.push(Step { s: rec.s, a: rec.a })? {
            let score = ff.forest.score(&p.as_pair())?;
            preds.push(score > ff.forest.threshold);
            let v = StreamVerdict {
                traj_id: &p.traj_id,
                window_end: p.window_end,
                f_ao: p.f_ao,
                f_sa: p.f_sa,
                score,
                anomalous: score > ff.forest.threshold,
                trajectory_anomalous: eval::trajectory_verdict(preds, ff.verdict)?,
            };
            let mut text = serde_json::to_string(&v).map_err(|e| Error::Pipeline(e.to_string()))?;
            text.push('\n');
            let mut h = stdout.lock();
            h.write_all(text.as_bytes()).and_then(|_| h.flush()).map_err(|e| Error::io("<stdout>", e))?;
            log.extend_from_slice(text.as_bytes());
        }
    }
    if let Some(out) = out {
        io::atomic_write(&out, &log)?;
        m.output(&out)?;
        m.write(&out)?;
    }
    Ok(())
}

fn evaluate(ctx: &Ctx, model: Option<PathBuf>, forest: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.reports("eval.json"));
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("eval");
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let ff = load_forest(&mut m, ctx.or(&forest, &ctx.cfg.paths.forest))?;
    let data = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.test_data))?;
    let detect = eval::DetectConfig { window: ff.window, forest: ctx.cfg.detect_config(ctx.seed).forest, verdict: ff.verdict };
    let report = pipeline::evaluate(&model, &ff.forest, &data, &ctx.cfg, &detect, ctx.seed)?;
    write_json(&out, &report)?;
    let csv = out.with_extension("csv");
    report::report_csv(&csv, &report)?;
    m.output(&out)?;
    m.output(&csv)?;
    m.write(&out)?;
    print!("{}", report::format_table(&report));
    Ok(())
}

fn ablate(ctx: &Ctx, train: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.reports("ablation.csv"));
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("ablate");
    let train = load_dataset(&mut m, ctx.or(&train, &ctx.cfg.paths.train_data))?;
    let test = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.test_data))?;
    let world = World::new(&ctx.cfg)?;
    let rows = eval::ablation_run(
        &train,
        &test,
        &ctx.cfg.policy_config(&world.env),
        oilad_core::rng::derive_seed(ctx.seed, crate::config::stage::MODEL_INIT),
        &ctx.cfg.train_config(ctx.seed),
        &ctx.cfg.detect_config(ctx.seed),
        &ctx.cfg.protocol(ctx.seed),
    )?;
    report::ablation_csv(&out, &rows)?;
    m.output(&out)?;
    m.write(&out)?;
    for r in &rows {
        println!("{:?}: mean F1 {:.1}", r.objectives, 100.0 * r.report.mean_f1());
        print!("{}", report::format_table(&r.report));
    }
    Ok(())
}

fn sweep(
    ctx: &Ctx,
    model: Option<PathBuf>,
    train: Option<PathBuf>,
    data: Option<PathBuf>,
    windows: Vec<usize>,
    proportions: Vec<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.reports("sweep.csv"));
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("sweep");
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let train = load_dataset(&mut m, ctx.or(&train, &ctx.cfg.paths.train_data))?;
    let test = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.test_data))?;
    let normals: Vec<Trajectory> = train.normals().cloned().collect();
    let windows = if windows.is_empty() { eval::proportional_windows(&normals, &proportions) } else { windows };
    if let Some(w) = windows.iter().find(|&&w| w < 2) {
        return Err(Error::Usage(format!("window size {w} is below 2")));
    }
    let rows = eval::window_sweep(
        &model,
        &normals,
        &test,
        &windows,
        &ctx.cfg.detect_config(ctx.seed),
        &ctx.cfg.protocol(ctx.seed),
    )?;
    report::sweep_csv(&out, &rows)?;
    m.output(&out)?;
    m.write(&out)?;
    for r in &rows {
        println!("w = {:>3}: mean F1 {:.1}", r.window, 100.0 * r.report.mean_f1());
    }
    Ok(())
}

/// Ground-truth values per state: value iteration, or first-visit Monte
/// Carlo under the greedy policy.
fn ground_truth(world: &World, mc_episodes: Option<usize>, max_len: usize, seed: u64) -> Vec<f64> {
    match mc_episodes {
        None => world.tables.v.clone(),
        Some(episodes) => {
            let policy = mdp::PolicyTable::deterministic(&world.tables.policy, world.env.action_count());
            let est = mdp::mc_first_visit(&world.env, &policy, episodes, max_len, seed);
            (0..world.env.state_count()).map(|s| est.get(&s).copied().unwrap_or(world.tables.v[s])).collect()
        }
    }
}

#[derive(Serialize)]
struct ValuesReport {
    ground_truth: &'static str,
    by_label: BTreeMap<&'static str, Option<Correlation>>,
    skipped_undecodable: usize,
}

fn verify_values(
    ctx: &Ctx,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    mc_episodes: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.reports("values.json"));
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("verify-values");
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let data = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.test_data))?;
    let world = World::new(&ctx.cfg)?;
    let truth = ground_truth(&world, mc_episodes, ctx.cfg.env.max_len, ctx.seed);
    let mut by_label = BTreeMap::new();
    let mut skipped = 0;
    for label in [Label::Normal, Label::PolicyAnomaly, Label::PerturbedAnomaly] {
        let group: Vec<Trajectory> = data.with_label(label).cloned().collect();
        let decodable: Vec<Trajectory> = group.iter().filter(|t| t.state_ids(&world.env).is_ok()).cloned().collect();
        skipped += group.len() - decodable.len();
        let c = if decodable.is_empty() {
            None
        } else {
            Some(eval::value_correlation(&model, &world.env, &decodable, &truth)?)
        };
        by_label.insert(label.as_str(), c);
    }
    for (l, c) in &by_label {
        match c {
            Some(c) => println!("{l:<18} PCC {:.3}  SCC {:.3}  ({} pairs)", c.pcc, c.scc, c.pairs),
            None => println!("{l:<18} no decodable trajectories"),
        }
    }
    let rep = ValuesReport {
        ground_truth: if mc_episodes.is_some() { "monte-carlo" } else { "value-iteration" },
        by_label,
        skipped_undecodable: skipped,
    };
    write_json(&out, &rep)?;
    m.output(&out)?;
    m.write(&out)?;
    Ok(())
}

/// The configured environment with its discount (and optionally its goal
/// rewards) replaced.
pub fn environment_variant(cfg: &RunConfig, gamma: f64, goal_reward: Option<f64>) -> Result<MdpSpec> {
    let grid = match cfg.env.name.as_str() {
        "taxi" => {
            if goal_reward.is_some() {
                return Err(Error::Usage("--goal-reward applies to gridworlds only".into()));
            }
            return Ok(TaxiWorld::new(gamma).compile()?);
        }
        "three-goal-15" => GridWorld::three_goal_15(),
        _ => {
            let path = cfg.env.grid_file.as_ref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            GridWorld::parse(&text).map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?
        }
    };
    let mut grid = grid;
    grid.discount = gamma;
    if let Some(r) = goal_reward {
        for g in &mut grid.goals {
            g.1 = r;
        }
    }
    Ok(grid.compile()?)
}

#[derive(Serialize)]
struct TheoremRow {
    gamma: f64,
    start: usize,
    length: usize,
    condition_holds: bool,
    values_increasing: bool,
}

/// Per-start results of the monotonicity check on one environment.
pub fn theorem_rows(env: &MdpSpec, max_len: usize) -> Result<Vec<(usize, usize, bool, bool)>> {
    let tables = mdp::value_iteration(env, 1e-13);
    let mut rows = Vec::new();
    for s in 0..env.state_count() {
        if env.is_terminal(s) {
            continue;
        }
        let roll = mdp::greedy_rollout(env, &tables, s, max_len)?;
        if !roll.reached_terminal {
            continue;
        }
        let cond = eval::increasing_value_condition(&roll.rewards, env.discount()).iter().all(|&b| b);
        let vals: Vec<f64> = roll.states.iter().map(|&st| tables.v[st]).collect();
        let inc = vals.windows(2).all(|w| w[0] < w[1]);
        rows.push((s, roll.len(), cond, inc));
    }
    Ok(rows)
}

fn check_theorem(ctx: &Ctx, gammas: &[f64], goal_reward: Option<f64>, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.reports("theorem.csv"));
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("check-theorem");
    let mut rows = Vec::new();
    for &gamma in gammas {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Usage(format!("discount {gamma} outside [0, 1)")));
        }
        let env = environment_variant(&ctx.cfg, gamma, goal_reward)?;
        for (start, length, cond, inc) in theorem_rows(&env, ctx.cfg.env.max_len)? {
            rows.push(TheoremRow { gamma, start, length, condition_holds: cond, values_increasing: inc });
        }
    }
    report::write_csv(&out, &rows)?;
    m.output(&out)?;
    m.write(&out)?;
    let failures = rows.iter().filter(|r| !(r.condition_holds && r.values_increasing)).count();
    println!("{} optimal trajectories checked, {failures} failures", rows.len());
    if failures > 0 {
        return Err(Error::CheckFailed(format!("{failures} trajectories violate the condition; see {}", out.display())));
    }
    Ok(())
}

#[derive(Serialize)]
struct ValueRow<'a> {
    traj_id: &'a str,
    t: usize,
    label: &'static str,
    model_value: f64,
    true_value: Option<f64>,
}

fn plot_values(ctx: &Ctx, model: Option<PathBuf>, data: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let _lock = OutputLock::acquire(&out)?;
    let mut m = ctx.manifest("plot-data values");
    let model = load_model(&mut m, ctx.or(&model, &ctx.cfg.paths.checkpoint))?;
    let data = load_dataset(&mut m, ctx.or(&data, &ctx.cfg.paths.test_data))?;
    let world = World::new(&ctx.cfg)?;
    let labels = label_of(&data);
    let mut rows = Vec::new();
    for t in &data.trajectories {
        let ids = t.state_ids(&world.env).ok();
        let max = model.config.max_seq_len;
        let states = t.states();
        let mut values = Vec::with_capacity(t.len());
        for chunk in states.chunks(max) {
            values.extend(state_values(&model.q_values(chunk)?));
        }
        for (i, v) in values.into_iter().enumerate() {
            rows.push(ValueRow {
                traj_id: &t.id,
                t: i,
                label: labels[t.id.as_str()].as_str(),
                model_value: v,
                true_value: ids.as_ref().map(|ids| world.tables.v[ids[i]]),
            });
        }
    }
    report::write_csv(&out, &rows)?;
    m.output(&out)?;
    m.write(&out)?;
    Ok(())
}
