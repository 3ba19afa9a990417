mod settings;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use arbor_core::detect::{calibrate_type_one, DetectError};
use arbor_core::orchestrator::{checkpoint, export_dataset, CheckpointError, ConfigError, Orchestrator, RunError, State};
use arbor_core::simulate::{simulate, Environment, RateChange, SimError};
use arbor_core::tree::{DomainId, KnowledgeTree};
use arbor_core::IrConfig;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use settings::Settings;

#[derive(Parser)]
#[command(name = "arbor", version, about = "Bandit-guided domain exploration with change detection")]
struct Cli {
    /// TOML config document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Meditation/Enlightenment rounds.
    Run(RunArgs),
    /// Flat Thompson sampling over Bernoulli arms.
    SimulateBandit(SimArgs),
    /// Monte Carlo type-I error of the window test.
    CalibrateSwblrt(CalArgs),
    /// Write a checkpoint's pooled records as JSONL.
    Export(ExportArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    meditation_batch: Option<u32>,
    #[arg(long)]
    enlightenment_batch: Option<u32>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    significance: Option<f64>,
    /// Synthetic ensemble size.
    #[arg(long)]
    sources: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u32>,
    /// Continue from this checkpoint. Only --rounds, --out and
    /// --checkpoint-every may be combined with it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Comma-separated success rates.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<f64>>,
    #[arg(long)]
    rounds: Option<u64>,
    /// Number of seeds, counted up from the base seed.
    #[arg(long)]
    seeds: Option<u64>,
    /// Rate change as ROUND:ARM:RATE; repeatable. Replaces config drift.
    #[arg(long, value_parser = parse_drift)]
    drift: Vec<RateChange>,
    /// Enable the IR sweep.
    #[arg(long)]
    ir: bool,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    significance: Option<f64>,
    /// Per-round records go here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalArgs {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    significance: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    trials: Option<u64>,
    /// History length per trial.
    #[arg(long)]
    n: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// How many arms to list by posterior mean.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

fn parse_drift(s: &str) -> Result<RateChange, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [round, arm, rate] = parts[..] else {
        return Err(format!("expected ROUND:ARM:RATE, got {s:?}"));
    };
    Ok(RateChange {
        round: round.parse().map_err(|e| format!("round: {e}"))?,
        arm: arm.parse().map_err(|e| format!("arm: {e}"))?,
        rate: rate.parse().map_err(|e| format!("rate: {e}"))?,
    })
}

enum CliError {
    Config(String),
    Checkpoint(String),
    Io(String),
    Fatal(String),
    /// The reader hung up; not worth a diagnostic.
    Closed,
}

impl CliError {
    fn report(&self) -> ExitCode {
        let (tag, msg, code) = match self {
            Self::Config(m) => ("config", m, 2),
            Self::Checkpoint(m) => ("checkpoint", m, 1),
            Self::Io(m) => ("io", m, 1),
            Self::Fatal(m) => ("fatal", m, 1),
            Self::Closed => return ExitCode::SUCCESS,
        };
        eprintln!("error[{tag}]: {}", msg.replace('\n', " "));
        ExitCode::from(code)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Checkpoint(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Self::Closed;
        }
        Self::Io(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => e.into(),
            RunError::Checkpoint(e) => e.into(),
            RunError::Io(e) => e.into(),
            other => Self::Fatal(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        Self::Config(e.to_string())
    }
}

fn print_json(v: &Value) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, v).map_err(io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_run(cli: &Cli, a: &RunArgs) -> Result<(), CliError> {
    let mut orch = match &a.resume {
        Some(path) => {
            let fixed = [
                ("--config", cli.config.is_some()),
                ("--seed", cli.seed.is_some()),
                ("--meditation-batch", a.meditation_batch.is_some()),
                ("--enlightenment-batch", a.enlightenment_batch.is_some()),
                ("--window", a.window.is_some()),
                ("--significance", a.significance.is_some()),
                ("--sources", a.sources.is_some()),
            ];
            if let Some((flag, _)) = fixed.iter().find(|(_, set)| *set) {
                return Err(CliError::Config(format!("{flag} cannot be changed when resuming")));
            }
            let mut state: State = checkpoint::load(path)?;
            let cfg = &mut state.config;
            if let Some(r) = a.rounds {
                cfg.rounds = r;
            }
            if let Some(dir) = &a.out {
                cfg.output.dir = Some(dir.clone());
            }
            if let Some(n) = a.checkpoint_every {
                cfg.output.checkpoint_every = n;
            }
            cfg.validate()?;
            Orchestrator::resume(state)?
        }
        None => {
            let mut cfg = Settings::load(cli.config.as_deref())?.run;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            macro_rules! over {
                ($($field:ident).+ = $flag:expr) => {
                    if let Some(v) = $flag.clone() {
                        cfg.$($field).+ = v;
                    }
                };
            }
            over!(rounds = a.rounds);
            over!(meditation_batch = a.meditation_batch);
            over!(enlightenment_batch = a.enlightenment_batch);
            over!(window = a.window);
            over!(significance = a.significance);
            over!(sources = a.sources);
            over!(output.checkpoint_every = a.checkpoint_every);
            if let Some(dir) = &a.out {
                cfg.output.dir = Some(dir.clone());
            }
            cfg.validate()?;
            Orchestrator::new(cfg)?
        }
    };
    let report = orch.run_to_end()?;
    print_json(&json!({
        "rounds": orch.state().round,
        "records": report.records,
        "level_counts": report.level_counts,
        "posterior_digest": report.posterior_digest,
        "output_dir": orch.state().config.output.dir,
    }))
}

fn cmd_simulate(cli: &Cli, a: &SimArgs) -> Result<(), CliError> {
    let s = Settings::load(cli.config.as_deref())?;
    let mut sim = s.simulation;
    if let Some(arms) = &a.arms {
        sim.arms = arms.clone();
    }
    if !a.drift.is_empty() {
        sim.drift = a.drift.clone();
    }
    let rounds = a.rounds.unwrap_or(sim.rounds);
    let count = a.seeds.unwrap_or(sim.seeds);
    if count == 0 {
        return Err(CliError::Config("invalid `seeds`: must be at least 1".into()));
    }
    let base = cli.seed.unwrap_or(s.run.seed);
    let seeds: Vec<u64> = (0..count).map(|i| base.wrapping_add(i)).collect();
    let ir = if a.ir || sim.ir {
        Some(IrConfig::new(a.window.unwrap_or(s.run.window), a.significance.unwrap_or(s.run.significance))?)
    } else {
        None
    };
    let env = Environment { rates: sim.arms, drift: sim.drift };
    let rep = simulate(&env, rounds, &seeds, ir.as_ref())?;

    let mut sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for run in &rep.runs {
        let mut total = 0u64;
        for (t, (&arm, &r)) in run.choices.iter().zip(&run.rewards).enumerate() {
            total += u64::from(r);
            let line = json!({"type": "round", "seed": run.seed, "round": t, "arm": arm, "reward": r, "cumulative_reward": total});
            writeln!(sink, "{line}")?;
        }
    }
    sink.flush()?;
    drop(sink);
    print_json(&json!({
        "type": "summary",
        "rounds": rep.rounds,
        "seeds": seeds,
        "mean_best_share": rep.mean_best_share,
        "mean_shares": rep.mean_shares,
        "total_reward": rep.runs.iter().map(|r| r.total_reward).collect::<Vec<_>>(),
        "resets": rep.runs.iter().map(|r| r.resets).collect::<Vec<_>>(),
    }))
}

fn cmd_calibrate(cli: &Cli, a: &CalArgs) -> Result<(), CliError> {
    let s = Settings::load(cli.config.as_deref())?;
    let c = s.calibration;
    let rep = calibrate_type_one(
        a.window.unwrap_or(s.run.window),
        a.significance.unwrap_or(s.run.significance),
        a.lambda.unwrap_or(c.lambda),
        a.trials.unwrap_or(c.trials),
        a.n.unwrap_or(c.n),
        cli.seed.unwrap_or(s.run.seed),
    )?;
    print_json(&serde_json::to_value(&rep).expect("report serializes"))
}

fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    let state = checkpoint::load(&a.checkpoint)?;
    let n = export_dataset(&state.pools, &a.out)?;
    print_json(&json!({"records": n, "out": a.out}))
}

fn shape(tree: &KnowledgeTree, id: DomainId) -> Vec<Value> {
    tree.children(id)
        .unwrap_or_default()
        .iter()
        .filter_map(|&c| tree.get(c))
        .filter(|d| !d.is_unk)
        .map(|d| json!({"id": d.id, "name": d.name, "active": d.active, "children": shape(tree, d.id)}))
        .collect()
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), CliError> {
    let st = checkpoint::load(&a.checkpoint)?;
    let tree = &st.tree;
    let label = |id: DomainId| -> String {
        let Ok(path) = tree.path_of(id) else { return String::new() };
        let names: Vec<&str> = path.arms().iter().filter_map(|&a| tree.get(a)).map(|d| d.display_name()).collect();
        names.join(" > ")
    };
    let mut arms: Vec<(DomainId, f64, f64, f64)> = st
        .posteriors
        .iter()
        .filter(|(_, p)| !p.deactivated)
        .map(|(id, p)| (id, p.mean(), p.alpha, p.beta))
        .collect();
    arms.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let top: Vec<Value> = arms
        .iter()
        .take(a.top)
        .map(|&(id, mean, alpha, beta)| json!({"id": id, "path": label(id), "mean": mean, "alpha": alpha, "beta": beta}))
        .collect();
    let w = st.posteriors.window_width() as u64;
    let pending: Vec<Value> = st
        .posteriors
        .iter()
        .filter_map(|(id, p)| p.window.as_ref().filter(|win| !win.is_empty()).map(|win| (id, p, win)))
        .map(|(id, p, win)| {
            json!({
                "id": id,
                "path": label(id),
                "filled": win.len(),
                "width": win.capacity(),
                "window_successes": win.successes(),
                "history_count": p.history_count,
                "testable": p.history_count > w,
            })
        })
        .collect();
    let (n1, n2, n3) = tree.level_counts();
    let v = json!({
        "round": st.round,
        "rounds": st.config.rounds,
        "nodes": tree.len(),
        "level_counts": [n1, n2, n3],
        "records": st.pools.len(),
        "posterior_digest": st.posteriors.digest(),
        "tree": shape(tree, tree.root()),
        "top_arms": top,
        "pending_windows": pending,
    });
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &v).map_err(io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn ignore_run_flags(cli: &Cli) {
    if cli.config.is_some() || cli.seed.is_some() {
        log::warn!("--config and --seed have no effect on checkpoint commands");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => cmd_run(&cli, a),
        Command::SimulateBandit(a) => cmd_simulate(&cli, a),
        Command::CalibrateSwblrt(a) => cmd_calibrate(&cli, a),
        Command::Export(a) => {
            ignore_run_flags(&cli);
            cmd_export(a)
        }
        Command::Inspect(a) => {
            ignore_run_flags(&cli);
            cmd_inspect(a)
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
