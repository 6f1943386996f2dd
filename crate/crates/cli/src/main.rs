//! `ilcurate` command-line entry point.
//!
//! Exit status: 0 on success, 1 on a module or configuration error, 2 on a
//! usage error, 3 when `verify-bounds` finds a violated bound.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use ilcurate_core::bc::{self, MlpPolicy};
use ilcurate_core::coverage::{self, CurveSpec};
use ilcurate_core::dataset::{self, Dataset};
use ilcurate_core::harness;
use ilcurate_core::mdp;
use ilcurate_core::metrics::{self, ClusterParams};
use ilcurate_core::pmobstacle::{self, EvalResult};
use serde_json::{json, Value};

use crate::config::{Config, ConfigError, PanelChoice};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "ilcurate", version, about = "Imitation-learning data quality tools")]
struct Cli {
    /// JSON config file; keys mirror the dotted paths accepted by --set.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a config value, e.g. --set train.epochs=50 (repeatable; later wins).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Directory for output files (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    output_dir: PathBuf,

    /// Base random seed (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print progress to standard error; repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a dataset.
    Collect {
        /// Number of episodes (collect.episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// System noise during collection (env.sigma_s).
        #[arg(long)]
        sigma_s: Option<f64>,
        /// Expert policy noise (expert.sigma_p).
        #[arg(long)]
        sigma_p: Option<f64>,
        /// Dataset file name inside the output directory.
        #[arg(long, default_value = "dataset.jsonl")]
        out: String,
    },
    /// Report action variance and state similarity of a dataset.
    Metrics {
        /// Dataset file to analyse.
        #[arg(long)]
        dataset: PathBuf,
        /// Cluster radius (metrics.epsilon); defaults to a data-scaled value.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Distance used for clusters (metrics.norm).
        #[arg(long, value_parser = ["euclidean", "chebyshev", "manhattan"])]
        norm: Option<String>,
        /// Use the grid neighbour index (metrics.search=grid).
        #[arg(long)]
        grid: bool,
    },
    /// Write analytic coverage curves as CSV.
    Coverage {
        /// Which panel to emit (coverage.panel).
        #[arg(long, value_parser = ["ps", "pb", "both"])]
        panel: Option<String>,
        /// Sample budgets of the tolerance panel (coverage.ps.ns).
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// Tolerance of the tolerance panel (coverage.ps.epsilon).
        #[arg(long)]
        epsilon: Option<f64>,
        /// State dimension for both panels (coverage.ps.d, coverage.pb.d).
        #[arg(long)]
        dim: Option<usize>,
        /// Policy-noise multipliers of the ball panel (coverage.pb.multipliers).
        #[arg(long, value_delimiter = ',')]
        multipliers: Option<Vec<f64>>,
    },
    /// Check the visitation-shift bounds on random tabular MDPs.
    VerifyBounds {
        /// Number of random instances, seeds 0..N (verify.seeds).
        #[arg(long)]
        seeds: Option<u64>,
        /// Largest state count (verify.max_states).
        #[arg(long)]
        max_states: Option<usize>,
        /// Largest action count (verify.max_actions).
        #[arg(long)]
        max_actions: Option<usize>,
        /// Largest horizon (verify.max_horizon).
        #[arg(long)]
        max_horizon: Option<usize>,
    },
    /// Train a behavioral-cloning policy on a dataset.
    Train {
        /// Dataset file to train on.
        #[arg(long)]
        dataset: PathBuf,
        /// Training epochs (train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Minibatch size (train.batch_size).
        #[arg(long)]
        batch_size: Option<usize>,
        /// Adam step size (train.learning_rate).
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Hidden layer widths (train.hidden_sizes).
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        /// Minimum optimizer updates (train.min_updates).
        #[arg(long)]
        min_updates: Option<usize>,
        /// Also train on failed episodes (train_successes_only=false).
        #[arg(long)]
        all_episodes: bool,
        /// Checkpoint file name inside the output directory.
        #[arg(long, default_value = "policy.json")]
        out: String,
    },
    /// Evaluate a policy checkpoint (or the scripted expert) in the environment.
    Eval {
        /// Policy checkpoint to evaluate.
        #[arg(long, required_unless_present = "expert", conflicts_with = "expert")]
        policy: Option<PathBuf>,
        /// Evaluate the noise-free scripted expert instead of a checkpoint.
        #[arg(long)]
        expert: bool,
        /// System noise during evaluation (eval.sigma_s).
        #[arg(long)]
        sigma_s_eval: Option<f64>,
        /// Number of episodes (eval.episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a noise sweep and export raw, aggregated and summary tables.
    Sweep {
        /// Which noise to vary (sweep.kind).
        #[arg(long, value_parser = ["system", "policy", "combined"])]
        kind: Option<String>,
        /// Dataset sizes in episodes (sweep.dataset_sizes).
        #[arg(long, value_delimiter = ',')]
        dataset_sizes: Option<Vec<usize>>,
        /// Repeats per cell (sweep.repeats).
        #[arg(long)]
        repeats: Option<usize>,
        /// Evaluation episodes per cell (sweep.eval_episodes).
        #[arg(long)]
        eval_episodes: Option<usize>,
    },
}

type Override = (Vec<String>, Value);

fn flag(out: &mut Vec<Override>, path: &str, value: Option<impl Into<Value>>) {
    if let Some(v) = value {
        out.push((path.split('.').map(str::to_string).collect(), v.into()));
    }
}

impl Command {
    /// Subcommand flags as config overrides; applied after --set so flags win.
    fn overrides(&self) -> Vec<Override> {
        let mut o = Vec::new();
        match self {
            Command::Collect {
                episodes,
                sigma_s,
                sigma_p,
                ..
            } => {
                flag(&mut o, "collect.episodes", *episodes);
                flag(&mut o, "env.sigma_s", *sigma_s);
                flag(&mut o, "expert.sigma_p", *sigma_p);
            }
            Command::Metrics {
                epsilon, norm, grid, ..
            } => {
                flag(&mut o, "metrics.epsilon", *epsilon);
                flag(&mut o, "metrics.norm", norm.clone());
                flag(&mut o, "metrics.search", grid.then_some("grid"));
            }
            Command::Coverage {
                panel,
                n,
                epsilon,
                dim,
                multipliers,
            } => {
                flag(&mut o, "coverage.panel", panel.clone());
                flag(&mut o, "coverage.ps.ns", n.clone());
                flag(&mut o, "coverage.ps.epsilon", *epsilon);
                flag(&mut o, "coverage.ps.d", *dim);
                flag(&mut o, "coverage.pb.d", *dim);
                flag(&mut o, "coverage.pb.multipliers", multipliers.clone());
            }
            Command::VerifyBounds {
                seeds,
                max_states,
                max_actions,
                max_horizon,
            } => {
                flag(&mut o, "verify.seeds", *seeds);
                flag(&mut o, "verify.max_states", *max_states);
                flag(&mut o, "verify.max_actions", *max_actions);
                flag(&mut o, "verify.max_horizon", *max_horizon);
            }
            Command::Train {
                epochs,
                batch_size,
                learning_rate,
                hidden,
                min_updates,
                all_episodes,
                ..
            } => {
                flag(&mut o, "train.epochs", *epochs);
                flag(&mut o, "train.batch_size", *batch_size);
                flag(&mut o, "train.learning_rate", *learning_rate);
                flag(&mut o, "train.hidden_sizes", hidden.clone());
                flag(&mut o, "train.min_updates", *min_updates);
                flag(&mut o, "train_successes_only", all_episodes.then_some(false));
            }
            Command::Eval {
                sigma_s_eval, episodes, ..
            } => {
                flag(&mut o, "eval.sigma_s", *sigma_s_eval);
                flag(&mut o, "eval.episodes", *episodes);
            }
            Command::Sweep {
                kind,
                dataset_sizes,
                repeats,
                eval_episodes,
            } => {
                flag(&mut o, "sweep.kind", kind.clone());
                flag(&mut o, "sweep.dataset_sizes", dataset_sizes.clone());
                flag(&mut o, "sweep.repeats", *repeats);
                flag(&mut o, "sweep.eval_episodes", *eval_episodes);
            }
        }
        o
    }
}

/// Everything that ends a run with a nonzero status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Module(String),
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Module(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Verify(_) => 3,
        }
    }
}

impl From<ilcurate_core::Error> for Failure {
    fn from(e: ilcurate_core::Error) -> Self {
        Failure::Module(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Usage(m) => Failure::Usage(m),
            ConfigError::Invalid(m) => Failure::Module(m),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Module(format!("{}: {e}", path.display()))
}

struct Ctx {
    config: Config,
    output_dir: PathBuf,
    verbose: u8,
}

impl Ctx {
    fn provenance(&self) -> String {
        format!(
            "ilcurate {VERSION} seed={} config_sha256={}",
            self.config.seed,
            self.config.hash()
        )
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Write a CSV body preceded by the provenance comment line.
    fn write_csv(&self, name: &str, body: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        let mut text = format!("# {}\n", self.provenance()).into_bytes();
        text.extend_from_slice(body);
        fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
        self.log(format!("wrote {}", path.display()));
        Ok(path)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    flag(&mut overrides, "seed", cli.seed);
    overrides.extend(cli.command.overrides());
    let config = config::resolve(cli.config.as_deref(), &overrides)?;
    fs::create_dir_all(&cli.output_dir).map_err(|e| io_failure(&cli.output_dir, e))?;
    let ctx = Ctx {
        config,
        output_dir: cli.output_dir,
        verbose: cli.verbose,
    };
    ctx.log(ctx.provenance());
    let config_path = ctx.path("config.json");
    let pretty = serde_json::to_string_pretty(&ctx.config).expect("config serializes") + "\n";
    fs::write(&config_path, pretty).map_err(|e| io_failure(&config_path, e))?;

    match &cli.command {
        Command::Collect { out, .. } => collect(&ctx, out),
        Command::Metrics { dataset, .. } => metrics_cmd(&ctx, dataset),
        Command::Coverage { .. } => coverage_cmd(&ctx),
        Command::VerifyBounds { .. } => verify(&ctx),
        Command::Train { dataset, out, .. } => train(&ctx, dataset, out),
        Command::Eval { policy, .. } => eval(&ctx, policy.as_deref()),
        Command::Sweep { .. } => sweep(&ctx),
    }
}

fn collect(ctx: &Ctx, out: &str) -> Result<(), Failure> {
    let c = &ctx.config;
    let ds = pmobstacle::collect_dataset(&c.env, &c.expert, c.collect.episodes, c.seed)?;
    let path = ctx.path(out);
    dataset::save_dataset(&ds, &path)?;
    let stats = dataset::dataset_stats(&ds)?;
    println!(
        "collected {} episodes ({} transitions), expert success {:.1}% -> {}",
        stats.n_trajectories,
        stats.n_transitions,
        100.0 * stats.success_fraction,
        path.display()
    );
    Ok(())
}

fn metrics_cmd(ctx: &Ctx, path: &Path) -> Result<(), Failure> {
    let ds = dataset::load_dataset(path)?;
    let m = &ctx.config.metrics;
    let params = match m.epsilon {
        Some(eps) => ClusterParams::new(eps, m.norm)?,
        None => ClusterParams {
            norm: m.norm,
            ..ClusterParams::default_for(&ds)
        },
    }
    .with_search(m.search);
    let report = metrics::metrics_report(&ds, &params)?;
    print!("{report}");
    let out = ctx.path("metrics.json");
    let record = json!({
        "provenance": ctx.provenance(),
        "dataset": path.display().to_string(),
        "report": report,
    });
    fs::write(&out, format!("{record}\n")).map_err(|e| io_failure(&out, e))?;
    ctx.log(format!("wrote {}", out.display()));
    Ok(())
}

fn coverage_cmd(ctx: &Ctx) -> Result<(), Failure> {
    let c = &ctx.config.coverage;
    let spec = CurveSpec {
        ps: matches!(c.panel, PanelChoice::Ps | PanelChoice::Both).then(|| c.ps.clone()),
        pb: matches!(c.panel, PanelChoice::Pb | PanelChoice::Both).then(|| c.pb.clone()),
    };
    let rows = coverage::emit_coverage_curves(&spec)?;
    let mut body = Vec::new();
    coverage::write_curves_csv(&rows, &mut body).expect("writing to memory");
    let path = ctx.write_csv("coverage.csv", &body)?;
    println!("{} curve points -> {}", rows.len(), path.display());
    Ok(())
}

fn verify(ctx: &Ctx) -> Result<(), Failure> {
    let v = &ctx.config.verify;
    if v.max_states == 0 || v.max_actions == 0 || v.max_horizon == 0 {
        return Err(Failure::Module("verify sizes must be at least 1".into()));
    }
    let results = mdp::verify_seeds(v.seeds, v.max_states, v.max_actions, v.max_horizon)?;
    let mut body = String::from(
        "seed,theorem1_lhs,theorem1_rhs,theorem1_slack,theorem1_holds,lemma1_lhs,lemma1_rhs,lemma1_slack,lemma1_holds\n",
    );
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in &results {
        let (t, l) = (&r.theorem1, &r.lemma1);
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.seed, t.lhs, t.rhs, t.slack, t.holds, l.lhs, l.rhs, l.slack, l.holds
        ));
        let _ = writeln!(
            out,
            "seed {:>5}  theorem1 lhs={:.6e} rhs={:.6e} {}  lemma1 lhs={:.6e} rhs={:.6e} {}",
            r.seed,
            t.lhs,
            t.rhs,
            if t.holds { "holds" } else { "FAILS" },
            l.lhs,
            l.rhs,
            if l.holds { "holds" } else { "FAILS" },
        );
    }
    ctx.write_csv("bounds.csv", body.as_bytes())?;
    let held = results.iter().filter(|r| r.holds()).count();
    let _ = writeln!(out, "{held}/{} hold", results.len());
    if held == results.len() {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "{} of {} instances violate a bound",
            results.len() - held,
            results.len()
        )))
    }
}

fn train(ctx: &Ctx, path: &Path, out: &str) -> Result<(), Failure> {
    let ds = dataset::load_dataset(path)?;
    let ds: Dataset = if ctx.config.train_successes_only {
        ds.successful_only()
            .ok_or_else(|| Failure::Module("dataset has no successful episodes (use --all-episodes)".into()))?
    } else {
        ds
    };
    let config = bc::TrainConfig {
        seed: ctx.config.seed,
        ..ctx.config.train.clone()
    };
    let (policy, history) = bc::train_with_history(&ds, &config)?;
    let dest = ctx.path(out);
    bc::save_policy(&policy, &dest)?;
    println!(
        "trained on {} transitions for {} epochs, final epoch loss {:.6e} -> {}",
        ds.n_transitions(),
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        dest.display()
    );
    Ok(())
}

fn eval(ctx: &Ctx, policy: Option<&Path>) -> Result<(), Failure> {
    let c = &ctx.config;
    let result: EvalResult = match policy {
        Some(p) => {
            let policy: MlpPolicy = bc::load_policy(p)?;
            if policy.input_dim() != 2 || policy.output_dim() != 2 {
                return Err(Failure::Module("policy must map 2-D states to 2-D actions".into()));
            }
            pmobstacle::evaluate(&policy, &c.env, c.eval.sigma_s, c.eval.episodes, c.seed)?
        }
        None => {
            let expert = c.expert.with_sigma_p(0.0);
            pmobstacle::evaluate(&expert, &c.env, c.eval.sigma_s, c.eval.episodes, c.seed)?
        }
    };
    let body = format!(
        "sigma_s_eval,episodes,success_rate,std_error,collisions,timeouts\n{},{},{},{},{},{}\n",
        c.eval.sigma_s, result.episodes, result.success_rate, result.std_error, result.collisions, result.timeouts
    );
    ctx.write_csv("eval.csv", body.as_bytes())?;
    println!(
        "success {:.1}% (stderr {:.1}) over {} episodes at sigma_s={}",
        result.success_rate, result.std_error, result.episodes, c.eval.sigma_s
    );
    Ok(())
}

fn sweep(ctx: &Ctx) -> Result<(), Failure> {
    let spec = ctx.config.sweep_spec();
    let kind = ctx.config.sweep.kind;
    ctx.log(format!(
        "running {kind} sweep: {} training cells",
        spec.cells(kind).len()
    ));
    let result = harness::run_sweep(&spec, kind)?;
    harness::export_results(&result, &ctx.output_dir, Some(&ctx.provenance()))?;
    print!("{}", harness::summary_markdown(&result));
    if result.missing() > 0 {
        eprintln!(
            "warning: {} rows missing (see status column of raw.csv)",
            result.missing()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}\n\nRun `ilcurate --help` for usage."),
                Failure::Module(m) | Failure::Verify(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
