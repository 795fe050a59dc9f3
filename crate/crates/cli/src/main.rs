use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dspd::config::{parse_config, ConfigErrors, RunConfig};
use dspd::model::TableModel;
use dspd::oracle::{FospBoxes, Oracle, DEFAULT_MU_MAX, DEFAULT_SIZE_CAP};
use dspd::policy::CoupledSoftmax;
use dspd::runner::{build_model, execute_run, load_checkpoint, multi_seed};
use dspd::suite::{verify_suite, SuiteOptions};

#[derive(Parser)]
#[command(name = "dspd", version, about = "Distributed primal-dual learning for constrained multi-agent RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a run config and write metrics to a directory.
    Run(RunArgs),
    /// Train one run per seed and aggregate the metrics.
    MultiSeed(RunArgs),
    /// Exact checks on small models.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Iterations and batches required for a target accuracy and confidence.
    TheoryBudget {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long, required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named preset, used instead of a config file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Output directory. Falls back to the config's `output_dir`, then `dspd-out`.
    #[arg(long, env = "DSPD_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Comma-separated seeds; runs each one and aggregates.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Run the exact check suite on a table model.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MU_MAX)]
        mu_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Stationarity residual of a saved run.
    Fosp {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Multiplier box. Defaults to the run's own.
        #[arg(long)]
        mu_max: Option<f64>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    Suite,
}

impl From<dspd::Error> for Failure {
    fn from(e: dspd::Error) -> Self {
        match e {
            dspd::Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ConfigErrors> for Failure {
    fn from(e: ConfigErrors) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load_run_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => parse_config(path)?,
        (None, Some(name)) => RunConfig::preset(name)
            .ok_or_else(|| Failure::Config(format!("unknown preset {name:?}")))?,
        (None, None) => return Err(Failure::Config("need --config or --preset".into())),
    };
    if let Some(m) = args.iters {
        if m == 0 {
            return Err(Failure::Config("--iters must be positive".into()));
        }
        cfg.dspd.iterations = m;
    }
    Ok(cfg)
}

fn run(args: RunArgs, force_multi: bool) -> Result<(), Failure> {
    let cfg = load_run_config(&args)?;
    let seeds = match (&args.seeds, args.seed) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => vec![s],
        (None, None) if force_multi => cfg.seeds.clone(),
        (None, None) => vec![cfg.seeds[0]],
    };
    let dir = match (&args.out, &cfg.output_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => cfg.base_dir.as_deref().unwrap_or(".".as_ref()).join(d),
        (None, None) => PathBuf::from("dspd-out"),
    };
    if seeds.len() > 1 || force_multi {
        let report = multi_seed(&cfg, &seeds, &dir)?;
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        if report.succeeded.is_empty() {
            return Err(Failure::Runtime("every seed failed".into()));
        }
        return Ok(());
    }
    let out = execute_run(&cfg, seeds[0], &dir)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", serde_json::to_string_pretty(&out.summary).expect("summary serializes"));
    match out.summary.failure {
        Some(f) => Err(Failure::Runtime(f)),
        None => Ok(()),
    }
}

fn oracle(cmd: OracleCommand) -> Result<(), Failure> {
    match cmd {
        OracleCommand::Verify {
            model,
            mu_max,
            seed,
            trials,
        } => {
            let m = TableModel::load(&model)?;
            let checks = verify_suite(
                &m,
                SuiteOptions {
                    mu_max,
                    seed,
                    trials,
                    ..SuiteOptions::default()
                },
            )?;
            let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {:width$}  {}", c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(Failure::Suite)
            }
        }
        OracleCommand::Fosp { checkpoint, mu_max } => {
            let ck = load_checkpoint(&checkpoint)?;
            let model = build_model(&ck.config)?;
            let policy = CoupledSoftmax::for_model(model.as_ref(), ck.config.dspd.kappa_p)?;
            let oracle = Oracle::new(model.as_ref(), &policy, DEFAULT_SIZE_CAP)?;
            let sol = oracle.solve(&ck.theta, &ck.mu)?;
            let boxes = FospBoxes {
                mu_max: mu_max.unwrap_or(ck.config.dspd.mu_max),
                theta_lo: ck.config.dspd.theta_lo,
                theta_hi: ck.config.dspd.theta_hi,
            };
            let f = oracle.fosp_residual(&sol, boxes)?;
            println!(
                "{}",
                serde_json::json!({
                    "iterations_completed": ck.iterations_completed,
                    "mu_max": boxes.mu_max,
                    "X": f.x,
                    "Y": f.y,
                    "E": f.e,
                    "lagrangian": oracle.lagrangian(&sol),
                })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args, false),
        Command::MultiSeed(args) => run(args, true),
        Command::Oracle(cmd) => oracle(cmd),
        Command::TheoryBudget { epsilon, delta } => dspd::dspd::theory_budget(epsilon, delta)
            .map(|b| println!("{}", serde_json::to_string_pretty(&b).expect("budget serializes")))
            .map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Suite) => ExitCode::from(3),
    }
}
