//! Command-line entry points: dataset generation, offline/online training,
//! evaluation, oracle printing, and CSV export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;

use qam_core::agents::checkpoint::load_agent;
use qam_core::env::{
    dp_policy_value, gen_dataset, make_env, maze, tilted_gaussian_oracle, BehaviorSpec, Dataset,
    EnvSpec,
};
use qam_core::harness::{evaluate, run_offline, run_online, RunConfig};
use qam_core::QamError;

#[derive(Parser)]
#[command(name = "qam", about = "Flow-policy RL with adjoint-matched objectives", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an offline dataset file.
    GenData(GenDataArgs),
    /// Offline pre-training from a dataset.
    TrainOffline(TrainArgs),
    /// Online fine-tuning from an offline checkpoint.
    TrainOnline(TrainOnlineArgs),
    /// Evaluate a checkpoint deterministically.
    Eval(EvalArgs),
    /// Print analytic oracle values.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Mirror a binary dataset as CSV.
    ExportCsv(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// gauss-bandit | bimodal-bandit | point-maze
    #[arg(long)]
    env: String,
    /// gaussian | mixture | scripted
    #[arg(long, default_value = "gaussian")]
    behavior: String,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Behavior mean (comma-separated), gaussian behavior only.
    #[arg(long)]
    mu: Option<String>,
    /// Behavior std per coordinate, gaussian behavior only.
    #[arg(long)]
    sigma: Option<String>,
    /// Reward direction for the tilt bandit.
    #[arg(long)]
    b: Option<String>,
    /// Reward curvature diagonal for the tilt bandit.
    #[arg(long)]
    c: Option<String>,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Scripted-route count (point maze).
    #[arg(long, default_value_t = 2)]
    routes: usize,
    /// Scripted action noise std (point maze).
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Scripted episodes start uniformly over the square.
    #[arg(long, default_value_t = false)]
    uniform_starts: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    critic_k: Option<usize>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    sigma_a: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    vartheta: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
}

#[derive(Args)]
struct TrainOnlineArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Offline checkpoint directory to fine-tune from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Online environment steps (UTD 1: one update per step).
    #[arg(long)]
    env_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Closed-form tilted-Gaussian moments.
    Tilt {
        /// Behavior mean, comma-separated.
        #[arg(long)]
        mu: String,
        /// Behavior variance diagonal.
        #[arg(long)]
        sigma: String,
        #[arg(long)]
        tau: f64,
        /// Reward direction.
        #[arg(long)]
        b: String,
        /// Reward curvature diagonal (defaults to zero).
        #[arg(long)]
        c: Option<String>,
    },
    /// Dynamic-programming value of a scripted maze policy.
    Dp {
        /// below | above
        #[arg(long, default_value = "below")]
        route: String,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        /// Positions "x,y" to print values at (repeatable); defaults to the
        /// standard start.
        #[arg(long)]
        at: Vec<String>,
    },
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_list(text: &str) -> Result<Vec<f64>, QamError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| QamError::config(format!("bad number '{t}': {e}")))
        })
        .collect()
}

fn fmt_list(values: &Array1<f64>) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

fn gen_data(args: &GenDataArgs) -> Result<(), QamError> {
    let spec = match args.env.as_str() {
        "gauss-bandit" => EnvSpec::GaussBandit {
            dim: args.dim,
            mu: vec![],
            var: vec![],
            b: args.b.as_deref().map(parse_list).transpose()?.unwrap_or_default(),
            c: args.c.as_deref().map(parse_list).transpose()?.unwrap_or_default(),
        },
        "bimodal-bandit" => EnvSpec::BimodalBandit { dim: args.dim },
        "point-maze" => EnvSpec::PointMaze,
        other => return Err(QamError::config(format!("unknown environment '{other}'"))),
    };
    let behavior = match args.behavior.as_str() {
        "gaussian" => BehaviorSpec::Gaussian {
            mu: args.mu.as_deref().map(parse_list).transpose()?.unwrap_or_default(),
            sigma: args.sigma.as_deref().map(parse_list).transpose()?.unwrap_or_default(),
        },
        "mixture" => BehaviorSpec::Mixture,
        "scripted" => BehaviorSpec::ScriptedRoutes {
            routes: args.routes,
            noise: args.noise,
            uniform_starts: args.uniform_starts,
        },
        other => return Err(QamError::config(format!("unknown behavior '{other}'"))),
    };
    let ds = gen_dataset(&spec, &behavior, args.n, args.seed)?;
    ds.save(&args.out)?;
    println!(
        "wrote {} transitions ({} -> {})",
        ds.len(),
        ds.env_name,
        args.out.display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(v) = &args.agent {
        cfg.agent = v.clone();
    }
    if let Some(v) = &args.env {
        cfg.env = v.clone();
        cfg.env_spec = None;
    }
    if let Some(v) = args.steps {
        cfg.offline_steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.critic_k {
        cfg.critic_k = v;
    }
    if let Some(v) = args.flow_steps {
        cfg.flow_steps = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.sigma_a {
        cfg.sigma_a = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.vartheta {
        cfg.vartheta = v;
    }
    if let Some(v) = args.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = args.eval_episodes {
        cfg.eval_episodes = v;
    }
}

fn load_config(args: &TrainArgs) -> Result<RunConfig, QamError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, args);
    Ok(cfg)
}

fn train_offline(args: &TrainArgs) -> Result<(), QamError> {
    let cfg = load_config(args)?;
    let artifacts = run_offline(&cfg)?;
    println!("metrics: {}", artifacts.metrics_path.display());
    println!("checkpoint: {}", artifacts.checkpoint_dir.display());
    if let Some(eval) = artifacts.final_eval {
        println!(
            "final eval: return {:.4} [{:.4}, {:.4}], success {:.3}",
            eval.mean_return, eval.return_lo, eval.return_hi, eval.success_rate
        );
    }
    Ok(())
}

fn train_online(args: &TrainOnlineArgs) -> Result<(), QamError> {
    let mut cfg = load_config(&args.train)?;
    if let Some(v) = args.env_steps {
        cfg.online_steps = v;
    }
    let artifacts = run_online(&cfg, &args.checkpoint)?;
    println!("metrics: {}", artifacts.metrics_path.display());
    println!("checkpoint: {}", artifacts.checkpoint_dir.display());
    if let Some(eval) = artifacts.final_eval {
        println!(
            "final eval: return {:.4} [{:.4}, {:.4}], success {:.3}",
            eval.mean_return, eval.return_lo, eval.return_hi, eval.success_rate
        );
    }
    Ok(())
}

fn eval_checkpoint(args: &EvalArgs) -> Result<(), QamError> {
    let agent = load_agent(&args.checkpoint)?;
    let spec = qam_core::env::env_spec_from_name(&args.env)?;
    let mut env = make_env(&spec)?;
    let result = evaluate(&agent, env.as_mut(), args.episodes, args.seed)?;
    println!(
        "return {:.6} [{:.6}, {:.6}] success {:.4} over {} episodes",
        result.mean_return, result.return_lo, result.return_hi, result.success_rate,
        result.episodes
    );
    Ok(())
}

fn oracle(cmd: &OracleCmd) -> Result<(), QamError> {
    match cmd {
        OracleCmd::Tilt { mu, sigma, tau, b, c } => {
            let mu = Array1::from_vec(parse_list(mu)?);
            let var = Array1::from_vec(parse_list(sigma)?);
            let b = Array1::from_vec(parse_list(b)?);
            let c = match c {
                Some(text) => Array1::from_vec(parse_list(text)?),
                None => Array1::zeros(mu.len()),
            };
            let (mean, var) = tilted_gaussian_oracle(&mu, &var, *tau, &b, &c)?;
            println!("mean {}", fmt_list(&mean));
            println!("var {}", fmt_list(&var));
        }
        OracleCmd::Dp { route, gamma, grid, at } => {
            let side = match route.as_str() {
                "below" => maze::RouteSide::Below,
                "above" => maze::RouteSide::Above,
                other => return Err(QamError::config(format!("unknown route '{other}'"))),
            };
            let m = maze::PointMaze::standard();
            let grid_n = *grid;
            let policy =
                move |pos: &Array1<f64>| maze::scripted_action_on_grid(&m, pos, side, grid_n);
            let maze_eval = maze::PointMaze::standard();
            let values = dp_policy_value(&maze_eval, &policy, grid_n, *gamma);
            let positions: Vec<Array1<f64>> = if at.is_empty() {
                vec![maze_eval.start.clone()]
            } else {
                at.iter()
                    .map(|t| parse_list(t).map(Array1::from_vec))
                    .collect::<Result<_, _>>()?
            };
            for pos in positions {
                let ix = ((pos[0] * grid_n as f64).floor() as usize).min(grid_n - 1);
                let iy = ((pos[1] * grid_n as f64).floor() as usize).min(grid_n - 1);
                println!("value {},{} {}", pos[0], pos[1], values[[ix, iy]]);
            }
        }
    }
    Ok(())
}

fn export_csv(args: &ExportArgs) -> Result<(), QamError> {
    let ds = Dataset::load(&args.dataset)?;
    ds.export_csv(&args.out)?;
    println!("wrote {} rows to {}", ds.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), QamError> {
    match &cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::TrainOffline(args) => train_offline(args),
        Cmd::TrainOnline(args) => train_online(args),
        Cmd::Eval(args) => eval_checkpoint(args),
        Cmd::Oracle(cmd) => oracle(cmd),
        Cmd::ExportCsv(args) => export_csv(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(QamError::NanCollapse(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
