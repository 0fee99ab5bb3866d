use bhpm::harness::{
    self, cmd_eval_root, cmd_generate, cmd_predict, cmd_sweep, cmd_train, PredictArgs, Profile,
    SweepArgs, SweepSpec, TrainArgs,
};
use bhpm::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bhpm", version, about = "Bayesian hidden-physics modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base random seed; every derived seed is a deterministic child of it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compute budget preset: `desk` (laptop-scale) or `paper` (full-size)
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Worker threads for parallel sections (0 = one thread)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the spectral reference solver on GP-sampled initial conditions
    Generate {
        #[command(flatten)]
        common: Common,
        /// Equation: burgers, kdv, or heat
        #[arg(long)]
        equation: String,
        /// Number of independent solves
        #[arg(long, default_value_t = 4)]
        n_solves: usize,
    },
    /// Fit the leaf networks and GP root to noisy measurements of solves
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of solve_* subdirectories from `generate`
        #[arg(long)]
        data: PathBuf,
        /// Number of experiments to use
        #[arg(long)]
        n: Option<usize>,
        /// Measurements per experiment
        #[arg(long)]
        n_st: Option<usize>,
        /// Relative noise level added to measurements
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// JSON training config overriding the profile preset
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a trained root against held-out solves (rmse, mnlp)
    EvalRoot {
        #[command(flatten)]
        common: Common,
        /// Trained model directory
        #[arg(long)]
        model: PathBuf,
        /// Directory of held-out solve_* subdirectories
        #[arg(long)]
        test_data: PathBuf,
        /// Evaluation points sampled from the held-out solves
        #[arg(long, default_value_t = 2048)]
        n_test_points: usize,
    },
    /// Train/evaluate across a grid of one varied factor, with repeats
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Equation: burgers, kdv, or heat
        #[arg(long)]
        equation: String,
        /// Factor to vary: n_st, epsilon, or n
        #[arg(long)]
        varied: String,
        /// Comma-separated values of the varied factor
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Reuse solves from this directory instead of generating
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write trend_report.txt noting monotonicity violations
        #[arg(long, default_value_t = false)]
        check_trend: bool,
    },
    /// Propagate operator uncertainty to a new initial-boundary value problem
    Predict {
        #[command(flatten)]
        common: Common,
        /// Trained model directory (omit together with --ic for the
        /// built-in synthetic diffusion prior)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Held-out solve directory providing the IC and reference solution
        #[arg(long)]
        ic: Option<PathBuf>,
        /// Conditioning-loss threshold for the refinement loop
        #[arg(long, default_value_t = 1e-4)]
        delta_c: f64,
        #[arg(long, default_value_t = 32)]
        n_members: usize,
        /// Evaluation lattice resolution per axis
        #[arg(long, default_value_t = 128)]
        n_grid: usize,
        /// Run a refinement ladder over these delta_c values instead of an
        /// ensemble (comma-separated)
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<f64>>,
    },
    /// Re-run a recorded run_manifest.json and check outputs match to 1e-12
    Replay {
        /// Path to an existing run_manifest.json
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the replayed run
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> bhpm::Result<()> {
    match cmd {
        Command::Generate {
            common,
            equation,
            n_solves,
        } => cmd_generate(&equation, n_solves, common.seed, &common.out),
        Command::Train {
            common,
            data,
            n,
            n_st,
            epsilon,
            config,
        } => {
            let profile = Profile::parse(&common.profile)?;
            let (base_n, base_n_st) = profile.data_baseline();
            cmd_train(
                &TrainArgs {
                    data,
                    n: n.unwrap_or(base_n),
                    n_st: n_st.unwrap_or(base_n_st),
                    epsilon,
                    seed: common.seed,
                    profile,
                    config_file: config,
                },
                &common.out,
            )
        }
        Command::EvalRoot {
            common,
            model,
            test_data,
            n_test_points,
        } => cmd_eval_root(&model, &test_data, n_test_points, common.seed, &common.out),
        Command::Sweep {
            common,
            equation,
            varied,
            values,
            repeats,
            data,
            check_trend,
        } => cmd_sweep(
            &SweepArgs {
                equation,
                spec: SweepSpec {
                    varied,
                    values,
                    repeats,
                },
                profile: Profile::parse(&common.profile)?,
                seed: common.seed,
                check_trend,
                data,
            },
            &common.out,
        ),
        Command::Predict {
            common,
            model,
            ic,
            delta_c,
            n_members,
            n_grid,
            ladder,
        } => cmd_predict(
            &PredictArgs {
                model,
                ic,
                delta_c,
                n_members,
                n_grid,
                seed: common.seed,
                profile: Profile::parse(&common.profile)?,
                jobs: common.jobs,
                ladder,
            },
            &common.out,
        ),
        Command::Replay { manifest, out } => harness::cmd_replay(&manifest, &out, |argv, dest| {
            let mut full: Vec<String> = vec!["bhpm".into()];
            full.extend_from_slice(argv);
            full.push("--out".into());
            full.push(dest.display().to_string());
            let cli = Cli::try_parse_from(&full)
                .map_err(|e| Error::Invalid(format!("replay: bad recorded invocation: {e}")))?;
            if matches!(cli.command, Command::Replay { .. }) {
                return Err(Error::Invalid("replay of a replay is not supported".into()));
            }
            run(cli.command)
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Invalid(_) | Error::Shape(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
