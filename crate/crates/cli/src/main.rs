//! `uqroute`: data generation, training, routing evaluation and alignment.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uqroute::config::{ExperimentConfig, JudgeBackend};
use uqroute::router::{RouterConfig, RoutingMode};

#[derive(Debug, Parser)]
#[command(name = "uqroute", version, about = "Uncertainty-routed pairwise preference evaluation")]
struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for scoring and training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Dataset; defaults to `<out-dir>/data.jsonl`.
    #[arg(long, alias = "dataset")]
    pub data: Option<PathBuf>,
    /// Head checkpoint; defaults to `<out-dir>/head.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Per-run overrides of a router section.
#[derive(Debug, Clone, Args)]
pub struct RouterArgs {
    #[arg(long)]
    threshold: Option<f64>,
    /// `uncertainty`, `random` or `adaptive`.
    #[arg(long)]
    mode: Option<RoutingMode>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// `none` keeps every model score and counts routed pairs as fallbacks.
    #[arg(long, value_enum)]
    judge: Option<JudgeChoice>,
    /// Output CSV; defaults to a file in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RouterArgs {
    fn apply(&self, router: &mut RouterConfig, judge: &mut JudgeBackend) {
        router.threshold = self.threshold.unwrap_or(router.threshold);
        router.mode = self.mode.unwrap_or(router.mode);
        router.epsilon = self.epsilon.unwrap_or(router.epsilon);
        match self.judge {
            Some(JudgeChoice::Sim) => *judge = JudgeBackend::Sim,
            Some(JudgeChoice::Remote) => *judge = JudgeBackend::Remote,
            _ => {}
        }
    }

    pub fn use_judge(&self) -> bool {
        self.judge != Some(JudgeChoice::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeChoice {
    Sim,
    Remote,
    None,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the preference dataset and the alignment prompt pool.
    GenData,
    /// Train encoder and GP head on the training split.
    Train(Inputs),
    /// Run the covariance pass over the training split.
    CalibrateCov(Inputs),
    /// Model-only accuracy per split.
    Eval(Inputs),
    /// Accuracy and judge cost under the configured router.
    RouteEval {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        router: RouterArgs,
    },
    /// Every threshold and mode of the sweep grid.
    Sweep(Inputs),
    /// Accuracy by uncertainty decile with the rank correlation.
    QuantileReport(Inputs),
    /// Uncertainty by split and by |p| bin.
    UncertaintyGap {
        #[command(flatten)]
        inputs: Inputs,
        /// Every pair in this file counts as in-distribution.
        #[arg(long, requires = "ood_data")]
        id_data: Option<PathBuf>,
        /// Every pair in this file counts as out-of-distribution.
        #[arg(long, requires = "id_data")]
        ood_data: Option<PathBuf>,
    },
    /// RLOO on the toy policy with routed preference matrices.
    Align {
        #[command(flatten)]
        inputs: Inputs,
        /// Prompt pool; defaults to `<out-dir>/prompts.jsonl`.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Responses sampled per prompt.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        kl_beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        router: RouterArgs,
    },
    /// Serve the judge wire protocol until interrupted.
    MockJudgeServer {
        #[arg(long, default_value = "127.0.0.1:8787")]
        addr: SocketAddr,
        /// `sim`, `fixed:<label>` or `malformed`.
        #[arg(long, default_value = "sim")]
        behavior: String,
        /// Answer this many initial requests with HTTP 500.
        #[arg(long, default_value_t = 0)]
        fail_first: usize,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
        /// Dataset whose world backs the `sim` behavior.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    use commands::CliError;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(dir) = cli.out_dir {
        config.out_dir = dir;
    }
    match &cli.command {
        Command::RouteEval { router, .. } => router.apply(&mut config.router, &mut config.judge.backend),
        Command::Align {
            k,
            kl_beta,
            epochs,
            router,
            ..
        } => {
            let align = &mut config.align;
            align.k = k.unwrap_or(align.k);
            align.kl_beta = kl_beta.unwrap_or(align.kl_beta);
            align.epochs = epochs.unwrap_or(align.epochs);
            router.apply(&mut align.router, &mut config.judge.backend);
        }
        _ => {}
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ctx = commands::Ctx::new(config);

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Core(e.into()))?;
    runtime.block_on(async move {
        match cli.command {
            Command::GenData => ctx.gen_data(),
            Command::Train(i) => ctx.train(&i),
            Command::CalibrateCov(i) => ctx.calibrate_cov(&i),
            Command::Eval(i) => ctx.eval(&i).await,
            Command::RouteEval { inputs, router } => ctx.route_eval(&inputs, &router).await,
            Command::Sweep(i) => ctx.sweep(&i).await,
            Command::QuantileReport(i) => ctx.quantile_report(&i).await,
            Command::UncertaintyGap {
                inputs,
                id_data,
                ood_data,
            } => ctx.uncertainty_gap(&inputs, id_data.zip(ood_data)),
            Command::Align {
                inputs,
                prompts,
                router,
                ..
            } => ctx.align(&inputs, prompts, &router).await,
            Command::MockJudgeServer {
                addr,
                behavior,
                fail_first,
                delay_ms,
                data,
            } => ctx.mock_judge_server(addr, &behavior, fail_first, delay_ms, data).await,
        }
    })
}
