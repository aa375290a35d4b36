use std::path::PathBuf;
use std::process::ExitCode;

use alece_core::bench::{write_summary, ESTIMATE_FILE_FORMAT};
use alece_core::pipeline::{self, EstimatorKind, PipelineError, RunConfig};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

const AFTER_HELP: &str = concat!(
    "Every value can come from the flat `key = value` config file given with --config; ",
    "flags override it. A seed is mandatory.\n\n",
    "Exit codes: 0 ok, 2 configuration error, 3 data error, 4 check failure.\n\n",
    "Estimate files: "
);

#[derive(Parser, Debug)]
#[command(name = "alece", version, about = "Learned cardinality estimation on dynamic SPJ workloads")]
struct Cli {
    /// Flat key/value TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

macro_rules! overrides {
    ($($field:ident: $doc:literal),* $(,)?) => {
        #[derive(Args, Debug, Default)]
        struct Overrides {
            $(
                #[doc = $doc]
                #[arg(long, global = true, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl Overrides {
            fn apply(&self, cfg: &mut RunConfig) -> Result<(), PipelineError> {
                $(
                    if let Some(v) = &self.$field {
                        cfg.set(stringify!($field), v)?;
                    }
                )*
                Ok(())
            }
        }
    };
}

overrides! {
    seed: "Master seed (required)",
    schema: "Schema TOML file",
    data_dir: "Directory of <relation>.csv files with the full data",
    workload_dir: "Workload directory (default <out-dir>/workload)",
    out_dir: "Output directory",
    workload: "insert-heavy | update-heavy | dist-shift | static",
    dml_budget: "Total number of insert/delete/update statements",
    train_queries: "Distinct training queries",
    eval_queries: "Evaluation queries",
    train_copies: "Copies of each training query pack",
    min_rho: "Minimum changing rate before evaluation queries run",
    d_x: "Histogram bins per attribute",
    bin_mode: "equal-width | equal-depth",
    n_enc: "Encoder blocks",
    n_ana: "Analyzer blocks",
    heads: "Attention heads",
    join_variant: "Join featurization: full | simple",
    model: "Model trained by `train`: alece | mlp",
    max_epochs: "Epoch limit",
    batch_size: "Mini-batch size",
    learning_rate: "Adam learning rate",
    warmup_steps: "Optimizer steps of linear learning-rate warmup (0 disables)",
    patience: "Early-stopping patience in epochs",
    validation_fraction: "Share of samples held out for validation",
    pg_bins: "Histogram bins of the independence baseline",
    unisamp_ratio: "Sampling ratio of the uniform-sampling baseline",
    synth_users: "gen-data: rows of users",
    synth_posts: "gen-data: rows of posts",
    synth_comments: "gen-data: rows of comments",
}

#[derive(Args, Debug)]
struct EstimatorArgs {
    /// alece | mlp | pg | unisamp | optimal; repeat or comma-separate.
    #[arg(long = "estimator", value_delimiter = ',', default_value = "alece")]
    estimators: Vec<String>,
}

impl EstimatorArgs {
    fn kinds(&self) -> Result<Vec<EstimatorKind>, PipelineError> {
        self.estimators
            .iter()
            .map(|s| {
                EstimatorKind::parse(s)
                    .ok_or_else(|| PipelineError::Config(format!("unknown estimator {s:?}")))
            })
            .collect()
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic users/posts/comments schema and data.
    GenData,
    /// Generate a dynamic workload script from the full data.
    GenWorkload,
    /// Replay the workload and store training samples with DB-state snapshots.
    ReplayTrain,
    /// Train the configured model on the stored samples.
    Train,
    /// Replay the workload and write estimate files for evaluation sub-queries.
    Estimate(EstimatorArgs),
    /// Replay the workload and write Q-error reports plus estimate files.
    Evaluate(EstimatorArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck {
        /// Model seeds to check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Collect evaluation reports into one quantile table.
    Report,
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PipelineError::Config("--threads must be positive".into()));
        }
        rayon_threads(n)?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    match &cli.command {
        Command::GenData => pipeline::gen_data(&cfg),
        Command::GenWorkload => {
            let w = pipeline::gen_workload(&cfg)?;
            let (i, d, u) = w.dml_counts();
            println!(
                "{} statements ({i} inserts, {d} deletes, {u} updates, {} query packs), split at {}",
                w.statements.len(),
                w.packs().count(),
                w.split_index
            );
            Ok(())
        }
        Command::ReplayTrain => {
            let set = pipeline::replay_train(&cfg)?;
            println!("{} training samples over {} snapshots", set.len(), set.states.len());
            Ok(())
        }
        Command::Train => {
            let out = pipeline::train_model(&cfg)?;
            println!(
                "{} epochs, best epoch {:?}, best validation loss {:.6e}",
                out.history.len(),
                out.best_epoch,
                out.best_val_loss
            );
            Ok(())
        }
        Command::Estimate(e) => {
            let reports = pipeline::estimate(&cfg, &e.kinds()?)?;
            for r in &reports {
                println!("{}: {} sub-query estimates", r.estimator, r.results.len());
            }
            Ok(())
        }
        Command::Evaluate(e) => {
            let reports = pipeline::evaluate(&cfg, &e.kinds()?)?;
            let mut out = Vec::new();
            write_summary(&mut out, &reports).map_err(|e| PipelineError::Data(e.to_string()))?;
            print!("{}", String::from_utf8_lossy(&out));
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let lines = pipeline::gradcheck_suite(*seeds).map_err(|e| PipelineError::Check(e.to_string()))?;
            let mut failed = Vec::new();
            for l in &lines {
                let verdict = if l.passed() { "ok" } else { "FAIL" };
                println!("{verdict:<4} {:<28} max rel error {:.3e} (tolerance {:.0e})", l.name, l.max_rel_error, l.tolerance);
                if !l.passed() {
                    failed.push(l.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(PipelineError::Check(failed.join(", ")))
            }
        }
        Command::Report => {
            print!("{}", pipeline::report(&cfg)?);
            Ok(())
        }
    }
}

fn rayon_threads(n: usize) -> Result<(), PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = Cli::command()
        .after_help(format!("{AFTER_HELP}{ESTIMATE_FILE_FORMAT}"))
        .get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
