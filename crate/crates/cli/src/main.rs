use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use counsel_cli::{pipeline, CliError, Run};

#[derive(Parser)]
#[command(name = "counsel", version, about = "Session-graph strategy classification and conditioned response generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config (JSON). Defaults to the run directory's recorded config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Classifier checkpoint to use instead of the run directory's.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its session split.
    GenCorpus,
    /// Build the training-split session graph and its statistics.
    BuildGraph,
    /// Train the next-strategy classifier.
    TrainClassifier,
    /// Fit per-strategy thresholds on the validation split.
    Calibrate,
    /// Evaluate the classifier on the test split.
    EvalClassifier {
        /// JSONL of `{point_id, probabilities}` to evaluate instead of the checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train the tokenizer and pre-train the base decoder.
    PretrainDecoder,
    /// Fine-tune one generator per configured condition.
    TrainGenerator,
    /// Generate for every condition and score against gold responses.
    EvalGeneration,
    /// Omnibus and pairwise significance tests on the generation scores.
    EvalStats,
    /// Export blind pairwise comparison tasks and their assignment map.
    ExportPairwise,
    /// Analyze pairwise judgments.
    EvalReport {
        #[arg(long)]
        judgments: Option<PathBuf>,
    },
    /// Run the HTTP service. `--config` here names a service config.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

fn name(c: &Command) -> &'static str {
    match c {
        Command::GenCorpus => "gen-corpus",
        Command::BuildGraph => "build-graph",
        Command::TrainClassifier => "train-classifier",
        Command::Calibrate => "calibrate",
        Command::EvalClassifier { .. } => "eval-classifier",
        Command::PretrainDecoder => "pretrain-decoder",
        Command::TrainGenerator => "train-generator",
        Command::EvalGeneration => "eval-generation",
        Command::EvalStats => "eval-stats",
        Command::ExportPairwise => "export-pairwise",
        Command::EvalReport { .. } => "eval-report",
        Command::Serve { .. } => "serve",
    }
}

fn serve(cli: &Cli, bind: &str) -> Result<serde_json::Value, CliError> {
    let config = match &cli.config {
        Some(p) => counsel_service::ServiceConfig::load(p)?,
        None => {
            let mut run = Run::start("serve", &cli.out, None, cli.seed)?;
            pipeline::service_config(&mut run, bind, cli.checkpoint.as_deref())?
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Service(e.to_string()))?;
    rt.block_on(counsel_service::serve(config))?;
    Ok(serde_json::json!({ "subcommand": "serve", "status": "stopped" }))
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    if let Command::Serve { bind } = &cli.command {
        return serve(cli, bind);
    }
    let mut r = Run::start(name(&cli.command), &cli.out, cli.config.as_deref(), cli.seed)?;
    let ck = cli.checkpoint.as_deref();
    match &cli.command {
        Command::GenCorpus => pipeline::gen_corpus(&mut r)?,
        Command::BuildGraph => pipeline::build_graph_cmd(&mut r)?,
        Command::TrainClassifier => pipeline::train_classifier_cmd(&mut r)?,
        Command::Calibrate => pipeline::calibrate(&mut r, ck)?,
        Command::EvalClassifier { predictions } => pipeline::eval_classifier(&mut r, ck, predictions.as_deref())?,
        Command::PretrainDecoder => pipeline::pretrain(&mut r)?,
        Command::TrainGenerator => pipeline::train_generator_cmd(&mut r, ck)?,
        Command::EvalGeneration => pipeline::eval_generation(&mut r, ck)?,
        Command::EvalStats => pipeline::eval_stats(&mut r)?,
        Command::ExportPairwise => pipeline::export_pairwise(&mut r)?,
        Command::EvalReport { judgments } => pipeline::eval_report(&mut r, judgments.as_deref())?,
        Command::Serve { .. } => unreachable!("handled above"),
    }
    r.finish()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(2)
        }
    }
}
