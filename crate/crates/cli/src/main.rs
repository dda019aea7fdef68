use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pivot_core::downstream::DownstreamTask;
use pivot_core::neural::PoolMode;

mod commands;
mod config;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "pivot", version, about = "Procedural-hierarchical pre-training pipeline")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenCorpus(GenCorpusArgs),
    /// Mine pseudo-labels, hierarchy paths and topics for every video.
    Mine(MineArgs),
    /// Joint step/path pre-training; writes checkpoints and metrics.csv.
    Pretrain(PretrainArgs),
    /// Fit the accuracy curve and pick the checkpoint to stop at.
    AnalyzeStop(AnalyzeStopArgs),
    /// Fine-tune a pre-trained encoder on a downstream task.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned model.
    Eval(EvalArgs),
    /// Collect report.json files into one SF/SR/TR table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Large,
    /// Small corpus with its own vocabulary, for downstream tasks.
    Transfer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Tr,
    Sr,
    Sf,
}

impl From<TaskArg> for DownstreamTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Tr => DownstreamTask::TaskRecognition,
            TaskArg::Sr => DownstreamTask::StepRecognition,
            TaskArg::Sf => DownstreamTask::StepForecasting,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolArg {
    Mean,
    Tfenc,
}

impl From<PoolArg> for PoolMode {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Mean => PoolMode::Mean,
            PoolArg::Tfenc => PoolMode::Tfenc,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to the config file, then PIVOT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop clips whose best caption-step score does not exceed the threshold.
    #[arg(long)]
    pub thresh: bool,
    /// Keep only clips labeled with a step of the video's topic task.
    #[arg(long)]
    pub in_task: bool,
    /// Reorder kept clips by their step's position in the topic task.
    #[arg(long)]
    pub sort: bool,
    /// Keep one random clip per distinct step, redrawn every epoch.
    #[arg(long)]
    pub unique: bool,
    /// Swap neighbouring clips at random every epoch.
    #[arg(long)]
    pub swap: bool,
    #[arg(long)]
    pub threshold_value: Option<f64>,
    #[arg(long)]
    pub swap_prob: Option<f64>,
    #[arg(long, value_enum)]
    pub pool: Option<PoolArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeStopArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub degree: usize,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    /// Defaults to stop_analysis.json next to the metrics file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Score on this corpus instead of a held-out slice of --corpus.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// Fraction of --corpus held out for report.json.
    #[arg(long, default_value_t = 0.5)]
    pub holdout: f64,
    /// Ignore the checkpoint's weights; keep only its shape.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[arg(long)]
    pub bidirectional: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Defaults to report.json in the current directory.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories; each is searched for report.json one level deep.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the table as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Mine(a) => commands::mine(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::AnalyzeStop(a) => commands::analyze_stop(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
