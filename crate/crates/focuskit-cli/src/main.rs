//! `focuskit`: generate cohorts, train the three stages, run the
//! pipeline, evaluate reports, and compare pooling kinds.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use focuskit::aggregate::AggregatorKind;
use focuskit::datamodel::Split;
use focuskit::{FocusError, Result};
use focuskit_cli::config::resolve_config;
use focuskit_cli::runner;

#[derive(Parser)]
#[command(
    name = "focuskit",
    version,
    about = "Staged volume triage on synthetic feature cohorts"
)]
struct Cli {
    /// Run config JSON; benchmark defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Generate {
        /// Directory for manifest.json and tensors/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stages and write checkpoints.
    Train {
        /// Cohort manifest to train on.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for checkpoints and loss curves.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
    },
    /// Run the three-stage pipeline over a cohort.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the stage checkpoints.
        #[arg(long)]
        models: PathBuf,
        /// Directory for reports/, summary.json, patients.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Score pipeline reports against manifest labels.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of per-patient report JSON files.
        #[arg(long)]
        reports: PathBuf,
        /// Directory for eval.json and confusion.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare pooling kinds on the abnormality task.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Pooling kinds to compare; all six when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        kinds: Vec<KindArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Quality,
    Abnormal,
    Disease,
    All,
}

impl From<StageArg> for runner::StageSel {
    fn from(value: StageArg) -> Self {
        match value {
            StageArg::Quality => runner::StageSel::Quality,
            StageArg::Abnormal => runner::StageSel::Abnormal,
            StageArg::Disease => runner::StageSel::Disease,
            StageArg::All => runner::StageSel::All,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn to_split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Mean,
    Max,
    Attention,
    GatedAttention,
    ClassQuery,
    Uaac,
}

impl From<KindArg> for AggregatorKind {
    fn from(value: KindArg) -> Self {
        match value {
            KindArg::Mean => AggregatorKind::Mean,
            KindArg::Max => AggregatorKind::Max,
            KindArg::Attention => AggregatorKind::Attention,
            KindArg::GatedAttention => AggregatorKind::GatedAttention,
            KindArg::ClassQuery => AggregatorKind::ClassQuery,
            KindArg::Uaac => AggregatorKind::UAAC,
        }
    }
}

const ALL_KINDS: [AggregatorKind; 6] = [
    AggregatorKind::Mean,
    AggregatorKind::Max,
    AggregatorKind::Attention,
    AggregatorKind::GatedAttention,
    AggregatorKind::ClassQuery,
    AggregatorKind::UAAC,
];

fn dispatch(cli: Cli) -> Result<()> {
    let config = resolve_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate { out } => runner::run_generate(&config, &out),
        Command::Train { manifest, out, stage } => {
            runner::run_train(&config, &manifest, stage.into(), &out)
        }
        Command::Infer { manifest, models, out, split, threads } => {
            runner::run_infer(&config, &manifest, &models, split.to_split(), &out, threads)
        }
        Command::Eval { manifest, reports, out } => {
            runner::run_eval(&config, &manifest, &reports, &out)
        }
        Command::Ablate { manifest, out, kinds } => {
            let kinds: Vec<AggregatorKind> = if kinds.is_empty() {
                ALL_KINDS.to_vec()
            } else {
                kinds.into_iter().map(Into::into).collect()
            };
            runner::run_ablate(&config, &manifest, &kinds, &out)
        }
    }
}

/// Exit codes by failure family: invalid input 2, I/O 3, training 4,
/// checkpoint 5, evaluation mismatch 6.
fn exit_code(error: &FocusError) -> u8 {
    match error {
        FocusError::Format(_)
        | FocusError::Validation(_)
        | FocusError::Spec(_)
        | FocusError::Json(_)
        | FocusError::State(_) => 2,
        FocusError::Io(_) => 3,
        FocusError::Training(_) => 4,
        FocusError::Checkpoint(_) => 5,
        FocusError::Eval(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
