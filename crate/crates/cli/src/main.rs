mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "causal-vqa", version, about = "Causal event-level video question answering on precomputed features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic bias-probe dataset
    GenData(GenDataArgs),
    /// Build the token vocabulary and confounder priors from the training split
    BuildVocab(DataArgs),
    /// Run k-means over the raw appearance and motion rows of the training split
    BuildCodebook(DataArgs),
    /// Train a model and write its checkpoint, trace and config snapshot
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Train the full model and every ablation variant, then tabulate them
    Ablate(AblateArgs),
    /// Finite-difference gradient checks of the differentiable components
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Preset {
    /// Full-size defaults (d=512, H=8, R=3, K=512)
    #[default]
    Large,
    /// Desk-scale defaults (d=32, H=4, R=2, K=8)
    Toy,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON training configuration; missing keys take the preset's values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base values used when --config is absent
    #[arg(long, value_enum, default_value_t)]
    pub preset: Preset,
    /// Dotted-key override, e.g. --set ablation.disable_sge=true (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON synthetic task specification; defaults are used when absent
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset directory holding manifest.json and features/
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary written by build-vocab; rebuilt from the data when absent
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also checkpoint every N epochs (0 = only at the end)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test_iid")]
    pub split: String,
    /// Directory for the metrics, predictions and config snapshot
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Variants to run (repeatable); all seven when absent
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Number of consecutive training seeds starting at the configured seed
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Components to check (repeatable); all when absent
    #[arg(long = "component")]
    pub components: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum relative error accepted
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
