mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "qesdet", version, about = "Energy-separation adversarial detector pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural dataset (shapes or glyphs) to disk.
    GenSynth(GenSynthArgs),
    /// Train the victim classifier on natural data.
    TrainClassifier(TrainClassifierArgs),
    /// Attack a classifier and store the adversarial images.
    GenAttacks(GenAttacksArgs),
    /// Layer-wise QES training of a detector.
    QesTrain(QesTrainArgs),
    /// Compute per-layer confidence boundaries from natural samples.
    Calibrate(CalibrateArgs),
    /// Run (early-exit) detection over a dataset.
    Detect(DetectArgs),
    /// AUC, F1, Error and Accuracy of detector plus classifier.
    Evaluate(EvaluateArgs),
    /// Transmission and detection energy from detection outcomes.
    EnergyReport(EnergyReportArgs),
    /// Parameter sweeps: K/L/U, λ targets, architecture, data fraction.
    Ablate(AblateArgs),
    /// Recalibrate a detector on another dataset and score it there.
    Transfer(TransferArgs),
    /// Describe a checkpoint.
    ModelInfo(ModelInfoArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value = "shapes")]
    kind: String,
    #[arg(long)]
    samples: usize,
    /// Index of the first sample in the generator's stream.
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for the reported test accuracy.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "small")]
    preset: String,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenAttacksArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, default_value = "pgd")]
    attack: String,
    /// Budget as a decimal or a fraction such as 8/255.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Step size, decimal or fraction.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    chunk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    /// Learning rates 0.005/0.002/0.002, plain SGD, 500 epochs.
    Paper,
    /// Same targets with Adam, 4× learning rates and 100 epochs.
    Desk,
}

#[derive(Args)]
struct QesTrainArgs {
    #[arg(long)]
    nat: PathBuf,
    #[arg(long)]
    adv: PathBuf,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    #[arg(long, default_value = "D1")]
    preset: String,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Full training configuration as JSON; overrides --schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Schedule::Paper)]
    schedule: Schedule,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PercentileArgs {
    #[arg(long = "K", default_value_t = 92.0)]
    k: f64,
    #[arg(long = "L", default_value_t = 30.0)]
    l: f64,
    #[arg(long = "U", default_value_t = 5.0)]
    u: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    sample_nat: PathBuf,
    /// Draw this many samples from --sample-nat instead of using all.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pct: PercentileArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    boundaries: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Run every layer and decide on the last threshold only.
    #[arg(long)]
    no_early_exit: bool,
    #[arg(long, default_value_t = 200)]
    chunk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    boundaries: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    nat: PathBuf,
    #[arg(long)]
    adv: PathBuf,
    /// Keep the per-sample scores in the report.
    #[arg(long)]
    scores: bool,
    /// ROC points as CSV.
    #[arg(long)]
    roc: Option<PathBuf>,
    /// ROC curve as SVG.
    #[arg(long)]
    roc_svg: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    chunk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnergyReportArgs {
    /// Hardware profile JSON; built-in 45 nm values when omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    outcomes: Vec<PathBuf>,
    /// Bit width to cost; defaults to the detector's own.
    #[arg(long)]
    bits: Option<u32>,
    /// Bar chart of the energy terms as SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    #[value(name = "KLU", alias = "klu")]
    Klu,
    Lambda,
    Arch,
    DataFraction,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    sweep: Sweep,
    /// Sweep values. lambda: "0.1:0.9,1.3,2.0;0.1:0.5,0.9,1.6";
    /// arch: "D1:3,D2:3,D3:3,D1:4"; data-fraction: "0.1,0.4,0.6,1.0".
    values: Option<String>,
    /// K values: list "88,92" or inclusive range "80..96" or "80..96:4".
    #[arg(long = "K", default_value = "92")]
    k: String,
    #[arg(long = "L", default_value = "30")]
    l: String,
    #[arg(long = "U", default_value = "5")]
    u: String,
    /// Trained detector (KLU sweep).
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Training pairs (other sweeps).
    #[arg(long)]
    train_nat: Option<PathBuf>,
    #[arg(long)]
    train_adv: Option<PathBuf>,
    /// Natural pool the calibration samples are drawn from.
    #[arg(long)]
    sample_nat: PathBuf,
    #[arg(long, default_value_t = 1000)]
    calibration_samples: usize,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    nat: PathBuf,
    /// Test adversaries; the first drives F1 and energy.
    #[arg(long, num_args = 1.., required = true)]
    adv: Vec<PathBuf>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Schedule::Desk)]
    schedule: Schedule,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    chunk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Detector trained on the source dataset.
    #[arg(long, conflicts_with_all = ["source", "source_adv"])]
    detector: Option<PathBuf>,
    /// Source naturals; with --source-adv a detector is trained first.
    #[arg(long, requires = "source_adv")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    source_adv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Schedule::Desk)]
    schedule: Schedule,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    /// Target naturals; calibration samples are drawn from here and
    /// excluded from evaluation.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    target_adv: Vec<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[command(flatten)]
    pct: PercentileArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    chunk: usize,
    /// Where to store the recalibrated boundaries.
    #[arg(long)]
    boundaries_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelInfoArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    profile: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::TrainClassifier(a) => commands::train_classifier(a),
        Command::GenAttacks(a) => commands::gen_attacks(a),
        Command::QesTrain(a) => commands::qes_train(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Detect(a) => commands::detect(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::EnergyReport(a) => commands::energy_report(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::ModelInfo(a) => commands::model_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
