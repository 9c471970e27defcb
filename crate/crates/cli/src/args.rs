use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mirror", version, about = "Slide/transcriptomics pretraining pipeline on synthetic or prepared cohorts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired cohort with planted ground truth.
    Synth(SynthArgs),
    /// Select a gene panel with cross-validated recursive feature elimination.
    SelectGenes(SelectGenesArgs),
    /// Pretrain both encoders and write a checkpoint plus the loss log.
    Pretrain(PretrainArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate frozen embeddings on subtyping or survival.
    Probe(ProbeArgs),
    /// Export the class-token attention of one slide.
    Attn(AttnArgs),
    /// Summarize one or more metrics files.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::SelectGenes(_) => "select-genes",
            Command::Pretrain(_) => "pretrain",
            Command::Gradcheck(_) => "gradcheck",
            Command::Probe(_) => "probe",
            Command::Attn(_) => "attn",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Patch feature width.
    #[arg(long, default_value_t = 64)]
    pub d_p: usize,
    #[arg(long, default_value_t = 256)]
    pub genes: usize,
    #[arg(long, default_value_t = 8)]
    pub d_rs: usize,
    #[arg(long, default_value_t = 4)]
    pub d_ru: usize,
    #[arg(long, default_value_t = 4)]
    pub d_is: usize,
    #[arg(long, default_value_t = 4)]
    pub d_iu: usize,
    #[arg(long, default_value_t = 32)]
    pub informative: usize,
    #[arg(long, default_value_t = 0.3)]
    pub tumor_fraction: f64,
    #[arg(long, default_value_t = 64)]
    pub patches_min: usize,
    #[arg(long, default_value_t = 196)]
    pub patches_max: usize,
    #[arg(long, default_value_t = 0.3)]
    pub censor_fraction: f64,
    /// Noise std on tumor patches.
    #[arg(long, default_value_t = 2.0)]
    pub slide_noise: f64,
    /// Noise std on informative genes.
    #[arg(long, default_value_t = 0.5)]
    pub rna_noise: f64,
    /// Noise std of log survival times.
    #[arg(long, default_value_t = 0.15)]
    pub survival_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SelectGenesArgs {
    /// Expression CSV: `sample_id` then one column per gene.
    #[arg(long)]
    pub input: PathBuf,
    /// `sample_id,label` CSV.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory for panel.json, rfe_trace.csv and cv_scores.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Genes kept by elimination.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Genes removed per round; `auto` removes a tenth of the survivors.
    #[arg(long, default_value = "auto")]
    pub step: String,
    #[arg(long, default_value_t = 1e-2)]
    pub reg: f64,
    /// One gene id per line, added to the panel.
    #[arg(long)]
    pub curated: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub d_t: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub gene_groups: usize,
    /// Patches sampled per slide.
    #[arg(long, default_value_t = 64)]
    pub n_fixed: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub use_ppeg: bool,
    #[arg(long, default_value_t = 2)]
    pub retention_depth: usize,
    #[arg(long, default_value_t = 32)]
    pub d_z: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.mirc and train_log.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict expression to a panel.json from select-genes.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-5)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
    /// Alignment weight.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Retention weight.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Style clustering weight.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Logit scale of the contrastive loss.
    #[arg(long, default_value_t = 10.0)]
    pub tau: f64,
    /// Sharpness of the cluster assignment.
    #[arg(long, default_value_t = 5.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.25)]
    pub mask_ratio_slide: f64,
    #[arg(long, default_value_t = 0.25)]
    pub mask_ratio_rna: f64,
    /// Comma-separated parameter-name prefixes to train; empty trains all.
    #[arg(long, value_delimiter = ',')]
    pub train_only: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    /// Dataset directory; a default synthetic cohort is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Check a trained state instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Optional directory for gradcheck.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Samples in the checked batch.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Subtype,
    Survival,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Setting {
    #[value(name = "10shot")]
    #[serde(rename = "10shot")]
    TenShot,
    #[value(name = "all")]
    #[serde(rename = "all")]
    All,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for metrics.json and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::Subtype)]
    pub task: Task,
    #[arg(long, value_enum, default_value_t = Setting::All)]
    pub setting: Setting,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Examples per class in the few-shot setting.
    #[arg(long, default_value_t = 10)]
    pub shots: usize,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub slide_id: String,
    /// Output directory for attention.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ReportArgs {
    /// metrics.csv files or directories containing one (comma-separated or repeated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub metrics: Vec<PathBuf>,
    /// Optional directory for summary.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
