use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use detox_core::evalmetrics::DEFAULT_N_NEW;
use detox_core::intervention::Ranking;

#[derive(Debug, Parser)]
#[command(name = "detox", version, about = "Attribution, patching and activation editing for toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted bundle with its corpora and ground truth.
    Synth(SynthArgs),
    /// Fit a linear probe on mean final-layer residuals.
    TrainProbe(TrainProbeArgs),
    /// Preference-tune a bundle against a frozen copy of itself.
    DpoTrain(DpoTrainArgs),
    /// Mean activation score of every neuron over prompts and their continuations.
    Profile(ProfileArgs),
    /// Per-neuron change in toxicity projection between two bundles.
    Attribute(AttributeArgs),
    /// Patch neuron activations to a reference profile and evaluate.
    PatchEval(PatchEvalArgs),
    /// Build an activation-editing plan and optionally evaluate it.
    Edit(EditArgs),
    /// Subtract a scaled probe direction from the final residual and evaluate.
    Steer(SteerArgs),
    /// Read a vector through the unembedding matrix.
    Lens(LensArgs),
    /// Evaluate several bundles and plans side by side.
    Eval(EvalArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::TrainProbe(_) => "train-probe",
            Command::DpoTrain(_) => "dpo-train",
            Command::Profile(_) => "profile",
            Command::Attribute(_) => "attribute",
            Command::PatchEval(_) => "patch-eval",
            Command::Edit(_) => "edit",
            Command::Steer(_) => "steer",
            Command::Lens(_) => "lens",
            Command::Eval(_) => "eval",
        }
    }
}

/// Inputs shared by every command that reports toxicity, perplexity and F1.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoringArgs {
    /// Scoring probe (a probe file trained on held-out labeled texts).
    #[arg(long)]
    pub scorer: PathBuf,
    /// Bundle whose residuals the scorer reads; defaults to --bundle.
    #[arg(long)]
    pub scoring_bundle: Option<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    /// Clean sentences for log perplexity and F1.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_N_NEW)]
    pub n_new: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Overrides the seed in --spec.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Plant spec JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub labeled: PathBuf,
    /// Fraction of rows used for training.
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DpoTrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Weight of the squared-logit penalty against the reference.
    #[arg(long, default_value_t = 0.05)]
    pub kl: f64,
    #[arg(long, default_value_t = 7e-6)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = DEFAULT_N_NEW)]
    pub n_new: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub post: PathBuf,
    #[arg(long)]
    pub pre_profile: PathBuf,
    #[arg(long)]
    pub post_profile: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    /// Attribution table; ledger.json and groups.json are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PatchEvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub reference_profile: PathBuf,
    /// `toxic-top-k`, `groups:TP,AN,TN,AP`, or `file:PATH` with a JSON list of [layer, index].
    #[arg(long)]
    pub targets: String,
    /// Needed by `toxic-top-k`.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Needed by `toxic-top-k`.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Attribution table; needed by `groups:`.
    #[arg(long)]
    pub attribution: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub top_k: usize,
    /// Probe-aligned neurons inspected by `toxic-top-k`.
    #[arg(long, default_value_t = 64)]
    pub candidates: usize,
    /// Lens depth used by `toxic-top-k`.
    #[arg(long, default_value_t = 10)]
    pub lens_k: usize,
    /// Adds an unpatched row for this bundle (typically the tuned model).
    #[arg(long)]
    pub post: Option<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingArg {
    /// Largest |cos| first.
    Cosine,
    /// Largest signed cos first.
    SignedCosine,
    /// Smallest |mean activation| first.
    AbsAct,
}

impl From<RankingArg> for Ranking {
    fn from(r: RankingArg) -> Self {
        match r {
            RankingArg::Cosine => Ranking::DescendingCosine,
            RankingArg::SignedCosine => Ranking::DescendingSignedCosine,
            RankingArg::AbsAct => Ranking::AscendingAbsActivation,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// A probe file, or a lexicon file for the contrastive direction.
    #[arg(long)]
    pub direction: PathBuf,
    /// Profile whose signs define the groups (the bundle's own).
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.55)]
    pub beta: f64,
    #[arg(long, value_enum, default_value_t = RankingArg::Cosine)]
    pub ranking: RankingArg,
    /// Plan file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also evaluate the plan and write a report here.
    #[arg(long, requires_all = ["scorer", "prompts", "corpus"])]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[arg(long)]
    pub scoring_bundle: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_N_NEW)]
    pub n_new: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LensArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// `probe:PATH`, `neuron:LAYER:INDEX`, or `file:PATH` with a JSON list of numbers.
    #[arg(long)]
    pub vector: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Read the negated vector.
    #[arg(long)]
    pub negate: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// JSON list of {label, bundle, plan?}.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub scorer: PathBuf,
    /// Bundle whose residuals the scorer reads.
    #[arg(long)]
    pub scoring_bundle: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_N_NEW)]
    pub n_new: usize,
    #[arg(long)]
    pub out: PathBuf,
}
