use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latrec::baselines::Bm25Params;
use latrec::data::FilterStage;
use latrec::model::ModelKind;
use latrec::synth::{Regime, DEFAULT_POSITIVE_RATE};
use latrec::{LabelKind, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "latrec", version, about = "Train, tune and evaluate latent factor models for per-facet action prediction")]
pub struct Cli {
    /// Worker threads; 0 uses one per core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a factor model or the bilinear baseline to training events.
    Train(TrainArgs),
    /// Score every triple of an events file.
    Predict(PredictArgs),
    /// Rank test queries and write metric reports, or compare two per-query reports.
    Eval(EvalArgs),
    /// Pick latent dimensions by tuning-set MAP over a grid.
    Tune(TuneArgs),
    /// Hold out one facet per user into tuning and test queries.
    Split(SplitArgs),
    /// Exploratory statistics over aggregate item counts.
    Analyze(AnalyzeArgs),
    /// Draw a dataset from the generative model.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelName {
    Lat,
    Bst,
    Smf,
    Cmf,
    Bilinear,
    Cos,
    Lm,
    Bm25,
}

impl ModelName {
    pub fn factor_kind(self) -> Option<ModelKind> {
        match self {
            ModelName::Lat => Some(ModelKind::Lat),
            ModelName::Bst => Some(ModelKind::Bst),
            ModelName::Smf => Some(ModelKind::Smf),
            ModelName::Cmf => Some(ModelKind::Cmf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelName::Lat => "lat",
            ModelName::Bst => "bst",
            ModelName::Smf => "smf",
            ModelName::Cmf => "cmf",
            ModelName::Bilinear => "bilinear",
            ModelName::Cos => "cos",
            ModelName::Lm => "lm",
            ModelName::Bm25 => "bm25",
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, ModelName::Cos | ModelName::Lm | ModelName::Bm25)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Labels {
    /// 0/1 labels
    Binary,
    /// Real-valued responses
    Real,
}

impl From<Labels> for LabelKind {
    fn from(l: Labels) -> Self {
        match l {
            Labels::Binary => LabelKind::Binary,
            Labels::Real => LabelKind::Real,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Drop inactive users before splitting
    Pre,
    /// Split first, then drop inactive users
    Post,
}

impl From<Stage> for FilterStage {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Pre => FilterStage::PreSplit,
            Stage::Post => FilterStage::PostSplit,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FeatureArgs {
    /// User feature file, one sparse `id:value` line per user.
    #[arg(long, value_name = "PATH")]
    pub user_features: Option<PathBuf>,
    /// Item feature file, one sparse `id:value` line per item.
    #[arg(long, value_name = "PATH")]
    pub item_features: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = TrainOptions::default().em_iters)]
    pub em_iters: usize,
    /// Kept Gibbs draws per E-step, after burn-in.
    #[arg(long, default_value_t = TrainOptions::default().gibbs_samples)]
    pub gibbs_samples: usize,
    #[arg(long, default_value_t = TrainOptions::default().burn_in)]
    pub burn_in: usize,
    /// Seed for initialization, sampling and cross-validation folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FitArgs {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            em_iters: self.em_iters,
            gibbs_samples: self.gibbs_samples,
            burn_in: self.burn_in,
            seed: self.seed,
            ..TrainOptions::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TextArgs {
    /// Item text file with `item<TAB>text` lines (cos, lm, bm25).
    #[arg(long, value_name = "PATH")]
    pub item_text: Option<PathBuf>,
    /// Training events: user profiles for cos, lm and bm25, and user
    /// activity slices in eval reports.
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    /// Dirichlet prior weight of the language model.
    #[arg(long, default_value_t = 1000.0)]
    pub mu: f64,
    #[arg(long, default_value_t = Bm25Params::default().k1)]
    pub k1: f64,
    #[arg(long, default_value_t = Bm25Params::default().k3)]
    pub k3: f64,
    #[arg(long, default_value_t = Bm25Params::default().b)]
    pub b: f64,
}

impl TextArgs {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.k1,
            k3: self.k3,
            b: self.b,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training events (`user item facet label` TSV).
    #[arg(long, value_name = "PATH")]
    pub events: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, value_enum, default_value_t = Labels::Binary)]
    pub labels: Labels,
    #[arg(long, value_enum)]
    pub model: ModelName,
    /// Global latent dimension [default: 2, or 0 for smf and cmf]
    #[arg(long)]
    pub fg: Option<usize>,
    /// Facet-local latent dimension [default: 2, or 0 for bst]
    #[arg(long)]
    pub fl: Option<usize>,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Cross-validation folds for the bilinear regularization weight.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Model file to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Diagnostics CSV [default: <out>.trace.csv]
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelName>,
    /// Trained model written by `train` (factor models and bilinear).
    #[arg(long, value_name = "PATH")]
    pub model_file: Option<PathBuf>,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub text: TextArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Triples to score; labels are ignored.
    #[arg(long, value_name = "PATH")]
    pub events: PathBuf,
    #[arg(long, value_enum, default_value_t = Labels::Binary)]
    pub labels: Labels,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Scores TSV to write (`user item facet score`).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Test events grouped into (user, facet) queries.
    #[arg(long, value_name = "PATH", required_unless_present = "compare")]
    pub events: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Labels::Binary)]
    pub labels: Labels,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Scores TSV written by `predict`, used instead of a model.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["model", "model_file"])]
    pub scores: Option<PathBuf>,
    /// Paired t-test of two per-query reports, first against second.
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["events", "scores"])]
    pub compare: Option<Vec<PathBuf>>,
    #[arg(long, default_value = "p@1,p@3,p@5,map")]
    pub metrics: String,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Training events.
    #[arg(long, value_name = "PATH")]
    pub events: PathBuf,
    /// Tuning events grouped into (user, facet) queries.
    #[arg(long, value_name = "PATH")]
    pub tune: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, value_enum, default_value_t = Labels::Binary)]
    pub labels: Labels,
    /// Factor model to tune (lat, bst, smf or cmf).
    #[arg(long, value_enum)]
    pub model: ModelName,
    /// Comma-separated global dimensions [default: 1,2,4,8,16, or 0 for smf and cmf]
    #[arg(long)]
    pub fg_grid: Option<String>,
    /// Comma-separated local dimensions [default: 1,2,4,8,16, or 0 for bst]
    #[arg(long)]
    pub fl_grid: Option<String>,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_name = "PATH")]
    pub events: PathBuf,
    #[arg(long, value_enum, default_value_t = Labels::Binary)]
    pub labels: Labels,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only users with at least this many positives in some facet.
    #[arg(long)]
    pub min_actions: Option<usize>,
    #[arg(long, value_enum, default_value_t = Stage::Pre)]
    pub filter_stage: Stage,
    /// Share of held-out queries sent to the tuning set.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub tune_fraction: f64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Aggregate counts CSV: item, three category levels, pageviews,
    /// linkviews, clicks and one `<type>_actions` column per action type.
    #[arg(long, value_name = "PATH")]
    pub counts: PathBuf,
    /// Items with fewer pageviews (or linkviews, for CTR) are left out of rates.
    #[arg(long, default_value_t = latrec::analysis::DEFAULT_MIN_DENOMINATOR)]
    pub min_denominator: u64,
    /// Category level (1 to 3) for the per-category tables.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub level: u8,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 200)]
    pub items: usize,
    #[arg(long, default_value_t = 3)]
    pub facets: usize,
    #[arg(long, default_value_t = 2)]
    pub fg: usize,
    #[arg(long, default_value_t = 2)]
    pub fl: usize,
    /// Probability that a (user, item, facet) triple is observed.
    #[arg(long, default_value_t = 0.05)]
    pub density: f64,
    /// correlated, independent, mixed or collapsed
    #[arg(long, default_value = "mixed")]
    pub regime: Regime,
    /// Fraction of events labeled positive.
    #[arg(long, default_value_t = DEFAULT_POSITIVE_RATE, conflicts_with = "real")]
    pub positive_rate: f64,
    /// Keep real-valued responses instead of binarizing.
    #[arg(long)]
    pub real: bool,
    /// Vocabulary size of generated item text; 0 writes no text.
    #[arg(long, default_value_t = 0)]
    pub vocabulary: usize,
    #[arg(long, default_value_t = 20)]
    pub words_per_item: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
