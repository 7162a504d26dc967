use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use latrec::baselines::{
    build_user_profiles, parse_item_text, score_bilinear, score_bm25, score_cosine, score_lm_dirichlet, BilinearModel,
    Bm25Params, Corpus, UserProfile,
};
use latrec::data::{Event, EventsFile, FeatureVector};
use latrec::{Dataset, FittedModel, LabelKind};

use crate::args::{FeatureArgs, ModelName, ScorerArgs};
use crate::inputs::{self, require};

/// Feature vectors by id; ids past the end have no features.
pub struct SideInfo {
    users: Vec<FeatureVector>,
    items: Vec<FeatureVector>,
    empty: FeatureVector,
}

impl SideInfo {
    pub fn load(args: &FeatureArgs, events: &EventsFile) -> Result<Self> {
        let ds = inputs::dataset(
            EventsFile {
                events: Vec::new(),
                ..events.clone()
            },
            args,
        )?;
        Ok(Self::from_dataset(ds))
    }

    pub fn from_dataset(ds: Dataset) -> Self {
        SideInfo {
            users: ds.user_features,
            items: ds.item_features,
            empty: FeatureVector::empty(),
        }
    }

    pub fn user(&self, i: usize) -> &FeatureVector {
        self.users.get(i).unwrap_or(&self.empty)
    }

    pub fn item(&self, j: usize) -> &FeatureVector {
        self.items.get(j).unwrap_or(&self.empty)
    }
}

pub enum Scorer {
    Factor(FittedModel),
    Bilinear(BilinearModel),
    Text {
        model: ModelName,
        corpus: Corpus,
        profiles: Vec<UserProfile>,
        mu: f64,
        bm25: Bm25Params,
    },
    Table(HashMap<(usize, usize, usize), f64>),
}

impl Scorer {
    /// Builds the scorer named by `args` for queries over `events`.
    pub fn from_args(args: &ScorerArgs, events: &EventsFile, labels: LabelKind) -> Result<Self> {
        let Some(model) = args.model else {
            bail!("--model is required to score");
        };
        if let Some(kind) = model.factor_kind() {
            let path = model_file(args)?;
            let m = FittedModel::load(require(path)?).with_context(|| format!("loading model {}", path.display()))?;
            if m.kind() != kind {
                bail!("{} holds a {} model, not {kind}", path.display(), m.kind());
            }
            return Ok(Scorer::Factor(m));
        }
        if model == ModelName::Bilinear {
            let path = model_file(args)?;
            let text = fs::read_to_string(require(path)?).with_context(|| format!("reading {}", path.display()))?;
            let m: BilinearModel =
                serde_json::from_str(&text).with_context(|| format!("parsing bilinear model {}", path.display()))?;
            return Ok(Scorer::Bilinear(m));
        }
        let (Some(text_path), Some(train_path)) = (&args.text.item_text, &args.text.train) else {
            bail!("{} needs --item-text and --train", model.name());
        };
        let texts = parse_item_text(require(text_path)?)
            .with_context(|| format!("reading item text {}", text_path.display()))?;
        let train = inputs::events(train_path, labels)?;
        let num_items = [events.num_items, train.num_items, texts.keys().last().map_or(0, |&j| j + 1)]
            .into_iter()
            .max()
            .unwrap_or(0);
        let num_users = events.num_users.max(train.num_users);
        let corpus = Corpus::new(num_items, &texts)?;
        let profiles = build_user_profiles(&train.events, num_users, &corpus);
        let bm25 = args.text.bm25();
        bm25.validate()?;
        if !(args.text.mu > 0.0 && args.text.mu.is_finite()) {
            bail!("--mu must be positive, got {}", args.text.mu);
        }
        Ok(Scorer::Text {
            model,
            corpus,
            profiles,
            mu: args.text.mu,
            bm25,
        })
    }

    pub fn from_scores_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(require(path)?).with_context(|| format!("reading scores {}", path.display()))?;
        let mut table = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 && line.starts_with("user") || line.trim().is_empty() {
                continue;
            }
            let bad = || format!("{}:{}: expected `user item facet score`", path.display(), idx + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                bail!(bad());
            }
            let key = (
                f[0].parse().with_context(bad)?,
                f[1].parse().with_context(bad)?,
                f[2].parse().with_context(bad)?,
            );
            let score: f64 = f[3].parse().with_context(bad)?;
            if table.insert(key, score).is_some() {
                bail!("{}:{}: duplicate triple {key:?}", path.display(), idx + 1);
            }
        }
        Ok(Scorer::Table(table))
    }

    pub fn score(&self, side: &SideInfo, i: usize, j: usize, k: usize) -> latrec::Result<f64> {
        match self {
            Scorer::Factor(m) => m.predict(i, j, k, side.user(i), side.item(j)),
            Scorer::Bilinear(m) => score_bilinear(m, side.user(i), side.item(j), k),
            Scorer::Text {
                model,
                corpus,
                profiles,
                mu,
                bm25,
            } => {
                let empty = UserProfile::default();
                let p = profiles.get(i).unwrap_or(&empty);
                match model {
                    ModelName::Cos => Ok(score_cosine(p, j, corpus)),
                    ModelName::Lm => score_lm_dirichlet(p, j, corpus, *mu),
                    _ => Ok(score_bm25(p, j, corpus, *bm25)),
                }
            }
            Scorer::Table(t) => t
                .get(&(i, j, k))
                .copied()
                .ok_or_else(|| latrec::Error::Validation(format!("no score for triple ({i}, {j}, {k})"))),
        }
    }
}

fn model_file(args: &ScorerArgs) -> Result<&Path> {
    args.model_file
        .as_deref()
        .context("--model-file is required for trained models")
}

pub fn write_scores<W: Write>(mut w: W, events: &[Event], scores: &[f64]) -> std::io::Result<()> {
    writeln!(w, "user\titem\tfacet\tscore")?;
    for (e, s) in events.iter().zip(scores) {
        writeln!(w, "{}\t{}\t{}\t{s}", e.user, e.item, e.facet)?;
    }
    Ok(())
}
