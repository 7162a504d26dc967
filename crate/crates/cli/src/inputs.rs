use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use latrec::data::{parse_events, parse_features, EventsFile, Features};
use latrec::{LabelKind, Dataset};

use crate::args::FeatureArgs;

/// An input path that does not exist.
#[derive(Debug)]
pub struct MissingInput(pub PathBuf);

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input file not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

pub fn require(path: &Path) -> Result<&Path> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    Ok(path)
}

pub fn events(path: &Path, kind: LabelKind) -> Result<EventsFile> {
    parse_events(require(path)?, kind).with_context(|| format!("reading events {}", path.display()))
}

fn features(path: Option<&Path>) -> Result<Features> {
    match path {
        Some(p) => parse_features(require(p)?).with_context(|| format!("reading features {}", p.display())),
        None => Ok(Features::empty(0)),
    }
}

/// Checks every given feature path before anything is parsed.
pub fn check_features(args: &FeatureArgs) -> Result<()> {
    for p in [&args.user_features, &args.item_features].into_iter().flatten() {
        require(p)?;
    }
    Ok(())
}

pub fn dataset(events: EventsFile, args: &FeatureArgs) -> Result<Dataset> {
    let users = features(args.user_features.as_deref())?;
    let items = features(args.item_features.as_deref())?;
    Dataset::new(events, users, items).context("assembling dataset")
}

/// Grows the index space of `file` to cover `other`.
pub fn widen(file: &mut EventsFile, other: &EventsFile) {
    file.num_users = file.num_users.max(other.num_users);
    file.num_items = file.num_items.max(other.num_items);
    file.num_facets = file.num_facets.max(other.num_facets);
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_with<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = create(path)?;
    body(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

pub fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
