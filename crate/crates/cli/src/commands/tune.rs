use std::collections::BTreeSet;
use std::io::Write;

use anyhow::{bail, Context, Result};
use latrec::data::group_queries;
use latrec::eval::{evaluate, rank_queries, Metric};
use latrec::model::ModelKind;
use latrec::train::write_trace;
use latrec::{fit, FitOutput, LabelKind, ModelConfig};
use rayon::prelude::*;

use crate::args::TuneArgs;
use crate::inputs::{self, write_with};
use crate::scoring::SideInfo;

const DEFAULT_GRID: [usize; 5] = [1, 2, 4, 8, 16];

fn parse_grid(flag: &str, text: Option<&str>) -> Result<Vec<usize>> {
    let Some(text) = text else {
        return Ok(DEFAULT_GRID.to_vec());
    };
    let mut set = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: usize = part
            .parse()
            .with_context(|| format!("--{flag}: `{part}` is not a non-negative integer"))?;
        set.insert(v);
    }
    if set.is_empty() {
        bail!("--{flag} is empty");
    }
    Ok(set.into_iter().collect())
}

/// The (F_g, F_l) candidates for `kind`.
fn grid(kind: ModelKind, fg: Option<&str>, fl: Option<&str>) -> Result<Vec<(usize, usize)>> {
    let fgs = match kind {
        ModelKind::Smf | ModelKind::Cmf => vec![0],
        _ => parse_grid("fg-grid", fg)?,
    };
    let fls = match kind {
        ModelKind::Bst => vec![0],
        _ => parse_grid("fl-grid", fl)?,
    };
    Ok(fgs.iter().flat_map(|&g| fls.iter().map(move |&l| (g, l))).collect())
}

/// Index of the best MAP; ties go to the smaller F_g + F_l, then to the
/// earlier candidate.
fn select(points: &[(usize, usize)], maps: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (idx, m) in maps.iter().enumerate() {
        let Some(m) = *m else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bm = maps[b].unwrap_or(f64::NEG_INFINITY);
                m > bm || (m == bm && points[idx].0 + points[idx].1 < points[b].0 + points[b].1)
            }
        };
        if better {
            best = Some(idx);
        }
    }
    best
}

pub fn tune(a: &TuneArgs) -> Result<()> {
    let Some(kind) = a.model.factor_kind() else {
        bail!("tune searches latent dimensions of lat, bst, smf or cmf, not {}", a.model.name());
    };
    inputs::check_features(&a.features)?;
    let labels: LabelKind = a.labels.into();
    let mut train = inputs::events(&a.events, labels)?;
    let tune_events = inputs::events(&a.tune, labels)?;
    let queries = group_queries(&tune_events.events);
    if queries.is_empty() {
        bail!("{} holds no queries", a.tune.display());
    }
    inputs::widen(&mut train, &tune_events);
    let ds = inputs::dataset(train, &a.features)?;
    let opts = a.fit.options();
    let points = grid(kind, a.fg_grid.as_deref(), a.fl_grid.as_deref())?;
    let configs = points
        .iter()
        .map(|&(fg, fl)| ModelConfig::new(kind, fg, fl, a.fit.seed))
        .collect::<latrec::Result<Vec<_>>>()?;
    let side = SideInfo::from_dataset(ds.clone());

    let results = configs
        .par_iter()
        .map(|config| -> Result<(FitOutput, Option<f64>, usize)> {
            let out = fit(&ds, config, &opts)
                .with_context(|| format!("fitting F_g={}, F_l={}", config.global_dim, config.local_dim))?;
            let ranked = rank_queries(&queries, |i, j, k| out.model.predict(i, j, k, side.user(i), side.item(j)))?;
            let report = evaluate(&ranked, &[Metric::Map]);
            let n = report.values(Metric::Map).map_or(0, |v| v.len());
            let map = report.mean(Metric::Map).ok();
            Ok((out, map, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<Option<f64>> = results.iter().map(|r| r.1).collect();
    let Some(best) = select(&points, &maps) else {
        bail!("no tuning query has a relevant item, so MAP is undefined for every candidate");
    };

    inputs::out_dir(&a.out)?;
    write_with(&a.out.join("grid.csv"), |w| {
        writeln!(w, "fg,fl,map,queries")?;
        for ((fg, fl), (_, map, n)) in points.iter().zip(&results) {
            let m = map.map_or_else(|| "NA".into(), |m| m.to_string());
            writeln!(w, "{fg},{fl},{m},{n}")?;
        }
        Ok(())
    })?;
    let out = &results[best].0;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    write_with(&a.out.join("model.bin"), |w| Ok(w.write_all(&out.model.to_bytes())?))?;
    write_with(&a.out.join("trace.csv"), |w| Ok(write_trace(w, &out.trace)?))?;
    let (fg, fl) = points[best];
    println!(
        "selected {kind} F_g={fg}, F_l={fl} (tuning MAP {}) from {} candidates; written to {}",
        maps[best].unwrap_or(f64::NAN),
        points.len(),
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_are_sorted_and_deduplicated() {
        assert_eq!(parse_grid("fg-grid", Some("4, 2,4,1")).unwrap(), vec![1, 2, 4]);
        assert_eq!(parse_grid("fg-grid", None).unwrap(), DEFAULT_GRID.to_vec());
        assert!(parse_grid("fg-grid", Some(",")).is_err());
        assert!(parse_grid("fg-grid", Some("2,x")).is_err());
    }

    #[test]
    fn kind_pins_unused_dimension() {
        assert_eq!(grid(ModelKind::Bst, Some("1,2"), Some("5")).unwrap(), vec![(1, 0), (2, 0)]);
        assert_eq!(grid(ModelKind::Smf, Some("3"), Some("1")).unwrap(), vec![(0, 1)]);
        assert_eq!(grid(ModelKind::Lat, Some("1"), Some("1,2")).unwrap(), vec![(1, 1), (1, 2)]);
    }

    #[test]
    fn ties_prefer_smaller_models() {
        let pts = [(2, 2), (1, 1), (4, 0)];
        assert_eq!(select(&pts, &[Some(0.5), Some(0.5), Some(0.4)]), Some(1));
        assert_eq!(select(&pts, &[Some(0.3), None, Some(0.4)]), Some(2));
        assert_eq!(select(&pts, &[None, None, None]), None);
        assert_eq!(select(&[(1, 1), (2, 0)], &[Some(0.5), Some(0.5)]), Some(0));
    }
}
