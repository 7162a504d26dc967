mod data;
mod tune;

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latrec::baselines::{fit_bilinear, BilinearOptions};
use latrec::data::group_queries;
use latrec::eval::{
    compare_reports, evaluate, lift, parse_metrics, precision_recall_curve, rank_queries, read_per_query_tsv,
    user_activity, write_per_query_tsv, write_report_csv, Metric,
};
use latrec::model::ModelKind;
use latrec::train::write_trace;
use latrec::{fit, LabelKind, ModelConfig};
use rayon::prelude::*;

use crate::args::{EvalArgs, PredictArgs, TrainArgs};
use crate::inputs::{self, require, write_with};
use crate::scoring::{write_scores, Scorer, SideInfo};

pub use data::{analyze, split, synth};
pub use tune::tune;

/// Latent dimensions for `kind`, filling in the defaults.
fn dims(kind: ModelKind, fg: Option<usize>, fl: Option<usize>) -> (usize, usize) {
    let (dg, dl) = match kind {
        ModelKind::Lat => (2, 2),
        ModelKind::Bst => (2, 0),
        ModelKind::Smf | ModelKind::Cmf => (0, 2),
    };
    (fg.unwrap_or(dg), fl.unwrap_or(dl))
}

fn trace_path(out: &Path, trace: Option<&Path>) -> PathBuf {
    trace.map_or_else(
        || {
            let mut s = out.as_os_str().to_owned();
            s.push(".trace.csv");
            PathBuf::from(s)
        },
        Path::to_path_buf,
    )
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if a.model.is_text() {
        bail!(
            "{} needs no training; score it with `predict` or `eval` using --train and --item-text",
            a.model.name()
        );
    }
    inputs::check_features(&a.features)?;
    let events = inputs::events(&a.events, a.labels.into())?;
    let ds = inputs::dataset(events, &a.features)?;
    let trace = trace_path(&a.out, a.trace.as_deref());
    let Some(kind) = a.model.factor_kind() else {
        let opts = BilinearOptions {
            folds: a.folds,
            seed: a.fit.seed,
            ..BilinearOptions::default()
        };
        let model = fit_bilinear(&ds, &opts)?;
        write_with(&a.out, |w| {
            serde_json::to_writer_pretty(&mut *w, &model)?;
            writeln!(w)?;
            Ok(())
        })?;
        write_with(&trace, |w| {
            writeln!(w, "facet,lambda")?;
            for (k, l) in model.lambdas.iter().enumerate() {
                writeln!(w, "{k},{}", l.map_or_else(|| "NA".into(), |l| l.to_string()))?;
            }
            Ok(())
        })?;
        println!("bilinear model written to {}", a.out.display());
        return Ok(());
    };
    let (fg, fl) = dims(kind, a.fg, a.fl);
    let config = ModelConfig::new(kind, fg, fl, a.fit.seed)?;
    let out = fit(&ds, &config, &a.fit.options())?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    write_with(&a.out, |w| Ok(w.write_all(&out.model.to_bytes())?))?;
    write_with(&trace, |w| Ok(write_trace(w, &out.trace)?))?;
    if let Some(last) = out.trace.last() {
        println!(
            "{kind} (F_g={fg}, F_l={fl}) written to {}; final expected log-likelihood {} (se {})",
            a.out.display(),
            last.loglik,
            last.loglik_se
        );
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    inputs::check_features(&a.scorer.features)?;
    let events = inputs::events(&a.events, LabelKind::Real)?;
    let side = SideInfo::load(&a.scorer.features, &events)?;
    let scorer = Scorer::from_args(&a.scorer, &events, a.labels.into())?;
    let scores = events
        .events
        .par_iter()
        .map(|e| scorer.score(&side, e.user, e.item, e.facet))
        .collect::<latrec::Result<Vec<f64>>>()?;
    write_with(&a.out, |w| Ok(write_scores(w, &events.events, &scores)?))?;
    println!("{} scores written to {}", scores.len(), a.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let metrics = parse_metrics(&a.metrics)?;
    if let Some(pair) = &a.compare {
        return compare(&pair[0], &pair[1], &metrics, &a.out);
    }
    let path = a.events.as_deref().context("--events is required")?;
    inputs::check_features(&a.scorer.features)?;
    let labels: LabelKind = a.labels.into();
    let test = inputs::events(path, labels)?;
    let queries = group_queries(&test.events);
    if queries.is_empty() {
        bail!("{} holds no queries", path.display());
    }
    let scorer = match &a.scores {
        Some(s) => Scorer::from_scores_file(s)?,
        None => Scorer::from_args(&a.scorer, &test, labels)?,
    };
    let side = SideInfo::load(&a.scorer.features, &test)?;
    let activity = match &a.scorer.text.train {
        Some(p) => Some(user_activity(&inputs::events(p, labels)?.events, test.num_users)),
        None => None,
    };
    let ranked = rank_queries(&queries, |i, j, k| scorer.score(&side, i, j, k))?;
    let report = evaluate(&ranked, &metrics);
    inputs::out_dir(&a.out)?;
    write_with(&a.out.join("report.csv"), |w| Ok(write_report_csv(w, &report, activity.as_deref())?))?;
    write_with(&a.out.join("per_query.tsv"), |w| Ok(write_per_query_tsv(w, &report)?))?;
    write_with(&a.out.join("pr_curve.csv"), |w| {
        writeln!(w, "recall,precision")?;
        for (r, p) in precision_recall_curve(&ranked) {
            writeln!(w, "{r},{p}")?;
        }
        Ok(())
    })?;
    let summary = report.overall();
    let cells: Vec<String> = metrics
        .iter()
        .zip(&summary.means)
        .map(|(m, v)| format!("{m} {}", fmt_opt(*v)))
        .collect();
    println!("{} queries: {}", summary.num_queries, cells.join(", "));
    Ok(())
}

fn compare(a: &Path, b: &Path, metrics: &[Metric], out: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<_> {
        let f = File::open(require(p)?).with_context(|| format!("opening {}", p.display()))?;
        read_per_query_tsv(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
    };
    let (ra, rb) = (read(a)?, read(b)?);
    inputs::out_dir(out)?;
    let mut rows = Vec::new();
    for &m in metrics {
        let t = compare_reports(&ra, &rb, m)?;
        let (ma, mb) = (ra.mean(m)?, rb.mean(m)?);
        let l = lift(ma, mb).ok();
        println!("{m}: {ma} vs {mb}, lift {}, t {}, p {} ({})", fmt_opt(l), t.t, t.p_value, t.level);
        rows.push(format!(
            "{m},{ma},{mb},{},{},{},{},{},{}",
            fmt_opt(l),
            t.mean_difference,
            t.t,
            t.df,
            t.p_value,
            t.level
        ));
    }
    write_with(&out.join("compare.csv"), |w| {
        writeln!(w, "metric,mean_a,mean_b,lift,mean_difference,t,df,p_value,significance")?;
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}
