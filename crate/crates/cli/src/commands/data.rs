use std::io::Write;

use anyhow::{Context, Result};
use latrec::analysis::{
    category_totals, correlation_matrix, log_ratio_profile, parse_aggregate_counts, rate_columns, variation_by_category,
    write_correlation_csv, write_log_ratio_csv, write_variation_csv,
};
use latrec::data::{split_with_options, Features, SplitOptions};
use latrec::synth::{generate, generate_item_text, GenSpec};
use latrec::{Dataset, LabelKind};

use crate::args::{AnalyzeArgs, SplitArgs, SynthArgs};
use crate::inputs::{self, require, write_with};

pub fn split(a: &SplitArgs) -> Result<()> {
    let labels: LabelKind = a.labels.into();
    let events = inputs::events(&a.events, labels)?;
    let ds = Dataset::new(events, Features::empty(0), Features::empty(0))?;
    let opts = SplitOptions {
        seed: a.seed,
        min_actions: a.min_actions,
        filter_stage: a.filter_stage.into(),
        tune_fraction: a.tune_fraction,
    };
    let spec = split_with_options(&ds, &opts)?;
    spec.write_dir(&a.out, labels)?;
    let m = spec.manifest();
    println!(
        "{} training events, {} tuning queries, {} test queries written to {}",
        m.train_events,
        m.tune_queries,
        m.test_queries,
        a.out.display()
    );
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let counts = parse_aggregate_counts(require(&a.counts)?)
        .with_context(|| format!("reading counts {}", a.counts.display()))?;
    inputs::out_dir(&a.out)?;
    let kinds = counts.rate_kinds();
    let names: Vec<String> = kinds.iter().map(|&k| counts.rate_name(k)).collect();
    let corr = correlation_matrix(&rate_columns(&counts, &kinds, a.min_denominator));
    write_with(&a.out.join("correlation.csv"), |w| Ok(write_correlation_csv(w, &names, &corr)?))?;
    let level = usize::from(a.level) - 1;
    for (&kind, name) in kinds.iter().zip(&names) {
        let rows = variation_by_category(&counts, level, kind, a.min_denominator);
        write_with(&a.out.join(format!("variation_{name}.csv")), |w| Ok(write_variation_csv(w, &rows)?))?;
    }
    for (t, action) in counts.action_types.iter().enumerate() {
        let totals = category_totals(&counts, level, t);
        let categories: Vec<String> = totals.keys().cloned().collect();
        let (actions, pageviews): (Vec<f64>, Vec<f64>) = totals.values().copied().unzip();
        match log_ratio_profile(&actions, &pageviews) {
            Ok(profile) => write_with(&a.out.join(format!("log_ratio_{action}.csv")), |w| {
                Ok(write_log_ratio_csv(w, &categories, &profile)?)
            })?,
            Err(e) => log::warn!("no log-ratio profile for {action}: {e}"),
        }
    }
    println!(
        "{} items, {} rates analyzed; tables written to {}",
        counts.items.len(),
        kinds.len(),
        a.out.display()
    );
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = GenSpec::for_regime(a.regime, a.users, a.items, a.facets, a.fg, a.fl, a.density, a.seed);
    spec.positive_rate = (!a.real).then_some(a.positive_rate);
    let (ds, truth) = generate(&spec)?;
    let labels = if a.real { LabelKind::Real } else { LabelKind::Binary };
    ds.write_dir(&a.out, labels)?;
    truth.to_model(a.seed).save(&a.out.join("truth.bin"))?;
    if a.vocabulary > 0 {
        let texts = generate_item_text(&truth, a.vocabulary, a.words_per_item, a.seed);
        write_with(&a.out.join("item_text.tsv"), |w| {
            for (j, text) in &texts {
                writeln!(w, "{j}\t{text}")?;
            }
            Ok(())
        })?;
    }
    println!("{} events over {} users and {} items written to {}", ds.events.len(), ds.num_users, ds.num_items, a.out.display());
    Ok(())
}
