//! Ranking metrics over (user, facet) queries, lifts, paired t-tests,
//! precision-recall curves and slice breakdowns.
//!
//! Items of a query are ranked by descending score; equal scores are
//! ordered by ascending item id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Event, QueryGroup};
use crate::error::{Error, Result};

/// Relevance labels of one query in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    pub user: usize,
    pub facet: usize,
    /// (item, relevant) from the top of the ranking down.
    pub ranking: Vec<(usize, bool)>,
}

impl RankedQuery {
    /// Ranks the items of `query`; `scores[t]` belongs to `query.items[t]`.
    pub fn new(query: &QueryGroup, scores: &[f64]) -> Result<Self> {
        if scores.len() != query.items.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} items in query ({}, {})",
                scores.len(),
                query.items.len(),
                query.user,
                query.facet
            )));
        }
        if let Some(s) = scores.iter().find(|s| s.is_nan()) {
            return Err(Error::Numerical(format!(
                "score {s} in query ({}, {})",
                query.user, query.facet
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(query.items[a].0.cmp(&query.items[b].0))
        });
        Ok(RankedQuery {
            user: query.user,
            facet: query.facet,
            ranking: order
                .into_iter()
                .map(|t| (query.items[t].0, query.items[t].1 > 0.5))
                .collect(),
        })
    }

    /// A query whose ranking is given directly as labels; items are numbered
    /// by rank.
    pub fn from_labels(labels: &[bool]) -> Self {
        RankedQuery {
            user: 0,
            facet: 0,
            ranking: labels.iter().copied().enumerate().collect(),
        }
    }

    pub fn num_relevant(&self) -> usize {
        self.ranking.iter().filter(|(_, r)| *r).count()
    }

    pub fn len(&self) -> usize {
        self.ranking.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranking.is_empty()
    }
}

/// Scores every query with `score(user, item, facet)` and ranks it.
pub fn rank_queries<F>(queries: &[QueryGroup], score: F) -> Result<Vec<RankedQuery>>
where
    F: Fn(usize, usize, usize) -> Result<f64> + Sync,
{
    queries
        .par_iter()
        .map(|q| {
            let scores = q
                .items
                .iter()
                .map(|&(item, _)| score(q.user, item, q.facet))
                .collect::<Result<Vec<_>>>()?;
            RankedQuery::new(q, &scores)
        })
        .collect()
}

/// Relevant items in the top `k`, divided by `k`.
pub fn precision_at_k(r: &RankedQuery, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("precision cutoff must be at least 1".into()));
    }
    if r.is_empty() {
        return Err(Error::Undefined(format!("precision of empty query ({}, {})", r.user, r.facet)));
    }
    let hits = r.ranking.iter().take(k).filter(|(_, rel)| *rel).count();
    Ok(hits as f64 / k as f64)
}

/// Mean of precision@r over the ranks r of relevant items; `None` without
/// relevant items.
pub fn average_precision(r: &RankedQuery) -> Option<f64> {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &(_, rel)) in r.ranking.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Relative improvement (a - b) / b.
pub fn lift(model_value: f64, baseline_value: f64) -> Result<f64> {
    if baseline_value == 0.0 || !baseline_value.is_finite() || !model_value.is_finite() {
        return Err(Error::Undefined(format!(
            "lift of {model_value} over baseline {baseline_value}"
        )));
    }
    Ok((model_value - baseline_value) / baseline_value)
}

/// Significance buckets of a two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Significance {
    /// p < 1e-4
    P0001,
    /// p < 1e-3
    P001,
    /// p < 0.05
    P05,
    Insignificant,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p < 1e-4 {
            Significance::P0001
        } else if p < 1e-3 {
            Significance::P001
        } else if p < 0.05 {
            Significance::P05
        } else {
            Significance::Insignificant
        }
    }

    /// Significant at the 0.05 level.
    pub fn is_significant(self) -> bool {
        self != Significance::Insignificant
    }
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Significance::P0001 => "p<1e-4",
            Significance::P001 => "p<1e-3",
            Significance::P05 => "p<0.05",
            Significance::Insignificant => "insignificant",
        })
    }
}

/// Bound below which p-values are reported as "<1e-10". Differences with
/// zero variance and a nonzero mean give p = 0.
pub const MIN_P_VALUE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub df: usize,
    pub mean_difference: f64,
    pub level: Significance,
}

/// Two-sided paired t-test on `a[q] - b[q]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Undefined(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let (t, p_value) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(TTest {
        t,
        p_value,
        df,
        mean_difference: mean,
        level: Significance::from_p(p_value),
    })
}

/// Recall levels 0.0, 0.1, ..., 1.0.
pub const RECALL_GRID: usize = 11;

/// Interpolated precision at each recall level, averaged over queries with
/// at least one relevant item. Returns (recall, precision) pairs.
pub fn precision_recall_curve(queries: &[RankedQuery]) -> Vec<(f64, f64)> {
    let mut sums = [0.0; RECALL_GRID];
    let mut used = 0usize;
    for q in queries {
        let total = q.num_relevant();
        if total == 0 {
            continue;
        }
        used += 1;
        // precision and hit count after each rank
        let mut points = Vec::with_capacity(q.len());
        let mut hits = 0;
        for (rank, &(_, rel)) in q.ranking.iter().enumerate() {
            hits += usize::from(rel);
            points.push((hits, hits as f64 / (rank + 1) as f64));
        }
        for (level, sum) in sums.iter_mut().enumerate() {
            // recall >= level / 10, compared exactly in integers
            let best = points
                .iter()
                .filter(|(h, _)| h * (RECALL_GRID - 1) >= level * total)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max);
            *sum += best;
        }
    }
    (0..RECALL_GRID)
        .map(|level| {
            let recall = level as f64 / (RECALL_GRID - 1) as f64;
            let precision = if used == 0 { 0.0 } else { sums[level] / used as f64 };
            (recall, precision)
        })
        .collect()
}

/// A ranking metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    PrecisionAt(usize),
    Map,
}

impl Metric {
    /// Per-query value; `None` when undefined for the query.
    pub fn query_value(self, r: &RankedQuery) -> Option<f64> {
        match self {
            Metric::PrecisionAt(k) => precision_at_k(r, k).ok(),
            Metric::Map => average_precision(r),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::PrecisionAt(k) => write!(f, "p@{k}"),
            Metric::Map => f.write_str("map"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "map" {
            return Ok(Metric::Map);
        }
        if let Some(k) = t.strip_prefix("p@") {
            if let Ok(k) = k.parse::<usize>() {
                if k >= 1 {
                    return Ok(Metric::PrecisionAt(k));
                }
            }
        }
        Err(Error::Config(format!("unknown metric {s:?} (expected p@K or map)")))
    }
}

/// Parses a comma-separated metric list such as `p@1,p@3,p@5,map`.
pub fn parse_metrics(s: &str) -> Result<Vec<Metric>> {
    let out: Vec<Metric> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("empty metric list".into()));
    }
    Ok(out)
}

pub const DEFAULT_METRICS: [Metric; 4] = [
    Metric::PrecisionAt(1),
    Metric::PrecisionAt(3),
    Metric::PrecisionAt(5),
    Metric::Map,
];

/// Metric values of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub user: usize,
    pub facet: usize,
    pub num_items: usize,
    pub num_relevant: usize,
    /// One entry per report metric.
    pub values: Vec<Option<f64>>,
}

/// Mean of each metric over a set of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSummary {
    pub num_queries: usize,
    /// Queries for which each metric was defined.
    pub counts: Vec<usize>,
    pub means: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricReport {
    fn index(&self, metric: Metric) -> Result<usize> {
        self.metrics
            .iter()
            .position(|&m| m == metric)
            .ok_or_else(|| Error::Config(format!("metric {metric} not in report")))
    }

    /// Mean over the queries where the metric is defined.
    pub fn mean(&self, metric: Metric) -> Result<f64> {
        let s = self.summarize(|_| true);
        s.means[self.index(metric)?]
            .ok_or_else(|| Error::Undefined(format!("{metric} undefined for every query")))
    }

    /// Queries left out of a metric's mean (AP without relevant items).
    pub fn excluded(&self, metric: Metric) -> Result<usize> {
        let c = self.index(metric)?;
        Ok(self.per_query.iter().filter(|q| q.values[c].is_none()).count())
    }

    /// Per-query values of a metric, undefined entries dropped.
    pub fn values(&self, metric: Metric) -> Result<Vec<f64>> {
        let c = self.index(metric)?;
        Ok(self.per_query.iter().filter_map(|q| q.values[c]).collect())
    }

    pub fn summarize(&self, keep: impl Fn(&QueryMetrics) -> bool) -> SliceSummary {
        let m = self.metrics.len();
        let (mut sums, mut counts, mut n) = (vec![0.0; m], vec![0usize; m], 0);
        for q in self.per_query.iter().filter(|q| keep(q)) {
            n += 1;
            for (c, v) in q.values.iter().enumerate() {
                if let Some(v) = v {
                    sums[c] += v;
                    counts[c] += 1;
                }
            }
        }
        SliceSummary {
            num_queries: n,
            means: sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            counts,
        }
    }

    pub fn overall(&self) -> SliceSummary {
        self.summarize(|_| true)
    }

    /// One summary per facet that has queries.
    pub fn by_facet(&self) -> Vec<(usize, SliceSummary)> {
        let facets: BTreeSet<usize> = self.per_query.iter().map(|q| q.facet).collect();
        facets
            .into_iter()
            .map(|k| (k, self.summarize(|q| q.facet == k)))
            .collect()
    }

    /// One summary per non-empty activity bucket. `activity[user]` is the
    /// user's number of positive training events; users beyond the slice
    /// count as inactive.
    pub fn by_activity(&self, activity: &[usize]) -> Vec<(ActivityBucket, SliceSummary)> {
        let bucket = |q: &QueryMetrics| ActivityBucket::of(activity.get(q.user).copied().unwrap_or(0));
        ActivityBucket::ALL
            .into_iter()
            .map(|b| (b, self.summarize(|q| bucket(q) == b)))
            .filter(|(b, s)| {
                if s.num_queries == 0 {
                    log::info!("activity bucket {b} has no queries; omitted");
                }
                s.num_queries > 0
            })
            .collect()
    }
}

/// Computes every metric for every query.
pub fn evaluate(queries: &[RankedQuery], metrics: &[Metric]) -> MetricReport {
    MetricReport {
        metrics: metrics.to_vec(),
        per_query: queries
            .iter()
            .map(|q| QueryMetrics {
                user: q.user,
                facet: q.facet,
                num_items: q.len(),
                num_relevant: q.num_relevant(),
                values: metrics.iter().map(|m| m.query_value(q)).collect(),
            })
            .collect(),
    }
}

/// User activity levels by number of positive training events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActivityBucket {
    Upto5,
    Upto10,
    Upto15,
    Upto25,
    Upto49,
    From50,
}

impl ActivityBucket {
    pub const ALL: [ActivityBucket; 6] = [
        ActivityBucket::Upto5,
        ActivityBucket::Upto10,
        ActivityBucket::Upto15,
        ActivityBucket::Upto25,
        ActivityBucket::Upto49,
        ActivityBucket::From50,
    ];

    pub fn of(count: usize) -> Self {
        match count {
            0..=5 => ActivityBucket::Upto5,
            6..=10 => ActivityBucket::Upto10,
            11..=15 => ActivityBucket::Upto15,
            16..=25 => ActivityBucket::Upto25,
            26..=49 => ActivityBucket::Upto49,
            _ => ActivityBucket::From50,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ActivityBucket::Upto5 => "0-5",
            ActivityBucket::Upto10 => "6-10",
            ActivityBucket::Upto15 => "11-15",
            ActivityBucket::Upto25 => "16-25",
            ActivityBucket::Upto49 => "26-49",
            ActivityBucket::From50 => "50+",
        }
    }
}

impl fmt::Display for ActivityBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Positive training events per user.
pub fn user_activity(train: &[Event], num_users: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_users];
    for e in train.iter().filter(|e| e.is_positive()) {
        if e.user >= counts.len() {
            counts.resize(e.user + 1, 0);
        }
        counts[e.user] += 1;
    }
    counts
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Writes `slice,value,queries,<metric>...` rows: the overall summary, then
/// per facet, then per activity bucket when `activity` is given.
pub fn write_report_csv<W: Write>(mut w: W, report: &MetricReport, activity: Option<&[usize]>) -> Result<()> {
    let io = |e| Error::io("metric report", e);
    let names: Vec<String> = report.metrics.iter().map(Metric::to_string).collect();
    writeln!(w, "slice,value,queries,{}", names.join(",")).map_err(io)?;
    let mut row = |slice: &str, value: &str, s: &SliceSummary| -> Result<()> {
        let vals: Vec<String> = s.means.iter().map(|v| fmt_value(*v)).collect();
        writeln!(w, "{slice},{value},{},{}", s.num_queries, vals.join(",")).map_err(io)
    };
    row("overall", "all", &report.overall())?;
    for (k, s) in report.by_facet() {
        row("facet", &k.to_string(), &s)?;
    }
    if let Some(a) = activity {
        for (b, s) in report.by_activity(a) {
            row("activity", b.label(), &s)?;
        }
    }
    Ok(())
}

/// Writes one TSV row per query: user, facet, items, relevant, metrics.
pub fn write_per_query_tsv<W: Write>(mut w: W, report: &MetricReport) -> Result<()> {
    let io = |e| Error::io("per-query report", e);
    let names: Vec<String> = report.metrics.iter().map(Metric::to_string).collect();
    writeln!(w, "user\tfacet\tnum_items\tnum_relevant\t{}", names.join("\t")).map_err(io)?;
    for q in &report.per_query {
        let vals: Vec<String> = q.values.iter().map(|v| fmt_value(*v)).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            q.user,
            q.facet,
            q.num_items,
            q.num_relevant,
            vals.join("\t")
        )
        .map_err(io)?;
    }
    Ok(())
}

/// Reads a report written by [`write_per_query_tsv`].
pub fn read_per_query_tsv<R: BufRead>(r: R) -> Result<MetricReport> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
    let header = header.map_err(|e| Error::io("per-query report", e))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 4 || cols[..4] != ["user", "facet", "num_items", "num_relevant"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected user, facet, num_items, num_relevant columns".into(),
        });
    }
    let metrics = cols[4..]
        .iter()
        .map(|c| c.parse::<Metric>())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
    let mut per_query = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io("per-query report", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let bad = |message: String| Error::Parse { line: lineno, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols.len() {
            return Err(bad(format!("{} fields, expected {}", f.len(), cols.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("invalid integer {s:?}")));
        let values = f[4..]
            .iter()
            .map(|s| {
                if *s == "NA" {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| bad(format!("invalid value {s:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        per_query.push(QueryMetrics {
            user: int(f[0])?,
            facet: int(f[1])?,
            num_items: int(f[2])?,
            num_relevant: int(f[3])?,
            values,
        });
    }
    Ok(MetricReport { metrics, per_query })
}

/// Pairs two reports by (user, facet) and tests `a` against `b` on `metric`.
/// Queries where either value is undefined are dropped.
pub fn compare_reports(a: &MetricReport, b: &MetricReport, metric: Metric) -> Result<TTest> {
    let ca = a.index(metric)?;
    let cb = b.index(metric)?;
    let map = |r: &MetricReport, c: usize| -> BTreeMap<(usize, usize), Option<f64>> {
        r.per_query.iter().map(|q| ((q.user, q.facet), q.values[c])).collect()
    };
    let (ma, mb) = (map(a, ca), map(b, cb));
    let ka: BTreeSet<_> = ma.keys().copied().collect();
    let kb: BTreeSet<_> = mb.keys().copied().collect();
    if ka != kb {
        let diff: Vec<String> = ka
            .symmetric_difference(&kb)
            .take(20)
            .map(|(u, f)| format!("({u}, {f})"))
            .collect();
        return Err(Error::Validation(format!(
            "reports cover different queries; {} unmatched, e.g. {}",
            ka.symmetric_difference(&kb).count(),
            diff.join(" ")
        )));
    }
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (k, va) in &ma {
        if let (Some(x), Some(y)) = (va, mb[k]) {
            xa.push(*x);
            xb.push(y);
        }
    }
    paired_t_test(&xa, &xb)
}
