//! Exploratory statistics over aggregated per-item counts: action rates,
//! their correlations, category log-ratio profiles and within-category
//! coefficients of variation.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Items with fewer pageviews or linkviews are dropped before correlating.
pub const DEFAULT_MIN_DENOMINATOR: u64 = 2000;

pub const HIGH_VARIATION_THRESHOLD: f64 = 0.2;

pub const CATEGORY_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemCounts {
    pub item: String,
    /// Category path, most general first; empty levels are dropped.
    pub category: Vec<String>,
    pub pageviews: u64,
    pub linkviews: u64,
    pub clicks: u64,
    /// One entry per action type.
    pub actions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateCounts {
    pub action_types: Vec<String>,
    pub items: Vec<ItemCounts>,
}

/// A per-item rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    /// Actions of the given type per pageview.
    Action(usize),
    /// Clicks per linkview.
    Ctr,
}

impl AggregateCounts {
    pub fn action_type(&self, name: &str) -> Option<usize> {
        self.action_types.iter().position(|t| t == name)
    }

    /// Every action rate followed by CTR.
    pub fn rate_kinds(&self) -> Vec<RateKind> {
        (0..self.action_types.len())
            .map(RateKind::Action)
            .chain(std::iter::once(RateKind::Ctr))
            .collect()
    }

    pub fn rate_name(&self, kind: RateKind) -> String {
        match kind {
            RateKind::Action(t) => format!("{}_rate", self.action_types[t]),
            RateKind::Ctr => "ctr".into(),
        }
    }

    pub fn rate(&self, item: usize, kind: RateKind) -> Option<f64> {
        match kind {
            RateKind::Action(t) => action_rate(self, item, t),
            RateKind::Ctr => click_through_rate(self, item),
        }
    }

    fn check(&self) -> Result<()> {
        for it in &self.items {
            if it.actions.len() != self.action_types.len() {
                return Err(Error::Validation(format!(
                    "item {} has {} action counts, expected {}",
                    it.item,
                    it.actions.len(),
                    self.action_types.len()
                )));
            }
            if it.category.len() > CATEGORY_LEVELS {
                return Err(Error::Validation(format!("item {} has more than {CATEGORY_LEVELS} category levels", it.item)));
            }
        }
        Ok(())
    }
}

const FIXED_COLUMNS: [&str; 7] = [
    "item",
    "category_l1",
    "category_l2",
    "category_l3",
    "pageviews",
    "linkviews",
    "clicks",
];

/// Reads `item,category_l1,category_l2,category_l3,pageviews,linkviews,clicks,<type>_actions...`.
pub fn read_aggregate_counts<R: Read>(r: R) -> Result<AggregateCounts> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must start with {}", FIXED_COLUMNS.join(",")),
        });
    }
    let action_types = cols[FIXED_COLUMNS.len()..]
        .iter()
        .map(|c| {
            c.strip_suffix("_actions")
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    message: format!("action column {c:?} must be named <type>_actions"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut items = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let count = |c: usize| -> Result<u64> {
            rec[c].parse::<u64>().map_err(|_| Error::Parse {
                line,
                message: format!("{}: counts must be non-negative integers, got {:?}", cols[c], &rec[c]),
            })
        };
        let category = (1..=CATEGORY_LEVELS)
            .map(|c| rec[c].to_string())
            .take_while(|s| !s.is_empty())
            .collect();
        items.push(ItemCounts {
            item: rec[0].to_string(),
            category,
            pageviews: count(4)?,
            linkviews: count(5)?,
            clicks: count(6)?,
            actions: (FIXED_COLUMNS.len()..cols.len()).map(count).collect::<Result<_>>()?,
        });
    }
    let out = AggregateCounts { action_types, items };
    out.check()?;
    Ok(out)
}

pub fn parse_aggregate_counts(path: &Path) -> Result<AggregateCounts> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_aggregate_counts(std::io::BufReader::new(f))
}

/// Actions of type `t` per pageview; `None` without pageviews.
pub fn action_rate(counts: &AggregateCounts, item: usize, t: usize) -> Option<f64> {
    let it = &counts.items[item];
    (it.pageviews > 0).then(|| it.actions[t] as f64 / it.pageviews as f64)
}

/// Clicks per linkview; `None` without linkviews.
pub fn click_through_rate(counts: &AggregateCounts, item: usize) -> Option<f64> {
    let it = &counts.items[item];
    (it.linkviews > 0).then(|| it.clicks as f64 / it.linkviews as f64)
}

/// Per rate kind, the rate of every item that has at least `min_denominator`
/// pageviews and linkviews.
pub fn rate_columns(counts: &AggregateCounts, kinds: &[RateKind], min_denominator: u64) -> Vec<Vec<Option<f64>>> {
    let keep: Vec<usize> = (0..counts.items.len())
        .filter(|&i| {
            let it = &counts.items[i];
            it.pageviews >= min_denominator && it.linkviews >= min_denominator
        })
        .collect();
    kinds
        .iter()
        .map(|&k| keep.iter().map(|&i| counts.rate(i, k)).collect())
        .collect()
}

/// Pairwise-complete Pearson correlations. `None` marks pairs with fewer
/// than two shared items or a constant column.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Vec<Vec<Option<f64>>>,
    /// Number of items both columns define.
    pub pairs: Vec<Vec<usize>>,
}

fn pearson(a: &[Option<f64>], b: &[Option<f64>]) -> (Option<f64>, usize) {
    let pts: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    let n = pts.len();
    if n < 2 {
        return (None, n);
    }
    // running co-moments
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (c, &(x, y)) in pts.iter().enumerate() {
        let w = (c + 1) as f64;
        let (dx, dy) = (x - mx, y - my);
        mx += dx / w;
        my += dy / w;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return (None, n);
    }
    (Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)), n)
}

pub fn correlation_matrix(columns: &[Vec<Option<f64>>]) -> CorrelationMatrix {
    let c = columns.len();
    let cells: Vec<(Option<f64>, usize)> = (0..c * c)
        .into_par_iter()
        .map(|idx| {
            let (a, b) = (idx / c, idx % c);
            if b < a {
                return (None, 0);
            }
            let (r, n) = pearson(&columns[a], &columns[b]);
            (if a == b { r.map(|_| 1.0) } else { r }, n)
        })
        .collect();
    let mut values = vec![vec![None; c]; c];
    let mut pairs = vec![vec![0; c]; c];
    for a in 0..c {
        for b in a..c {
            let (r, n) = cells[a * c + b];
            values[a][b] = r;
            values[b][a] = r;
            pairs[a][b] = n;
            pairs[b][a] = n;
        }
    }
    CorrelationMatrix { values, pairs }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogRatio {
    Defined(f64),
    /// The category has pageviews but no actions.
    NoActions,
    /// The category has no pageviews; excluded from the profile.
    NoPageviews,
}

impl LogRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            LogRatio::Defined(v) => Some(v),
            _ => None,
        }
    }
}

/// `ln(action share / pageview share)` per category.
pub fn log_ratio_profile(actions: &[f64], pageviews: &[f64]) -> Result<Vec<LogRatio>> {
    if actions.len() != pageviews.len() {
        return Err(Error::Dimension(format!(
            "{} action categories vs {} pageview categories",
            actions.len(),
            pageviews.len()
        )));
    }
    if actions.iter().chain(pageviews).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Validation("category counts must be finite and non-negative".into()));
    }
    let (ta, tp): (f64, f64) = (actions.iter().sum(), pageviews.iter().sum());
    if ta <= 0.0 || tp <= 0.0 {
        return Err(Error::Undefined("category distribution is all zero".into()));
    }
    Ok(actions
        .iter()
        .zip(pageviews)
        .map(|(&a, &p)| {
            if p <= 0.0 {
                LogRatio::NoPageviews
            } else if a <= 0.0 {
                LogRatio::NoActions
            } else {
                LogRatio::Defined(((a / ta) / (p / tp)).ln())
            }
        })
        .collect())
}

/// Category label at `level` (0-based): the path prefix joined by `/`.
fn category_key(it: &ItemCounts, level: usize) -> Option<String> {
    (it.category.len() > level).then(|| it.category[..=level].join("/"))
}

/// Action and pageview totals per category at `level`.
pub fn category_totals(counts: &AggregateCounts, level: usize, t: usize) -> BTreeMap<String, (f64, f64)> {
    let mut out: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for it in &counts.items {
        if let Some(key) = category_key(it, level) {
            let e = out.entry(key).or_default();
            e.0 += it.actions[t] as f64;
            e.1 += it.pageviews as f64;
        }
    }
    out
}

/// Unadjusted sample coefficient of variation, `sd / mean` with an `n - 1`
/// denominator.
pub fn coefficient_of_variation(rates: &[f64]) -> Result<f64> {
    if rates.len() < 2 {
        return Err(Error::Undefined(format!("need at least 2 rates, got {}", rates.len())));
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::Undefined(format!("mean rate {mean} is not positive")));
    }
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / mean)
}

pub fn is_high_variation(cv: f64) -> bool {
    cv > HIGH_VARIATION_THRESHOLD
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryVariation {
    pub category: String,
    /// Items contributing a defined rate.
    pub items: usize,
    pub cv: Option<f64>,
}

impl CategoryVariation {
    pub fn high_variation(&self) -> bool {
        self.cv.is_some_and(is_high_variation)
    }
}

/// Coefficient of variation of item rates within each category at `level`.
pub fn variation_by_category(counts: &AggregateCounts, level: usize, kind: RateKind, min_denominator: u64) -> Vec<CategoryVariation> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in counts.items.iter().enumerate() {
        if let Some(key) = category_key(it, level) {
            groups.entry(key).or_default().push(i);
        }
    }
    let denom = |i: usize| match kind {
        RateKind::Action(_) => counts.items[i].pageviews,
        RateKind::Ctr => counts.items[i].linkviews,
    };
    groups
        .into_par_iter()
        .map(|(category, members)| {
            let rates: Vec<f64> = members
                .iter()
                .filter(|&&i| denom(i) >= min_denominator)
                .filter_map(|&i| counts.rate(i, kind))
                .collect();
            CategoryVariation {
                category,
                items: rates.len(),
                cv: coefficient_of_variation(&rates).ok(),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

pub fn write_correlation_csv<W: Write>(mut w: W, names: &[String], m: &CorrelationMatrix) -> std::io::Result<()> {
    writeln!(w, ",{}", names.join(","))?;
    for (name, row) in names.iter().zip(&m.values) {
        let cells: Vec<String> = row.iter().map(|&v| fmt_opt(v)).collect();
        writeln!(w, "{name},{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_log_ratio_csv<W: Write>(mut w: W, categories: &[String], profile: &[LogRatio]) -> std::io::Result<()> {
    writeln!(w, "category,log_ratio,flag")?;
    for (c, r) in categories.iter().zip(profile) {
        let flag = match r {
            LogRatio::Defined(_) => "",
            LogRatio::NoActions => "no_actions",
            LogRatio::NoPageviews => "no_pageviews",
        };
        writeln!(w, "{c},{},{flag}", fmt_opt(r.value()))?;
    }
    Ok(())
}

pub fn write_variation_csv<W: Write>(mut w: W, rows: &[CategoryVariation]) -> std::io::Result<()> {
    writeln!(w, "category,items,cv_unadjusted,high_variation")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.category, r.items, fmt_opt(r.cv), r.high_variation())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const FIXTURE: &str = "\
item,category_l1,category_l2,category_l3,pageviews,linkviews,clicks,share_actions,like_actions
a,news,world,,1000,4000,40,5,20
b,news,us,,3000,2500,10,0,9
c,sports,,,0,10,1,0,0
d,news,world,europe,2000,2000,30,12,4
";

    #[test]
    fn parse_and_rates() {
        let c = read_aggregate_counts(FIXTURE.as_bytes()).unwrap();
        assert_eq!(c.action_types, vec!["share", "like"]);
        assert_eq!(c.items[0].category, vec!["news", "world"]);
        assert_eq!(c.items[3].category.len(), 3);
        assert_eq!(action_rate(&c, 0, 0), Some(0.005));
        assert_eq!(action_rate(&c, 1, 0), Some(0.0));
        assert_eq!(action_rate(&c, 2, 0), None);
        assert_eq!(click_through_rate(&c, 0), Some(0.01));
        let cols = rate_columns(&c, &c.rate_kinds(), 2000);
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0].len(), 2);
        assert_eq!(c.rate_name(RateKind::Ctr), "ctr");
        assert_eq!(c.rate_name(RateKind::Action(1)), "like_rate");
    }

    #[test]
    fn parse_errors() {
        assert!(read_aggregate_counts("item,x\n".as_bytes()).is_err());
        let neg = "item,category_l1,category_l2,category_l3,pageviews,linkviews,clicks,s_actions\na,,,,-1,0,0,0\n";
        assert!(matches!(read_aggregate_counts(neg.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let badcol = "item,category_l1,category_l2,category_l3,pageviews,linkviews,clicks,shares\n";
        assert!(read_aggregate_counts(badcol.as_bytes()).is_err());
    }

    #[test]
    fn correlation_examples() {
        let x: Vec<Option<f64>> = [1.0, 2.0, 4.0, 7.0].iter().map(|&v| Some(v)).collect();
        let y2: Vec<Option<f64>> = x.iter().map(|v| v.map(|v| 2.0 * v)).collect();
        let neg: Vec<Option<f64>> = x.iter().map(|v| v.map(|v| -v)).collect();
        let flat = vec![Some(3.0); 4];
        let m = correlation_matrix(&[x, y2, neg, flat]);
        assert_relative_eq!(m.values[0][1].unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.values[0][2].unwrap(), -1.0, epsilon = 1e-12);
        assert_eq!(m.values[0][3], None);
        assert_eq!(m.values[3][3], None);
        assert_eq!(m.values[1][1], Some(1.0));
        assert_eq!(m.pairs[0][2], 4);
    }

    #[test]
    fn correlation_matches_textbook_formula() {
        let a = [0.12, 0.5, 0.33, 0.91, 0.07, 0.45, 0.62, 0.28, 0.8, 0.19];
        let b = [1.3, 2.1, 1.9, 3.7, 0.4, 2.2, 3.0, 1.1, 2.9, 1.0];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 9.0;
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / 9.0).sqrt();
        let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / 9.0).sqrt();
        let want = cov / (sa * sb);
        let wrap = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        let m = correlation_matrix(&[wrap(&a), wrap(&b)]);
        assert!((m.values[0][1].unwrap() - want).abs() < 1e-12);

        // pairwise-complete: a missing value drops the item from that pair only
        let mut holes = wrap(&b);
        holes[3] = None;
        let m = correlation_matrix(&[wrap(&a), holes]);
        assert_eq!(m.pairs[0][1], 9);
    }

    #[test]
    fn log_ratio_examples() {
        let same = log_ratio_profile(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap();
        assert!(same.iter().all(|r| r.value().unwrap().abs() < 1e-15));
        // shares 2/4, 1/4, 1/4 against 1/4, 1/4, 2/4
        let p = log_ratio_profile(&[2.0, 1.0, 1.0], &[1.0, 1.0, 2.0]).unwrap();
        assert_relative_eq!(p[0].value().unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(p[1].value().unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(p[2].value().unwrap(), -(2f64.ln()), epsilon = 1e-12);
        let f = log_ratio_profile(&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(f[0], LogRatio::NoActions);
        assert_eq!(f[1], LogRatio::NoPageviews);
        assert!(log_ratio_profile(&[0.0], &[1.0]).is_err());
        assert!(log_ratio_profile(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn category_aggregation() {
        let c = read_aggregate_counts(FIXTURE.as_bytes()).unwrap();
        let t = category_totals(&c, 0, 0);
        assert_eq!(t["news"], (17.0, 6000.0));
        assert_eq!(t["sports"], (0.0, 0.0));
        let t1 = category_totals(&c, 1, 0);
        assert_eq!(t1["news/world"], (17.0, 3000.0));
        assert!(!t1.contains_key("sports"));
    }

    #[test]
    fn variation_examples() {
        assert_eq!(coefficient_of_variation(&[0.3, 0.3, 0.3]).unwrap(), 0.0);
        assert_relative_eq!(coefficient_of_variation(&[0.0, 0.2]).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        assert!(coefficient_of_variation(&[0.0, 0.0]).is_err());
        assert!(coefficient_of_variation(&[0.1]).is_err());
        assert!(is_high_variation(0.21));
        assert!(!is_high_variation(0.2));

        let c = read_aggregate_counts(FIXTURE.as_bytes()).unwrap();
        let v = variation_by_category(&c, 0, RateKind::Action(0), 0);
        let news = v.iter().find(|r| r.category == "news").unwrap();
        assert_eq!(news.items, 3);
        let want = coefficient_of_variation(&[0.005, 0.0, 0.006]).unwrap();
        assert_relative_eq!(news.cv.unwrap(), want, epsilon = 1e-12);
        assert!(news.high_variation());
        let sports = v.iter().find(|r| r.category == "sports").unwrap();
        assert_eq!((sports.items, sports.cv), (0, None));
    }

    #[test]
    fn writers() {
        let m = correlation_matrix(&[vec![Some(1.0), Some(2.0)], vec![Some(2.0), Some(1.0)]]);
        let mut out = Vec::new();
        write_correlation_csv(&mut out, &["a".into(), "b".into()], &m).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), ",a,b\na,1,-1\nb,-1,1\n");
        let mut out = Vec::new();
        write_log_ratio_csv(&mut out, &["x".into(), "y".into()], &[LogRatio::Defined(0.5), LogRatio::NoActions]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "category,log_ratio,flag\nx,0.5,\ny,NA,no_actions\n");
    }

    proptest! {
        #[test]
        fn correlation_matrix_shape(cols in prop::collection::vec(prop::collection::vec(prop::option::weighted(0.85, -5.0f64..5.0), 12), 1..5)) {
            let m = correlation_matrix(&cols);
            for a in 0..cols.len() {
                prop_assert!(m.values[a][a].is_none() || m.values[a][a] == Some(1.0));
                for b in 0..cols.len() {
                    prop_assert_eq!(m.values[a][b], m.values[b][a]);
                    if let Some(r) = m.values[a][b] {
                        prop_assert!((-1.0..=1.0).contains(&r));
                    }
                }
            }
        }

        #[test]
        fn self_log_ratio_is_zero(v in prop::collection::vec(0.001f64..1e6, 1..10)) {
            for r in log_ratio_profile(&v, &v).unwrap() {
                prop_assert!(r.value().unwrap().abs() < 1e-12);
            }
        }

        #[test]
        fn cv_is_scale_invariant(v in prop::collection::vec(0.0f64..1.0, 2..20), c in 1e-3f64..1e3) {
            prop_assume!(v.iter().sum::<f64>() > 1e-6);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let a = coefficient_of_variation(&v).unwrap();
            let b = coefficient_of_variation(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }
}
