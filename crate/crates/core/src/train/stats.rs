//! Monte-Carlo sufficient statistics, the expected complete-data
//! log-likelihood and the closed-form M-step.
//!
//! Every term of the complete-data log-likelihood is a quadratic form in the
//! prior parameters whose coefficients are moments of the latent factors, so
//! averaging those moments over Gibbs draws is enough both to maximize the
//! expectation and to evaluate it at any parameter value.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::data::TrainingData;
use super::TrainOptions;
use crate::data::FeatureVector;
use crate::error::{Error, Result};
use crate::linalg::{condition_number, solve_spd};
use crate::model::{dot, FactorState, PriorParams};

/// Moments behind the (alpha_ik | x_i, alpha_i) regression of one facet.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasStats {
    /// sum alpha_ik^2
    pub sq: f64,
    /// sum x_i alpha_ik
    pub x_target: Vec<f64>,
    /// sum alpha_i alpha_ik
    pub bias_target: f64,
    /// sum x_i alpha_i
    pub x_bias: Vec<f64>,
    /// sum alpha_i^2
    pub bias_sq: f64,
}

/// Moments behind the (u_ik | x_i) regression of one facet.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStats {
    /// sum |u_ik|^2
    pub sq: f64,
    /// sum x_i u_ik', feature-major (`feature_dim` rows of `local_dim`).
    pub cross: Vec<f64>,
}

/// Moments for one side (users or items). Sums run over present factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SideStats {
    pub bias: Vec<BiasStats>,
    pub local: Vec<LocalStats>,
    /// sum |u_i|^2
    pub global_sq: f64,
    /// sum alpha_i^2 over present users
    pub bias_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub user: SideStats,
    pub item: SideStats,
    /// sum_k |w_k|^2 over all facets
    pub facet_weight_sq: f64,
    /// Residual sum of squares of the observations.
    pub rss: f64,
    /// Number of Gibbs draws summed in.
    pub samples: usize,
    pub global_dim: usize,
    pub local_dim: usize,
}

#[derive(Clone, Copy)]
enum Side {
    User,
    Item,
}

struct SideDesign<'a> {
    features: &'a [FeatureVector],
    feature_dim: usize,
    present_facet: &'a [bool],
    present: &'a [bool],
    gram: &'a [DMatrix<f64>],
    counts: &'a [usize],
    active: usize,
}

fn design(side: Side, data: &TrainingData) -> SideDesign<'_> {
    let p = &data.presence;
    let d = &data.design;
    match side {
        Side::User => SideDesign {
            features: &data.user_features,
            feature_dim: data.user_feature_dim,
            present_facet: &p.user_facet,
            present: &p.user,
            gram: &d.user_gram,
            counts: &d.user_count,
            active: d.active_users,
        },
        Side::Item => SideDesign {
            features: &data.item_features,
            feature_dim: data.item_feature_dim,
            present_facet: &p.item_facet,
            present: &p.item,
            gram: &d.item_gram,
            counts: &d.item_count,
            active: d.active_items,
        },
    }
}

struct SideFactors<'a> {
    facet_bias: &'a [f64],
    bias: &'a [f64],
    global: &'a [f64],
    local: &'a [f64],
}

fn factors(side: Side, s: &FactorState) -> SideFactors<'_> {
    match side {
        Side::User => SideFactors {
            facet_bias: &s.user_facet_bias,
            bias: &s.user_bias,
            global: &s.user_global,
            local: &s.user_local,
        },
        Side::Item => SideFactors {
            facet_bias: &s.item_facet_bias,
            bias: &s.item_bias,
            global: &s.item_global,
            local: &s.item_local,
        },
    }
}

struct SidePriors<'a> {
    coef: &'a [f64],
    weight: &'a [f64],
    local_coef: &'a [f64],
    var_bias: &'a [f64],
    var_local: &'a [f64],
    var_global: f64,
}

fn side_priors(side: Side, p: &PriorParams) -> SidePriors<'_> {
    match side {
        Side::User => SidePriors {
            coef: &p.user_bias_coef,
            weight: &p.user_bias_weight,
            local_coef: &p.user_local_coef,
            var_bias: &p.var_user_facet_bias,
            var_local: &p.var_user_local,
            var_global: p.var_user_global,
        },
        Side::Item => SidePriors {
            coef: &p.item_bias_coef,
            weight: &p.item_bias_weight,
            local_coef: &p.item_local_coef,
            var_bias: &p.var_item_facet_bias,
            var_local: &p.var_item_local,
            var_global: p.var_item_global,
        },
    }
}

impl SideStats {
    fn zeros(num_facets: usize, feature_dim: usize, local_dim: usize) -> Self {
        SideStats {
            bias: (0..num_facets)
                .map(|_| BiasStats {
                    sq: 0.0,
                    x_target: vec![0.0; feature_dim],
                    bias_target: 0.0,
                    x_bias: vec![0.0; feature_dim],
                    bias_sq: 0.0,
                })
                .collect(),
            local: (0..num_facets)
                .map(|_| LocalStats {
                    sq: 0.0,
                    cross: vec![0.0; feature_dim * local_dim],
                })
                .collect(),
            global_sq: 0.0,
            bias_sq: 0.0,
        }
    }

    fn accumulate(&mut self, v: &SideDesign<'_>, f: &SideFactors<'_>, global_dim: usize, local_dim: usize) {
        let kc = self.bias.len();
        for i in 0..v.present.len() {
            if !v.present[i] {
                continue;
            }
            let b = f.bias[i];
            self.bias_sq += b * b;
            let g = &f.global[i * global_dim..(i + 1) * global_dim];
            self.global_sq += dot(g, g);
            let x = v.features[i].entries();
            for k in 0..kc {
                let unit = i * kc + k;
                if !v.present_facet[unit] {
                    continue;
                }
                let a = f.facet_bias[unit];
                let bs = &mut self.bias[k];
                bs.sq += a * a;
                bs.bias_target += b * a;
                bs.bias_sq += b * b;
                for &(feat, val) in x {
                    bs.x_target[feat] += val * a;
                    bs.x_bias[feat] += val * b;
                }
                if local_dim > 0 {
                    let u = &f.local[unit * local_dim..(unit + 1) * local_dim];
                    let ls = &mut self.local[k];
                    ls.sq += dot(u, u);
                    for &(feat, val) in x {
                        for (c, ul) in ls.cross[feat * local_dim..(feat + 1) * local_dim].iter_mut().zip(u) {
                            *c += val * ul;
                        }
                    }
                }
            }
        }
    }

    fn add(&mut self, o: &SideStats) {
        for (s, t) in self.bias.iter_mut().zip(&o.bias) {
            s.sq += t.sq;
            s.bias_target += t.bias_target;
            s.bias_sq += t.bias_sq;
            add_vec(&mut s.x_target, &t.x_target);
            add_vec(&mut s.x_bias, &t.x_bias);
        }
        for (s, t) in self.local.iter_mut().zip(&o.local) {
            s.sq += t.sq;
            add_vec(&mut s.cross, &t.cross);
        }
        self.global_sq += o.global_sq;
        self.bias_sq += o.bias_sq;
    }

    fn scale(&mut self, a: f64) {
        for s in &mut self.bias {
            s.sq *= a;
            s.bias_target *= a;
            s.bias_sq *= a;
            s.x_target.iter_mut().for_each(|v| *v *= a);
            s.x_bias.iter_mut().for_each(|v| *v *= a);
        }
        for s in &mut self.local {
            s.sq *= a;
            s.cross.iter_mut().for_each(|v| *v *= a);
        }
        self.global_sq *= a;
        self.bias_sq *= a;
    }
}

fn add_vec(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}
/// Observation residual sum of squares, summed in fixed-size chunks so the
/// result does not depend on the thread count.
fn residual_sum_of_squares(s: &FactorState, data: &TrainingData) -> f64 {
    const CHUNK: usize = 4096;
    data.obs
        .par_chunks(CHUNK)
        .map(|c| {
            c.iter()
                .map(|o| (o.y - s.score_unchecked(o.user, o.item, o.facet)).powi(2))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

impl SufficientStats {
    pub fn zeros(data: &TrainingData, global_dim: usize, local_dim: usize) -> Self {
        SufficientStats {
            global_dim,
            local_dim,
            user: SideStats::zeros(data.num_facets, data.user_feature_dim, local_dim),
            item: SideStats::zeros(data.num_facets, data.item_feature_dim, local_dim),
            facet_weight_sq: 0.0,
            rss: 0.0,
            samples: 0,
        }
    }

    /// Statistics of a single state.
    pub fn from_state(s: &FactorState, data: &TrainingData) -> Self {
        let mut st = SufficientStats::zeros(data, s.dims.global_dim, s.dims.local_dim);
        st.add_state(s, data);
        st
    }

    /// Adds one Gibbs draw.
    pub fn add_state(&mut self, s: &FactorState, data: &TrainingData) {
        let (fg, fl) = (s.dims.global_dim, s.dims.local_dim);
        self.user.accumulate(&design(Side::User, data), &factors(Side::User, s), fg, fl);
        self.item.accumulate(&design(Side::Item, data), &factors(Side::Item, s), fg, fl);
        self.facet_weight_sq += dot(&s.facet_weight, &s.facet_weight);
        self.rss += residual_sum_of_squares(s, data);
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &SufficientStats) {
        self.user.add(&other.user);
        self.item.add(&other.item);
        self.facet_weight_sq += other.facet_weight_sq;
        self.rss += other.rss;
        self.samples += other.samples;
    }

    /// Monte-Carlo means (sums divided by the number of draws).
    pub fn mean(&self) -> Result<SufficientStats> {
        if self.samples == 0 {
            return Err(Error::Numerical("sufficient statistics without samples".into()));
        }
        let a = 1.0 / self.samples as f64;
        let mut m = self.clone();
        m.user.scale(a);
        m.item.scale(a);
        m.facet_weight_sq *= a;
        m.rss *= a;
        m.samples = 1;
        Ok(m)
    }
}

/// Statistics split into consecutive batches of draws, for batch-means
/// standard errors.
#[derive(Debug, Clone)]
pub struct BatchedStats {
    pub batches: Vec<SufficientStats>,
}

impl BatchedStats {
    pub fn total(&self) -> Result<SufficientStats> {
        let mut it = self.batches.iter();
        let mut t = it
            .next()
            .cloned()
            .ok_or_else(|| Error::Numerical("no batches".into()))?;
        for b in it {
            t.merge(b);
        }
        t.mean()
    }

    /// Estimate of the expected complete-data log-likelihood at `priors`
    /// with its batch-means standard error.
    pub fn expected_loglik(&self, priors: &PriorParams, data: &TrainingData) -> Result<(f64, f64)> {
        let mut vals = Vec::with_capacity(self.batches.len());
        let mut weights = Vec::with_capacity(self.batches.len());
        for b in self.batches.iter().filter(|b| b.samples > 0) {
            vals.push(expected_loglik(&b.mean()?, priors, data));
            weights.push(b.samples as f64);
        }
        let wsum: f64 = weights.iter().sum();
        if wsum == 0.0 {
            return Err(Error::Numerical("no samples".into()));
        }
        let mean = vals.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / wsum;
        let nb = vals.len();
        let se = if nb < 2 {
            0.0
        } else {
            let bm = vals.iter().sum::<f64>() / nb as f64;
            let var = vals.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / (nb - 1) as f64;
            (var / nb as f64).sqrt()
        };
        Ok((mean, se))
    }
}

/// `x' A x` for a dense symmetric `A` and sparse or dense `x`.
fn quad(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mut s = 0.0;
    for r in 0..x.len() {
        if x[r] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for c in 0..x.len() {
            row += a[(r, c)] * x[c];
        }
        s += x[r] * row;
    }
    s
}

/// E sum (alpha_ik - g'x_i - q alpha_i)^2.
fn bias_sse(st: &BiasStats, gram: &DMatrix<f64>, g: &[f64], q: f64) -> f64 {
    st.sq - 2.0 * (dot(g, &st.x_target) + q * st.bias_target)
        + quad(gram, g)
        + 2.0 * q * dot(g, &st.x_bias)
        + q * q * st.bias_sq
}

/// E sum |u_ik - B'x_i|^2 with B stored feature-major.
fn local_sse(st: &LocalStats, gram: &DMatrix<f64>, b: &[f64], fl: usize) -> f64 {
    let du = gram.nrows();
    let mut btxxb = 0.0;
    let mut col = vec![0.0; du];
    for l in 0..fl {
        for (a, c) in col.iter_mut().enumerate() {
            *c = b[a * fl + l];
        }
        btxxb += quad(gram, &col);
    }
    st.sq - 2.0 * dot(b, &st.cross) + btxxb
}

fn side_loglik(st: &SideStats, v: &SideDesign<'_>, p: &SidePriors<'_>, fg: usize, fl: usize) -> f64 {
    let du = v.feature_dim;
    let mut ll = -0.5 * st.bias_sq;
    for (k, bs) in st.bias.iter().enumerate() {
        let n = v.counts[k] as f64;
        let g = &p.coef[k * du..(k + 1) * du];
        let vb = p.var_bias[k];
        ll += -0.5 * n * vb.ln() - bias_sse(bs, &v.gram[k], g, p.weight[k]) / (2.0 * vb);
        if fl > 0 {
            let vl = p.var_local[k];
            let b = &p.local_coef[k * du * fl..(k + 1) * du * fl];
            ll += -0.5 * n * fl as f64 * vl.ln() - local_sse(&st.local[k], &v.gram[k], b, fl) / (2.0 * vl);
        }
    }
    if fg > 0 {
        ll += -0.5 * (v.active * fg) as f64 * p.var_global.ln() - st.global_sq / (2.0 * p.var_global);
    }
    ll
}

/// Expected complete-data log-likelihood (additive constants dropped) from
/// Monte-Carlo mean statistics.
pub fn expected_loglik(stats: &SufficientStats, priors: &PriorParams, data: &TrainingData) -> f64 {
    let (fg, fl) = (stats.global_dim, stats.local_dim);
    let uv = design(Side::User, data);
    let iv = design(Side::Item, data);
    let n = data.obs.len() as f64;
    side_loglik(&stats.user, &uv, &side_priors(Side::User, priors), fg, fl)
        + side_loglik(&stats.item, &iv, &side_priors(Side::Item, priors), fg, fl)
        - 0.5 * stats.facet_weight_sq
        - 0.5 * n * priors.var_obs.ln()
        - stats.rss / (2.0 * priors.var_obs)
}

/// Complete-data log-likelihood of one configuration of the factors.
pub fn complete_data_loglik(state: &FactorState, priors: &PriorParams, data: &TrainingData) -> f64 {
    expected_loglik(&SufficientStats::from_state(state, data), priors, data)
}

/// Largest condition number among the M-step designs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MStepDiagnostics {
    pub max_condition: f64,
}

/// Closed-form maximizer of the expected complete-data log-likelihood.
/// Facets without present factors keep their previous parameters.
pub fn m_step(
    stats: &SufficientStats,
    data: &TrainingData,
    previous: &PriorParams,
    opts: &TrainOptions,
) -> Result<(PriorParams, MStepDiagnostics)> {
    let floor = opts.variance_floor;
    let lambda = opts.ridge_lambda;
    let (fg, fl) = (stats.global_dim, stats.local_dim);
    let mut next = previous.clone();
    let mut diag = MStepDiagnostics::default();
    for side in [Side::User, Side::Item] {
        let v = design(side, data);
        let st = match side {
            Side::User => &stats.user,
            Side::Item => &stats.item,
        };
        let du = v.feature_dim;
        let (coef, weight, local_coef, var_bias, var_local, var_global) = match side {
            Side::User => (
                &mut next.user_bias_coef,
                &mut next.user_bias_weight,
                &mut next.user_local_coef,
                &mut next.var_user_facet_bias,
                &mut next.var_user_local,
                &mut next.var_user_global,
            ),
            Side::Item => (
                &mut next.item_bias_coef,
                &mut next.item_bias_weight,
                &mut next.item_local_coef,
                &mut next.var_item_facet_bias,
                &mut next.var_item_local,
                &mut next.var_item_global,
            ),
        };
        for k in 0..data.num_facets {
            let n = v.counts[k];
            if n == 0 {
                continue;
            }
            let bs = &st.bias[k];
            let xx = &v.gram[k];
            let mut gram = DMatrix::zeros(du + 1, du + 1);
            gram.view_mut((0, 0), (du, du)).copy_from(xx);
            for a in 0..du {
                gram[(a, du)] = bs.x_bias[a];
                gram[(du, a)] = bs.x_bias[a];
            }
            gram[(du, du)] = bs.bias_sq;
            let mut rhs = DMatrix::zeros(du + 1, 1);
            for a in 0..du {
                rhs[(a, 0)] = bs.x_target[a];
            }
            rhs[(du, 0)] = bs.bias_target;
            diag.max_condition = diag.max_condition.max(condition_number(&regularized(&gram, lambda)));
            let theta = solve_spd(&gram, &rhs, lambda)
                .ok_or_else(|| Error::Numerical(format!("bias regression of facet {k} is singular")))?;
            let g: Vec<f64> = (0..du).map(|a| theta[(a, 0)]).collect();
            let q = theta[(du, 0)];
            let sse = bias_sse(bs, xx, &g, q);
            coef[k * du..(k + 1) * du].copy_from_slice(&g);
            weight[k] = q;
            var_bias[k] = (sse / n as f64).max(floor);

            if fl > 0 {
                let ls = &st.local[k];
                let b = if du == 0 {
                    Vec::new()
                } else {
                    diag.max_condition = diag.max_condition.max(condition_number(&regularized(xx, lambda)));
                    let c = DMatrix::from_row_slice(du, fl, &ls.cross);
                    let sol = solve_spd(xx, &c, lambda)
                        .ok_or_else(|| Error::Numerical(format!("local regression of facet {k} is singular")))?;
                    let mut b = vec![0.0; du * fl];
                    for a in 0..du {
                        for l in 0..fl {
                            b[a * fl + l] = sol[(a, l)];
                        }
                    }
                    b
                };
                let sse = local_sse(ls, xx, &b, fl);
                local_coef[k * du * fl..(k + 1) * du * fl].copy_from_slice(&b);
                var_local[k] = (sse / (n * fl) as f64).max(floor);
            }
        }
        if fg > 0 && v.active > 0 {
            *var_global = (st.global_sq / (v.active * fg) as f64).max(floor);
        }
    }
    if !opts.freeze_var_y && !data.obs.is_empty() {
        next.var_obs = (stats.rss / data.obs.len() as f64).max(floor);
    }
    Ok((next, diag))
}

fn regularized(a: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += lambda;
    }
    m
}
