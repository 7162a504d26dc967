//! Per-facet L2-regularized logistic regression on the outer product of
//! user and item features.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureVector};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Regularization weights searched by cross-validation.
pub const LAMBDA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearOptions {
    pub folds: usize,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub max_newton_iters: usize,
    /// Stop once the gradient norm falls below `tolerance * max(1, |g0|)`.
    pub tolerance: f64,
}

impl Default for BilinearOptions {
    fn default() -> Self {
        BilinearOptions {
            folds: 5,
            grid: LAMBDA_GRID.to_vec(),
            seed: 0,
            max_newton_iters: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearModel {
    pub user_feature_dim: usize,
    pub item_feature_dim: usize,
    /// Per facet, row-major `user_feature_dim x item_feature_dim`.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// Chosen regularization weight per facet; `None` for intercept-only fits.
    pub lambdas: Vec<Option<f64>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl BilinearModel {
    pub fn num_facets(&self) -> usize {
        self.weights.len()
    }

    /// The same model with users and items exchanged.
    pub fn transposed(&self) -> Self {
        let (du, di) = (self.user_feature_dim, self.item_feature_dim);
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let mut t = vec![0.0; w.len()];
                for a in 0..du {
                    for b in 0..di {
                        t[b * du + a] = w[a * di + b];
                    }
                }
                t
            })
            .collect();
        BilinearModel {
            user_feature_dim: di,
            item_feature_dim: du,
            weights,
            ..self.clone()
        }
    }
}

/// `x_iᵀ W_k x_j + intercept_k`
pub fn score_bilinear(model: &BilinearModel, xi: &FeatureVector, xj: &FeatureVector, k: usize) -> Result<f64> {
    let w = model
        .weights
        .get(k)
        .ok_or_else(|| Error::Validation(format!("facet {k} out of range ({} facets)", model.num_facets())))?;
    if xi.min_dim() > model.user_feature_dim || xj.min_dim() > model.item_feature_dim {
        return Err(Error::Dimension(format!(
            "feature vectors need dims {}x{}, model has {}x{}",
            xi.min_dim(),
            xj.min_dim(),
            model.user_feature_dim,
            model.item_feature_dim
        )));
    }
    let di = model.item_feature_dim;
    let mut s = model.intercepts[k];
    for &(a, va) in xi.entries() {
        for &(b, vb) in xj.entries() {
            s += va * w[a * di + b] * vb;
        }
    }
    Ok(s)
}

struct Problem {
    rows: Vec<Vec<(usize, f64)>>,
    y: Vec<f64>,
    dim: usize,
}

struct Fit {
    w: Vec<f64>,
    b: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// -ln p(y | z) for y in {0, 1}.
fn log_loss(z: f64, y: f64) -> f64 {
    let m = if y > 0.5 { z } else { -z };
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn dot_row(row: &[(usize, f64)], w: &[f64]) -> f64 {
    row.iter().map(|&(c, v)| v * w[c]).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Intercept-only fit with a smoothed positive rate.
fn intercept_only(p: &Problem, idx: &[usize]) -> Fit {
    let pos = idx.iter().filter(|&&n| p.y[n] > 0.5).count() as f64;
    let rate = (pos + 0.5) / (idx.len() as f64 + 1.0);
    Fit {
        w: vec![0.0; p.dim],
        b: (rate / (1.0 - rate)).ln(),
    }
}

fn single_class(p: &Problem, idx: &[usize]) -> bool {
    idx.iter().all(|&n| p.y[n] > 0.5) || idx.iter().all(|&n| p.y[n] <= 0.5)
}

fn objective(p: &Problem, idx: &[usize], lambda: f64, w: &[f64], b: f64) -> f64 {
    let data: f64 = idx.iter().map(|&n| log_loss(dot_row(&p.rows[n], w) + b, p.y[n])).sum();
    data + 0.5 * lambda * w.iter().map(|x| x * x).sum::<f64>()
}

/// Truncated Newton with conjugate-gradient inner solves and backtracking.
fn fit_logistic(p: &Problem, idx: &[usize], lambda: f64, opts: &BilinearOptions) -> Result<Fit> {
    if idx.is_empty() || single_class(p, idx) {
        return Ok(intercept_only(p, idx));
    }
    let d = p.dim;
    let init = intercept_only(p, idx);
    let (mut w, mut b) = (init.w, init.b);
    let mut f = objective(p, idx, lambda, &w, b);
    let mut g0 = None;
    // tiny curvature on the unpenalized intercept keeps CG well posed
    let eps_b = 1e-10;
    for _ in 0..opts.max_newton_iters {
        let z: Vec<f64> = idx.iter().map(|&n| dot_row(&p.rows[n], &w) + b).collect();
        let probs: Vec<f64> = z.iter().map(|&z| sigmoid(z)).collect();
        let mut gw: Vec<f64> = w.iter().map(|x| lambda * x).collect();
        let mut gb = 0.0;
        for (pos, &n) in idx.iter().enumerate() {
            let r = probs[pos] - p.y[n];
            gb += r;
            for &(c, v) in &p.rows[n] {
                gw[c] += r * v;
            }
        }
        let gnorm = (norm(&gw).powi(2) + gb * gb).sqrt();
        let g0 = *g0.get_or_insert(gnorm);
        if gnorm <= opts.tolerance * g0.max(1.0) {
            break;
        }
        let dw_weights: Vec<f64> = probs.iter().map(|q| q * (1.0 - q)).collect();
        let hess = |vw: &[f64], vb: f64| -> (Vec<f64>, f64) {
            let mut hw: Vec<f64> = vw.iter().map(|x| lambda * x).collect();
            let mut hb = eps_b * vb;
            for (pos, &n) in idx.iter().enumerate() {
                let s = dw_weights[pos] * (dot_row(&p.rows[n], vw) + vb);
                hb += s;
                for &(c, v) in &p.rows[n] {
                    hw[c] += s * v;
                }
            }
            (hw, hb)
        };
        // CG on H s = -g
        let (mut sw, mut sb) = (vec![0.0; d], 0.0);
        let (mut rw, mut rb): (Vec<f64>, f64) = (gw.iter().map(|x| -x).collect(), -gb);
        let (mut pw, mut pb) = (rw.clone(), rb);
        let mut rr = norm(&rw).powi(2) + rb * rb;
        let cg_tol = (0.1 * gnorm).min(gnorm.sqrt() * gnorm).powi(2);
        for _ in 0..(2 * (d + 1)).max(50) {
            if rr <= cg_tol {
                break;
            }
            let (hw, hb) = hess(&pw, pb);
            let php = pw.iter().zip(&hw).map(|(a, b)| a * b).sum::<f64>() + pb * hb;
            if php <= 0.0 {
                break;
            }
            let alpha = rr / php;
            for c in 0..d {
                sw[c] += alpha * pw[c];
                rw[c] -= alpha * hw[c];
            }
            sb += alpha * pb;
            rb -= alpha * hb;
            let rr_new = norm(&rw).powi(2) + rb * rb;
            let beta = rr_new / rr;
            rr = rr_new;
            for c in 0..d {
                pw[c] = rw[c] + beta * pw[c];
            }
            pb = rb + beta * pb;
        }
        if norm(&sw) == 0.0 && sb == 0.0 {
            sw = gw.iter().map(|x| -x).collect();
            sb = -gb;
        }
        let slope = gw.iter().zip(&sw).map(|(a, b)| a * b).sum::<f64>() + gb * sb;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let nw: Vec<f64> = w.iter().zip(&sw).map(|(a, s)| a + step * s).collect();
            let nb = b + step * sb;
            let nf = objective(p, idx, lambda, &nw, nb);
            if nf <= f + 1e-4 * step * slope {
                w = nw;
                b = nb;
                f = nf;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !f.is_finite() || !b.is_finite() || w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("logistic regression diverged at lambda {lambda}")));
    }
    Ok(Fit { w, b })
}

fn mean_log_loss(p: &Problem, idx: &[usize], fit: &Fit) -> f64 {
    idx.iter()
        .map(|&n| log_loss(dot_row(&p.rows[n], &fit.w) + fit.b, p.y[n]))
        .sum::<f64>()
        / idx.len().max(1) as f64
}

fn outer_row(xi: &FeatureVector, xj: &FeatureVector, di: usize) -> Vec<(usize, f64)> {
    let mut row = Vec::with_capacity(xi.len() * xj.len());
    for &(a, va) in xi.entries() {
        for &(b, vb) in xj.entries() {
            row.push((a * di + b, va * vb));
        }
    }
    row
}

/// Held-out mean log-loss for each grid value, by seeded k-fold CV.
fn cv_losses(p: &Problem, folds: usize, grid: &[f64], seed: u64, facet: usize, opts: &BilinearOptions) -> Result<Vec<f64>> {
    let n = p.y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[tag::FOLDS, facet as u64]));
    let folds = folds.min(n);
    let mut fold_of = vec![0; n];
    for (pos, &e) in order.iter().enumerate() {
        fold_of[e] = pos % folds;
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|l| (0..folds).map(move |f| (l, f))).collect();
    let totals: Vec<f64> = jobs
        .par_iter()
        .map(|&(l, f)| {
            let train: Vec<usize> = (0..n).filter(|&e| fold_of[e] != f).collect();
            let held: Vec<usize> = (0..n).filter(|&e| fold_of[e] == f).collect();
            let fit = fit_logistic(p, &train, grid[l], opts)?;
            Ok(mean_log_loss(p, &held, &fit) * held.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; grid.len()];
    for (&(l, _), t) in jobs.iter().zip(totals) {
        out[l] += t;
    }
    Ok(out.into_iter().map(|t| t / n as f64).collect())
}

fn validate_opts(opts: &BilinearOptions) -> Result<()> {
    if opts.folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {}", opts.folds)));
    }
    if opts.grid.is_empty() || opts.grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::Config("lambda grid must be non-empty and positive".into()));
    }
    Ok(())
}

fn facet_problem(ds: &Dataset, k: usize) -> Problem {
    let di = ds.item_feature_dim;
    let (rows, y) = ds
        .events
        .iter()
        .filter(|e| e.facet == k)
        .map(|e| {
            let row = outer_row(&ds.user_features[e.user], &ds.item_features[e.item], di);
            (row, if e.is_positive() { 1.0 } else { 0.0 })
        })
        .unzip();
    Problem {
        rows,
        y,
        dim: ds.user_feature_dim * di,
    }
}

/// Fits one model per facet on `ds.events`, choosing the regularization
/// weight by cross-validated log-loss.
pub fn fit_bilinear(ds: &Dataset, opts: &BilinearOptions) -> Result<BilinearModel> {
    validate_opts(opts)?;
    ds.validate()?;
    let mut model = BilinearModel {
        user_feature_dim: ds.user_feature_dim,
        item_feature_dim: ds.item_feature_dim,
        weights: Vec::with_capacity(ds.num_facets),
        intercepts: Vec::with_capacity(ds.num_facets),
        lambdas: Vec::with_capacity(ds.num_facets),
        warnings: Vec::new(),
    };
    for k in 0..ds.num_facets {
        let p = facet_problem(ds, k);
        let all: Vec<usize> = (0..p.y.len()).collect();
        if all.is_empty() || single_class(&p, &all) {
            let msg = format!("facet {k}: {} events with a single label class, fitting intercept only", all.len());
            log::warn!("{msg}");
            model.warnings.push(msg);
            let fit = intercept_only(&p, &all);
            model.weights.push(fit.w);
            model.intercepts.push(fit.b);
            model.lambdas.push(None);
            continue;
        }
        let losses = cv_losses(&p, opts.folds, &opts.grid, opts.seed, k, opts)?;
        let best = (0..losses.len())
            .min_by(|&a, &b| losses[a].total_cmp(&losses[b]))
            .expect("grid is non-empty");
        let lambda = opts.grid[best];
        log::debug!("facet {k}: lambda {lambda} (cv log-loss {:.5})", losses[best]);
        let fit = fit_logistic(&p, &all, lambda, opts)?;
        model.weights.push(fit.w);
        model.intercepts.push(fit.b);
        model.lambdas.push(Some(lambda));
    }
    Ok(model)
}
