//! Monte-Carlo EM.
//!
//! Each iteration runs a warm-started Gibbs chain under the current prior
//! parameters, averages sufficient statistics over the kept draws and
//! maximizes the expected complete-data log-likelihood in closed form. The
//! returned factors are posterior means from a final chain under the fitted
//! parameters.

mod data;
mod gibbs;
mod stats;

use std::io::Write;

pub use data::TrainingData;
pub use gibbs::{conditional_for_vector_factor, gibbs_sweep, Block, Conditional, GibbsSampler, SweepKey};
pub use stats::{
    complete_data_loglik, expected_loglik, m_step, BatchedStats, BiasStats, LocalStats, MStepDiagnostics, SideStats,
    SufficientStats,
};

use crate::data::{Dataset, Event};
use crate::error::{Error, Result};
use crate::model::{
    broadcast_priors, broadcast_state, init_factors, Dims, FactorState, FittedModel, ModelConfig, ModelKind, Presence,
    PriorParams,
};

/// Loop controls and numerical safeguards of the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub em_iters: usize,
    /// Kept draws per E-step.
    pub gibbs_samples: usize,
    /// Discarded draws at the start of each E-step chain.
    pub burn_in: usize,
    pub seed: u64,
    pub variance_floor: f64,
    pub ridge_lambda: f64,
    /// Keep var_y at its initial value.
    pub freeze_var_y: bool,
    /// Initial var_y; defaults to the variance of the training responses.
    pub init_var_y: Option<f64>,
    /// Number of batches for Monte-Carlo standard errors.
    pub batches: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            em_iters: 30,
            gibbs_samples: 100,
            burn_in: 20,
            seed: 0,
            variance_floor: 1e-8,
            ridge_lambda: 1e-6,
            freeze_var_y: false,
            init_var_y: None,
            batches: 10,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.em_iters == 0 {
            return Err(Error::Config("em_iters must be at least 1".into()));
        }
        if self.gibbs_samples <= self.burn_in {
            return Err(Error::Config(format!(
                "gibbs_samples ({}) must exceed burn_in ({})",
                self.gibbs_samples, self.burn_in
            )));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config(format!("variance_floor must be positive, got {}", self.variance_floor)));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::Config(format!("ridge_lambda must be non-negative, got {}", self.ridge_lambda)));
        }
        if let Some(v) = self.init_var_y {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("initial var_y must be positive, got {v}")));
            }
        }
        if self.batches == 0 {
            return Err(Error::Config("batches must be at least 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one EM iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Expected complete-data log-likelihood at the parameters the E-step
    /// sampled under.
    pub loglik_before: f64,
    /// The same expectation at the updated parameters.
    pub loglik: f64,
    /// Batch-means standard error of `loglik`.
    pub loglik_se: f64,
    pub priors: PriorParams,
    pub max_condition: f64,
    pub regularized: usize,
}

impl IterationTrace {
    /// Monte-Carlo estimate of the improvement made by the M-step.
    pub fn gain(&self) -> f64 {
        self.loglik - self.loglik_before
    }
}

/// Writes the trace as CSV, one row per iteration.
pub fn write_trace<W: Write>(mut w: W, trace: &[IterationTrace]) -> Result<()> {
    let io = |e| Error::io("trace", e);
    let Some(first) = trace.first() else {
        return Ok(());
    };
    let k = first.priors.num_facets;
    let mut header = vec![
        "iteration".to_string(),
        "loglik_before".into(),
        "loglik".into(),
        "loglik_se".into(),
        "var_y".into(),
        "var_u0".into(),
        "var_v0".into(),
    ];
    for name in ["var_alpha", "var_beta", "var_u", "var_v"] {
        header.extend((0..k).map(|f| format!("{name}_{f}")));
    }
    header.push("max_condition".into());
    header.push("regularized".into());
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for t in trace {
        let p = &t.priors;
        let mut row = vec![
            t.iteration.to_string(),
            t.loglik_before.to_string(),
            t.loglik.to_string(),
            t.loglik_se.to_string(),
            p.var_obs.to_string(),
            p.var_user_global.to_string(),
            p.var_item_global.to_string(),
        ];
        for v in [&p.var_user_facet_bias, &p.var_item_facet_bias, &p.var_user_local, &p.var_item_local] {
            row.extend(v.iter().map(f64::to_string));
        }
        row.push(t.max_condition.to_string());
        row.push(t.regularized.to_string());
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: FittedModel,
    pub trace: Vec<IterationTrace>,
    pub warnings: Vec<String>,
}

/// Fits a factor model to the training events (real responses under the
/// Gaussian observation model).
pub fn fit(ds: &Dataset, config: &ModelConfig, opts: &TrainOptions) -> Result<FitOutput> {
    config.validate()?;
    opts.validate()?;
    ds.validate()?;
    if config.kind == ModelKind::Cmf {
        return fit_collapsed(ds, config, opts);
    }
    fit_direct(ds, TrainingData::new(ds)?, config, opts)
}

fn fit_direct(ds: &Dataset, data: TrainingData, config: &ModelConfig, opts: &TrainOptions) -> Result<FitOutput> {
    let mut priors = PriorParams::initial(ds.num_facets, ds.user_feature_dim, ds.item_feature_dim, config.local_dim);
    priors.var_obs = opts
        .init_var_y
        .unwrap_or_else(|| data.response_variance())
        .max(opts.variance_floor);
    let dims = Dims {
        num_users: ds.num_users,
        num_items: ds.num_items,
        num_facets: ds.num_facets,
        global_dim: config.global_dim,
        local_dim: config.local_dim,
    };
    let mut state = init_factors(config, &priors, dims, &ds.user_features, &ds.item_features);
    let sampler = GibbsSampler::new(&data, opts.variance_floor);
    let mut trace = Vec::with_capacity(opts.em_iters);
    let mut warnings = Vec::new();

    for t in 0..opts.em_iters {
        let (batched, regularized) = e_step(&sampler, &mut state, &priors, opts, t as u64)?;
        if regularized > 0 {
            warnings.push(format!("iteration {t}: {regularized} conditional(s) regularized"));
        }
        let total = batched.total()?;
        let (next, diag) = m_step(&total, &data, &priors, opts)?;
        if let Some(block) = next.first_non_finite_block() {
            return Err(Error::NonFinite {
                block: block.into(),
                iteration: t,
            });
        }
        let (before, _) = batched.expected_loglik(&priors, &data)?;
        let (after, se) = batched.expected_loglik(&next, &data)?;
        if !(before.is_finite() && after.is_finite()) {
            let block = state
                .first_non_finite_block()
                .or_else(|| next.first_non_finite_block())
                .unwrap_or("var_y");
            return Err(Error::NonFinite {
                block: block.into(),
                iteration: t,
            });
        }
        log::debug!("EM iteration {t}: loglik {before:.6} -> {after:.6} (se {se:.3e})");
        trace.push(IterationTrace {
            iteration: t,
            loglik_before: before,
            loglik: after,
            loglik_se: se,
            priors: next.clone(),
            max_condition: diag.max_condition,
            regularized,
        });
        priors = next;
    }

    let mut mean = posterior_mean(&sampler, state, &priors, opts, opts.em_iters as u64)?;
    fill_unsupported(&mut mean, &priors, &data, ds);
    Ok(FitOutput {
        model: FittedModel {
            config: *config,
            state: mean,
            priors,
            presence: data.presence().clone(),
        },
        trace,
        warnings,
    })
}

/// CMF: one facet-free fit, shared by every facet.
fn fit_collapsed(ds: &Dataset, config: &ModelConfig, opts: &TrainOptions) -> Result<FitOutput> {
    let k = ds.num_facets;
    let collapsed_events: Vec<Event> = ds.events.iter().map(|e| Event { facet: 0, ..*e }).collect();
    let mut collapsed = ds.with_events(collapsed_events);
    collapsed.num_facets = 1;
    let data = TrainingData::with_repeats(&collapsed)?;
    let inner = fit_direct(&collapsed, data, config, opts)?;
    let single = inner.model;
    let p = &single.presence;
    let (m, n) = (ds.num_users, ds.num_items);
    let presence = Presence {
        num_facets: k,
        user_facet: (0..m * k).map(|u| p.user[u / k]).collect(),
        item_facet: (0..n * k).map(|j| p.item[j / k]).collect(),
        user: p.user.clone(),
        item: p.item.clone(),
        facet: vec![p.facet[0]; k],
    };
    let broadcast = |pr: &PriorParams| broadcast_priors(pr, k);
    Ok(FitOutput {
        model: FittedModel {
            config: *config,
            state: broadcast_state(&single.state, k),
            priors: broadcast(&single.priors),
            presence,
        },
        trace: inner
            .trace
            .into_iter()
            .map(|t| IterationTrace {
                priors: broadcast(&t.priors),
                ..t
            })
            .collect(),
        warnings: inner.warnings,
    })
}

/// Runs one E-step chain from `state` (left at the last draw) and returns
/// batched statistics of the kept draws.
fn e_step(
    sampler: &GibbsSampler<'_>,
    state: &mut FactorState,
    priors: &PriorParams,
    opts: &TrainOptions,
    em_iter: u64,
) -> Result<(BatchedStats, usize)> {
    let data = sampler.data();
    let kept = opts.gibbs_samples;
    let nb = opts.batches.min(kept);
    let (fg, fl) = (state.dims.global_dim, state.dims.local_dim);
    let mut batches: Vec<SufficientStats> = (0..nb).map(|_| SufficientStats::zeros(data, fg, fl)).collect();
    let mut regularized = 0;
    for sweep in 0..opts.burn_in + kept {
        let key = SweepKey {
            seed: opts.seed,
            em_iter,
            sweep: sweep as u64,
        };
        regularized += sampler.sweep_blocks(state, priors, &Block::SCAN_ORDER, key)?;
        if let Some(block) = state.first_non_finite_block() {
            return Err(Error::NonFinite {
                block: block.into(),
                iteration: em_iter as usize,
            });
        }
        if sweep >= opts.burn_in {
            let s = sweep - opts.burn_in;
            batches[s * nb / kept].add_state(state, data);
        }
    }
    Ok((BatchedStats { batches }, regularized))
}

/// Average of the kept draws of a chain under fixed priors.
fn posterior_mean(
    sampler: &GibbsSampler<'_>,
    mut state: FactorState,
    priors: &PriorParams,
    opts: &TrainOptions,
    em_iter: u64,
) -> Result<FactorState> {
    let mut sum = FactorState::zeros(state.dims);
    for sweep in 0..opts.burn_in + opts.gibbs_samples {
        let key = SweepKey {
            seed: opts.seed,
            em_iter,
            sweep: sweep as u64,
        };
        sampler.sweep_blocks(&mut state, priors, &Block::SCAN_ORDER, key)?;
        if sweep >= opts.burn_in {
            for (acc, cur) in sum.blocks_mut().into_iter().zip(state.blocks_mut()) {
                for (a, c) in acc.iter_mut().zip(cur.iter()) {
                    *a += c;
                }
            }
        }
    }
    let a = 1.0 / opts.gibbs_samples as f64;
    for block in sum.blocks_mut() {
        block.iter_mut().for_each(|v| *v *= a);
    }
    if let Some(block) = sum.first_non_finite_block() {
        return Err(Error::NonFinite {
            block: block.into(),
            iteration: opts.em_iters,
        });
    }
    Ok(sum)
}

/// Posterior means of factors without training support are their prior
/// means; writing them in directly makes the stored state score exactly
/// like the fallback rule.
fn fill_unsupported(s: &mut FactorState, priors: &PriorParams, data: &TrainingData, ds: &Dataset) {
    let p = data.presence();
    let Dims {
        num_users: m,
        num_items: n,
        num_facets: kc,
        global_dim: fg,
        local_dim: fl,
    } = s.dims;
    for i in 0..m {
        if !p.has_user(i) {
            s.user_bias[i] = 0.0;
            s.user_global[i * fg..(i + 1) * fg].fill(0.0);
        }
        for k in 0..kc {
            if p.has_user_facet(i, k) {
                continue;
            }
            let x = &ds.user_features[i];
            s.user_facet_bias[i * kc + k] = priors.alpha_prior_mean(k, x, s.user_bias[i]);
            let o = (i * kc + k) * fl;
            s.user_local[o..o + fl].copy_from_slice(&priors.user_local_prior_mean(k, x));
        }
    }
    for j in 0..n {
        if !p.has_item(j) {
            s.item_bias[j] = 0.0;
            s.item_global[j * fg..(j + 1) * fg].fill(0.0);
        }
        for k in 0..kc {
            if p.has_item_facet(j, k) {
                continue;
            }
            let x = &ds.item_features[j];
            s.item_facet_bias[j * kc + k] = priors.beta_prior_mean(k, x, s.item_bias[j]);
            let o = (j * kc + k) * fl;
            s.item_local[o..o + fl].copy_from_slice(&priors.item_local_prior_mean(k, x));
        }
    }
    for k in 0..kc {
        if !p.has_facet(k) {
            s.facet_weight[k * fg..(k + 1) * fg].fill(0.0);
        }
    }
}
