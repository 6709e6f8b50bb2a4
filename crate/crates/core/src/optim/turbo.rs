//! Single-trust-region Bayesian optimization.
//!
//! The search lives in a symmetric box `[-b, b]^k`, normalized internally
//! to the unit cube. A Latin hypercube seeds the surrogate; afterwards each
//! batch fits an ARD squared-exponential Gaussian process to all observed
//! points (standardized values, hyperparameters by a short marginal-
//! likelihood ascent), samples candidates uniformly inside a trust region
//! centered on the incumbent, and picks a batch by Thompson sampling from
//! the joint posterior.
//!
//! The trust region has base length `L` in unit-cube coordinates with
//! per-dimension widths `L * l_d / geomean(l)`, so the box stretches along
//! directions the kernel considers flat. `L` doubles after `SUCCESS_TOL`
//! consecutive improving batches (capped at `L_MAX`) and halves after
//! `FAIL_TOL` consecutive non-improving ones; the run stops when `L` falls
//! below `L_MIN`, when the evaluation budget is spent, or when the target
//! value is reached.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{evaluate_batch, Objective, OptRun, Termination, TraceEntry};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

pub const L_INIT: f64 = 0.8;
pub const L_MIN: f64 = 0.0078125; // 0.5^7
pub const L_MAX: f64 = 1.6;
pub const SUCCESS_TOL: usize = 3;
pub const FAIL_TOL: usize = 5;

/// Observation noise on standardized values; also the first rung of the
/// jitter ladder used when a Cholesky factorization fails.
const NOISE_VARIANCE: f64 = 1e-6;
const JITTER_MAX: f64 = 1e-4;
/// Hyperparameter refits stop once the training set outgrows this.
const REFIT_LIMIT: usize = 500;

#[derive(Debug, Clone)]
pub struct TurboConfig {
    pub n_init: usize,
    pub batch: usize,
    /// Half width of the search box `[-bound, bound]^k`.
    pub bound: f64,
    pub max_evaluations: usize,
    pub target_value: Option<f64>,
    pub seed: u64,
}

impl TurboConfig {
    pub fn new(seed: u64) -> Self {
        TurboConfig {
            n_init: 256,
            batch: 10,
            bound: 2.0,
            max_evaluations: 500,
            target_value: None,
            seed,
        }
    }
}

pub fn minimize(f: Objective, dim: usize, config: &TurboConfig) -> Result<OptRun> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    if config.batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    if config.n_init < 2 {
        return Err(Error::InvalidArgument(format!(
            "initialization needs at least 2 points, got {}",
            config.n_init
        )));
    }
    if config.max_evaluations <= config.n_init {
        return Err(Error::InvalidArgument(format!(
            "budget {} must exceed the {} initialization points",
            config.max_evaluations, config.n_init
        )));
    }
    if !(config.bound.is_finite() && config.bound > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "search bound must be positive and finite, got {}",
            config.bound
        )));
    }

    let mut rng = RandomSource::new(config.seed);
    let b = config.bound;
    let to_search = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| -b + 2.0 * b * v).collect() };

    // Latin hypercube over the unit cube: one stratum per point and
    // dimension, shuffled independently per dimension.
    let n0 = config.n_init;
    let mut unit_points = vec![vec![0.0f64; dim]; n0];
    for d in 0..dim {
        let perm = rng.permutation(n0);
        for (i, point) in unit_points.iter_mut().enumerate() {
            point[d] = (perm[i] as f64 + rng.next_uniform()) / n0 as f64;
        }
    }
    let search_points: Vec<Vec<f64>> = unit_points.iter().map(|x| to_search(x)).collect();
    let mut values = evaluate_batch(f, &search_points, 0)?;
    let mut evaluations = n0;

    let mut xs = unit_points;
    let mut best_idx = argmin(&values);
    let mut best_value = values[best_idx];
    let mut best_point = search_points[best_idx].clone();

    let mut trace = vec![TraceEntry {
        generation: 1,
        evaluations,
        best_value,
    }];
    let mut termination = Termination::EvaluationBudget;
    if let Some(target) = config.target_value {
        if best_value <= target {
            return Ok(OptRun {
                best_point,
                best_value,
                evaluations,
                trace,
                termination: Termination::TargetReached,
            });
        }
    }

    let mut length = L_INIT;
    let mut successes = 0usize;
    let mut failures = 0usize;
    let mut hyper: Option<GpHyper> = None;
    let n_cand = (100 * dim).min(1000).max(config.batch);
    let mut generation = 1usize;

    while evaluations < config.max_evaluations {
        generation += 1;
        let take = config.batch.min(config.max_evaluations - evaluations);

        // Surrogate fit on everything observed so far.
        let warm = hyper.take();
        let iters = if xs.len() > REFIT_LIMIT && warm.is_some() {
            0
        } else if warm.is_some() {
            10
        } else {
            30
        };
        let model = GpModel::fit(&xs, &values, warm, iters)?;
        hyper = Some(model.hyper.clone());

        // Trust region around the incumbent, stretched by lengthscales.
        let incumbent = &xs[best_idx];
        let ls: Vec<f64> = model.hyper.log_ls.iter().map(|v| v.exp()).collect();
        let geomean = (ls.iter().map(|v| v.ln()).sum::<f64>() / dim as f64).exp();
        let mut lo = vec![0.0f64; dim];
        let mut hi = vec![0.0f64; dim];
        for d in 0..dim {
            let width = length * ls[d] / geomean;
            lo[d] = (incumbent[d] - width / 2.0).max(0.0);
            hi[d] = (incumbent[d] + width / 2.0).min(1.0);
        }
        // Candidates cover the whole region but cycle through concentration
        // scales around the incumbent: a quarter spread uniformly, the rest
        // crowd progressively tighter. The batch can then resolve structure
        // much finer than the region width while still exploring all of it.
        let mut candidates = vec![vec![0.0f64; dim]; n_cand];
        for (c, cand) in candidates.iter_mut().enumerate() {
            let exponent = [1.0, 2.0, 4.0, 8.0][c % 4];
            for d in 0..dim {
                let s = 2.0 * rng.next_uniform() - 1.0;
                let pull = s.abs().powf(exponent);
                cand[d] = if s >= 0.0 {
                    incumbent[d] + pull * (hi[d] - incumbent[d])
                } else {
                    incumbent[d] - pull * (incumbent[d] - lo[d])
                };
            }
        }

        // Thompson sampling from the joint posterior over the candidates.
        let (mean, cov_chol) = model.joint_posterior(&candidates)?;
        let mut chosen: Vec<usize> = Vec::with_capacity(take);
        for _ in 0..take {
            let xi = DVector::from_fn(n_cand, |_, _| rng.next_gaussian());
            let draw = &mean + cov_chol.l() * xi;
            let mut order: Vec<usize> = (0..n_cand).collect();
            order.sort_by(|&a, &i| {
                draw[a]
                    .partial_cmp(&draw[i])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&i))
            });
            let pick = order
                .into_iter()
                .find(|i| !chosen.contains(i))
                .expect("more candidates than batch slots");
            chosen.push(pick);
        }

        let batch_unit: Vec<Vec<f64>> = chosen.iter().map(|&i| candidates[i].clone()).collect();
        let batch_search: Vec<Vec<f64>> = batch_unit.iter().map(|x| to_search(x)).collect();
        let batch_values = evaluate_batch(f, &batch_search, evaluations)?;
        evaluations += take;

        // A batch counts as improving only when it moves the incumbent by
        // a relative margin; hairline improvements would otherwise keep the
        // region wide forever.
        let batch_best = argmin(&batch_values);
        let improved =
            batch_values[batch_best] < best_value - 1e-3 * best_value.abs();
        for (x, (z, v)) in batch_unit
            .into_iter()
            .zip(batch_search.into_iter().zip(&batch_values))
        {
            xs.push(x);
            values.push(*v);
            if *v < best_value {
                best_value = *v;
                best_idx = xs.len() - 1;
                best_point = z;
            }
        }
        trace.push(TraceEntry {
            generation,
            evaluations,
            best_value,
        });
        if let Some(target) = config.target_value {
            if best_value <= target {
                termination = Termination::TargetReached;
                break;
            }
        }

        if improved {
            successes += 1;
            failures = 0;
            if successes == SUCCESS_TOL {
                length = (length * 2.0).min(L_MAX);
                successes = 0;
            }
        } else {
            failures += 1;
            successes = 0;
            if failures == FAIL_TOL {
                length /= 2.0;
                failures = 0;
                if length < L_MIN {
                    termination = Termination::RegionCollapsed;
                    break;
                }
            }
        }
    }

    Ok(OptRun {
        best_point,
        best_value,
        evaluations,
        trace,
        termination,
    })
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct GpHyper {
    log_ls: Vec<f64>,
    log_sf: f64,
}

const LOG_LS_RANGE: (f64, f64) = (-5.298317366548036, 2.302585092994046); // ln 0.005 .. ln 10
const LOG_SF_RANGE: (f64, f64) = (-3.0, 3.0);

/// ARD squared-exponential Gaussian process on standardized observations.
struct GpModel {
    hyper: GpHyper,
    x: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_std: f64,
}

impl GpModel {
    /// Fits hyperparameters by `iters` Adam ascent steps on the marginal
    /// likelihood, then factorizes the final kernel matrix.
    fn fit(
        xs: &[Vec<f64>],
        ys: &[f64],
        warm: Option<GpHyper>,
        iters: usize,
    ) -> Result<GpModel> {
        let n = xs.len();
        let dim = xs[0].len();
        let x = DMatrix::from_fn(n, dim, |i, d| xs[i][d]);
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let variance = ys.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_std = if variance.sqrt() > 1e-12 { variance.sqrt() } else { 1.0 };
        let y = DVector::from_fn(n, |i, _| (ys[i] - y_mean) / y_std);

        let mut hyper = warm.unwrap_or(GpHyper {
            log_ls: vec![0.5f64.ln(); dim],
            log_sf: 0.0,
        });
        if hyper.log_ls.len() != dim {
            hyper = GpHyper {
                log_ls: vec![0.5f64.ln(); dim],
                log_sf: 0.0,
            };
        }

        let mut m = vec![0.0f64; dim + 1];
        let mut v = vec![0.0f64; dim + 1];
        for t in 1..=iters {
            let kernel = se_kernel(&x, &x, &hyper, true);
            let chol = jittered_cholesky(kernel)?;
            let alpha = chol.solve(&y);
            let k_inv = chol.inverse();
            let k_se = se_kernel(&x, &x, &hyper, false);

            // dL/d theta = 0.5 tr((alpha alpha^T - K^-1) dK/d theta),
            // accumulated elementwise without materializing dK.
            let mut grad = vec![0.0f64; dim + 1];
            let ls_sq: Vec<f64> = hyper.log_ls.iter().map(|l| (2.0 * l).exp()).collect();
            for i in 0..n {
                for j in 0..n {
                    let w = (alpha[i] * alpha[j] - k_inv[(i, j)]) * k_se[(i, j)];
                    for d in 0..dim {
                        let diff = x[(i, d)] - x[(j, d)];
                        grad[d] += 0.5 * w * diff * diff / ls_sq[d];
                    }
                    grad[dim] += w; // d log_sf contributes 2 K_se, halved
                }
            }

            for (j, g) in grad.iter().enumerate() {
                m[j] = 0.9 * m[j] + 0.1 * g;
                v[j] = 0.999 * v[j] + 0.001 * g * g;
                let m_hat = m[j] / (1.0 - 0.9f64.powi(t as i32));
                let v_hat = v[j] / (1.0 - 0.999f64.powi(t as i32));
                let step = 0.05 * m_hat / (v_hat.sqrt() + 1e-8);
                if j < dim {
                    hyper.log_ls[j] = (hyper.log_ls[j] + step).clamp(LOG_LS_RANGE.0, LOG_LS_RANGE.1);
                } else {
                    hyper.log_sf = (hyper.log_sf + step).clamp(LOG_SF_RANGE.0, LOG_SF_RANGE.1);
                }
            }
        }

        let kernel = se_kernel(&x, &x, &hyper, true);
        let chol = jittered_cholesky(kernel)?;
        let alpha = chol.solve(&y);
        Ok(GpModel {
            hyper,
            x,
            chol,
            alpha,
            y_mean,
            y_std,
        })
    }

    /// Posterior mean and covariance factor over a candidate set, mapped
    /// back to the objective's units.
    fn joint_posterior(&self, candidates: &[Vec<f64>]) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
        let c = candidates.len();
        let dim = self.x.ncols();
        let xc = DMatrix::from_fn(c, dim, |i, d| candidates[i][d]);
        let k_star = se_cross(&self.x, &xc, &self.hyper);
        let mean = (k_star.transpose() * &self.alpha) * self.y_std
            + DVector::from_element(c, self.y_mean);
        let k_inv_kstar = self.chol.solve(&k_star);
        let mut cov = se_kernel(&xc, &xc, &self.hyper, false) - k_star.transpose() * k_inv_kstar;
        cov = (&cov + cov.transpose()) * (0.5 * self.y_std * self.y_std);
        let chol = jittered_cholesky_from(cov, 1e-10)?;
        Ok((mean, chol))
    }

    #[cfg(test)]
    fn predict_mean(&self, point: &[f64]) -> f64 {
        let xc = DMatrix::from_fn(1, self.x.ncols(), |_, d| point[d]);
        let k_star = se_cross(&self.x, &xc, &self.hyper);
        (k_star.transpose() * &self.alpha)[0] * self.y_std + self.y_mean
    }
}

/// Kernel matrix between the rows of `a` and themselves; `with_noise` adds
/// the observation variance on the diagonal.
fn se_kernel(a: &DMatrix<f64>, same: &DMatrix<f64>, hyper: &GpHyper, with_noise: bool) -> DMatrix<f64> {
    let mut k = se_cross(a, same, hyper);
    if with_noise {
        for i in 0..k.nrows() {
            k[(i, i)] += NOISE_VARIANCE;
        }
    }
    k
}

/// Kernel matrix with rows of `a` against rows of `b`: `a.nrows() x b.nrows()`.
fn se_cross(a: &DMatrix<f64>, b: &DMatrix<f64>, hyper: &GpHyper) -> DMatrix<f64> {
    let sf2 = (2.0 * hyper.log_sf).exp();
    let inv_ls_sq: Vec<f64> = hyper.log_ls.iter().map(|l| (-2.0 * l).exp()).collect();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut dist = 0.0;
        for (d, inv) in inv_ls_sq.iter().enumerate() {
            let diff = a[(i, d)] - b[(j, d)];
            dist += diff * diff * inv;
        }
        sf2 * (-0.5 * dist).exp()
    })
}

fn jittered_cholesky(k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    jittered_cholesky_from(k, NOISE_VARIANCE)
}

/// Cholesky with an escalating diagonal jitter, an order of magnitude per
/// retry up to `JITTER_MAX`.
fn jittered_cholesky_from(k: DMatrix<f64>, first_jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok(c);
    }
    let mut jitter = first_jitter;
    while jitter <= JITTER_MAX {
        let mut attempt = k.clone();
        for i in 0..attempt.nrows() {
            attempt[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(attempt) {
            log::warn!("surrogate kernel needed {jitter:.0e} jitter to factorize");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::SurrogateSingular)
}
