//! Covariance matrix adaptation evolution strategy.
//!
//! Each generation samples a population from `N(m, s^2 C)`, ranks it by the
//! objective, recombines the better half with log-decreasing weights, and
//! updates the mean, two evolution paths, the covariance (rank-one plus
//! rank-mu terms) and the step size by cumulative step-size adaptation. The
//! strategy constants are the standard tutorial defaults; they depend only
//! on the dimension and population size.
//!
//! The covariance is eigendecomposed once per generation, both to sample
//! and to whiten the mean shift. Eigenvalues are floored at `1e-14` (with a
//! logged warning) so the matrix stays positive definite under roundoff.
//!
//! Box constraints use repair with a penalty: a sample outside the box is
//! evaluated at its projection onto the box, and the squared projection
//! distance (scaled by a fixed weight) is added to the value used for
//! ranking. The strategy state lives in the unconstrained space, so the
//! landscape inside the box is searched undistorted; reported best points
//! are always the repaired, in-box ones with their true objective value.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{
    evaluate_batch, rank_ascending, validate_bound, Objective, OptRun, Termination, TraceEntry,
};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

const EIGENVALUE_FLOOR: f64 = 1e-14;
/// Ranking penalty per unit of squared distance to the box.
const BOUNDARY_PENALTY_WEIGHT: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct CmaesConfig {
    pub population: usize,
    pub max_generations: usize,
    /// Initial global step size.
    pub initial_step: f64,
    /// Initial mean in the unconstrained search space; zeros when absent.
    pub initial_mean: Option<Vec<f64>>,
    /// When set, candidates outside `[-b, b]` are evaluated at their box
    /// projection and ranked with a quadratic penalty on the excess.
    pub bound: Option<f64>,
    /// Stop once the best value drops to or below this.
    pub target_value: Option<f64>,
    pub seed: u64,
}

impl CmaesConfig {
    pub fn new(seed: u64) -> Self {
        CmaesConfig {
            population: 50,
            max_generations: 300,
            initial_step: 0.5,
            initial_mean: None,
            bound: None,
            target_value: None,
            seed,
        }
    }
}

/// Projects onto the box and reports the squared projection distance.
fn repair(x: &[f64], bound: Option<f64>) -> (Vec<f64>, f64) {
    match bound {
        None => (x.to_vec(), 0.0),
        Some(b) => {
            let repaired: Vec<f64> = x.iter().map(|v| v.clamp(-b, b)).collect();
            let excess = x
                .iter()
                .zip(&repaired)
                .map(|(raw, rep)| (raw - rep) * (raw - rep))
                .sum();
            (repaired, excess)
        }
    }
}

/// Dimension- and population-derived strategy constants.
struct Constants {
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl Constants {
    fn derive(dim: usize, population: usize) -> Constants {
        let n = dim as f64;
        let mu = population / 2;
        let mut weights: Vec<f64> = (1..=mu)
            .map(|i| (((population + 1) as f64) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma =
            1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
        let c_mu = (1.0 - c_1).min(
            2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff),
        );
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Constants {
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Eigendecomposition with the positive-definiteness repair applied.
struct Decomposition {
    basis: DMatrix<f64>,
    /// Square roots of the (floored) eigenvalues.
    scales: DVector<f64>,
}

impl Decomposition {
    fn of(cov: &DMatrix<f64>) -> Decomposition {
        let eigen = SymmetricEigen::new(cov.clone());
        let mut values = eigen.eigenvalues;
        let mut repaired = false;
        for v in values.iter_mut() {
            if *v < EIGENVALUE_FLOOR {
                *v = EIGENVALUE_FLOOR;
                repaired = true;
            }
        }
        if repaired {
            log::warn!("covariance lost positive definiteness; eigenvalues floored at {EIGENVALUE_FLOOR}");
        }
        assert!(values.iter().all(|&v| v > 0.0));
        Decomposition {
            basis: eigen.eigenvectors,
            scales: values.map(|v| v.sqrt()),
        }
    }

    /// `B diag(scales) xi`: a sample with covariance `C`.
    fn color(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.basis * xi.component_mul(&self.scales)
    }

    /// `C^(-1/2) v = B diag(1/scales) B^T v`.
    fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        let projected = self.basis.transpose() * v;
        &self.basis * projected.component_div(&self.scales)
    }
}

pub fn minimize(f: Objective, dim: usize, config: &CmaesConfig) -> Result<OptRun> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    if config.population < 4 {
        return Err(Error::InvalidArgument(format!(
            "population must be at least 4, got {}",
            config.population
        )));
    }
    if config.max_generations == 0 {
        return Err(Error::InvalidArgument("max_generations must be at least 1".into()));
    }
    if !(config.initial_step.is_finite() && config.initial_step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initial step must be positive and finite, got {}",
            config.initial_step
        )));
    }
    validate_bound(config.bound)?;
    if let Some(m) = &config.initial_mean {
        if m.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "initial mean has length {}, dimension is {dim}",
                m.len()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial mean".into()));
        }
    }

    let lambda = config.population;
    let consts = Constants::derive(dim, lambda);
    let mu = lambda / 2;

    let mut rng = RandomSource::new(config.seed);
    let mut mean = match &config.initial_mean {
        Some(m) => DVector::from_vec(m.clone()),
        None => DVector::zeros(dim),
    };
    let mut sigma = config.initial_step;
    let mut cov = DMatrix::<f64>::identity(dim, dim);
    let mut p_sigma = DVector::<f64>::zeros(dim);
    let mut p_c = DVector::<f64>::zeros(dim);

    let mut best_value = f64::INFINITY;
    let mut best_point: Vec<f64> = Vec::new();
    let mut evaluations = 0usize;
    let mut trace = Vec::with_capacity(config.max_generations);
    let mut termination = Termination::GenerationLimit;

    for generation in 0..config.max_generations {
        let decomp = Decomposition::of(&cov);

        let mut displacements = Vec::with_capacity(lambda);
        let mut points = Vec::with_capacity(lambda);
        let mut excesses = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let xi = DVector::from_fn(dim, |_, _| rng.next_gaussian());
            let y = decomp.color(&xi);
            let x = &mean + &y * sigma;
            let (repaired, excess) = repair(x.as_slice(), config.bound);
            points.push(repaired);
            excesses.push(excess);
            displacements.push(y);
        }
        let values = evaluate_batch(f, &points, evaluations)?;
        evaluations += lambda;

        let ranked: Vec<f64> = values
            .iter()
            .zip(&excesses)
            .map(|(v, e)| v + BOUNDARY_PENALTY_WEIGHT * e)
            .collect();
        let order = rank_ascending(&ranked);
        for (idx, value) in values.iter().enumerate() {
            if *value < best_value {
                best_value = *value;
                best_point = points[idx].clone();
            }
        }
        trace.push(TraceEntry {
            generation: generation + 1,
            evaluations,
            best_value,
        });
        if let Some(target) = config.target_value {
            if best_value <= target {
                termination = Termination::TargetReached;
                break;
            }
        }

        // Recombine the top half of the displacements.
        let mut y_w = DVector::<f64>::zeros(dim);
        for (rank, &idx) in order.iter().take(mu).enumerate() {
            y_w += &displacements[idx] * consts.weights[rank];
        }
        let new_mean = &mean + &y_w * sigma;

        // Cumulative step-size adaptation on the whitened mean shift.
        let whitened = decomp.whiten(&y_w);
        let c_s = consts.c_sigma;
        p_sigma = &p_sigma * (1.0 - c_s)
            + whitened * (c_s * (2.0 - c_s) * consts.mu_eff).sqrt();
        let p_sigma_norm = p_sigma.norm();
        let decay = 1.0 - (1.0 - c_s).powi(2 * (generation as i32 + 1));
        let h_sigma = if p_sigma_norm / decay.sqrt()
            < (1.4 + 2.0 / (dim as f64 + 1.0)) * consts.chi_n
        {
            1.0
        } else {
            0.0
        };

        let c_c = consts.c_c;
        p_c = &p_c * (1.0 - c_c)
            + &y_w * (h_sigma * (c_c * (2.0 - c_c) * consts.mu_eff).sqrt());

        // Rank-one and rank-mu covariance update; the (1 - h_sigma) term
        // compensates the variance the stalled path failed to accumulate.
        let mut rank_mu = DMatrix::<f64>::zeros(dim, dim);
        for (rank, &idx) in order.iter().take(mu).enumerate() {
            let y = &displacements[idx];
            rank_mu += (y * y.transpose()) * consts.weights[rank];
        }
        let stall_leak = (1.0 - h_sigma) * c_c * (2.0 - c_c);
        cov = &cov * (1.0 - consts.c_1 - consts.c_mu)
            + (&p_c * p_c.transpose() + &cov * stall_leak) * consts.c_1
            + rank_mu * consts.c_mu;
        cov = (&cov + cov.transpose()) * 0.5;

        sigma *= ((c_s / consts.d_sigma) * (p_sigma_norm / consts.chi_n - 1.0)).exp();
        mean = new_mean;
    }

    Ok(OptRun {
        best_point,
        best_value,
        evaluations,
        trace,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(z: &[f64]) -> f64 {
        z.iter().map(|v| v * v).sum()
    }

    #[test]
    fn sphere_reaches_deep_convergence() {
        let mut config = CmaesConfig::new(42);
        config.max_generations = 200;
        let run = minimize(&sphere, 10, &config).unwrap();
        assert!(run.best_value <= 1e-10, "best {}", run.best_value);
        assert_eq!(run.evaluations, 200 * 50);
        assert_eq!(run.termination, Termination::GenerationLimit);
    }

    #[test]
    fn one_dimensional_quadratic_finds_the_minimum() {
        let f = |z: &[f64]| (z[0] - 1.0) * (z[0] - 1.0);
        let mut config = CmaesConfig::new(7);
        config.max_generations = 120;
        let run = minimize(&f, 1, &config).unwrap();
        assert!((run.best_point[0] - 1.0).abs() <= 1e-6, "point {}", run.best_point[0]);
    }

    #[test]
    fn covariance_adaptation_handles_bad_conditioning() {
        // Axis scales spread over three orders of magnitude.
        let f = |z: &[f64]| {
            z.iter()
                .enumerate()
                .map(|(i, v)| 1000f64.powf(i as f64 / 4.0) * v * v)
                .sum::<f64>()
        };
        let mut config = CmaesConfig::new(11);
        config.max_generations = 300;
        let run = minimize(&f, 5, &config).unwrap();
        assert!(run.best_value <= 1e-6, "best {}", run.best_value);
    }

    #[test]
    fn bounded_search_stays_in_the_box_and_finds_interior_minima() {
        let f = |z: &[f64]| z.iter().map(|v| (v - 1.5) * (v - 1.5)).sum::<f64>();
        let mut config = CmaesConfig::new(5);
        config.max_generations = 200;
        config.bound = Some(2.0);
        let run = minimize(&f, 4, &config).unwrap();
        assert!(run.best_point.iter().all(|v| v.abs() <= 2.0));
        assert!(run.best_value <= 1e-8, "best {}", run.best_value);
        for v in &run.best_point {
            assert!((v - 1.5).abs() <= 1e-4);
        }
    }

    #[test]
    fn exterior_minimum_lands_on_the_boundary() {
        let f = |z: &[f64]| z.iter().map(|v| (v - 3.0) * (v - 3.0)).sum::<f64>();
        let mut config = CmaesConfig::new(17);
        config.max_generations = 150;
        config.bound = Some(2.0);
        let run = minimize(&f, 3, &config).unwrap();
        for v in &run.best_point {
            assert!((v - 2.0).abs() <= 1e-12, "point {v}");
        }
        assert!((run.best_value - 3.0).abs() <= 1e-12, "best {}", run.best_value);
    }

    #[test]
    fn identical_seeds_reproduce_the_run_exactly() {
        let mut config = CmaesConfig::new(99);
        config.max_generations = 40;
        let a = minimize(&sphere, 6, &config).unwrap();
        let b = minimize(&sphere, 6, &config).unwrap();
        assert_eq!(a, b);
        let point_bits: Vec<u64> = a.best_point.iter().map(|v| v.to_bits()).collect();
        let again: Vec<u64> = b.best_point.iter().map(|v| v.to_bits()).collect();
        assert_eq!(point_bits, again);
    }

    #[test]
    fn trace_is_non_increasing_and_counts_evaluations() {
        let mut config = CmaesConfig::new(3);
        config.max_generations = 50;
        let run = minimize(&sphere, 8, &config).unwrap();
        assert_eq!(run.trace.len(), 50);
        for pair in run.trace.windows(2) {
            assert!(pair[1].best_value <= pair[0].best_value);
            assert_eq!(pair[1].evaluations, pair[0].evaluations + 50);
        }
        assert_eq!(run.trace[0].generation, 1);
    }

    #[test]
    fn target_value_stops_early() {
        let mut config = CmaesConfig::new(1);
        config.max_generations = 300;
        config.target_value = Some(1e-4);
        let run = minimize(&sphere, 5, &config).unwrap();
        assert_eq!(run.termination, Termination::TargetReached);
        assert!(run.best_value <= 1e-4);
        assert!(run.trace.len() < 300);
    }

    #[test]
    fn non_finite_objectives_abort_with_the_evaluation_index() {
        let f = |_: &[f64]| f64::NAN;
        let config = CmaesConfig::new(1);
        match minimize(&f, 3, &config) {
            Err(Error::NonFiniteObjective { index }) => assert_eq!(index, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let config = CmaesConfig::new(0);
        assert!(minimize(&sphere, 0, &config).is_err());
        let mut small = CmaesConfig::new(0);
        small.population = 3;
        assert!(minimize(&sphere, 2, &small).is_err());
        let mut bad_mean = CmaesConfig::new(0);
        bad_mean.initial_mean = Some(vec![0.0; 3]);
        assert!(minimize(&sphere, 2, &bad_mean).is_err());
        let mut bad_step = CmaesConfig::new(0);
        bad_step.initial_step = 0.0;
        assert!(minimize(&sphere, 2, &bad_step).is_err());
    }
}
