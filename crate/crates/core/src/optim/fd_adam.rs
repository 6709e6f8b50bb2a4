//! Adam on central-finite-difference gradients.
//!
//! The gradient-based baseline: each step estimates the gradient with a
//! central difference per coordinate (`2k` evaluations) plus one evaluation
//! at the current point for progress tracking, then applies a standard
//! bias-corrected Adam update. The method is deterministic by construction;
//! all randomness lives in the caller's choice of starting point.

use super::{evaluate_batch, squash, validate_bound, Objective, OptRun, Termination, TraceEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdAdamConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Central-difference half width.
    pub fd_step: f64,
    /// When set, candidates are evaluated at `b * tanh(u)` and the walk
    /// happens in the unconstrained preimage.
    pub bound: Option<f64>,
    pub target_value: Option<f64>,
}

impl Default for FdAdamConfig {
    fn default() -> Self {
        FdAdamConfig {
            steps: 500,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            fd_step: 1e-5,
            bound: None,
            target_value: None,
        }
    }
}

/// Minimizes `f` from `initial_point`, which lives in the unconstrained
/// preimage when a bound is configured.
pub fn minimize(f: Objective, initial_point: &[f64], config: &FdAdamConfig) -> Result<OptRun> {
    let dim = initial_point.len();
    if dim == 0 {
        return Err(Error::EmptyInput);
    }
    if initial_point.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial point".into()));
    }
    if config.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {}",
            config.learning_rate
        )));
    }
    for (name, beta) in [("beta1", config.beta1), ("beta2", config.beta2)] {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!(
                "{name} must lie in [0, 1), got {beta}"
            )));
        }
    }
    if !(config.fd_step.is_finite() && config.fd_step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {}",
            config.fd_step
        )));
    }
    if !(config.epsilon.is_finite() && config.epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {}",
            config.epsilon
        )));
    }
    validate_bound(config.bound)?;

    let h = config.fd_step;
    let mut u = initial_point.to_vec();
    let mut m = vec![0.0f64; dim];
    let mut v = vec![0.0f64; dim];

    let mut best_value = f64::INFINITY;
    let mut best_point: Vec<f64> = Vec::new();
    let mut evaluations = 0usize;
    let mut trace = Vec::with_capacity(config.steps);
    let mut termination = Termination::GenerationLimit;

    for step in 1..=config.steps {
        // Probe layout: the point itself, then +/- pairs per coordinate.
        let mut probes = Vec::with_capacity(2 * dim + 1);
        probes.push(squash(&u, config.bound));
        for j in 0..dim {
            let mut up = u.clone();
            up[j] += h;
            probes.push(squash(&up, config.bound));
            let mut down = u.clone();
            down[j] -= h;
            probes.push(squash(&down, config.bound));
        }
        let values = evaluate_batch(f, &probes, evaluations)?;
        evaluations += probes.len();

        if values[0] < best_value {
            best_value = values[0];
            best_point = probes[0].clone();
        }
        trace.push(TraceEntry {
            generation: step,
            evaluations,
            best_value,
        });
        if let Some(target) = config.target_value {
            if best_value <= target {
                termination = Termination::TargetReached;
                break;
            }
        }

        for j in 0..dim {
            let grad = (values[1 + 2 * j] - values[2 + 2 * j]) / (2.0 * h);
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * grad;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * grad * grad;
            let m_hat = m[j] / (1.0 - config.beta1.powi(step as i32));
            let v_hat = v[j] / (1.0 - config.beta2.powi(step as i32));
            u[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("optimizer iterate".into()));
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    #[test]
    fn quadratic_converges_to_the_target_point() {
        let mut rng = RandomSource::new(17);
        let target: Vec<f64> = (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let start: Vec<f64> = (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let goal = target.clone();
        let f = move |z: &[f64]| {
            z.iter()
                .zip(&goal)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let run = minimize(&f, &start, &FdAdamConfig::default()).unwrap();
        let dist: f64 = run
            .best_point
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 1e-4, "distance {dist}");
        assert_eq!(run.evaluations, 500 * 17);
    }

    #[test]
    fn zero_learning_rate_leaves_the_point_unchanged() {
        let f = |z: &[f64]| z.iter().map(|v| v * v).sum::<f64>();
        let start = vec![0.7, -0.3];
        let mut config = FdAdamConfig::default();
        config.learning_rate = 0.0;
        config.steps = 25;
        let run = minimize(&f, &start, &config).unwrap();
        assert_eq!(run.best_point, start);
        assert!(run.trace.iter().all(|t| t.best_value == run.best_value));
        assert_eq!(run.best_value, f(&start));
    }

    #[test]
    fn runs_are_deterministic_for_a_fixed_start() {
        let f = |z: &[f64]| (z[0] - 0.2).powi(2) + (z[1] + 0.4).powi(2) * 3.0;
        let start = vec![1.0, 1.0];
        let mut config = FdAdamConfig::default();
        config.steps = 120;
        let a = minimize(&f, &start, &config).unwrap();
        let b = minimize(&f, &start, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bounded_walks_stay_inside_the_box() {
        // Minimum outside the box; the squashed iterate must saturate near
        // the boundary without ever crossing it.
        let f = |z: &[f64]| (z[0] - 5.0) * (z[0] - 5.0);
        let mut config = FdAdamConfig::default();
        config.bound = Some(2.0);
        config.steps = 300;
        let run = minimize(&f, &[0.0], &config).unwrap();
        assert!(run.best_point[0] <= 2.0);
        assert!(run.best_point[0] > 1.9);
    }

    #[test]
    fn trace_is_non_increasing() {
        let f = |z: &[f64]| z[0].sin() + z[0] * z[0] * 0.1;
        let mut config = FdAdamConfig::default();
        config.steps = 100;
        let run = minimize(&f, &[2.0], &config).unwrap();
        for pair in run.trace.windows(2) {
            assert!(pair[1].best_value <= pair[0].best_value);
        }
    }

    #[test]
    fn target_value_stops_early() {
        let f = |z: &[f64]| z[0] * z[0];
        let mut config = FdAdamConfig::default();
        config.target_value = Some(1e-6);
        let run = minimize(&f, &[3.0], &config).unwrap();
        assert_eq!(run.termination, Termination::TargetReached);
        assert!(run.trace.len() < 500);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let f = |z: &[f64]| z[0] * z[0];
        assert!(minimize(&f, &[], &FdAdamConfig::default()).is_err());
        let mut bad = FdAdamConfig::default();
        bad.steps = 0;
        assert!(minimize(&f, &[1.0], &bad).is_err());
        let mut bad = FdAdamConfig::default();
        bad.beta2 = 1.0;
        assert!(minimize(&f, &[1.0], &bad).is_err());
        let mut bad = FdAdamConfig::default();
        bad.fd_step = -1e-5;
        assert!(minimize(&f, &[1.0], &bad).is_err());
        assert!(minimize(&f, &[f64::NAN], &FdAdamConfig::default()).is_err());
    }
}
