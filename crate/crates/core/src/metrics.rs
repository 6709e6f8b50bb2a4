//! Reconstruction quality measures and loss-landscape sampling.
//!
//! Pixel-space MSE and PSNR treat images on the fixed `[0, 1]` scale
//! (`MAX = 1`), so `psnr = 10 log10(1 / mse)`. Identical images would give
//! an infinite ratio; anything below `1e-12` MSE reports the sentinel
//! `120 dB` instead so downstream tables never contain infinities.
//!
//! Landscape sampling walks straight lines (and planes) in latent space:
//!
//! * one dimension: `z(alpha) = (1 - alpha) z1 + alpha z2`,
//! * two dimensions: the same interpolation plus `beta * eta_hat`, where
//!   `eta_hat` is the supplied direction rescaled to the length of
//!   `z2 - z1`.
//!
//! Both samplers share one interpolation routine, so the `beta = 0` row of
//! a plane is bit-identical to the line with the same grid. Grid values
//! that land within `1e-12` of the endpoints snap to exactly `0` and `1`,
//! which makes "the endpoint evaluates exactly at `z1`" a hard guarantee
//! instead of a floating-point accident.

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Default interpolation range: a quarter overshoot on both sides.
pub const DEFAULT_ALPHA_RANGE: (f64, f64) = (-0.25, 1.25);

/// PSNR reported for (near) exact reconstructions.
pub const PSNR_SENTINEL_DB: f64 = 120.0;
const PSNR_MSE_FLOOR: f64 = 1e-12;

/// Mean squared error between two equally shaped tensors.
pub fn mse_image(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::EmptyInput);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// Peak signal-to-noise ratio for a known MSE on the unit scale.
pub fn psnr_from_mse(mse: f64) -> Result<f64> {
    if !(mse.is_finite() && mse >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mse must be finite and non-negative, got {mse}"
        )));
    }
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// PSNR between two images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr_from_mse(mse_image(a, b)?)
}

/// MSE between the representations (classifier-head inputs) two images
/// induce in the same network.
pub fn mse_representation(net: &Network, a: &Tensor, b: &Tensor) -> Result<f64> {
    let ra = net.representation(a)?;
    let rb = net.representation(b)?;
    mse_image(&ra, &rb)
}

/// One sampled point of a landscape walk.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSample {
    pub alpha: f64,
    /// `None` for line walks, `Some` for plane walks.
    pub beta: Option<f64>,
    pub loss: f64,
    /// Optional secondary objective evaluated at the same point.
    pub aux: Option<f64>,
}

/// Shared interpolation: `(1 - alpha) z1 + alpha z2`, elementwise. At the
/// snapped endpoints the arithmetic degenerates to `1 * z + 0` and
/// reproduces the endpoint bits exactly.
fn interpolate(z1: &[f64], z2: &[f64], alpha: f64) -> Vec<f64> {
    z1.iter()
        .zip(z2)
        .map(|(&a, &b)| (1.0 - alpha) * a + alpha * b)
        .collect()
}

fn alpha_grid(n_points: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!(
            "landscape needs at least 2 points per axis, got {n_points}"
        )));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "invalid landscape range [{lo}, {hi}]"
        )));
    }
    let step = (hi - lo) / (n_points - 1) as f64;
    Ok((0..n_points)
        .map(|i| {
            let a = lo + i as f64 * step;
            // Snap onto the endpoints so they are sampled exactly when the
            // grid passes through them.
            if a.abs() < 1e-12 {
                0.0
            } else if (a - 1.0).abs() < 1e-12 {
                1.0
            } else {
                a
            }
        })
        .collect())
}

/// Samples an objective along the line through two latents.
pub fn landscape_1d(
    f: &dyn Fn(&[f64]) -> f64,
    aux: Option<&dyn Fn(&[f64]) -> f64>,
    z1: &[f64],
    z2: &[f64],
    n_points: usize,
    alpha_range: (f64, f64),
) -> Result<Vec<LandscapeSample>> {
    if z1.len() != z2.len() || z1.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "latent endpoints disagree in length: {} and {}",
            z1.len(),
            z2.len()
        )));
    }
    let alphas = alpha_grid(n_points, alpha_range)?;
    Ok(alphas
        .into_iter()
        .map(|alpha| {
            let z = interpolate(z1, z2, alpha);
            LandscapeSample {
                alpha,
                beta: None,
                loss: f(&z),
                aux: aux.map(|g| g(&z)),
            }
        })
        .collect())
}

/// Samples an objective on the plane spanned by `z2 - z1` and `eta`.
///
/// `eta` is rescaled so its length equals `|z2 - z1|`, putting both axes on
/// the same scale. Rows iterate `beta` in the outer loop and `alpha` in the
/// inner loop; the `beta = 0` row (when the grid contains it) is
/// bit-identical to [`landscape_1d`] over the same `alpha` grid.
#[allow(clippy::too_many_arguments)]
pub fn landscape_2d(
    f: &dyn Fn(&[f64]) -> f64,
    aux: Option<&dyn Fn(&[f64]) -> f64>,
    z1: &[f64],
    z2: &[f64],
    eta: &[f64],
    n_alpha: usize,
    n_beta: usize,
    alpha_range: (f64, f64),
    beta_range: (f64, f64),
) -> Result<Vec<LandscapeSample>> {
    if z1.len() != z2.len() || z1.len() != eta.len() || z1.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "latent endpoints and direction disagree in length: {}, {}, {}",
            z1.len(),
            z2.len(),
            eta.len()
        )));
    }
    let eta_norm = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if eta_norm == 0.0 {
        return Err(Error::InvalidArgument(
            "plane direction must be nonzero".into(),
        ));
    }
    let diff_norm = z1
        .iter()
        .zip(z2)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    let scale = diff_norm / eta_norm;
    let eta_hat: Vec<f64> = eta.iter().map(|v| v * scale).collect();

    let alphas = alpha_grid(n_alpha, alpha_range)?;
    let betas = alpha_grid(n_beta, beta_range)?;
    let mut out = Vec::with_capacity(n_alpha * n_beta);
    for &beta in &betas {
        for &alpha in &alphas {
            let mut z = interpolate(z1, z2, alpha);
            for (zj, ej) in z.iter_mut().zip(&eta_hat) {
                *zj += beta * ej;
            }
            out.push(LandscapeSample {
                alpha,
                beta: Some(beta),
                loss: f(&z),
                aux: aux.map(|g| g(&z)),
            });
        }
    }
    Ok(out)
}

/// Renders samples as CSV with 17 significant digits, enough for exact
/// `f64` round-trips. The header adapts to which fields are present; all
/// samples must agree.
pub fn landscape_csv(samples: &[LandscapeSample]) -> Result<String> {
    let first = samples.first().ok_or(Error::EmptyInput)?;
    let has_beta = first.beta.is_some();
    let has_aux = first.aux.is_some();
    if samples
        .iter()
        .any(|s| s.beta.is_some() != has_beta || s.aux.is_some() != has_aux)
    {
        return Err(Error::InvalidArgument(
            "landscape samples disagree on the fields they carry".into(),
        ));
    }
    let mut out = String::new();
    out.push_str("alpha");
    if has_beta {
        out.push_str(",beta");
    }
    out.push_str(",loss");
    if has_aux {
        out.push_str(",aux");
    }
    out.push('\n');
    for s in samples {
        out.push_str(&format!("{:.16e}", s.alpha));
        if let Some(b) = s.beta {
            out.push_str(&format!(",{b:.16e}"));
        }
        out.push_str(&format!(",{:.16e}", s.loss));
        if let Some(a) = s.aux {
            out.push_str(&format!(",{a:.16e}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerParams, LayerSpec};
    use crate::rng::RandomSource;

    fn random_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RandomSource::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), (0..n).map(|_| rng.next_uniform()).collect())
    }

    #[test]
    fn psnr_known_value_and_sentinel() {
        assert!((psnr_from_mse(0.01).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0).unwrap(), PSNR_SENTINEL_DB);
        assert_eq!(psnr_from_mse(1e-13).unwrap(), PSNR_SENTINEL_DB);
        let img = random_image(&[1, 4, 4], 1);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_SENTINEL_DB);
    }

    #[test]
    fn psnr_decreases_as_mse_grows() {
        let mut last = f64::INFINITY;
        for mse in [1e-6, 1e-4, 1e-2, 0.25, 1.0] {
            let p = psnr_from_mse(mse).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn mse_is_symmetric_and_shape_checked() {
        let a = random_image(&[1, 3, 3], 2);
        let b = random_image(&[1, 3, 3], 3);
        assert_eq!(mse_image(&a, &b).unwrap(), mse_image(&b, &a).unwrap());
        let c = random_image(&[1, 2, 2], 4);
        assert!(mse_image(&a, &c).is_err());
    }

    fn identity_feature_net(d: usize, classes: usize) -> Network {
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = 1.0;
        }
        let layers = vec![
            LayerSpec::Dense { input: d, output: d },
            LayerSpec::ReLU,
            LayerSpec::Dense { input: d, output: classes },
        ];
        let params = vec![
            Some(LayerParams {
                weight: Tensor::from_raw(vec![d, d], weight),
                bias: Tensor::zeros(&[d]),
            }),
            None,
            Some(LayerParams {
                weight: Tensor::filled(&[classes, d], 0.05).unwrap(),
                bias: Tensor::zeros(&[classes]),
            }),
        ];
        Network::with_params(&[d], layers, params, classes).unwrap()
    }

    #[test]
    fn representation_mse_equals_pixel_mse_for_identity_extractor() {
        // Inputs are non-negative, so identity Dense plus ReLU passes them
        // through unchanged and the two means coincide exactly.
        let net = identity_feature_net(16, 3);
        let a = random_image(&[16], 5);
        let b = random_image(&[16], 6);
        let mr = mse_representation(&net, &a, &b).unwrap();
        let mi = mse_image(&a, &b).unwrap();
        assert!((mr - mi).abs() < 1e-15);
    }

    #[test]
    fn representation_mse_ignores_null_space_directions() {
        // Zero out one input column of the extractor; moving along that
        // coordinate cannot change the representation.
        let d = 8;
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = if i == 3 { 0.0 } else { 1.0 };
        }
        let layers = vec![
            LayerSpec::Dense { input: d, output: d },
            LayerSpec::ReLU,
            LayerSpec::Dense { input: d, output: 2 },
        ];
        let params = vec![
            Some(LayerParams {
                weight: Tensor::from_raw(vec![d, d], weight),
                bias: Tensor::zeros(&[d]),
            }),
            None,
            Some(LayerParams {
                weight: Tensor::filled(&[2, d], 0.05).unwrap(),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let net = Network::with_params(&[d], layers, params, 2).unwrap();
        let a = random_image(&[d], 7);
        let mut b = a.clone();
        b.data_mut()[3] = (b.data()[3] + 0.4).min(1.0);
        assert_ne!(a, b);
        assert_eq!(mse_representation(&net, &a, &b).unwrap(), 0.0);
    }

    #[test]
    fn line_endpoints_evaluate_exactly_at_the_latents() {
        let z1: Vec<f64> = vec![0.3, -1.7, 0.9, 2.0];
        let z2: Vec<f64> = vec![-0.4, 0.6, 1.1, -0.2];
        // 13 points over [-0.25, 1.25]: step 0.125, endpoints at indices 2
        // and 10.
        let f = |z: &[f64]| z.iter().map(|v| v * v * 3.0 + v.sin()).sum::<f64>();
        let samples = landscape_1d(&f, None, &z1, &z2, 13, DEFAULT_ALPHA_RANGE).unwrap();
        assert_eq!(samples.len(), 13);
        let at0 = samples.iter().find(|s| s.alpha == 0.0).unwrap();
        let at1 = samples.iter().find(|s| s.alpha == 1.0).unwrap();
        assert_eq!(at0.loss.to_bits(), f(&z1).to_bits());
        assert_eq!(at1.loss.to_bits(), f(&z2).to_bits());
    }

    #[test]
    fn plane_zero_row_matches_the_line_bit_for_bit() {
        let z1: Vec<f64> = vec![0.5, 1.5, -0.5];
        let z2: Vec<f64> = vec![-1.0, 0.25, 0.75];
        let eta: Vec<f64> = vec![0.1, -2.0, 0.4];
        let f = |z: &[f64]| z.iter().enumerate().map(|(i, v)| v.cos() * (i + 1) as f64).sum::<f64>();
        let line = landscape_1d(&f, None, &z1, &z2, 9, (-0.25, 1.25)).unwrap();
        // Beta grid [-1, 1] with 5 points contains zero at index 2.
        let plane = landscape_2d(&f, None, &z1, &z2, &eta, 9, 5, (-0.25, 1.25), (-1.0, 1.0)).unwrap();
        assert_eq!(plane.len(), 45);
        let zero_row: Vec<&LandscapeSample> =
            plane.iter().filter(|s| s.beta == Some(0.0)).collect();
        assert_eq!(zero_row.len(), 9);
        for (a, b) in line.iter().zip(zero_row) {
            assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn plane_direction_is_rescaled_to_the_chord() {
        // With eta twice the chord length, beta = 1 must land at the same
        // distance from z1 + alpha(z2-z1) as the chord itself.
        let z1 = vec![0.0, 0.0];
        let z2 = vec![1.0, 0.0];
        let eta = vec![0.0, 2.0];
        let f = |z: &[f64]| z[1];
        let plane = landscape_2d(&f, None, &z1, &z2, &eta, 2, 3, (0.0, 1.0), (-1.0, 1.0)).unwrap();
        let top = plane.iter().find(|s| s.beta == Some(1.0)).unwrap();
        // eta_hat has length 1 (the chord length), so z[1] = 1 there.
        assert!((top.loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_at_full_precision() {
        let samples = vec![
            LandscapeSample {
                alpha: -0.25,
                beta: Some(0.1 + 0.2),
                loss: std::f64::consts::PI,
                aux: Some(1.0 / 3.0),
            },
            LandscapeSample {
                alpha: 1.0,
                beta: Some(-1.0),
                loss: 2.2250738585072014e-308,
                aux: Some(0.0),
            },
        ];
        let csv = landscape_csv(&samples).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "alpha,beta,loss,aux");
        for (line, s) in lines.zip(&samples) {
            let fields: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(fields[0].to_bits(), s.alpha.to_bits());
            assert_eq!(fields[1].to_bits(), s.beta.unwrap().to_bits());
            assert_eq!(fields[2].to_bits(), s.loss.to_bits());
            assert_eq!(fields[3].to_bits(), s.aux.unwrap().to_bits());
        }
    }

    #[test]
    fn csv_header_without_optional_fields() {
        let samples = vec![LandscapeSample {
            alpha: 0.0,
            beta: None,
            loss: 1.0,
            aux: None,
        }];
        let csv = landscape_csv(&samples).unwrap();
        assert!(csv.starts_with("alpha,loss\n"));
    }
}
