//! Per-case preprocessing: multiplicative bias-field removal followed by
//! z-score intensity normalization, both computed over the nonzero support
//! so that skull-stripped backgrounds stay exact zeros.
//!
//! The bias estimator fits a low-degree polynomial to the log-intensities of
//! support voxels and exponentiates the smooth component. Fitting is
//! iteratively reweighted (Huber weights on MAD-standardized residuals) so
//! that structure voxels, which are outliers against the smooth model, stop
//! leaking into the field. This deliberately replaces a full N4 pipeline with
//! an independently verifiable contract; an external correction binary can be
//! substituted per case through the CLI.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly;
use crate::volume::ModalityStack;

/// Minimum number of support voxels required for a stable fit.
pub const MIN_SUPPORT: usize = 1000;

const HUBER_K: f64 = 1.345;
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasOptions {
    pub degree: usize,
    pub iterations: usize,
}

impl Default for BiasOptions {
    fn default() -> Self {
        BiasOptions { degree: 3, iterations: 5 }
    }
}

impl BiasOptions {
    fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.degree) {
            return Err(Error::InvalidArgument(format!(
                "bias degree must be in [1,4], got {}",
                self.degree
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("bias iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Options for the full preprocessing step; `bias: None` skips correction.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub bias: Option<BiasOptions>,
}

/// Solves the symmetric positive-definite system via Cholesky; fails on
/// rank-deficient designs.
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, m: usize) -> Result<Vec<f64>> {
    let max_diag = (0..m).fold(0.0f64, |acc, i| acc.max(a[i * m + i].abs()));
    let tol = max_diag.max(1.0) * 1e-12;
    for j in 0..m {
        for k in 0..j {
            let l = a[j * m + k];
            for i in j..m {
                a[i * m + j] -= a[i * m + k] * l;
            }
        }
        let d = a[j * m + j];
        if d <= tol {
            return Err(Error::Numerical(
                "rank-deficient design in bias field fit".into(),
            ));
        }
        let inv = 1.0 / d.sqrt();
        for i in j..m {
            a[i * m + j] *= inv;
        }
    }
    // Forward substitution L y = b, then back substitution L^T x = y.
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * m + k] * b[k];
        }
        b[i] = s / a[i * m + i];
    }
    for i in (0..m).rev() {
        let mut s = b[i];
        for k in (i + 1)..m {
            s -= a[k * m + i] * b[k];
        }
        b[i] = s / a[i * m + i];
    }
    Ok(b)
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Estimates a smooth, strictly positive multiplicative field with mean 1
/// over the support (voxels with intensity > 0).
pub fn estimate_bias_field(volume: &Array3<f64>, opts: BiasOptions) -> Result<Array3<f64>> {
    opts.validate()?;
    let s = volume.shape();
    let shape = [s[0], s[1], s[2]];
    let exps = poly::monomial_exponents(opts.degree);
    let m = exps.len() + 1; // constant term first

    // Design rows and log-intensities for support voxels.
    let mut rows: Vec<f64> = Vec::new();
    let mut logs: Vec<f64> = Vec::new();
    let mut basis = vec![0.0; exps.len()];
    for ((d, h, w), &v) in volume.indexed_iter() {
        if v > 0.0 {
            let p = [
                poly::norm_coord(d, shape[0]),
                poly::norm_coord(h, shape[1]),
                poly::norm_coord(w, shape[2]),
            ];
            poly::eval_monomials(&exps, p, &mut basis);
            rows.push(1.0);
            rows.extend_from_slice(&basis);
            logs.push(v.ln());
        }
    }
    let n = logs.len();
    if n < MIN_SUPPORT {
        return Err(Error::InvalidArgument(format!(
            "support too small for bias estimation: {n} voxels (need >= {MIN_SUPPORT})"
        )));
    }

    let mut weights = vec![1.0; n];
    let mut coeffs = vec![0.0; m];
    for iter in 0..opts.iterations {
        // Accumulate weighted normal equations.
        let mut ata = vec![0.0; m * m];
        let mut atb = vec![0.0; m];
        for i in 0..n {
            let row = &rows[i * m..(i + 1) * m];
            let w = weights[i];
            for j in 0..m {
                let wj = w * row[j];
                atb[j] += wj * logs[i];
                for k in j..m {
                    ata[k * m + j] += wj * row[k];
                }
            }
        }
        // Mirror the lower triangle.
        for j in 0..m {
            for k in (j + 1)..m {
                ata[j * m + k] = ata[k * m + j];
            }
        }
        coeffs = cholesky_solve(ata, atb, m)?;

        if iter + 1 == opts.iterations {
            break;
        }
        let residuals: Vec<f64> = (0..n)
            .map(|i| {
                let row = &rows[i * m..(i + 1) * m];
                logs[i] - row.iter().zip(&coeffs).map(|(r, c)| r * c).sum::<f64>()
            })
            .collect();
        let med = median_of(residuals.clone());
        let scale = MAD_TO_SIGMA * median_of(residuals.iter().map(|r| (r - med).abs()).collect());
        if scale < 1e-12 {
            break; // already an essentially exact fit
        }
        for (w, r) in weights.iter_mut().zip(&residuals) {
            let t = (r - med).abs() / scale;
            *w = if t <= HUBER_K { 1.0 } else { HUBER_K / t };
        }
    }

    // Evaluate everywhere, exponentiate, normalize to mean 1 on the support.
    let mut field = Array3::<f64>::zeros(shape);
    let mut support_sum = 0.0;
    let mut support_count = 0usize;
    for ((d, h, w), out) in field.indexed_iter_mut() {
        let p = [
            poly::norm_coord(d, shape[0]),
            poly::norm_coord(h, shape[1]),
            poly::norm_coord(w, shape[2]),
        ];
        poly::eval_monomials(&exps, p, &mut basis);
        let fit = coeffs[0] + basis.iter().zip(&coeffs[1..]).map(|(b, c)| b * c).sum::<f64>();
        *out = fit.exp();
        if volume[[d, h, w]] > 0.0 {
            support_sum += *out;
            support_count += 1;
        }
    }
    let mean = support_sum / support_count as f64;
    field.mapv_inplace(|v| v / mean);
    Ok(field)
}

/// Divides out the estimated bias field. Voxels that are exactly zero stay
/// exactly zero.
pub fn correct_bias(volume: &Array3<f64>, opts: BiasOptions) -> Result<Array3<f64>> {
    let field = estimate_bias_field(volume, opts)?;
    Ok(volume / &field)
}

/// Normalizes support voxels (v != 0) to zero mean and unit standard
/// deviation; off-support voxels are set to 0.
pub fn zscore_normalize(volume: &Array3<f64>) -> Result<Array3<f64>> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &v in volume.iter() {
        if v != 0.0 {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty support: all voxels are zero".into()));
    }
    let mean = sum / count as f64;
    let mut ss = 0.0;
    for &v in volume.iter() {
        if v != 0.0 {
            ss += (v - mean) * (v - mean);
        }
    }
    let std = (ss / count as f64).sqrt();
    if std <= mean.abs() * 1e-12 {
        return Err(Error::Numerical(
            "support has zero variance; cannot z-score normalize".into(),
        ));
    }
    Ok(volume.mapv(|v| if v != 0.0 { (v - mean) / std } else { 0.0 }))
}

/// Full preprocessing of one stack: optional bias correction, then per-channel
/// z-score normalization.
pub fn preprocess_stack(stack: &ModalityStack, opts: PreprocessOptions) -> Result<ModalityStack> {
    let mut data = stack.data.clone();
    for ch in 0..4 {
        let vol = stack.data.index_axis(ndarray::Axis(0), ch).to_owned();
        let vol = match opts.bias {
            Some(bias) => correct_bias(&vol, bias)?,
            None => vol,
        };
        let vol = zscore_normalize(&vol)?;
        data.index_axis_mut(ndarray::Axis(0), ch).assign(&vol);
    }
    let out = ModalityStack::new(data, stack.spacing, stack.case_id.clone())?;
    debug_assert!(out.is_finite());
    Ok(out)
}
