//! Focal loss and its aggregation across deep-supervision heads and cascade
//! steps.
//!
//! The per-voxel term is `-α_t (1-p_t)^γ log(p_t)` with `p_t = p` for
//! foreground voxels and `1-p` otherwise, and `α_t = α` / `1-α` respectively.
//! The argument of the log is clamped to `[ε, 1-ε]`. Losses reduce by mean
//! over voxels so magnitudes do not depend on patch size. At `γ = 0` the loss
//! is exactly α-weighted binary cross-entropy.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    /// Focusing parameter γ >= 0; higher values down-weight easy voxels more.
    pub gamma: f64,
    /// Balancing factor for the foreground class; background gets `1 - alpha`.
    pub alpha: f64,
    /// Clamp applied to the log argument.
    pub epsilon: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0, alpha: 0.25, epsilon: 1e-7 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

fn check_shapes(probs: &ArrayView3<'_, f64>, targets: &ArrayView3<'_, bool>) -> Result<()> {
    if probs.shape() != targets.shape() {
        return Err(Error::shape(targets.shape(), probs.shape()));
    }
    Ok(())
}

#[inline]
fn voxel_loss(p: f64, y: bool, params: &FocalParams) -> f64 {
    let (p_t, alpha_t) =
        if y { (p, params.alpha) } else { (1.0 - p, 1.0 - params.alpha) };
    let clamped = p_t.clamp(params.epsilon, 1.0 - params.epsilon);
    -alpha_t * (1.0 - p_t).powf(params.gamma) * clamped.ln()
}

/// d(voxel loss)/dp.
#[inline]
fn voxel_grad(p: f64, y: bool, params: &FocalParams) -> f64 {
    let (p_t, alpha_t, sign) =
        if y { (p, params.alpha, 1.0) } else { (1.0 - p, 1.0 - params.alpha, -1.0) };
    let clamped = p_t.clamp(params.epsilon, 1.0 - params.epsilon);
    let one_minus = 1.0 - p_t;
    // Modulating-factor branch vanishes identically at γ = 0.
    let mod_term = if params.gamma == 0.0 {
        0.0
    } else {
        params.gamma * one_minus.powf(params.gamma - 1.0) * clamped.ln()
    };
    // The log branch only varies while the clamp is inactive.
    let log_term = if p_t > params.epsilon && p_t < 1.0 - params.epsilon {
        -one_minus.powf(params.gamma) / clamped
    } else {
        0.0
    };
    sign * alpha_t * (mod_term + log_term)
}

/// Mean focal loss over all voxels.
pub fn focal_loss(
    probs: ArrayView3<'_, f64>,
    targets: ArrayView3<'_, bool>,
    params: &FocalParams,
) -> Result<f64> {
    check_shapes(&probs, &targets)?;
    params.validate()?;
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(targets.iter()) {
        sum += voxel_loss(p, y, params);
    }
    Ok(sum / probs.len() as f64)
}

/// Mean focal loss together with its gradient w.r.t. every probability.
pub fn focal_loss_grad(
    probs: ArrayView3<'_, f64>,
    targets: ArrayView3<'_, bool>,
    params: &FocalParams,
) -> Result<(f64, Array3<f64>)> {
    check_shapes(&probs, &targets)?;
    params.validate()?;
    let n = probs.len() as f64;
    let mut sum = 0.0;
    let mut grad = Array3::<f64>::zeros(probs.raw_dim());
    for ((&p, &y), g) in probs.iter().zip(targets.iter()).zip(grad.iter_mut()) {
        sum += voxel_loss(p, y, params);
        *g = voxel_grad(p, y, params) / n;
    }
    Ok((sum / n, grad))
}

/// Main-head focal loss plus weighted auxiliary-head losses.
pub fn deep_supervised_loss(
    main: ArrayView3<'_, f64>,
    aux: &[ArrayView3<'_, f64>; 3],
    target: ArrayView3<'_, bool>,
    aux_weights: [f64; 3],
    params: &FocalParams,
) -> Result<f64> {
    let mut total = focal_loss(main, target, params)?;
    for (a, w) in aux.iter().zip(aux_weights) {
        total += w * focal_loss(*a, target, params)?;
    }
    Ok(total)
}

/// Weighted sum of per-step deep-supervised losses over the three cascade
/// steps (WT, TC, ET order).
#[allow(clippy::type_complexity)]
pub fn cascade_loss(
    steps: &[(ArrayView3<'_, f64>, [ArrayView3<'_, f64>; 3]); 3],
    targets: &[ArrayView3<'_, bool>; 3],
    step_weights: [f64; 3],
    aux_weights: [f64; 3],
    params: &FocalParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (k, (main, aux)) in steps.iter().enumerate() {
        total += step_weights[k] * deep_supervised_loss(*main, aux, targets[k], aux_weights, params)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_grid(
        shape: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> (Array3<f64>, Array3<bool>) {
        let probs = Array3::from_shape_fn(shape, |_| rng.random_range(0.02..0.98));
        let targets = Array3::from_shape_fn(shape, |_| rng.random::<f64>() < 0.3);
        (probs, targets)
    }

    /// Independent α-weighted binary cross-entropy with the same clamp.
    fn weighted_bce(probs: &Array3<f64>, targets: &Array3<bool>, alpha: f64, eps: f64) -> f64 {
        let mut sum = 0.0;
        for (&p, &y) in probs.iter().zip(targets.iter()) {
            let (pt, at) = if y { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            sum += -at * pt.clamp(eps, 1.0 - eps).ln();
        }
        sum / probs.len() as f64
    }

    /// Plain (unweighted) mean binary cross-entropy with the same clamp.
    fn plain_bce(probs: &Array3<f64>, targets: &Array3<bool>, eps: f64) -> f64 {
        let mut sum = 0.0;
        for (&p, &y) in probs.iter().zip(targets.iter()) {
            let pt = if y { p } else { 1.0 - p };
            sum += -pt.clamp(eps, 1.0 - eps).ln();
        }
        sum / probs.len() as f64
    }

    #[test]
    fn gamma_zero_reduces_to_weighted_cross_entropy() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (probs, targets) = random_grid((4, 4, 4), &mut rng);
            // With α = 0.5 both classes carry weight 0.5, so the loss is
            // exactly half the plain cross-entropy.
            let params = FocalParams { gamma: 0.0, alpha: 0.5, epsilon: 1e-7 };
            let fl = focal_loss(probs.view(), targets.view(), &params).unwrap();
            assert!((fl - 0.5 * plain_bce(&probs, &targets, 1e-7)).abs() < 1e-6);
            // General α: the α-weighted cross-entropy.
            let params2 = FocalParams { gamma: 0.0, alpha: 0.25, epsilon: 1e-7 };
            let fl2 = focal_loss(probs.view(), targets.view(), &params2).unwrap();
            assert!((fl2 - weighted_bce(&probs, &targets, 0.25, 1e-7)).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let targets = Array3::from_shape_fn((3, 3, 3), |(d, _, _)| d == 0);
        let probs = targets.mapv(|y| if y { 1.0 } else { 0.0 });
        let loss = focal_loss(probs.view(), targets.view(), &FocalParams::default()).unwrap();
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn hand_evaluated_scalar_case() {
        // y=1, p=0.9, γ=2, α=0.25 → 0.25 · 0.01 · (−ln 0.9).
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((expected - 2.634012891445657e-4).abs() < 1e-18);
        let probs = Array3::from_elem((1, 1, 1), 0.9);
        let targets = Array3::from_elem((1, 1, 1), true);
        let loss = focal_loss(probs.view(), targets.view(), &FocalParams::default()).unwrap();
        assert!((loss - 2.634012891445657e-4).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let (mut probs, targets) = random_grid((4, 4, 4), &mut rng);
        let params = FocalParams::default();
        let (_, grad) = focal_loss_grad(probs.view(), targets.view(), &params).unwrap();
        let h = 1e-6;
        for idx in [[0usize, 0, 0], [1, 2, 3], [3, 3, 3], [2, 0, 1]] {
            let orig = probs[idx];
            probs[idx] = orig + h;
            let up = focal_loss(probs.view(), targets.view(), &params).unwrap();
            probs[idx] = orig - h;
            let down = focal_loss(probs.view(), targets.view(), &params).unwrap();
            probs[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "grad {} vs fd {}", grad[idx], fd);
        }
    }

    #[test]
    fn loss_decreases_with_gamma_on_hard_examples() {
        for &p_t in &[0.3, 0.6, 0.9] {
            let probs = Array3::from_elem((1, 1, 1), p_t);
            let targets = Array3::from_elem((1, 1, 1), true);
            let mut last = f64::INFINITY;
            for gamma in [0.0, 0.5, 1.0, 2.0, 4.0] {
                let params = FocalParams { gamma, ..Default::default() };
                let loss = focal_loss(probs.view(), targets.view(), &params).unwrap();
                assert!(loss < last, "γ={gamma}: {loss} !< {last}");
                last = loss;
            }
        }
    }

    #[test]
    fn zero_aux_weights_equal_main_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (main, targets) = random_grid((3, 3, 3), &mut rng);
        let (a1, _) = random_grid((3, 3, 3), &mut rng);
        let (a2, _) = random_grid((3, 3, 3), &mut rng);
        let (a3, _) = random_grid((3, 3, 3), &mut rng);
        let params = FocalParams::default();
        let ds = deep_supervised_loss(
            main.view(),
            &[a1.view(), a2.view(), a3.view()],
            targets.view(),
            [0.0; 3],
            &params,
        )
        .unwrap();
        let fm = focal_loss(main.view(), targets.view(), &params).unwrap();
        assert_eq!(ds, fm);
    }

    #[test]
    fn deep_supervised_equals_hand_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let (main, targets) = random_grid((3, 3, 3), &mut rng);
        let (a1, _) = random_grid((3, 3, 3), &mut rng);
        let (a2, _) = random_grid((3, 3, 3), &mut rng);
        let (a3, _) = random_grid((3, 3, 3), &mut rng);
        let params = FocalParams::default();
        let w = [0.5, 0.5, 0.5];
        let ds = deep_supervised_loss(
            main.view(),
            &[a1.view(), a2.view(), a3.view()],
            targets.view(),
            w,
            &params,
        )
        .unwrap();
        let hand = focal_loss(main.view(), targets.view(), &params).unwrap()
            + 0.5 * focal_loss(a1.view(), targets.view(), &params).unwrap()
            + 0.5 * focal_loss(a2.view(), targets.view(), &params).unwrap()
            + 0.5 * focal_loss(a3.view(), targets.view(), &params).unwrap();
        assert!((ds - hand).abs() < 1e-7);
    }

    fn random_step(
        rng: &mut impl Rng,
    ) -> (Array3<f64>, [Array3<f64>; 3], Array3<bool>) {
        let (m, t) = random_grid((3, 3, 3), rng);
        let (a1, _) = random_grid((3, 3, 3), rng);
        let (a2, _) = random_grid((3, 3, 3), rng);
        let (a3, _) = random_grid((3, 3, 3), rng);
        (m, [a1, a2, a3], t)
    }

    #[test]
    fn cascade_loss_is_linear_in_step_weights() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let s1 = random_step(&mut rng);
        let s2 = random_step(&mut rng);
        let s3 = random_step(&mut rng);
        let params = FocalParams::default();
        let aux_w = [0.5, 0.5, 0.5];
        let steps = [
            (s1.0.view(), [s1.1[0].view(), s1.1[1].view(), s1.1[2].view()]),
            (s2.0.view(), [s2.1[0].view(), s2.1[1].view(), s2.1[2].view()]),
            (s3.0.view(), [s3.1[0].view(), s3.1[1].view(), s3.1[2].view()]),
        ];
        let targets = [s1.2.view(), s2.2.view(), s3.2.view()];
        let l = |w: [f64; 3]| cascade_loss(&steps, &targets, w, aux_w, &params).unwrap();
        let only1 = l([1.0, 0.0, 0.0]);
        let ds1 = deep_supervised_loss(steps[0].0, &steps[0].1, targets[0], aux_w, &params).unwrap();
        assert_eq!(only1, ds1);
        // Superposition: L(w + w') = L(w) + L(w').
        let a = l([0.3, 0.7, 0.1]);
        let b = l([0.5, 0.1, 0.9]);
        let ab = l([0.8, 0.8, 1.0]);
        assert!((a + b - ab).abs() < 1e-7);
        let equal = l([1.0, 1.0, 1.0]);
        let hand = l([1.0, 0.0, 0.0]) + l([0.0, 1.0, 0.0]) + l([0.0, 0.0, 1.0]);
        assert!((equal - hand).abs() < 1e-7);
    }
}
