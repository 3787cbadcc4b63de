//! Random geometric and photometric augmentation of training patches.
//!
//! The spatial transforms (flips, in-plane rotation) are applied identically
//! to images and labels; Gaussian blur touches images only. Image channels
//! are interpolated trilinearly, labels with nearest-neighbor so the label
//! alphabet can never grow. Everything is a pure function of the explicit
//! RNG, which makes augmented samples bit-reproducible.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Axis pair spanning the rotation plane; the remaining axis is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationPlane {
    /// Rotate within (h, w) slices — the axial plane.
    #[serde(rename = "hw")]
    Hw,
    /// Rotate within (d, w) slices.
    #[serde(rename = "dw")]
    Dw,
    /// Rotate within (d, h) slices.
    #[serde(rename = "dh")]
    Dh,
}

impl RotationPlane {
    fn axes(self) -> (usize, usize) {
        match self {
            RotationPlane::Hw => (1, 2),
            RotationPlane::Dw => (0, 2),
            RotationPlane::Dh => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Flip probability per array axis (d, h, w).
    pub p_flip: [f64; 3],
    pub p_rotate: f64,
    /// Rotation angles are drawn from Uniform(-rotate_max_deg, +rotate_max_deg).
    pub rotate_max_deg: f64,
    pub rotate_plane: RotationPlane,
    pub p_blur: f64,
    /// Blur sigma range in voxels.
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        // In-plane flips at 0.5 each; modest rotation bound since the source
        // gives no range; light blur.
        AugmentConfig {
            p_flip: [0.0, 0.5, 0.5],
            p_rotate: 0.5,
            rotate_max_deg: 10.0,
            rotate_plane: RotationPlane::Hw,
            p_blur: 0.2,
            blur_sigma: [0.5, 1.0],
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: every probability zero.
    pub fn disabled() -> Self {
        AugmentConfig { p_flip: [0.0; 3], p_rotate: 0.0, p_blur: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let probs = self.p_flip.iter().chain([&self.p_rotate, &self.p_blur]);
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(crate::Error::InvalidArgument(format!("probability {p} not in [0,1]")));
            }
        }
        if !(self.rotate_max_deg > 0.0 && self.rotate_max_deg <= 180.0) {
            return Err(crate::Error::InvalidArgument(format!(
                "rotate_max_deg must be in (0, 180], got {}",
                self.rotate_max_deg
            )));
        }
        if self.blur_sigma[0] <= 0.0 || self.blur_sigma[0] > self.blur_sigma[1] {
            return Err(crate::Error::InvalidArgument(format!(
                "blur sigma range must be ordered and positive, got {:?}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

/// Flips images and labels along one array axis.
pub fn flip_volume(images: &mut Array4<f64>, labels: &mut Array3<u8>, axis: usize) {
    images.invert_axis(Axis(axis + 1));
    labels.invert_axis(Axis(axis));
}

/// Rotates images (trilinear) and labels (nearest-neighbor) by `angle_deg`
/// within `plane`, about the volume center, zero-filling outside. The output
/// shape equals the input shape.
pub fn rotate_volume(
    images: &Array4<f64>,
    labels: &Array3<u8>,
    angle_deg: f64,
    plane: RotationPlane,
) -> (Array4<f64>, Array3<u8>) {
    let (a0, a1) = plane.axes();
    let shape = labels.shape();
    let n0 = shape[a0];
    let n1 = shape[a1];
    let c0 = (n0 as f64 - 1.0) / 2.0;
    let c1 = (n1 as f64 - 1.0) / 2.0;
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();

    // Inverse mapping: for each output position, sample the input at the
    // back-rotated coordinates.
    let src = |o0: usize, o1: usize| -> (f64, f64) {
        let d0 = o0 as f64 - c0;
        let d1 = o1 as f64 - c1;
        (c0 + cos * d0 + sin * d1, c1 - sin * d0 + cos * d1)
    };

    let mut out_labels = Array3::<u8>::zeros(labels.raw_dim());
    for (idx, v) in out_labels.indexed_iter_mut() {
        let coord = [idx.0, idx.1, idx.2];
        let (s0, s1) = src(coord[a0], coord[a1]);
        let r0 = s0.round();
        let r1 = s1.round();
        if r0 >= 0.0 && r1 >= 0.0 && (r0 as usize) < n0 && (r1 as usize) < n1 {
            let mut s = coord;
            s[a0] = r0 as usize;
            s[a1] = r1 as usize;
            *v = labels[s];
        }
    }

    let mut out_images = Array4::<f64>::zeros(images.raw_dim());
    for ch in 0..images.shape()[0] {
        let src_ch = images.index_axis(Axis(0), ch);
        let mut dst_ch = out_images.index_axis_mut(Axis(0), ch);
        for (idx, v) in dst_ch.indexed_iter_mut() {
            let coord = [idx.0, idx.1, idx.2];
            let (s0, s1) = src(coord[a0], coord[a1]);
            let f0 = s0.floor();
            let f1 = s1.floor();
            let t0 = s0 - f0;
            let t1 = s1 - f1;
            let mut acc = 0.0;
            for (di, wi) in [(0isize, 1.0 - t0), (1, t0)] {
                for (dj, wj) in [(0isize, 1.0 - t1), (1, t1)] {
                    let p0 = f0 as isize + di;
                    let p1 = f1 as isize + dj;
                    if p0 >= 0 && p1 >= 0 && (p0 as usize) < n0 && (p1 as usize) < n1 {
                        let mut s = coord;
                        s[a0] = p0 as usize;
                        s[a1] = p1 as usize;
                        acc += wi * wj * src_ch[s];
                    }
                }
            }
            *v = acc;
        }
    }
    (out_images, out_labels)
}

/// Separable Gaussian blur of the image channels. Kernel tails are clipped at
/// the borders and renormalized, so constant volumes stay constant.
pub fn gaussian_blur(images: &mut Array4<f64>, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> =
        (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let shape: Vec<usize> = images.shape().to_vec();

    for axis in 0..3 {
        let n = shape[axis + 1] as isize;
        let mut blurred = images.clone();
        for ch in 0..shape[0] {
            let src = images.index_axis(Axis(0), ch);
            let mut dst = blurred.index_axis_mut(Axis(0), ch);
            for (idx, v) in dst.indexed_iter_mut() {
                let coord = [idx.0, idx.1, idx.2];
                let center = coord[axis] as isize;
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (k, &kw) in kernel.iter().enumerate() {
                    let p = center + k as isize - radius;
                    if p >= 0 && p < n {
                        let mut s = coord;
                        s[axis] = p as usize;
                        acc += kw * src[s];
                        norm += kw;
                    }
                }
                *v = acc / norm;
            }
        }
        *images = blurred;
    }
}

/// Applies the configured augmentations in order: per-axis flips, in-plane
/// rotation, Gaussian blur (images only). Deterministic given the RNG state.
pub fn augment(
    images: &Array4<f64>,
    labels: &Array3<u8>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Array4<f64>, Array3<u8>) {
    let mut images = images.clone();
    let mut labels = labels.clone();
    for axis in 0..3 {
        if cfg.p_flip[axis] > 0.0 && rng.random::<f64>() < cfg.p_flip[axis] {
            flip_volume(&mut images, &mut labels, axis);
        }
    }
    if cfg.p_rotate > 0.0 && rng.random::<f64>() < cfg.p_rotate {
        let angle = rng.random_range(-cfg.rotate_max_deg..cfg.rotate_max_deg);
        let (ri, rl) = rotate_volume(&images, &labels, angle, cfg.rotate_plane);
        images = ri;
        labels = rl;
    }
    if cfg.p_blur > 0.0 && rng.random::<f64>() < cfg.p_blur {
        let sigma = if cfg.blur_sigma[0] == cfg.blur_sigma[1] {
            cfg.blur_sigma[0]
        } else {
            rng.random_range(cfg.blur_sigma[0]..cfg.blur_sigma[1])
        };
        gaussian_blur(&mut images, sigma);
    }
    (images, labels)
}
