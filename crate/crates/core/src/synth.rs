//! Synthetic phantom cases: nested-ellipsoid lesions rendered into four
//! pseudo-modalities, with optional multiplicative bias and additive noise.
//!
//! A phantom is a large "brain" ellipsoid of intermediate intensity (zero
//! outside, mimicking skull-stripped data) containing three nested tumor
//! ellipsoids labeled as shells: outer 2 (edema), middle 1 (core), inner 4
//! (enhancing). Channel contrasts follow the modality roles: flair separates
//! the whole tumor from tissue best, t1ce separates core/enhancing best.
//! Generation is a pure function of the parameters, so fixed seeds give
//! bit-identical cases.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly;
use crate::volume::{LabelMap, ModalityStack, DEFAULT_SPACING};

/// Mean intensities per modality (rows, in channel order) and region
/// (columns: brain tissue, edema, core, enhancing). Chosen so flair best
/// separates the whole tumor from tissue and t1ce best separates core and
/// enhancing regions.
const REGION_MEANS: [[f64; 4]; 4] = [
    // brain edema core  enhancing
    [0.50, 1.00, 0.70, 0.90], // flair
    [0.60, 0.45, 0.40, 0.55], // t1
    [0.55, 0.60, 0.95, 1.10], // t1ce
    [0.50, 0.90, 0.75, 0.70], // t2
];

/// Parameters of a smooth multiplicative field: a centered, max-normalized
/// polynomial perturbation of amplitude `amplitude` around 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasFieldSpec {
    pub degree: usize,
    /// Peak relative deviation from 1; at most 0.5 so the field stays positive.
    pub amplitude: f64,
    /// One coefficient per non-constant monomial of total degree <= `degree`.
    pub coeffs: Vec<f64>,
}

impl BiasFieldSpec {
    pub fn new(degree: usize, amplitude: f64, coeffs: Vec<f64>) -> Result<Self> {
        if degree == 0 || degree > 3 {
            return Err(Error::InvalidArgument(format!(
                "bias field degree must be in [1,3], got {degree}"
            )));
        }
        if !(0.0..=0.5).contains(&amplitude) {
            return Err(Error::InvalidArgument(format!(
                "bias field amplitude must be in [0, 0.5], got {amplitude}"
            )));
        }
        let expected = poly::monomial_exponents(degree).len();
        if coeffs.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "degree {degree} needs {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(BiasFieldSpec { degree, amplitude, coeffs })
    }

    /// Random coefficients in [-1, 1).
    pub fn random(degree: usize, amplitude: f64, rng: &mut impl Rng) -> Result<Self> {
        let n = poly::monomial_exponents(degree).len();
        let coeffs = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        BiasFieldSpec::new(degree, amplitude, coeffs)
    }

    /// Random coefficients from a dedicated stream, so per-case fields are
    /// reproducible from the case seed alone.
    pub fn random_for_seed(degree: usize, amplitude: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xB1A5_F1E1_D000_0001);
        BiasFieldSpec::random(degree, amplitude, &mut rng)
    }

    /// Renders the field on a voxel grid. The result is strictly positive,
    /// has mean exactly 1 over the grid, and deviates from 1 by at most
    /// `amplitude`.
    pub fn field(&self, shape: [usize; 3]) -> Array3<f64> {
        let exps = poly::monomial_exponents(self.degree);
        let mut basis = vec![0.0; exps.len()];
        let mut q = Array3::<f64>::zeros(shape);
        for ((d, h, w), v) in q.indexed_iter_mut() {
            let p = [
                poly::norm_coord(d, shape[0]),
                poly::norm_coord(h, shape[1]),
                poly::norm_coord(w, shape[2]),
            ];
            poly::eval_monomials(&exps, p, &mut basis);
            *v = basis.iter().zip(&self.coeffs).map(|(b, c)| b * c).sum();
        }
        let mean = q.sum() / q.len() as f64;
        q.mapv_inplace(|v| v - mean);
        let max_abs = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > 0.0 {
            q.mapv_inplace(|v| v / max_abs);
        }
        q.mapv_inplace(|v| 1.0 + self.amplitude * v);
        q
    }
}

/// Parameters of one phantom case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub volume_shape: [usize; 3],
    /// Whole-tumor semi-axis range in voxels.
    pub wt_radius_range: [f64; 2],
    /// Tumor-core semi-axes as a fraction of the WT semi-axes; subset of (0,1).
    pub tc_scale_range: [f64; 2],
    /// Enhancing-tumor semi-axes as a fraction of the TC semi-axes.
    pub et_scale_range: [f64; 2],
    /// Additive Gaussian noise, relative to the brain-tissue mean intensity.
    pub noise_sigma: f64,
    pub bias: Option<BiasFieldSpec>,
    pub seed: u64,
}

impl PhantomParams {
    /// Defaults scaled to a target volume shape.
    pub fn for_shape(volume_shape: [usize; 3]) -> Self {
        let min_dim = *volume_shape.iter().min().unwrap_or(&0) as f64;
        PhantomParams {
            volume_shape,
            wt_radius_range: [0.15 * min_dim, 0.22 * min_dim],
            tc_scale_range: [0.55, 0.75],
            et_scale_range: [0.45, 0.65],
            noise_sigma: 0.05,
            bias: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.iter().any(|&d| d < 32) {
            return Err(Error::InvalidArgument(format!(
                "volume shape components must be >= 32, got {:?}",
                self.volume_shape
            )));
        }
        for (name, range) in [("tc_scale_range", self.tc_scale_range), ("et_scale_range", self.et_scale_range)] {
            if !(range[0] > 0.0 && range[1] < 1.0 && range[0] <= range[1]) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be an ordered subset of (0,1), got {range:?}"
                )));
            }
        }
        if !(self.wt_radius_range[0] > 0.0 && self.wt_radius_range[0] <= self.wt_radius_range[1]) {
            return Err(Error::InvalidArgument(format!(
                "wt_radius_range must be ordered and positive, got {:?}",
                self.wt_radius_range
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams::for_shape([96, 96, 96])
    }
}

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for ((p, c), a) in p.iter().zip(&self.center).zip(&self.semi_axes) {
            let t = (p - c) / a;
            s += t * t;
        }
        s <= 1.0
    }
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Multiplies a volume by the rendered bias field.
pub fn inject_bias_field(volume: &Array3<f64>, spec: &BiasFieldSpec) -> Array3<f64> {
    let s = volume.shape();
    let field = spec.field([s[0], s[1], s[2]]);
    volume * &field
}

/// Generates one phantom case. Deterministic for fixed parameters.
pub fn generate_case(params: &PhantomParams, case_id: &str) -> Result<(ModalityStack, LabelMap)> {
    params.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    let shape = params.volume_shape;
    let dims = [shape[0] as f64, shape[1] as f64, shape[2] as f64];
    let center = [(dims[0] - 1.0) / 2.0, (dims[1] - 1.0) / 2.0, (dims[2] - 1.0) / 2.0];

    let brain = Ellipsoid {
        center,
        semi_axes: [
            uniform(&mut rng, [0.40, 0.45]) * dims[0],
            uniform(&mut rng, [0.40, 0.45]) * dims[1],
            uniform(&mut rng, [0.40, 0.45]) * dims[2],
        ],
    };

    let wt_axes = [
        uniform(&mut rng, params.wt_radius_range),
        uniform(&mut rng, params.wt_radius_range),
        uniform(&mut rng, params.wt_radius_range),
    ];
    let jitter = [
        uniform(&mut rng, [-0.08, 0.08]) * dims[0],
        uniform(&mut rng, [-0.08, 0.08]) * dims[1],
        uniform(&mut rng, [-0.08, 0.08]) * dims[2],
    ];
    let wt_center = [center[0] + jitter[0], center[1] + jitter[1], center[2] + jitter[2]];
    for i in 0..3 {
        let fits_brain = jitter[i].abs() + wt_axes[i] <= 0.9 * brain.semi_axes[i];
        let fits_volume = wt_center[i] - wt_axes[i] >= 1.0 && wt_center[i] + wt_axes[i] <= dims[i] - 2.0;
        if !fits_brain || !fits_volume {
            return Err(Error::InvalidArgument(format!(
                "tumor ellipsoid cannot fit inside the volume along axis {i} \
                 (semi-axis {:.1}, brain semi-axis {:.1})",
                wt_axes[i], brain.semi_axes[i]
            )));
        }
    }

    let tc_scale = uniform(&mut rng, params.tc_scale_range);
    let et_scale = uniform(&mut rng, params.et_scale_range);
    let wt = Ellipsoid { center: wt_center, semi_axes: wt_axes };
    let tc = Ellipsoid {
        center: wt_center,
        semi_axes: [wt_axes[0] * tc_scale, wt_axes[1] * tc_scale, wt_axes[2] * tc_scale],
    };
    let et = Ellipsoid {
        center: wt_center,
        semi_axes: [tc.semi_axes[0] * et_scale, tc.semi_axes[1] * et_scale, tc.semi_axes[2] * et_scale],
    };

    // Small per-case intensity jitter; margins in REGION_MEANS keep the
    // contrast ordering intact.
    let mut means = REGION_MEANS;
    for row in &mut means {
        for v in row.iter_mut() {
            *v += uniform(&mut rng, [-0.02, 0.02]);
        }
    }

    let mut labels = Array3::<u8>::zeros(shape);
    let mut region_idx = Array3::<u8>::zeros(shape); // 0 bg, 1 brain, 2 edema, 3 core, 4 enhancing
    for ((d, h, w), lab) in labels.indexed_iter_mut() {
        let p = [d as f64, h as f64, w as f64];
        if et.contains(p) {
            *lab = 4;
            region_idx[[d, h, w]] = 4;
        } else if tc.contains(p) {
            *lab = 1;
            region_idx[[d, h, w]] = 3;
        } else if wt.contains(p) {
            *lab = 2;
            region_idx[[d, h, w]] = 2;
        } else if brain.contains(p) {
            region_idx[[d, h, w]] = 1;
        }
    }

    let field = params.bias.as_ref().map(|spec| spec.field(shape));
    let mut data = Array4::<f64>::zeros((4, shape[0], shape[1], shape[2]));
    for (ch, channel_means) in means.iter().enumerate() {
        let mut vol = Array3::<f64>::zeros(shape);
        for (v, &r) in vol.iter_mut().zip(region_idx.iter()) {
            *v = if r == 0 { 0.0 } else { channel_means[r as usize - 1] };
        }
        if let Some(field) = &field {
            vol *= field;
        }
        if params.noise_sigma > 0.0 {
            let sigma = params.noise_sigma * channel_means[0];
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numerical(e.to_string()))?;
            for (v, &r) in vol.iter_mut().zip(region_idx.iter()) {
                if r != 0 {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        data.index_axis_mut(ndarray::Axis(0), ch).assign(&vol);
    }

    let stack = ModalityStack::new(data, DEFAULT_SPACING, case_id)?;
    let labels = LabelMap::new(labels, DEFAULT_SPACING)?;
    Ok((stack, labels))
}

/// Derives the per-case seed for case `index` from a base seed.
pub fn case_seed(base_seed: u64, index: u64) -> u64 {
    base_seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
