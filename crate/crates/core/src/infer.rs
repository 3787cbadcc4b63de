//! Whole-volume prediction: sliding-window patches through the cascade,
//! overlap-averaged probability assembly, per-step thresholding and
//! hierarchical label fusion.

use ndarray::{Array3, Axis};

use crate::cascade::CascadeModel;
use crate::config::InferSection;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape};
use crate::patch::{assemble, extract3, grid_patches};
use crate::volume::{compose_labels, LabelMap, Modality, ModalityStack, Region, RegionMask};

/// Thresholds a probability volume into a region mask.
pub fn binarize(prob: &Array3<f64>, tau: f64, region: Region) -> Result<RegionMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0,1), got {tau}")));
    }
    Ok(RegionMask { mask: prob.mapv(|p| p > tau), region })
}

/// Fused labels plus the raw per-step probability volumes.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: LabelMap,
    pub p_wt: Array3<f64>,
    pub p_tc: Array3<f64>,
    pub p_et: Array3<f64>,
}

/// Runs the cascade over a preprocessed case. Patches walk a clamped grid,
/// per-step probabilities are averaged over overlaps, thresholded, and fused
/// with hierarchy clipping.
pub fn predict_case(
    model: &CascadeModel,
    store: &ParamStore,
    stack: &ModalityStack,
    opts: &InferSection,
) -> Result<Prediction> {
    let shape = stack.shape();
    let size = opts.patch_size;
    let stride = opts.effective_stride();
    let div = model.cfg.divisor();
    if size.iter().any(|&s| s % div != 0) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size:?} not divisible by {div} (cascade levels = {})",
            model.cfg.levels
        )));
    }
    let corners = grid_patches(shape, size, stride)?;

    let flair = stack.channel(Modality::Flair);
    let t1ce = stack.channel(Modality::T1ce);
    let mut per_step: [Vec<([usize; 3], Array3<f64>)>; 3] =
        [Vec::new(), Vec::new(), Vec::new()];
    for corner in corners {
        let f = extract3(flair, corner, size);
        let t = extract3(t1ce, corner, size);
        // Patches with empty support carry no evidence; they short-circuit
        // to zero probability instead of sampling the networks' response to
        // a constant input.
        if f.iter().all(|&v| v == 0.0) && t.iter().all(|&v| v == 0.0) {
            for probs in per_step.iter_mut() {
                probs.push((corner, Array3::zeros(f.raw_dim())));
            }
            continue;
        }
        let mut tape = Tape::new(false);
        let f = tape.input(f.insert_axis(Axis(0)));
        let t = tape.input(t.insert_axis(Axis(0)));
        let fwd = model.forward(&mut tape, store, f, t, opts.gating)?;
        for (k, probs) in per_step.iter_mut().enumerate() {
            probs.push((corner, tape.value3(fwd.probs[k]).to_owned()));
        }
    }

    let p_wt = assemble(&per_step[0], shape)?;
    let p_tc = assemble(&per_step[1], shape)?;
    let p_et = assemble(&per_step[2], shape)?;

    let wt = binarize(&p_wt, opts.thresholds[0], Region::Wt)?;
    let tc = binarize(&p_tc, opts.thresholds[1], Region::Tc)?;
    let et = binarize(&p_et, opts.thresholds[2], Region::Et)?;
    let mut labels = compose_labels(&wt, &tc, &et)?;
    labels.spacing = stack.spacing;

    Ok(Prediction { labels, p_wt, p_tc, p_et })
}
