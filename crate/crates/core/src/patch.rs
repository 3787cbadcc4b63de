//! Sub-volume sampling for training and grid extraction/reassembly for
//! sliding-window inference.
//!
//! Grid corners step by `stride` and are clamped so the final patch along
//! each axis ends exactly at the volume boundary, which guarantees full
//! coverage. Reassembly averages overlapping voxels uniformly, so extracting
//! a grid from a volume and assembling it back is an exact identity.

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4};
use rand::Rng;

use crate::error::{Error, Result};

/// One training patch with its source-volume corner.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub images: Array4<f64>,
    pub labels: Array3<u8>,
    pub corner: [usize; 3],
}

fn check_fits(size: [usize; 3], shape: [usize; 3]) -> Result<()> {
    if size.iter().zip(&shape).any(|(p, v)| *p == 0 || p > v) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size:?} does not fit into volume shape {shape:?}"
        )));
    }
    Ok(())
}

/// Draws a uniformly random patch corner and crops images and labels
/// identically. Deterministic given the RNG state.
pub fn sample_patch(
    images: ArrayView4<'_, f64>,
    labels: ArrayView3<'_, u8>,
    size: [usize; 3],
    rng: &mut impl Rng,
) -> Result<PatchSample> {
    let sh = labels.shape();
    let shape = [sh[0], sh[1], sh[2]];
    check_fits(size, shape)?;
    let mut corner = [0usize; 3];
    for axis in 0..3 {
        let max = shape[axis] - size[axis];
        corner[axis] = if max == 0 { 0 } else { rng.random_range(0..=max) };
    }
    Ok(PatchSample {
        images: extract4(images, corner, size),
        labels: extract3_u8(labels, corner, size),
        corner,
    })
}

pub fn extract3(volume: ArrayView3<'_, f64>, corner: [usize; 3], size: [usize; 3]) -> Array3<f64> {
    volume
        .slice(s![
            corner[0]..corner[0] + size[0],
            corner[1]..corner[1] + size[1],
            corner[2]..corner[2] + size[2]
        ])
        .to_owned()
}

pub fn extract3_u8(volume: ArrayView3<'_, u8>, corner: [usize; 3], size: [usize; 3]) -> Array3<u8> {
    volume
        .slice(s![
            corner[0]..corner[0] + size[0],
            corner[1]..corner[1] + size[1],
            corner[2]..corner[2] + size[2]
        ])
        .to_owned()
}

pub fn extract4(stack: ArrayView4<'_, f64>, corner: [usize; 3], size: [usize; 3]) -> Array4<f64> {
    stack
        .slice(s![
            ..,
            corner[0]..corner[0] + size[0],
            corner[1]..corner[1] + size[1],
            corner[2]..corner[2] + size[2]
        ])
        .to_owned()
}

/// Grid corners covering the whole volume. Along each axis corners advance by
/// `stride`; the last corner is clamped to `shape - size`.
pub fn grid_patches(
    shape: [usize; 3],
    size: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<[usize; 3]>> {
    check_fits(size, shape)?;
    if stride.iter().zip(&size).any(|(st, sz)| *st == 0 || st > sz) {
        return Err(Error::InvalidArgument(format!(
            "stride {stride:?} must satisfy 0 < stride <= size {size:?}"
        )));
    }
    let mut per_axis: [Vec<usize>; 3] = Default::default();
    for axis in 0..3 {
        let last = shape[axis] - size[axis];
        let mut c = 0;
        loop {
            per_axis[axis].push(c);
            if c == last {
                break;
            }
            c = (c + stride[axis]).min(last);
        }
    }
    let mut corners = Vec::new();
    for &d in &per_axis[0] {
        for &h in &per_axis[1] {
            for &w in &per_axis[2] {
                corners.push([d, h, w]);
            }
        }
    }
    Ok(corners)
}

/// Reassembles per-patch values into a full volume, averaging overlaps
/// uniformly. Every voxel must be covered by at least one patch.
pub fn assemble(
    patches: &[([usize; 3], Array3<f64>)],
    shape: [usize; 3],
) -> Result<Array3<f64>> {
    let mut sum = Array3::<f64>::zeros(shape);
    let mut count = Array3::<f64>::zeros(shape);
    for (corner, patch) in patches {
        let ps = patch.shape();
        if corner.iter().zip(ps).zip(&shape).any(|((c, p), v)| c + p > *v) {
            return Err(Error::InvalidArgument(format!(
                "patch at {corner:?} with shape {ps:?} exceeds volume {shape:?}"
            )));
        }
        let mut sum_view = sum.slice_mut(s![
            corner[0]..corner[0] + ps[0],
            corner[1]..corner[1] + ps[1],
            corner[2]..corner[2] + ps[2]
        ]);
        sum_view += patch;
        let mut count_view = count.slice_mut(s![
            corner[0]..corner[0] + ps[0],
            corner[1]..corner[1] + ps[1],
            corner[2]..corner[2] + ps[2]
        ]);
        count_view += 1.0;
    }
    if count.iter().any(|&c| c == 0.0) {
        return Err(Error::InvalidArgument(
            "assembled patches do not cover every voxel".into(),
        ));
    }
    Ok(sum / &count)
}
