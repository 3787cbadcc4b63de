//! Volume data model: multi-modal intensity stacks, label maps over the
//! {0,1,2,4} alphabet, and the nested region hierarchy WT ⊇ TC ⊇ ET.
//!
//! Label conventions follow the BraTS encoding: 1 = necrotic/non-enhancing
//! core, 2 = edema, 4 = enhancing tumor. The three evaluation regions are
//! unions of labels: WT = {1,2,4}, TC = {1,4}, ET = {4}.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel size in millimetres along the (d, h, w) array axes.
pub type Spacing = [f64; 3];

/// Default spacing when a data source does not carry one.
pub const DEFAULT_SPACING: Spacing = [1.0, 1.0, 1.0];

/// The label alphabet of a valid [`LabelMap`].
pub const LABEL_ALPHABET: [u8; 4] = [0, 1, 2, 4];

/// The four MRI channels, in stack order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Flair,
    T1,
    T1ce,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1ce, Modality::T2];

    /// Channel index inside a [`ModalityStack`].
    pub fn channel(self) -> usize {
        match self {
            Modality::Flair => 0,
            Modality::T1 => 1,
            Modality::T1ce => 2,
            Modality::T2 => 3,
        }
    }

    /// File-name suffix used by the dataset layout.
    pub fn suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
        }
    }
}

/// One of the three nested evaluation regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Whole tumor: labels {1, 2, 4}.
    #[serde(rename = "WT")]
    Wt,
    /// Tumor core: labels {1, 4}.
    #[serde(rename = "TC")]
    Tc,
    /// Enhancing tumor: label {4}.
    #[serde(rename = "ET")]
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    /// Whether a label value belongs to this region.
    pub fn contains_label(self, label: u8) -> bool {
        match self {
            Region::Wt => matches!(label, 1 | 2 | 4),
            Region::Tc => matches!(label, 1 | 4),
            Region::Et => label == 4,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        };
        f.write_str(s)
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WT" => Ok(Region::Wt),
            "TC" => Ok(Region::Tc),
            "ET" => Ok(Region::Et),
            other => Err(Error::InvalidArgument(format!(
                "unknown region '{other}', expected WT, TC or ET"
            ))),
        }
    }
}

/// Four co-registered intensity channels plus voxel spacing.
///
/// `data` is indexed `[channel, d, h, w]` with the channel order of
/// [`Modality::channel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStack {
    pub data: Array4<f64>,
    pub spacing: Spacing,
    pub case_id: String,
}

impl ModalityStack {
    pub fn new(data: Array4<f64>, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        if data.shape()[0] != 4 {
            return Err(Error::InvalidArgument(format!(
                "modality stack needs 4 channels, got {}",
                data.shape()[0]
            )));
        }
        check_spacing(spacing)?;
        Ok(ModalityStack { data, spacing, case_id: case_id.into() })
    }

    /// Spatial shape (d, h, w), shared by all four channels.
    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channel(&self, m: Modality) -> ArrayView3<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), m.channel())
    }

    /// True when every voxel of every channel is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Integer segmentation volume over the {0,1,2,4} alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub labels: Array3<u8>,
    pub spacing: Spacing,
}

impl LabelMap {
    /// Builds a label map, rejecting values outside the alphabet.
    pub fn new(labels: Array3<u8>, spacing: Spacing) -> Result<Self> {
        check_spacing(spacing)?;
        if let Some(&bad) = labels.iter().find(|v| !LABEL_ALPHABET.contains(v)) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(LabelMap { labels, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }
}

/// Binary mask of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub mask: Array3<bool>,
    pub region: Region,
}

impl RegionMask {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[0], s[1], s[2]]
    }

    /// Number of foreground voxels.
    pub fn volume(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "spacing components must be strictly positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Extracts the binary mask of one region from a label map.
pub fn region_mask_from_labels(labels: &LabelMap, region: Region) -> RegionMask {
    let mask = labels.labels.mapv(|v| region.contains_label(v));
    RegionMask { mask, region }
}

/// Fuses three region masks into a label map, enforcing the hierarchy by
/// clipping: voxels claimed by TC outside WT (or ET outside TC) are dropped.
///
/// The output carries the default (1,1,1) mm spacing; callers that know the
/// case spacing overwrite it.
pub fn compose_labels(wt: &RegionMask, tc: &RegionMask, et: &RegionMask) -> Result<LabelMap> {
    for (mask, want) in [(wt, Region::Wt), (tc, Region::Tc), (et, Region::Et)] {
        if mask.region != want {
            return Err(Error::InvalidArgument(format!(
                "compose_labels expects (WT, TC, ET) masks, got {} in the {} slot",
                mask.region, want
            )));
        }
    }
    if wt.shape() != tc.shape() || wt.shape() != et.shape() {
        return Err(Error::shape(wt.shape(), (tc.shape(), et.shape())));
    }

    let dims = wt.mask.raw_dim();
    let mut labels = Array3::<u8>::zeros(dims);
    ndarray::Zip::from(&mut labels)
        .and(&wt.mask)
        .and(&tc.mask)
        .and(&et.mask)
        .for_each(|out, &w, &t, &e| {
            let t = t && w; // clip TC to WT
            let e = e && t; // clip ET to (clipped) TC
            *out = if e {
                4
            } else if t {
                1
            } else if w {
                2
            } else {
                0
            };
        });
    LabelMap::new(labels, DEFAULT_SPACING)
}

/// Report produced by [`validate_hierarchy`].
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyReport {
    /// True when every voxel value lies in {0,1,2,4}.
    pub valid: bool,
    /// Voxel count per observed label value.
    pub counts: BTreeMap<u8, usize>,
}

/// Counts voxels per label value and checks the alphabet.
///
/// Operates on a raw array so that invalid data can be inspected; a
/// [`LabelMap`] is valid by construction.
pub fn validate_hierarchy(labels: &Array3<u8>) -> HierarchyReport {
    let mut counts = BTreeMap::new();
    for &v in labels.iter() {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    let valid = counts.keys().all(|v| LABEL_ALPHABET.contains(v));
    HierarchyReport { valid, counts }
}
