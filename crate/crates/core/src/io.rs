//! Minimal NIfTI-1 I/O and the on-disk dataset layout.
//!
//! Volumes are stored as `.nii` / `.nii.gz` with a plain 348-byte NIfTI-1
//! header. The writer emits little-endian float32 (images) or uint8 (labels)
//! with an identity-scaled sform; gzip streams carry a zeroed mtime so that
//! identical volumes produce byte-identical files. The reader handles the
//! common little-endian scalar datatypes and applies `scl_slope`/`scl_inter`.
//!
//! Dataset layout: `<root>/<case_id>/<case_id>_{flair,t1,t1ce,t2,seg}.nii.gz`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Modality, ModalityStack, Spacing};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: u32 = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        Ok(Box::new(GzEncoder::new(file, Compression::default())))
    } else {
        Ok(Box::new(file))
    }
}

/// Reads a volume as f64 together with its voxel spacing (d, h, w order).
pub fn read_volume(path: &Path) -> Result<(Array3<f64>, Spacing)> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(Error::Nifti(format!("{}: file shorter than a NIfTI-1 header", path.display())));
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[0..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Nifti(format!(
            "{}: unsupported header (sizeof_hdr = {sizeof_hdr}; only little-endian NIfTI-1 is supported)",
            path.display()
        )));
    }
    let magic = &bytes[344..348];
    if magic != MAGIC_SINGLE {
        return Err(Error::Nifti(format!(
            "{}: unsupported magic {:?} (expected single-file 'n+1')",
            path.display(),
            magic
        )));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = LittleEndian::read_i16(&bytes[40 + 2 * i..42 + 2 * i]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("{}: bad dim[0] = {ndim}", path.display())));
    }
    // Accept >3 dims only when the extra ones are singleton.
    if ndim > 3 && dim[4..=(ndim as usize)].iter().any(|&d| d > 1) {
        return Err(Error::Nifti(format!("{}: only 3-D volumes are supported", path.display())));
    }
    let nx = dim[1].max(1) as usize;
    let ny = if ndim >= 2 { dim[2].max(1) as usize } else { 1 };
    let nz = if ndim >= 3 { dim[3].max(1) as usize } else { 1 };

    let datatype = LittleEndian::read_i16(&bytes[70..72]);
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = LittleEndian::read_f32(&bytes[76 + 4 * i..80 + 4 * i]);
    }
    let spacing_of = |p: f32| if p > 0.0 { p as f64 } else { 1.0 };
    let spacing: Spacing = [spacing_of(pixdim[3]), spacing_of(pixdim[2]), spacing_of(pixdim[1])];

    let vox_offset = LittleEndian::read_f32(&bytes[108..112]) as usize;
    let scl_slope = LittleEndian::read_f32(&bytes[112..116]);
    let scl_inter = LittleEndian::read_f32(&bytes[116..120]);

    let n = nx * ny * nz;
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::Nifti(format!("{}: unsupported datatype {other}", path.display())))
        }
    };
    let data = bytes
        .get(vox_offset..vox_offset + n * elem)
        .ok_or_else(|| Error::Nifti(format!("{}: truncated voxel data", path.display())))?;

    let mut values = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => values.extend(data.iter().map(|&b| b as f64)),
        DT_INT16 => {
            values.extend(data.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f64))
        }
        DT_UINT16 => {
            values.extend(data.chunks_exact(2).map(|c| LittleEndian::read_u16(c) as f64))
        }
        DT_INT32 => {
            values.extend(data.chunks_exact(4).map(|c| LittleEndian::read_i32(c) as f64))
        }
        DT_FLOAT32 => {
            values.extend(data.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64))
        }
        DT_FLOAT64 => values.extend(data.chunks_exact(8).map(LittleEndian::read_f64)),
        _ => unreachable!(),
    }
    if scl_slope != 0.0 && !(scl_slope == 1.0 && scl_inter == 0.0) {
        for v in &mut values {
            *v = *v * scl_slope as f64 + scl_inter as f64;
        }
    }

    // NIfTI stores x (= w) fastest; our [d,h,w] C-order array matches that
    // exactly, so the raw order can be reused as-is.
    let array = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))?;
    Ok((array, spacing))
}

fn write_header<W: Write>(
    w: &mut W,
    shape: [usize; 3],
    spacing: Spacing,
    datatype: i16,
    bitpix: i16,
) -> Result<()> {
    let [nd, nh, nw] = shape;
    let mut header = [0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut header[0..4], HEADER_SIZE as i32);
    header[38] = b'r'; // regular

    let dim: [i16; 8] = [3, nw as i16, nh as i16, nd as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut header[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut header[70..72], datatype);
    LittleEndian::write_i16(&mut header[72..74], bitpix);
    let pixdim: [f32; 8] =
        [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut header[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut header[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut header[112..116], 1.0); // scl_slope
    LittleEndian::write_f32(&mut header[116..120], 0.0); // scl_inter
    header[123] = 2; // xyzt_units: millimetres

    // Identity-orientation sform scaled by the voxel size.
    LittleEndian::write_i16(&mut header[254..256], 1); // sform_code
    let srow_x: [f32; 4] = [spacing[2] as f32, 0.0, 0.0, 0.0];
    let srow_y: [f32; 4] = [0.0, spacing[1] as f32, 0.0, 0.0];
    let srow_z: [f32; 4] = [0.0, 0.0, spacing[0] as f32, 0.0];
    for (base, row) in [(280, srow_x), (296, srow_y), (312, srow_z)] {
        for (i, v) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut header[base + 4 * i..base + 4 * (i + 1)], *v);
        }
    }
    header[344..348].copy_from_slice(MAGIC_SINGLE);

    w.write_all(&header)?;
    w.write_all(&[0u8; 4])?; // no extensions
    Ok(())
}

fn shape3(a: &Array3<impl Sized>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// Writes a volume as float32.
pub fn write_volume_f32(path: &Path, volume: &Array3<f64>, spacing: Spacing) -> Result<()> {
    let mut w = open_writer(path)?;
    write_header(&mut w, shape3(volume), spacing, DT_FLOAT32, 32)?;
    for &v in volume.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a label volume as uint8.
pub fn write_volume_u8(path: &Path, volume: &Array3<u8>, spacing: Spacing) -> Result<()> {
    let mut w = open_writer(path)?;
    write_header(&mut w, shape3(volume), spacing, DT_UINT8, 8)?;
    let slice = volume.as_slice().expect("label arrays are standard layout");
    w.write_all(slice)?;
    w.flush()?;
    Ok(())
}

/// Reads a label map, requiring integral values in the {0,1,2,4} alphabet.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let (array, spacing) = read_volume(path)?;
    let mut labels = Array3::<u8>::zeros(array.raw_dim());
    for (out, &v) in labels.iter_mut().zip(array.iter()) {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Nifti(format!(
                "{}: non-integral label value {v}",
                path.display()
            )));
        }
        *out = v as u8;
    }
    LabelMap::new(labels, spacing)
}

/// Path of one modality (or the segmentation) inside a case directory.
pub fn case_file(case_dir: &Path, case_id: &str, suffix: &str) -> PathBuf {
    case_dir.join(format!("{case_id}_{suffix}.nii.gz"))
}

/// Writes a case in the dataset layout, creating `<root>/<case_id>/`.
pub fn write_case(root: &Path, stack: &ModalityStack, labels: Option<&LabelMap>) -> Result<()> {
    let case_dir = root.join(&stack.case_id);
    for m in Modality::ALL {
        let channel = stack.channel(m).to_owned();
        write_volume_f32(&case_file(&case_dir, &stack.case_id, m.suffix()), &channel, stack.spacing)?;
    }
    if let Some(labels) = labels {
        write_volume_u8(&case_file(&case_dir, &stack.case_id, "seg"), &labels.labels, labels.spacing)?;
    }
    Ok(())
}

/// Reads a case directory back into a stack plus optional segmentation.
pub fn read_case(case_dir: &Path) -> Result<(ModalityStack, Option<LabelMap>)> {
    let case_id = case_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Dataset(format!("bad case directory {}", case_dir.display())))?
        .to_string();

    let mut channels = Vec::with_capacity(4);
    let mut spacing: Option<Spacing> = None;
    for m in Modality::ALL {
        let path = case_file(case_dir, &case_id, m.suffix());
        let (vol, sp) = read_volume(&path)?;
        if let Some(prev) = spacing {
            if prev != sp {
                return Err(Error::Dataset(format!(
                    "{case_id}: spacing differs across modalities ({prev:?} vs {sp:?})"
                )));
            }
        }
        spacing = Some(sp);
        channels.push(vol);
    }
    let first_shape = shape3(&channels[0]);
    if channels.iter().any(|c| shape3(c) != first_shape) {
        return Err(Error::Dataset(format!("{case_id}: modality shapes differ")));
    }

    let views: Vec<_> = channels.iter().map(|c| c.view().insert_axis(Axis(0))).collect();
    let data: Array4<f64> = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::Dataset(format!("{case_id}: {e}")))?;
    let stack = ModalityStack::new(data, spacing.unwrap(), &case_id)?;

    let seg_path = case_file(case_dir, &case_id, "seg");
    let labels = if seg_path.exists() {
        let map = read_label_map(&seg_path)?;
        if map.shape() != first_shape {
            return Err(Error::Dataset(format!("{case_id}: segmentation shape differs")));
        }
        Some(map)
    } else {
        None
    };
    Ok((stack, labels))
}

/// Case directories under a dataset root, sorted by name for determinism.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("{}: {e}", root.display())))?
    {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!("{}: no case directories found", root.display())));
    }
    Ok(dirs)
}
