//! Per-sample binary format.
//!
//! ```text
//! magic    4 bytes  "VPSD"
//! version  u16 LE
//! rank     u8
//! dims     rank × u32 LE
//! payload  prod(dims) × f32 LE, row-major
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Array4};

use super::{DatasetManifest, PoseSequence, Sample, Split, VideoClip};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VPSD";
pub const FORMAT_VERSION: u16 = 1;
pub(crate) const MANIFEST_HEADER: [&str; 5] = ["sample_id", "clip_path", "pose_path", "label", "split"];

pub fn write_array(path: &Path, dims: &[usize], values: impl IntoIterator<Item = f32>) -> Result<()> {
    let count: usize = dims.iter().product();
    let mut buf = Vec::with_capacity(7 + 4 * dims.len() + 4 * count);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(u8::try_from(dims.len()).map_err(|_| Error::ShapeMismatch("rank > 255".into()))?);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::ShapeMismatch(format!("dim {d} > u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    let mut written = 0;
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
        written += 1;
    }
    if written != count {
        return Err(Error::ShapeMismatch(format!(
            "{} values for dims {dims:?}",
            written
        )));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses a file written by [`write_array`]: `(dims, payload)`.
pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_array(&bytes).map_err(|e| match e {
        Error::MalformedHeader(m) => Error::MalformedHeader(format!("{}: {m}", path.display())),
        Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse_array(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 7 {
        return Err(Error::MalformedHeader(format!("{} bytes, header needs 7", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let rank = bytes[6] as usize;
    let header_len = 7 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::MalformedHeader("truncated dims".into()));
    }
    let dims: Vec<usize> = bytes[7..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = &bytes[header_len..];
    let expected: usize = dims.iter().product();
    if payload.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "header dims {dims:?} need {} payload bytes, found {}",
            expected * 4,
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("payload".into()));
    }
    Ok((dims, values))
}

pub fn load_sample(clip_path: &Path, pose_path: &Path) -> Result<(VideoClip, PoseSequence)> {
    let (cd, cv) = read_array(clip_path)?;
    if cd.len() != 4 {
        return Err(Error::ShapeMismatch(format!("clip rank {} != 4", cd.len())));
    }
    let frames = Array4::from_shape_vec((cd[0], cd[1], cd[2], cd[3]), cv)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let (pd, pv) = read_array(pose_path)?;
    if pd.len() != 3 {
        return Err(Error::ShapeMismatch(format!("pose rank {} != 3", pd.len())));
    }
    let coords = Array3::from_shape_vec((pd[0], pd[1], pd[2]), pv)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok((VideoClip::new(frames)?, PoseSequence::new(coords)?))
}

/// Loads every sample of `split` into memory, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .entries(split)
        .map(|e| {
            let (clip, pose) =
                load_sample(&manifest.resolve(&e.clip_path), &manifest.resolve(&e.pose_path))?;
            Ok(Sample {
                id: e.sample_id.clone(),
                label: e.label,
                clip,
                pose,
            })
        })
        .collect()
}
