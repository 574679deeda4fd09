//! SVOL v1: u64 little-endian header length, UTF-8 JSON header, then a raw
//! little-endian payload (channel-major, then H, W, D).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{channels_to_labels, labels_to_channels, SegmentationMask, Volume, CHANNEL_NAMES};
use crate::error::{Error, Result};

pub const SVOL_MAGIC: &str = "SVOL";
pub const SVOL_VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    shape: Vec<usize>,
    spacing: [f64; 3],
    dtype: String,
    #[serde(default)]
    channel_names: Vec<String>,
}

fn write_file(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + payload.len());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "file shorter than the length prefix"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if len > MAX_HEADER || 8 + len as usize > bytes.len() {
        return Err(Error::format(path, format!("corrupt header length {len}")));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + len as usize])
        .map_err(|e| Error::format(path, format!("corrupt header: {e}")))?;
    if header.magic != SVOL_MAGIC || header.version != SVOL_VERSION {
        return Err(Error::format(path, format!("not SVOL v1 (magic {:?}, version {})", header.magic, header.version)));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::format(path, format!("invalid shape {:?}", header.shape)));
    }
    if header.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::format(path, format!("invalid spacing {:?}", header.spacing)));
    }
    let payload = bytes[8 + len as usize..].to_vec();
    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(Error::format(path, format!("unsupported dtype {other}"))),
    };
    let expect = header.shape.iter().product::<usize>() * elem;
    if payload.len() != expect {
        return Err(Error::format(
            path,
            format!("corrupt payload: header declares {} values, payload holds {} bytes", expect / elem, payload.len()),
        ));
    }
    Ok((header, payload))
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    volume.validate()?;
    let [h, w, d] = volume.shape;
    let header = Header {
        magic: SVOL_MAGIC.into(),
        version: SVOL_VERSION,
        shape: vec![volume.channels(), h, w, d],
        spacing: volume.spacing,
        dtype: "f32".into(),
        channel_names: volume.channel_names.clone(),
    };
    let payload: Vec<u8> = volume.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path.as_ref(), &header, &payload)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (h, payload) = read_file(path)?;
    if h.dtype != "f32" || h.shape.len() != 4 {
        return Err(Error::format(path, format!("expected f32 [C, H, W, D], got {} {:?}", h.dtype, h.shape)));
    }
    if h.channel_names.len() != h.shape[0] {
        return Err(Error::format(path, format!("{} channel names for {} channels", h.channel_names.len(), h.shape[0])));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Volume::new([h.shape[1], h.shape[2], h.shape[3]], h.spacing, h.channel_names, data)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Discrete label map as u8 `[H, W, D]`.
pub fn save_mask(mask: &SegmentationMask, path: impl AsRef<Path>) -> Result<()> {
    labels_to_channels(&mask.labels)?;
    let header = Header {
        magic: SVOL_MAGIC.into(),
        version: SVOL_VERSION,
        shape: mask.shape.to_vec(),
        spacing: mask.spacing,
        dtype: "u8".into(),
        channel_names: vec!["label".into()],
    };
    write_file(path.as_ref(), &header, &mask.labels)
}

/// Channel masks (ET, WT, TC) as u8 `[3, H, W, D]`.
pub fn save_channel_mask(ch: &[Vec<bool>; 3], shape: [usize; 3], spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let n: usize = shape.iter().product();
    if ch.iter().any(|c| c.len() != n) {
        return Err(Error::Shape(format!("channel masks do not match shape {shape:?}")));
    }
    let header = Header {
        magic: SVOL_MAGIC.into(),
        version: SVOL_VERSION,
        shape: vec![3, shape[0], shape[1], shape[2]],
        spacing,
        dtype: "u8".into(),
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let payload: Vec<u8> = ch.iter().flat_map(|c| c.iter().map(|&b| b as u8)).collect();
    write_file(path.as_ref(), &header, &payload)
}

/// Loads a discrete or channel-form mask as a label map.
pub fn load_mask(path: impl AsRef<Path>) -> Result<SegmentationMask> {
    let path = path.as_ref();
    let (h, payload) = read_file(path)?;
    if h.dtype != "u8" {
        return Err(Error::format(path, format!("mask dtype must be u8, got {}", h.dtype)));
    }
    let fmt = |e: Error| Error::format(path, e.to_string());
    match h.shape.as_slice() {
        &[a, b, c] => {
            labels_to_channels(&payload).map_err(fmt)?;
            SegmentationMask::new([a, b, c], h.spacing, payload).map_err(fmt)
        }
        &[3, a, b, c] => {
            if payload.iter().any(|&v| v > 1) {
                return Err(Error::format(path, "channel masks must be 0/1"));
            }
            let n = a * b * c;
            let ch = [0, 1, 2].map(|k| payload[k * n..(k + 1) * n].iter().map(|&v| v == 1).collect::<Vec<_>>());
            let (labels, _) = channels_to_labels(&ch)?;
            SegmentationMask::new([a, b, c], h.spacing, labels).map_err(fmt)
        }
        s => Err(Error::format(path, format!("mask shape must be [H, W, D] or [3, H, W, D], got {s:?}"))),
    }
}

/// Element type of a raw little-endian input file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawDType {
    U8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl std::str::FromStr for RawDType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "u8" => RawDType::U8,
            "i16" => RawDType::I16,
            "u16" => RawDType::U16,
            "i32" => RawDType::I32,
            "f32" => RawDType::F32,
            "f64" => RawDType::F64,
            _ => return Err(Error::InvalidArgument(format!("unknown raw dtype {s}"))),
        })
    }
}

impl RawDType {
    fn size(self) -> usize {
        match self {
            RawDType::U8 => 1,
            RawDType::I16 | RawDType::U16 => 2,
            RawDType::I32 | RawDType::F32 => 4,
            RawDType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            RawDType::U8 => b[0] as f64,
            RawDType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            RawDType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            RawDType::I32 => i32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            RawDType::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            RawDType::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        }
    }
}

/// Decodes a headerless little-endian array `[C, H, W, D]` into a volume.
pub fn convert_raw(bytes: &[u8], dtype: RawDType, channels: usize, shape: [usize; 3], spacing: [f64; 3], channel_names: Option<Vec<String>>) -> Result<Volume> {
    let n = channels * shape.iter().product::<usize>();
    if bytes.len() != n * dtype.size() {
        return Err(Error::InvalidArgument(format!(
            "raw input has {} bytes, expected {} ({n} x {:?})",
            bytes.len(),
            n * dtype.size(),
            dtype
        )));
    }
    let data: Vec<f32> = bytes.chunks_exact(dtype.size()).map(|b| dtype.decode(b) as f32).collect();
    let mut v = Volume::zeros(channels, shape);
    if let Some(names) = channel_names {
        v.channel_names = names;
    }
    v.spacing = spacing;
    v.data = data;
    v.validate()?;
    Ok(v)
}
