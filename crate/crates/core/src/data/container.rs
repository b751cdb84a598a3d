//! BNNDATA1 dataset container.
//!
//! Little-endian layout:
//!
//! | offset | size        | field                                            |
//! |--------|-------------|--------------------------------------------------|
//! | 0      | 8           | magic `BNNDATA1`                                 |
//! | 8      | 4 (u32)     | M, number of images                              |
//! | 12     | 4 (u32)     | H                                                |
//! | 16     | 4 (u32)     | W                                                |
//! | 20     | 4 (u32)     | K, number of classes                             |
//! | 24     | 1 (u8)      | label dtype: bytes per label, 1, 2 or 4 (unsigned)|
//! | 25     | 7           | reserved, zero                                   |
//! | 32     | 4·M·H·W     | images, row-major f32                            |
//! | ...    | dtype·M     | labels                                           |
//!
//! Metadata lives in a plain-text manifest of `key=value` lines: `name`,
//! `provenance` and comma-separated `class_names`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ImageDataset, Provenance};
use crate::error::{BnnError, Result};

pub const DATA_MAGIC: &[u8; 8] = b"BNNDATA1";
const HEADER_LEN: usize = 32;

/// Dataset metadata that travels beside the binary container.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub provenance: Provenance,
    pub class_names: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BnnError::Config(format!("manifest line {}: expected key=value", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| BnnError::Config(format!("manifest missing {k:?}")))
        };
        Ok(Self {
            name: get("name")?,
            provenance: get("provenance")?.parse()?,
            class_names: get("class_names")?
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn for_dataset(ds: &ImageDataset) -> Self {
        Self {
            name: ds.name.clone(),
            provenance: ds.provenance,
            class_names: ds.class_names.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "name={}\nprovenance={}\nclass_names={}\n",
            self.name,
            self.provenance,
            self.class_names.join(",")
        )
    }
}

/// Serialises a dataset; pixels are stored as f32.
pub fn encode_dataset(ds: &ImageDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| BnnError::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    let k = ds.n_classes();
    let dtype: u8 = if k <= 1 << 8 {
        1
    } else if k <= 1 << 16 {
        2
    } else {
        4
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ds.images.len() + dtype as usize * ds.len());
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&to_u32(ds.len(), "image count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.height, "height")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.width, "width")?.to_le_bytes());
    out.extend_from_slice(&to_u32(k, "class count")?.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&[0; 7]);
    for &v in &ds.images {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        match dtype {
            1 => out.push(l as u8),
            2 => out.extend_from_slice(&(l as u16).to_le_bytes()),
            _ => out.extend_from_slice(&(l as u32).to_le_bytes()),
        }
    }
    Ok(out)
}

/// Parses a container, checking magic, lengths and label range.
pub fn decode_dataset(bytes: &[u8], manifest: &Manifest) -> Result<ImageDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(BnnError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != DATA_MAGIC {
        return Err(BnnError::Parse {
            offset: 0,
            message: format!("bad magic {:?}, expected BNNDATA1", String::from_utf8_lossy(&bytes[..8])),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let (m, h, w, k) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let dtype = bytes[24] as usize;
    if !matches!(dtype, 1 | 2 | 4) {
        return Err(BnnError::Parse {
            offset: 24,
            message: format!("unsupported label dtype width {dtype}"),
        });
    }
    if h == 0 || w == 0 {
        return Err(BnnError::Parse {
            offset: 12,
            message: "image dimensions must be positive".into(),
        });
    }
    if k != manifest.class_names.len() {
        return Err(BnnError::Parse {
            offset: 20,
            message: format!("container declares {k} classes, manifest names {}", manifest.class_names.len()),
        });
    }
    let pixel_bytes = m * h * w * 4;
    let expected = HEADER_LEN + pixel_bytes + m * dtype;
    if bytes.len() != expected {
        return Err(BnnError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let images = bytes[HEADER_LEN..HEADER_LEN + pixel_bytes]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect::<Vec<_>>();
    if let Some(pos) = images.iter().position(|v| !v.is_finite()) {
        return Err(BnnError::Parse {
            offset: HEADER_LEN + 4 * pos,
            message: "non-finite pixel".into(),
        });
    }
    let label_start = HEADER_LEN + pixel_bytes;
    let mut labels = Vec::with_capacity(m);
    for (i, c) in bytes[label_start..].chunks_exact(dtype).enumerate() {
        let l = match dtype {
            1 => c[0] as usize,
            2 => u16::from_le_bytes([c[0], c[1]]) as usize,
            _ => u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize,
        };
        if l >= k {
            return Err(BnnError::Parse {
                offset: label_start + i * dtype,
                message: format!("label {l} outside 0..{k}"),
            });
        }
        labels.push(l);
    }
    ImageDataset::new(
        manifest.name.clone(),
        manifest.provenance,
        manifest.class_names.clone(),
        (h, w),
        images,
        labels,
    )
}

pub fn load_dataset(path: impl AsRef<Path>, manifest: &Manifest) -> Result<ImageDataset> {
    decode_dataset(&fs::read(path)?, manifest)
}

/// Writes the container and, beside it, `<path>.manifest`.
pub fn save_dataset(ds: &ImageDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)?)?;
    let mut manifest_path = path.as_os_str().to_owned();
    manifest_path.push(".manifest");
    fs::write(manifest_path, Manifest::for_dataset(ds).to_text())?;
    Ok(())
}
