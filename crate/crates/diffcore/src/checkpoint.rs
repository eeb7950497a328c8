//! Binary checkpoint container.
//!
//! Layout: `b"QA2MN"`, format version byte, manifest length as u64 LE,
//! UTF-8 manifest, then the tensor blob. Each manifest line is
//! `name<TAB>shape<TAB>dtype<TAB>offset` where `shape` is `x`-joined
//! (`-` for scalars), `dtype` is `f64` or `f32`, and `offset` is the byte
//! offset into the blob. Values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{DiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"QA2MN";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            other => Err(DiffError::Checkpoint(format!("unknown dtype {other}"))),
        }
    }
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| DiffError::Checkpoint(format!("bad shape {s}")))
        })
        .collect()
}

pub fn to_bytes(params: &ParamStore, dtype: Dtype) -> Vec<u8> {
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for (name, tensor) in params.iter() {
        manifest.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            format_shape(tensor.shape()),
            dtype.as_str(),
            blob.len()
        ));
        for &v in tensor.data() {
            match dtype {
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 9 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blob);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |msg: &str| DiffError::Checkpoint(msg.to_string());
    if bytes.len() < MAGIC.len() + 9 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing QA2MN magic header"));
    }
    let version = bytes[MAGIC.len()];
    if version != FORMAT_VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported format version {version}")));
    }
    let len_start = MAGIC.len() + 1;
    let manifest_len =
        u64::from_le_bytes(bytes[len_start..len_start + 8].try_into().expect("8 bytes")) as usize;
    let manifest_start = len_start + 8;
    let blob_start = manifest_start
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest = std::str::from_utf8(&bytes[manifest_start..blob_start])
        .map_err(|_| bad("manifest is not UTF-8"))?;
    let blob = &bytes[blob_start..];

    let mut store = ParamStore::new();
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, dtype, offset] = fields[..] else {
            return Err(DiffError::Checkpoint(format!("bad manifest line {line:?}")));
        };
        let shape = parse_shape(shape)?;
        let dtype = Dtype::parse(dtype)?;
        let offset: usize = offset
            .parse()
            .map_err(|_| DiffError::Checkpoint(format!("bad offset in {line:?}")))?;
        let numel: usize = shape.iter().product();
        let end = offset + numel * dtype.width();
        if end > blob.len() {
            return Err(DiffError::Checkpoint(format!("tensor {name} overruns blob")));
        }
        let raw = &blob[offset..end];
        let data: Vec<f64> = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, params: &ParamStore, dtype: Dtype) -> Result<()> {
    fs::write(path, to_bytes(params, dtype))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    from_bytes(&fs::read(path)?)
}
