//! Weight checkpoints: a text manifest followed by raw little-endian f32 arrays.
//!
//! ```text
//! GHOSTFORGE-CKPT 1
//! arch {"name":...}            (optional, one line of JSON)
//! tensor <name> NxCxHxW <byte offset> <element count>
//! ...
//! end
//! <payload>
//! ```
//! Offsets are relative to the start of the payload and contiguous.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::arch::{ArchSpec, Model};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &str = "GHOSTFORGE-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Option<ArchSpec>,
    /// Every stored array, values exactly representable as f32.
    pub tensors: IndexMap<String, Tensor>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as Scalar)
}

impl Checkpoint {
    /// Snapshot of a model's weights, rounded to f32.
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            arch: Some(model.arch.clone()),
            tensors: model
                .store
                .iter()
                .map(|(name, e)| (name.to_string(), quantize(&e.value)))
                .collect(),
        }
    }

    /// Rebuilds the model, using the stored arch.
    pub fn to_model(&self) -> Result<Model> {
        let arch = self
            .arch
            .clone()
            .ok_or_else(|| bad("no arch line; pass an arch explicitly"))?;
        self.to_model_with(arch)
    }

    pub fn to_model_with(&self, arch: ArchSpec) -> Result<Model> {
        let program = arch.lower()?;
        let mut store = ParamStore::new();
        for d in &program.decls {
            let t = self
                .tensors
                .get(&d.name)
                .ok_or_else(|| bad(format!("missing array `{}`", d.name)))?;
            if t.shape() != d.shape {
                return Err(bad(format!(
                    "array `{}` is {} but the arch declares {}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
            store.insert(&d.name, t.clone(), d.trainable);
        }
        Model::with_store(arch, store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        if let Some(arch) = &self.arch {
            header.push_str(&format!("arch {}\n", arch.to_json_line()?));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(bad(format!(
                    "array name `{name}` must be non-empty without whitespace"
                )));
            }
            let s = t.shape();
            header.push_str(&format!(
                "tensor {name} {}x{}x{}x{} {offset} {}\n",
                s.n,
                s.c,
                s.h,
                s.w,
                t.len()
            ));
            offset += 4 * t.len();
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for t in self.tensors.values() {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != format!("{MAGIC} {VERSION}") {
            return Err(bad(format!("expected `{MAGIC} {VERSION}` magic line")));
        }
        let mut arch = None;
        let mut manifest = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(json) = line.strip_prefix("arch ") {
                arch = Some(ArchSpec::from_json(json)?);
                continue;
            }
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 5 || f[0] != "tensor" {
                return Err(bad(format!("unexpected header line `{line}`")));
            }
            let dims: Vec<usize> = f[2]
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{}`", f[2]))))
                .collect::<Result<_>>()?;
            if dims.len() != 4 {
                return Err(bad(format!("shape `{}` must have 4 axes", f[2])));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(format!("bad number `{s}`")))
            };
            manifest.push((
                f[1].to_string(),
                Shape::new(dims[0], dims[1], dims[2], dims[3]),
                num(f[3])?,
                num(f[4])?,
            ));
        }
        let payload = &bytes[pos..];
        let mut tensors = IndexMap::new();
        let mut expected_offset = 0;
        for (name, shape, offset, count) in manifest {
            if offset != expected_offset {
                return Err(bad(format!(
                    "array `{name}` offset {offset} is not contiguous"
                )));
            }
            if count != shape.numel() {
                return Err(bad(format!(
                    "array `{name}` count {count} does not match shape {shape}"
                )));
            }
            let raw = payload
                .get(offset..offset + 4 * count)
                .ok_or_else(|| bad(format!("payload truncated in `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Scalar)
                .collect();
            expected_offset += 4 * count;
            if tensors
                .insert(name.clone(), Tensor::from_vec(shape, data)?)
                .is_some()
            {
                return Err(bad(format!("duplicate array `{name}`")));
            }
        }
        if payload.len() != expected_offset {
            return Err(bad("trailing bytes after the last array"));
        }
        Ok(Checkpoint { arch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
