//! Single-file model checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "MCDE"  u32 version  u64 manifest_len  manifest (UTF-8 JSON)
//! u32 array_count
//! per array: u32 name_len, name, u8 dtype (0 = f32, 1 = f64, 2 = u64),
//!            u32 ndim, u64 dims[ndim], raw values
//! ```
//!
//! The manifest holds the schema, the model configuration, the bin count and
//! the seed. Arrays hold the network parameters (f32), the grid cut-points and
//! CDF nodes (f64) and the CDF cumulative counts (u64), so a checkpoint loads
//! with no outside information and reproduces forward passes bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use macode_tensor::Tensor;

use crate::cdf::EmpiricalCdf;
use crate::dataset::Schema;
use crate::discretize::{cardinalities, BinGrid, Marginals};
use crate::error::{Error, Result};
use crate::model::{FittedModel, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"MCDE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub schema: Schema,
    pub config: ModelConfig,
    pub bins: usize,
    pub seed: u64,
    /// Named random streams derived from `seed` during training.
    pub streams: Vec<String>,
    pub parameter_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Array {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    U64(Vec<usize>, Vec<u64>),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, array: &Array) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    let (tag, shape) = match array {
        Array::F32(s, _) => (0u8, s),
        Array::F64(s, _) => (1, s),
        Array::U64(s, _) => (2, s),
    };
    out.push(tag);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    match array {
        Array::F32(_, v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Array::F64(_, v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Array::U64(_, v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

pub fn to_bytes(model: &FittedModel) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        schema: model.schema.clone(),
        config: model.config.clone(),
        bins: model.grid.num_bins(),
        seed: model.seed,
        streams: ["init", "train", "mask", "dropout"].map(String::from).to_vec(),
        parameter_count: model.params.num_parameters(),
    };
    let json = serde_json::to_vec(&manifest)?;

    let mut arrays: Vec<(String, Array)> = Vec::new();
    arrays.push(("grid.cuts".into(), Array::F64(vec![model.grid.cuts().len()], model.grid.cuts().to_vec())));
    for (j, cdf) in model.marginals.as_slice().iter().enumerate() {
        if let Some(c) = cdf {
            let k = c.nodes().len();
            arrays.push((format!("cdf{j}.nodes"), Array::F64(vec![k], c.nodes().to_vec())));
            arrays.push((format!("cdf{j}.counts"), Array::U64(vec![k], c.counts().to_vec())));
        }
    }
    for (name, t) in model.params.named() {
        arrays.push((format!("param.{name}"), Array::F32(t.shape().to_vec(), t.data().to_vec())));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    put_u32(&mut out, arrays.len() as u32);
    for (name, a) in &arrays {
        put_array(&mut out, name, a);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<(String, Array)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let tag = self.u8()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("array '{name}' is too large")))?;
        let array = match tag {
            0 => {
                let raw = self.take(count.saturating_mul(4))?;
                Array::F32(shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                let raw = self.take(count.saturating_mul(8))?;
                Array::F64(shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            2 => {
                let raw = self.take(count.saturating_mul(8))?;
                Array::U64(shape, raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            other => return Err(Error::Checkpoint(format!("array '{name}' has unknown dtype {other}"))),
        };
        Ok((name, array))
    }
}

/// Reads only the header and manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut r = Reader { buf: bytes, pos: 0 };
    manifest_from(&mut r)
}

fn manifest_from(r: &mut Reader) -> Result<Manifest> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u64()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
    if manifest.format_version != version {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

pub fn from_bytes(bytes: &[u8]) -> Result<FittedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let manifest = manifest_from(&mut r)?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        arrays.push(r.array()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut arrays = arrays.into_iter();
    let mut next = |want: &str| -> Result<Array> {
        match arrays.next() {
            Some((name, a)) if name == want => Ok(a),
            Some((name, _)) => Err(Error::Checkpoint(format!("expected array '{want}', found '{name}'"))),
            None => Err(Error::Checkpoint(format!("missing array '{want}'"))),
        }
    };

    let grid = match next("grid.cuts")? {
        Array::F64(_, cuts) => BinGrid::from_cuts(cuts)?,
        _ => return Err(Error::Checkpoint("grid cuts must be f64".into())),
    };
    if grid.num_bins() != manifest.bins {
        return Err(Error::Checkpoint("grid does not match the manifest bin count".into()));
    }
    let mut cdfs = Vec::with_capacity(manifest.schema.len());
    for (j, col) in manifest.schema.columns.iter().enumerate() {
        if !col.is_continuous() {
            cdfs.push(None);
            continue;
        }
        let nodes = match next(&format!("cdf{j}.nodes"))? {
            Array::F64(_, v) => v,
            _ => return Err(Error::Checkpoint(format!("cdf{j}.nodes must be f64"))),
        };
        let counts = match next(&format!("cdf{j}.counts"))? {
            Array::U64(_, v) => v,
            _ => return Err(Error::Checkpoint(format!("cdf{j}.counts must be u64"))),
        };
        cdfs.push(Some(EmpiricalCdf::from_parts(nodes, counts)?));
    }
    let marginals = Marginals::from_cdfs(&manifest.schema, cdfs)?;

    let mut named = Vec::new();
    for (name, a) in arrays {
        let Some(stripped) = name.strip_prefix("param.") else {
            return Err(Error::Checkpoint(format!("unexpected array '{name}'")));
        };
        match a {
            Array::F32(shape, data) => named.push((stripped.to_string(), Tensor::new(&shape, data)?)),
            _ => return Err(Error::Checkpoint(format!("parameter '{stripped}' must be f32"))),
        }
    }
    let cards = cardinalities(&manifest.schema, &grid);
    let params = ModelParams::from_named(&cards, &manifest.config, named)?;
    Ok(FittedModel {
        schema: manifest.schema,
        config: manifest.config,
        grid,
        marginals,
        params,
        seed: manifest.seed,
    })
}

pub fn save(model: &FittedModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<FittedModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
