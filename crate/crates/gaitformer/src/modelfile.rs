//! Binary model files.
//!
//! All integers and floats are little-endian.
//!
//! | field            | type                                     |
//! |------------------|------------------------------------------|
//! | magic            | 8 bytes, `GAITFMR\0`                     |
//! | version          | u32, currently 1                         |
//! | variant tag      | u8 (0 full, 1 B, 2 C)                    |
//! | has normalization| u8 (0 or 1)                              |
//! | reserved         | 2 bytes, zero                            |
//! | seed             | u64                                      |
//! | normalization    | 18 f64 minima then 18 f64 maxima, if any |
//! | tensor count     | u32                                      |
//! | shape table      | per tensor: u32 name length, UTF-8 name, u32 rank, rank × u64 dims |
//! | payload          | every tensor's values as f64, table order |
//! | checksum         | u32 CRC-32 of all preceding bytes        |

use std::fs;
use std::path::Path;

use gaitformer_core::data::NormalizationStats;
use gaitformer_core::{GaitformerModel, ParamStore, Tensor, Variant, NUM_CHANNELS};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GAITFMR\0";
pub const VERSION: u32 = 1;

pub fn encode_model(model: &GaitformerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.variant().tag());
    out.push(u8::from(model.normalization.is_some()));
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&model.seed().to_le_bytes());
    if let Some(stats) = &model.normalization {
        for v in stats.min.iter().chain(&stats.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<GaitformerModel> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a gaitformer model file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Corrupt("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 12 };
    let tag = r.u8("variant")?;
    let variant =
        Variant::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("unknown variant tag {tag}")))?;
    let has_norm = match r.u8("normalization flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::Corrupt(format!("normalization flag {other}"))),
    };
    r.take(2, "reserved bytes")?;
    let seed = r.u64("seed")?;
    let normalization = if has_norm {
        let mut read = |what| (0..NUM_CHANNELS).map(|_| r.f64(what)).collect::<Result<Vec<_>>>();
        let min = read("normalization minima")?;
        let max = read("normalization maxima")?;
        Some(NormalizationStats { min, max })
    } else {
        None
    };

    let count = r.u32("tensor count")? as usize;
    let mut table = Vec::new();
    for _ in 0..count.min(body.len()) {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank.min(body.len()))
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    if table.len() != count {
        return Err(Error::Corrupt("tensor table truncated".into()));
    }
    let mut params = ParamStore::new();
    for (name, shape) in table {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= body.len() / 8)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` too large")))?;
        let data = (0..n).map(|_| r.f64("payload")).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        params.add(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }

    let mut model = GaitformerModel::zeros(variant);
    model
        .load_params(params)
        .map_err(|e| Error::ShapeMismatch {
            variant,
            reason: e.to_string(),
        })?;
    model.set_seed(seed);
    model.normalization = normalization;
    Ok(model)
}

pub fn save_model(path: &Path, model: &GaitformerModel) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(Error::io(path))
}

pub fn load_model(path: &Path) -> Result<GaitformerModel> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_model(&bytes)
}

/// Loads a model and checks that it is of `expected` variant.
pub fn load_model_expecting(path: &Path, expected: Variant) -> Result<GaitformerModel> {
    let model = load_model(path)?;
    if model.variant() != expected {
        return Err(Error::VariantMismatch {
            expected,
            found: model.variant(),
        });
    }
    Ok(model)
}
