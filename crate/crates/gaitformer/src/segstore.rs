//! Columnar binary store of segments.
//!
//! Little-endian throughout:
//!
//! | field        | type                                                  |
//! |--------------|-------------------------------------------------------|
//! | magic        | 8 bytes, `GFSEGS\0\0`                                 |
//! | version      | u32, currently 1                                      |
//! | channels     | u32 (18)                                              |
//! | window       | u32                                                   |
//! | count        | u64, number of segments `n`                           |
//! | labels       | n × u8                                                |
//! | starts       | n × u64, start sample within the walk                 |
//! | walk refs    | n × (u32 length, UTF-8 bytes)                         |
//! | subject refs | n × (u32 length, UTF-8 bytes)                         |
//! | values       | n × channels × window f64, each segment row-major     |

use std::fs;
use std::path::Path;

use gaitformer_core::data::Segment;
use gaitformer_core::{Tensor, NUM_CHANNELS};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GFSEGS\0\0";
pub const VERSION: u32 = 1;

pub fn encode_segments(segments: &[Segment]) -> Result<Vec<u8>> {
    let window = segments.first().map_or(0, |s| s.values.shape()[1]);
    if let Some(s) = segments
        .iter()
        .find(|s| s.values.shape() != [NUM_CHANNELS, window])
    {
        return Err(Error::Core(gaitformer_core::Error::shape(
            "segment store",
            s.values.shape(),
            &[NUM_CHANNELS, window],
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(NUM_CHANNELS as u32).to_le_bytes());
    out.extend_from_slice(&(window as u32).to_le_bytes());
    out.extend_from_slice(&(segments.len() as u64).to_le_bytes());
    out.extend(segments.iter().map(|s| s.label));
    for s in segments {
        out.extend_from_slice(&(s.start_sample as u64).to_le_bytes());
    }
    for field in [|s: &Segment| s.walk_ref.clone(), |s: &Segment| s.subject_ref.clone()] {
        for s in segments {
            let text = field(s);
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
    }
    for s in segments {
        for v in s.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt("segment store truncated".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

pub fn decode_segments(bytes: &[u8]) -> Result<Vec<Segment>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(Error::Corrupt("not a segment store".into()));
    }
    let version = le_u32(take(bytes, &mut pos, 4)?);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let channels = le_u32(take(bytes, &mut pos, 4)?) as usize;
    let window = le_u32(take(bytes, &mut pos, 4)?) as usize;
    let n = le_u64(take(bytes, &mut pos, 8)?) as usize;
    if channels != NUM_CHANNELS {
        return Err(Error::Corrupt(format!("{channels} channels")));
    }
    if n > bytes.len() {
        return Err(Error::Corrupt(format!("implausible segment count {n}")));
    }
    let labels = take(bytes, &mut pos, n)?.to_vec();
    let starts = (0..n)
        .map(|_| take(bytes, &mut pos, 8).map(le_u64))
        .collect::<Result<Vec<_>>>()?;
    let mut texts = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut column = Vec::with_capacity(n);
        for _ in 0..n {
            let len = le_u32(take(bytes, &mut pos, 4)?) as usize;
            let s = std::str::from_utf8(take(bytes, &mut pos, len)?)
                .map_err(|_| Error::Corrupt("reference is not UTF-8".into()))?;
            column.push(s.to_string());
        }
        texts.push(column);
    }
    let subjects = texts.pop().expect("two columns");
    let walks = texts.pop().expect("two columns");
    let per = channels * window;
    let mut out = Vec::with_capacity(n);
    for (i, ((walk_ref, subject_ref), label)) in walks.into_iter().zip(subjects).zip(labels).enumerate() {
        let raw = take(bytes, &mut pos, per * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push(Segment {
            values: Tensor::new([channels, window], data)?,
            label,
            walk_ref,
            subject_ref,
            start_sample: starts[i] as usize,
        });
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after segment values".into()));
    }
    Ok(out)
}

pub fn write_segments(path: &Path, segments: &[Segment]) -> Result<()> {
    fs::write(path, encode_segments(segments)?).map_err(Error::io(path))
}

pub fn read_segments(path: &Path) -> Result<Vec<Segment>> {
    decode_segments(&fs::read(path).map_err(Error::io(path))?)
}
