//! Versioned binary checkpoints.
//!
//! Layout: the magic `TVGCKPT1`, a `u32` array count, then per array a
//! `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32` extents and
//! the little-endian `f32` payload. Integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"TVGCKPT1";

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";
const STEP: &str = "meta.step";
const EPOCH: &str = "meta.next_epoch";

pub fn encode(arrays: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a TVGCKPT1 checkpoint (bad magic or version)".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
        arrays.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint arrays".into()));
    }
    Ok(arrays)
}

fn counter(v: u64) -> Tensor<f32> {
    Tensor::scalar(v as f32)
}

/// Parameters, optimizer moments and progress counters as named arrays.
pub fn trainer_arrays<T: Scalar>(trainer: &Trainer<T>) -> Vec<(String, Tensor<f32>)> {
    let params = &trainer.model.params;
    let mut out: Vec<(String, Tensor<f32>)> = params.iter().map(|(_, p)| (p.name.clone(), p.value.cast())).collect();
    for ((_, p), (m, v)) in params
        .iter()
        .zip(trainer.optimizer.first.iter().zip(&trainer.optimizer.second))
    {
        out.push((format!("{M_PREFIX}{}", p.name), m.cast()));
        out.push((format!("{V_PREFIX}{}", p.name), v.cast()));
    }
    out.push((STEP.into(), counter(trainer.optimizer.step)));
    out.push((EPOCH.into(), counter(trainer.next_epoch as u64)));
    out
}

pub fn save<T: Scalar>(trainer: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(&trainer_arrays(trainer)))?;
    Ok(())
}

/// Restores parameters, moments and counters into `trainer`, whose model
/// must have been built with the matching configuration. Nothing is
/// modified unless every array parses and matches.
pub fn load_into<T: Scalar>(trainer: &mut Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    restore(trainer, decode(&bytes)?)
}

pub fn restore<T: Scalar>(trainer: &mut Trainer<T>, arrays: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut params = Vec::new();
    let mut firsts = Vec::new();
    let mut seconds = Vec::new();
    let (mut step, mut epoch) = (None, None);
    for (name, t) in arrays {
        let t: Tensor<T> = t.cast();
        if let Some(n) = name.strip_prefix(M_PREFIX) {
            firsts.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix(V_PREFIX) {
            seconds.push((n.to_string(), t));
        } else if name == STEP {
            step = Some(t.data()[0].as_f64() as u64);
        } else if name == EPOCH {
            epoch = Some(t.data()[0].as_f64() as usize);
        } else {
            params.push((name, t));
        }
    }
    let (Some(step), Some(epoch)) = (step, epoch) else {
        return Err(Error::Format("checkpoint lacks progress counters".into()));
    };
    let mut store = trainer.model.params.clone();
    store.load_values(&params)?;
    let mut optimizer: AdamW<T> = AdamW::new(&store, trainer.optimizer.config);
    for (slots, named, what) in [
        (&mut optimizer.first, &firsts, "first moment"),
        (&mut optimizer.second, &seconds, "second moment"),
    ] {
        for ((_, p), slot) in store.iter().zip(slots.iter_mut()) {
            let Some((_, t)) = named.iter().find(|(n, _)| *n == p.name) else {
                return Err(Error::Format(format!("missing {what} for `{}`", p.name)));
            };
            if t.shape() != p.value.shape() {
                return Err(Error::ParamShape {
                    name: format!("{what} of {}", p.name),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
    }
    optimizer.step = step;
    trainer.model.params = store;
    trainer.optimizer = optimizer;
    trainer.next_epoch = epoch;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let arrays = vec![
            ("a".to_string(), Tensor::from_f64(&[2, 2], &[1.0, -2.5, 3.25, f32::MIN_POSITIVE as f64]).unwrap()),
            ("b.c".to_string(), Tensor::scalar(7.0)),
        ];
        let bytes = encode(&arrays);
        assert_eq!(&bytes[..8], b"TVGCKPT1");
        assert_eq!(decode(&bytes).unwrap(), arrays);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let arrays = vec![("a".to_string(), Tensor::ones(&[3]))];
        let bytes = encode(&arrays);
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[7] = b'2';
        assert!(matches!(decode(&wrong), Err(Error::Format(_))));
    }
}
