use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

use super::model::Model;
use super::spec::EncoderSpec;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor read from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes every named tensor (trainable parameters and running statistics) as f32.
pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut ps = Vec::new();
    model.params("", &mut ps);
    let mut out = Vec::with_capacity(checkpoint_size(model));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(ps.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?.to_le_bytes());
    for p in ps {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("{}: name too long", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(p.shape.len()).map_err(|_| Error::Checkpoint(format!("{}: rank too large", p.name)))?);
        for &d in &p.shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{}: extent too large", p.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Exact byte size of the serialized checkpoint.
pub fn checkpoint_size<T: Real>(model: &Model<T>) -> usize {
    let mut ps = Vec::new();
    model.params("", &mut ps);
    12 + ps
        .iter()
        .map(|p| 2 + p.name.len() + 1 + 4 * p.shape.len() + 4 * p.value.len())
        .sum::<usize>()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated file while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint completely; nothing is returned unless the whole file is well formed.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, &name)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let data = r
            .take(n, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push(StoredTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(tensors)
}

/// Overwrites every tensor of `model` from `tensors`. Validation of names and shapes happens
/// before any value is written.
pub fn assign_tensors<T: Real>(model: &mut Model<T>, tensors: &[StoredTensor]) -> Result<()> {
    let mut by_name: HashMap<&str, &StoredTensor> = HashMap::with_capacity(tensors.len());
    for t in tensors {
        if by_name.insert(&t.name, t).is_some() {
            return Err(Error::Checkpoint(format!("{}: duplicate tensor", t.name)));
        }
    }
    let mut ps = Vec::new();
    model.params_mut("", &mut ps);
    for p in &ps {
        match by_name.get(p.name.as_str()) {
            None => return Err(Error::Checkpoint(format!("{}: missing from checkpoint", p.name))),
            Some(t) if t.shape != p.shape => {
                return Err(Error::Checkpoint(format!(
                    "{}: shape mismatch, checkpoint {:?} vs model {:?}",
                    p.name, t.shape, p.shape
                )))
            }
            Some(_) => {}
        }
    }
    if ps.len() != tensors.len() {
        let known: Vec<&str> = ps.iter().map(|p| p.name.as_str()).collect();
        let extra = tensors.iter().find(|t| !known.contains(&t.name.as_str())).expect("extra tensor");
        return Err(Error::Checkpoint(format!("{}: not part of the model", extra.name)));
    }
    for p in ps {
        let t = by_name[p.name.as_str()];
        p.value.iter_mut().zip(&t.data).for_each(|(v, &s)| *v = T::of(s as f64));
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

/// Builds a model for `spec` and fills it from the checkpoint at `path`.
pub fn load_checkpoint(path: impl AsRef<Path>, spec: &EncoderSpec) -> Result<Model<f32>> {
    let bytes = fs::read(path)?;
    let tensors = decode_checkpoint(&bytes)?;
    let mut model = Model::new(spec)?;
    assign_tensors(&mut model, &tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Mode;
    use crate::network::build_model;
    use crate::tensor::Tensor;

    fn small() -> EncoderSpec {
        EncoderSpec::hybridnetseg().scaled(8)
    }

    fn all_values(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
        let mut ps = Vec::new();
        m.params("", &mut ps);
        ps.into_iter().map(|p| (p.name, p.value.iter().map(|v| v.to_bits()).collect())).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hseg");
        let a = build_model(&small(), 5).unwrap();
        save_checkpoint(&a, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, checkpoint_size(&a));
        let mut b = load_checkpoint(&path, &small()).unwrap();
        assert_eq!(all_values(&a), all_values(&b));

        let mut a = a;
        let x = Tensor::from_fn([1, 3, 32, 32], |_, c, y, x| ((c * 7 + y * 37 + x * 11) % 101) as f32 / 101.0);
        let ya = a.forward(&x, Mode::Infer).unwrap().prob;
        let yb = b.forward(&x, Mode::Infer).unwrap().prob;
        assert!(ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn overwrites_a_differently_seeded_model() {
        let a = build_model(&small(), 1).unwrap();
        let mut b = build_model(&small(), 2).unwrap();
        assert_ne!(all_values(&a), all_values(&b));
        assign_tensors(&mut b, &decode_checkpoint(&encode_checkpoint(&a).unwrap()).unwrap()).unwrap();
        assert_eq!(all_values(&a), all_values(&b));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = encode_checkpoint(&build_model(&small(), 0).unwrap()).unwrap();
        for cut in [0, 3, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated") || err.contains("magic"), "{cut}: {err}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn rejects_other_versions() {
        let mut bytes = encode_checkpoint(&build_model(&small(), 0).unwrap()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("version 2"));
    }

    #[test]
    fn mismatches_name_the_tensor() {
        let a = build_model(&small(), 0).unwrap();
        let before = all_values(&a);
        let mut tensors = decode_checkpoint(&encode_checkpoint(&a).unwrap()).unwrap();
        let mut target = build_model(&small(), 0).unwrap();

        let victim = tensors[7].name.clone();
        tensors[7].shape.push(1);
        let err = assign_tensors(&mut target, &tensors).unwrap_err().to_string();
        assert!(err.contains(&victim) && err.contains("shape"), "{err}");
        assert_eq!(all_values(&target), before);

        tensors[7].shape.pop();
        let removed = tensors.remove(3).name;
        let err = assign_tensors(&mut target, &tensors).unwrap_err().to_string();
        assert!(err.contains(&removed) && err.contains("missing"), "{err}");

        let full = build_model(&EncoderSpec::hybridnetseg(), 0).unwrap();
        let err = assign_tensors(&mut target, &decode_checkpoint(&encode_checkpoint(&full).unwrap()).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }
}
