//! `unigs-ckpt-v1` archives: a header line, a little-endian u64 manifest
//! length, a JSON manifest, then every tensor as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8] = b"unigs-ckpt-v1\n";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if !bytes.starts_with(MAGIC) {
            return ckpt_err(format!("{} is not a unigs-ckpt-v1 archive", path.display()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return ckpt_err("truncated header");
        }
        let mlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let body = &rest[8..];
        if body.len() < mlen {
            return ckpt_err("truncated manifest");
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        let data = &body[mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let (a, b) = (e.offset * 4, (e.offset + n) * 4);
            if b > data.len() {
                return ckpt_err(format!("tensor {} extends past the end of the file", e.name));
            }
            let vals: Vec<Scalar> = data[a..b]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, vals)?));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }
}

/// Rounds every element to the nearest f32, so it survives a save/load unchanged.
pub fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as Scalar;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_for_f32_values() {
        let mut a = Tensor::new(&[2, 3], vec![0.1, -2.5, 3.25, 1e-7, 0.0, 7.0]).unwrap();
        round_to_f32(&mut a);
        let ck = Checkpoint {
            meta: serde_json::json!({"step": 3}),
            tensors: vec![("a".into(), a.clone()), ("b".into(), Tensor::zeros(&[4]))],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.get("a").unwrap().data(), a.data());
        assert_eq!(back.get("b").unwrap().shape(), &[4]);
        assert_eq!(back.meta["step"], 3);
        std::fs::write(&p, b"nope").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
