//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PUMA1"  version:u32  count:u32
//! count x { name_len:u32  name:[u8; name_len]  rank:u32  dims:[u64; rank]  payload:[f32; prod(dims)] }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PUMA1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    /// Stores a scalar counter. Values above 2^24 lose precision in the f32 payload,
    /// so counters are split into two 24-bit halves.
    pub fn push_counter(&mut self, name: &str, value: u64) {
        let lo = (value & 0xff_ffff) as f32;
        let hi = (value >> 24) as f32;
        self.push(name, Tensor::new(&[2], vec![lo, hi]).expect("two values"));
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        let t = self.get(name)?;
        match t.data() {
            [lo, hi] => Ok(((*hi as u64) << 24) | (*lo as u64)),
            _ => Err(NnError::CheckpointShape {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: vec![2],
            }),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn push_params<T: Real>(&mut self, store: &ParamStore<T>) {
        for id in store.ids() {
            self.push(store.name(id), store.value(id).cast());
        }
    }

    /// Loads every parameter of `store` by name, failing on missing names or shape changes.
    pub fn load_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.get(&name)?;
            if t.shape() != store.value(id).shape() {
                return Err(NnError::CheckpointShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: store.value(id).shape().to_vec(),
                });
            }
            *store.value_mut(id) = t.cast();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(format!("tensor name: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut payload = vec![0u8; numel * 4];
            r.read_exact(&mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
