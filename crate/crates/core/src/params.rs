//! Named parameter storage and the little-endian checkpoint layout.
//!
//! Checkpoint layout:
//!
//! ```text
//! magic "FTKN" | version u32 | param count u32
//! per param: name length u32 | name bytes (utf-8) | rank u32 | dims u32 x rank | data f64 x prod(dims)
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTKN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    UniformFanIn { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub init: InitScheme,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let mut tensor = Tensor::zeros(shape);
        match init {
            InitScheme::Zeros => {}
            InitScheme::Ones => tensor.data_mut().iter_mut().for_each(|v| *v = 1.0),
            InitScheme::UniformFanIn { fan_in } => {
                let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
                for v in tensor.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        self.params.push(Parameter { name: name.to_string(), tensor, init });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.value_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let shape = p.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrite parameters from a checkpoint. Every stored name must exist
    /// in this store with an identical shape and every parameter here must
    /// be present in the checkpoint.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = parse_checkpoint(bytes)?;
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.params[id.0].tensor.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            self.params[id.0].tensor = tensor;
        }
        Ok(())
    }
}

/// Decode a checkpoint into `(name, tensor)` pairs in file order.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = vec![0usize; rank];
        for d in shape.iter_mut() {
            *d = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = r.take(8)?;
            data.push(f64::from_le_bytes(raw.try_into().unwrap()));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add("w", vec![2, 2], InitScheme::Zeros, &mut rng).unwrap();
        assert!(s.add("w", vec![2], InitScheme::Zeros, &mut rng).is_err());
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s
            .add("w", vec![16, 8], InitScheme::UniformFanIn { fan_in: 16 }, &mut rng)
            .unwrap();
        assert!(s.tensor(id).data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn checkpoint_round_trip_and_header() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        s.add("a.w", vec![3, 2], InitScheme::UniformFanIn { fan_in: 3 }, &mut rng).unwrap();
        s.add("a.b", vec![2], InitScheme::Ones, &mut rng).unwrap();
        let bytes = s.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"FTKN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);

        let mut other = s.clone();
        for (_, p) in other.params.iter_mut().enumerate() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        other.load_checkpoint_bytes(&bytes).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(other.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
        assert!(other.load_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
