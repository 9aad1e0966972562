//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DTRMCKPT" | u32 version | u32 config_len | config (UTF-8 key=value text)
//! u32 n_params | n_params × { u32 name_len | name | u32 rows | u32 cols | rows*cols f64 }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a reload is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DTRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model and training configuration the parameters belong to.
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: impl Into<String>) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                let plain = Tensor::matrix(t.rows(), t.cols(), t.data().to_vec()).unwrap();
                (store.name(id).to_string(), plain)
            })
            .collect();
        Checkpoint {
            config: config.into(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            params.push((name, Tensor::matrix(rows, cols, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Copies every stored tensor into the same-named parameter of `store`.
    /// Names and shapes must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let dst = store.get_mut(id);
            if (dst.rows(), dst.cols()) != (t.rows(), t.cols()) {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {}x{} vs model {}x{}",
                    t.rows(),
                    t.cols(),
                    dst.rows(),
                    dst.cols()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        s.add("a", 3, 4, Init::Uniform { fan_in: 4 }, &mut rng);
        s.add("b.gamma", 1, 4, Init::Ones, &mut rng);
        s
    }

    #[test]
    fn reload_is_bit_exact() {
        let s = store();
        let ck = Checkpoint::from_store(&s, "d_model=4\n");
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        fresh.add("a", 3, 4, Init::Zeros, &mut rng);
        fresh.add("b.gamma", 1, 4, Init::Zeros, &mut rng);
        back.apply_to(&mut fresh).unwrap();
        for id in s.ids() {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(s.get(id)), bits(fresh.get(id)));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_store(&store(), "").to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }

    #[test]
    fn shape_mismatch_on_apply() {
        let ck = Checkpoint::from_store(&store(), "");
        let mut other = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        other.add("a", 4, 3, Init::Zeros, &mut rng);
        other.add("b.gamma", 1, 4, Init::Zeros, &mut rng);
        assert!(ck.apply_to(&mut other).is_err());
    }
}
