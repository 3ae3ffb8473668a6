//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "LIDETCKP" | version u32 | config hash [32] | step u64 | tensor count u32
//! per tensor: name length u32, name bytes, rank u32, dims u64 × rank, values f64 × numel
//! optimizer flag u8; if 1: adam step u64, then first and second moments in tensor order
//! ```

use std::fs;
use std::path::Path;

use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"LIDETCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, config_hash: [u8; 32], step: u64, optimizer: Option<&AdamW>) -> Self {
        Self {
            config_hash,
            step,
            names: store.names().to_vec(),
            tensors: store.tensors().to_vec(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    put_values(&mut out, t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.fail("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.values(n)?;
            tensors.push(Tensor::new(&shape, data)?);
            names.push(name);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = Vec::with_capacity(2 * count);
                for i in 0..2 * count {
                    let shape = tensors[i % count].shape().to_vec();
                    let data = r.values(shape.iter().product())?;
                    moments.push(Tensor::new(&shape, data)?);
                }
                let v = moments.split_off(count);
                Some(AdamW { step, m: moments, v })
            }
            _ => return Err(r.fail("bad optimizer flag")),
        };
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self { config_hash, step, names, tensors, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies the weights into `store`. Every tensor must match by name and shape; a hash
    /// mismatch only warns.
    pub fn restore(&self, store: &mut ParamStore, expected_hash: &[u8; 32]) -> Result<()> {
        if &self.config_hash != expected_hash {
            log::warn!("checkpoint was written for a different model configuration");
        }
        let mut saved = ParamStore::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            saved.add(name.clone(), t.clone()).map_err(|_| Error::Checkpoint {
                name: name.clone(),
                msg: "stored twice".into(),
            })?;
        }
        store.check_compatible(&saved)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            store.assign(name, t.clone())?;
        }
        Ok(())
    }
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("tensor too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
