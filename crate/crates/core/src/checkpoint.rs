//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "NBSLCKPT"
//! version      u32      = 1
//! config       9 × u32  feature_dim, encoder_layers, encoder_hidden,
//!                       decoder_layers, decoder_hidden, vocab_size,
//!                       embed_dim, attention_dim, num_branches
//!              u8       topology (0 single, 1 shared_aed, 2 shared_ae)
//!              f64      dropout
//! rng          u64      seed
//!              u64      step counter
//! tensors      u32      count
//!   per tensor u32      name length, then UTF-8 name bytes
//!              u32      rank, then rank × u32 extents
//!              f64 × n  row-major values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Topology};

const MAGIC: &[u8; 8] = b"NBSLCKPT";
const VERSION: u32 = 1;

/// RNG position saved alongside parameters so training can resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub rng: RngState,
}

fn topology_code(t: Topology) -> u8 {
    match t {
        Topology::Single => 0,
        Topology::SharedAed => 1,
        Topology::SharedAe => 2,
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams, rng: RngState) -> Self {
        Checkpoint { params, rng }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = self.params.config();
        for v in [
            c.feature_dim,
            c.encoder_layers,
            c.encoder_hidden,
            c.decoder_layers,
            c.decoder_hidden,
            c.vocab_size,
            c.embed_dim,
            c.attention_dim,
            c.num_branches,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(topology_code(c.topology));
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.step.to_le_bytes());
        let store = self.params.store();
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (_, name, t) in store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 9];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let topology = match r.take(1)?[0] {
            0 => Topology::Single,
            1 => Topology::SharedAed,
            2 => Topology::SharedAe,
            other => return Err(Error::Checkpoint(format!("unknown topology code {other}"))),
        };
        let dropout = r.f64()?;
        let config = ModelConfig {
            feature_dim: dims[0],
            encoder_layers: dims[1],
            encoder_hidden: dims[2],
            decoder_layers: dims[3],
            decoder_hidden: dims[4],
            vocab_size: dims[5],
            embed_dim: dims[6],
            attention_dim: dims[7],
            num_branches: dims[8],
            topology,
            dropout,
        };
        let rng = RngState {
            seed: r.u64()?,
            step: r.u64()?,
        };
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            params: ModelParams::from_store(config, store)?,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
