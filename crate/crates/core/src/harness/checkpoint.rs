//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IPRC" | u32 version | u32 epoch | u32 schedule position
//! u32 n | n x tensor                        parameters
//! u8 kind | f64 h0 | f64 h1 | f64 h2 | f64 weight decay | u64 step
//! u32 n | n x tensor                        first moments / velocity
//! u32 n | n x tensor                        second moments
//! [u8; 32] seed | u64 stream | u128 word position      augmentation RNG
//! u32 crc32 of everything above
//! ```
//!
//! A tensor is `u32 name length | name | u8 dtype | u32 rank | u64 dims |
//! f32 data`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{OptimizerKind, OptimizerState, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"IPRC";
pub const VERSION: u32 = 1;

/// Full state of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Epochs completed when the checkpoint was taken.
    pub epoch: u32,
    pub schedule_position: u32,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("section length fits in u32"));
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.len(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u8(f32::DTYPE_TAG);
        self.len(t.rank());
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tensors(&mut self, prefix: &str, ts: &[Tensor]) {
        self.len(ts.len());
        for (i, t) in ts.iter().enumerate() {
            self.tensor(&format!("{prefix}.{i}"), t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::Integrity(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let tag = self.u8()?;
        if tag != f32::DTYPE_TAG {
            return Err(Error::Integrity(format!(
                "tensor {name}: unsupported dtype tag {tag}"
            )));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Integrity(format!("tensor {name}: absurd shape {shape:?}")))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor().map(|(_, t)| t)).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.epoch);
        w.u32(self.schedule_position);
        w.len(self.params.len());
        for (name, t) in self.names.iter().zip(&self.params) {
            w.tensor(name, t);
        }
        let o = &self.optimizer;
        let (kind, h) = match o.kind {
            OptimizerKind::Nadam { beta1, beta2, eps } => (1u8, [beta1, beta2, eps]),
            OptimizerKind::Nsgd { momentum } => (2u8, [momentum, 0.0, 0.0]),
        };
        w.u8(kind);
        h.iter().for_each(|&v| w.f64(v));
        w.f64(o.weight_decay);
        w.u64(o.step);
        w.tensors("first", &o.first);
        w.tensors("second", &o.second);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 || &buf[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let epoch = r.u32()?;
        let schedule_position = r.u32()?;
        let n = r.u32()?;
        let (names, params) = (0..n)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let kind_tag = r.u8()?;
        let h = [r.f64()?, r.f64()?, r.f64()?];
        let kind = match kind_tag {
            1 => OptimizerKind::Nadam {
                beta1: h[0],
                beta2: h[1],
                eps: h[2],
            },
            2 => OptimizerKind::Nsgd { momentum: h[0] },
            t => return Err(Error::Integrity(format!("unknown optimizer tag {t}"))),
        };
        let weight_decay = r.f64()?;
        let step = r.u64()?;
        let first = r.tensors()?;
        let second = r.tensors()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes in checkpoint",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            epoch,
            schedule_position,
            names,
            params,
            optimizer: OptimizerState {
                kind,
                weight_decay,
                step,
                first,
                second,
            },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the stored tensors match `shapes` exactly.
    pub fn expect_shapes(&self, shapes: &[Vec<usize>]) -> Result<()> {
        let ours: Vec<Vec<usize>> = self.params.iter().map(|t| t.shape().to_vec()).collect();
        if ours != shapes {
            return Err(Error::Integrity(format!(
                "checkpoint shapes {ours:?} do not match model shapes {shapes:?}"
            )));
        }
        Ok(())
    }
}
