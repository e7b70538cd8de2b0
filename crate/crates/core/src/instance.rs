//! Plain-data snapshot of one abstract set, and its binary file format.
//!
//! Layout (all integers `u32`, all reals `f64`, little-endian):
//!
//! ```text
//! magic "PNPA" | version | H | W | C | N | M | R
//! fine indices            N x u32
//! remaining indices       R x u32
//! scores                  N x f64
//! aggregation weights     R x M f64, row-major
//! token values            (N + M') x C f64, fine tokens first
//! ```
//!
//! `R` is the number of pooled (non-polled, non-padded) locations and `M'` the
//! number of coarse tokens actually produced: `M` when `R > 0`, otherwise 0.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::sampler::AbstractSet;
use crate::tensor::Graph;

pub const MAGIC: &[u8; 4] = b"PNPA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractInstance {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pool_size: usize,
    pub fine_indices: Vec<usize>,
    pub remaining_indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// `R x M` row-major.
    pub weights: Vec<f64>,
    /// `(N + M') x C` row-major.
    pub tokens: Vec<f64>,
}

impl AbstractInstance {
    pub fn from_abstract(g: &Graph, abs: &AbstractSet) -> Self {
        let channels = g.shape(abs.tokens)[1];
        Self {
            height: abs.height,
            width: abs.width,
            channels,
            pool_size: abs.coarse_len(g),
            fine_indices: abs.fine.indices.clone(),
            remaining_indices: abs.coarse.remaining_indices.clone(),
            scores: abs.fine.scores.clone(),
            weights: abs.coarse.weight_values(g),
            tokens: g.value(abs.tokens).data().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of coarse tokens stored in `tokens`.
    pub fn coarse_len(&self) -> usize {
        if self.remaining_indices.is_empty() {
            0
        } else {
            self.pool_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        let n = self.fine_indices.len();
        let r = self.remaining_indices.len();
        let m = self.coarse_len();
        if len == 0 || n == 0 || self.channels == 0 {
            return Err(Error::Format("empty grid, fine set or channel count".into()));
        }
        let mut seen = vec![false; len];
        for &i in self.fine_indices.iter().chain(&self.remaining_indices) {
            if i >= len || seen[i] {
                return Err(Error::Format(format!("location {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if self.scores.len() != n {
            return Err(Error::Format(format!("{} scores for {n} fine tokens", self.scores.len())));
        }
        if self.weights.len() != r * m {
            return Err(Error::Format(format!("{} weights for a {r} x {m} matrix", self.weights.len())));
        }
        if self.tokens.len() != (n + m) * self.channels {
            return Err(Error::Format(format!(
                "{} token values for {} tokens of {} channels",
                self.tokens.len(),
                n + m,
                self.channels
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        self.validate()?;
        out.write_all(MAGIC)?;
        let header = [
            VERSION as usize,
            self.height,
            self.width,
            self.channels,
            self.fine_indices.len(),
            self.pool_size,
            self.remaining_indices.len(),
        ];
        for v in header.iter().chain(&self.fine_indices).chain(&self.remaining_indices) {
            let v = u32::try_from(*v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.scores.iter().chain(&self.weights).chain(&self.tokens) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let height = read_u32(&mut input)? as usize;
        let width = read_u32(&mut input)? as usize;
        let channels = read_u32(&mut input)? as usize;
        let n = read_u32(&mut input)? as usize;
        let pool_size = read_u32(&mut input)? as usize;
        let r = read_u32(&mut input)? as usize;
        let len = height.checked_mul(width).ok_or_else(|| Error::Format("grid too large".into()))?;
        if n + r > len {
            return Err(Error::Format(format!("{n} fine + {r} remaining exceeds {len} locations")));
        }
        let fine_indices = (0..n).map(|_| read_u32(&mut input).map(|v| v as usize)).collect::<Result<_>>()?;
        let remaining_indices = (0..r).map(|_| read_u32(&mut input).map(|v| v as usize)).collect::<Result<_>>()?;
        let m = if r == 0 { 0 } else { pool_size };
        let scores = read_f64s(&mut input, n)?;
        let weights = read_f64s(&mut input, r * m)?;
        let tokens = read_f64s(&mut input, (n + m) * channels)?;
        let inst = Self {
            height,
            width,
            channels,
            pool_size,
            fine_indices,
            remaining_indices,
            scores,
            weights,
            tokens,
        };
        inst.validate()?;
        Ok(inst)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file ends early".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut b).map_err(truncated)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
