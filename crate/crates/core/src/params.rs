//! Flat parameter storage and the adaptive-moment optimizer.
//!
//! Parameters are stored as `f32` (the checkpoint precision) and promoted to
//! `f64` for all arithmetic, so a checkpoint round trip is exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named block inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named blocks packed into a single `f32` vector in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
    data: Vec<f32>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a block and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) -> usize {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "block size");
        self.blocks.push(ParamBlock {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend(values);
        self.blocks.len() - 1
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, idx: usize) -> &ParamBlock {
        &self.blocks[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn slice(&self, idx: usize) -> &[f32] {
        let b = &self.blocks[idx];
        &self.data[b.offset..b.offset + b.len()]
    }

    pub fn slice_mut(&mut self, idx: usize) -> &mut [f32] {
        let b = self.blocks[idx].clone();
        &mut self.data[b.offset..b.offset + b.len()]
    }

    pub fn tensor(&self, idx: usize) -> Tensor {
        let b = &self.blocks[idx];
        Tensor::new(
            &b.shape,
            self.slice(idx).iter().map(|&v| v as f64).collect(),
        )
        .unwrap()
    }

    /// Replace the values, keeping the layout. Used when loading checkpoints.
    pub fn set_data(&mut self, values: Vec<f32>) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                values.len(),
                self.data.len()
            )));
        }
        self.data = values;
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.blocks == other.blocks
    }

    /// FNV-1a over the raw bits; used to assert frozen weights stay frozen.
    pub fn checksum(&self) -> u64 {
        checksum_f32(&self.data)
    }
}

pub fn checksum_f32(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            let m = beta1 * self.m[i] + (1.0 - beta1) * g;
            let v = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            if m == 0.0 {
                continue;
            }
            let step = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            params[i] = (params[i] as f64 - step) as f32;
        }
    }

    /// Serialize as little-endian: step, lr, beta1, beta2, eps, n, m, v.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 16 * self.m.len());
        out.extend(self.step.to_le_bytes());
        for v in [
            self.config.lr,
            self.config.beta1,
            self.config.beta2,
            self.config.eps,
        ] {
            out.extend(v.to_le_bytes());
        }
        out.extend((self.m.len() as u64).to_le_bytes());
        for v in self.m.iter().chain(&self.v) {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let step = r.u64()?;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let n = r.u64()? as usize;
        let m = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { config, step, m, v })
    }
}

/// Cursor over a little-endian byte buffer.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                line: 0,
                message: format!("truncated binary at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn expect_magic(&mut self, magic: &'static str) -> Result<()> {
        let found = self.take(magic.len()).map_err(|_| Error::Magic {
            expected: magic,
            found: self.bytes.to_vec(),
        })?;
        if found != magic.as_bytes() {
            return Err(Error::Magic {
                expected: magic,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                line: 0,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}
