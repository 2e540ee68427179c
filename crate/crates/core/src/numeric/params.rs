//! Named trainable parameters, Adam, and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "DMGP"
//! version    u16      1
//! count      u32      number of entries
//! manifest   count ×  { name_len u16, name utf-8, rows u32, cols u32 }
//! payload    Σ rows·cols f64 values, entries in manifest order, row-major
//! ```
//!
//! Entries are always written in ascending name order. Only values are
//! stored; gradients and optimizer moments are not part of a checkpoint.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

const CHECKPOINT_MAGIC: &[u8; 4] = b"DMGP";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
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
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    /// Value of a parameter that the caller registered itself.
    ///
    /// Panics when the name is unknown; model code owns its parameter names.
    pub fn value(&self, name: &str) -> &Matrix {
        &self.entries[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self.entries.get_mut(name).expect("unknown parameter").value
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self.entries.get_mut(name).expect("unknown parameter").grad
    }

    pub fn grad(&self, name: &str) -> &Matrix {
        &self.entries[name].grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.data().len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// A zeroed gradient buffer with the same shapes, for per-worker accumulation.
    pub fn zeroed_grads(&self) -> Gradients {
        Gradients {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Matrix::zeros(p.value.rows(), p.value.cols())))
                .collect(),
        }
    }

    pub fn add_grads(&mut self, grads: &Gradients) {
        for (name, g) in &grads.entries {
            self.grad_mut(name).add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.grad.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.entries.values_mut() {
                p.grad.scale(s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update on every entry.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for p in self.entries.values_mut() {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((x, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
        }
        for p in self.entries.values() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.num_scalars() * 8);
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u16(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            manifest.push((name, rows, cols));
        }
        let mut set = ParamSet::new();
        let mut buf = [0u8; 8];
        for (name, rows, cols) in manifest {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            if set.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
            set.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }

    /// Hex SHA-256 of the checkpoint encoding.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_checkpoint_bytes())
    }

    /// Copies values from `other` into matching entries, checking shapes.
    pub fn load_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} entries, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (name, p) in self.entries.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} vs {:?}",
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradient buffers keyed like a [`ParamSet`], used to accumulate one
/// worker's contribution before a fixed-order reduction.
#[derive(Clone, Debug)]
pub struct Gradients {
    entries: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.entries.get_mut(name).expect("unknown parameter")
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.entries[name]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (k, g) in self.entries.iter_mut() {
            g.add_assign(&other.entries[k]);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.entries.values_mut() {
            g.scale(s);
        }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
