//! Named parameter collections and the whole-tree operations on them:
//! EMA shadows, branch interpolation and symmetric weight quantization.

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Content hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (n, t) in self.iter() {
            eat(n.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn check_same_tree(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::TreeMismatch(format!(
                "{} vs {} tensors, names differ",
                self.len(),
                other.len()
            )));
        }
        for ((n, a), b) in self.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::TreeMismatch(format!("{n}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    /// Largest elementwise difference between two trees of the same layout.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_tree(other)?;
        let mut m = 0.0_f64;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                m = m.max((x - y).abs());
            }
        }
        Ok(m)
    }
}

/// `shadow <- beta * shadow + (1 - beta) * live`, tensor by tensor. Computed
/// as `shadow + (1 - beta) * (live - shadow)` so a shadow equal to `live`
/// stays bit-identical.
pub fn ema_update(shadow: &mut ParamSet, live: &ParamSet, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!("EMA decay must lie in [0, 1), got {beta}")));
    }
    shadow.check_same_tree(live)?;
    for (s, l) in shadow.tensors.iter_mut().zip(&live.tensors) {
        for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
            *a += (1.0 - beta) * (b - *a);
        }
    }
    Ok(())
}

/// `ratio * m1 + (1 - ratio) * m2`; `ratio` is the weight on `m1`.
pub fn merge_interpolate(m1: &ParamSet, m2: &ParamSet, ratio: f64) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("merge ratio must lie in [0, 1], got {ratio}")));
    }
    m1.check_same_tree(m2)?;
    let mut out = m1.clone();
    for (o, b) in out.tensors.iter_mut().zip(&m2.tensors) {
        for (a, &y) in o.data_mut().iter_mut().zip(b.data()) {
            // Written so that equal inputs come back bit-identical.
            *a = if *a == y { y } else { ratio * *a + (1.0 - ratio) * y };
        }
    }
    Ok(out)
}

pub const SUPPORTED_BITS: [u32; 4] = [6, 8, 16, 64];

/// Per-tensor symmetric quantize-dequantize: `round(w / d) * d` with
/// `d = max|w| / (2^(bits-1) - 1)`. `bits = 64` is the identity.
pub fn quantize_tensor(t: &Tensor, bits: u32) -> Result<Tensor> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::invalid(format!("unsupported bit width {bits}")));
    }
    if bits == 64 {
        return Ok(t.clone());
    }
    let max = t.max_abs();
    if max == 0.0 {
        return Ok(t.clone());
    }
    let levels = f64::from((1u32 << (bits - 1)) - 1);
    let step = max / levels;
    Ok(t.map(|w| {
        let q = (w / step).round().clamp(-levels, levels);
        q * step
    }))
}

pub fn quantize_params(p: &ParamSet, bits: u32) -> Result<ParamSet> {
    let mut out = p.clone();
    for t in out.tensors.iter_mut() {
        *t = quantize_tensor(t, bits)?;
    }
    Ok(out)
}
