//! Conditional MLP velocity field.
//!
//! Input row: `[x (data_dim), sinusoidal time embedding, class embedding]`,
//! projected to `width`, followed by `depth` residual blocks
//! `h <- h + silu(layer_norm(h W + b))` and a zero-initialized output layer.
//! Block outputs can be tapped by index for the discriminator.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::ndcore::{Rng, Tape, Tensor, Var};

/// Class label for one row; `Null` selects the dedicated unconditional row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    pub fn class(self) -> Option<usize> {
        match self {
            Condition::Class(k) => Some(k),
            Condition::Null => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub data_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub time_pairs: usize,
    pub cond_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            width: 128,
            depth: 12,
            classes: 8,
            time_pairs: 8,
            cond_dim: 16,
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.time_pairs + self.cond_dim
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let mut out = vec![
            ("cond_embed".to_string(), vec![self.classes + 1, self.cond_dim]),
            ("in.w".to_string(), vec![self.input_dim(), w]),
            ("in.b".to_string(), vec![w]),
        ];
        for i in 0..self.depth {
            out.push((format!("block{i}.w"), vec![w, w]));
            out.push((format!("block{i}.b"), vec![w]));
            out.push((format!("block{i}.ln_g"), vec![w]));
            out.push((format!("block{i}.ln_b"), vec![w]));
        }
        out.push(("out.w".to_string(), vec![w, self.data_dim]));
        out.push(("out.b".to_string(), vec![self.data_dim]));
        out
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.width == 0 || self.classes == 0 || self.time_pairs == 0 {
            return Err(Error::invalid(format!("degenerate network config {self:?}")));
        }
        Ok(())
    }
}

/// Hidden-block indices whose outputs feed the discriminator heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureTaps(Vec<usize>);

impl Default for FeatureTaps {
    fn default() -> Self {
        Self(vec![3, 4, 5, 6, 8, 10, 11])
    }
}

impl FeatureTaps {
    pub fn new(mut layers: Vec<usize>) -> Self {
        layers.sort_unstable();
        layers.dedup();
        Self(layers)
    }

    pub fn none() -> Self {
        Self(Vec::new())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l >= depth) {
            Some(l) => Err(Error::invalid(format!("tap layer {l} >= depth {depth}"))),
            None => Ok(()),
        }
    }
}

/// Timestep argument: one value for the whole batch or one per row.
#[derive(Clone, Copy, Debug)]
pub enum Times<'a> {
    Shared(f64),
    PerRow(&'a [f64]),
}

/// Parameters placed on a tape, in [`NetConfig::layout`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

pub struct NetOutput {
    pub velocity: Var,
    pub taps: Vec<Var>,
}

/// Row-chunk size for gradient-free evaluation.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    params: ParamSet,
}

impl VelocityNet {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let t = if name == "cond_embed" {
                rng.normal_tensor(&shape)
            } else if name.ends_with("ln_g") {
                Tensor::ones(&shape)
            } else if name.starts_with("out.") || name.ends_with(".b") || name.ends_with("ln_b") {
                Tensor::zeros(&shape)
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                rng.uniform_tensor(&shape, -bound, bound)
            };
            params.push(name, t);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a net from stored tensors, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::TreeMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::TreeMismatch(format!(
                    "{pn} {:?} does not match expected {name} {shape:?}",
                    pt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_same_tree(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    fn cond_ids(&self, cond: &[Condition]) -> Result<Vec<usize>> {
        let k = self.config.classes;
        cond.iter()
            .map(|c| match *c {
                Condition::Class(i) if i < k => Ok(i),
                Condition::Class(i) => Err(Error::ConditionOutOfRange { class: i, classes: k }),
                Condition::Null => Ok(k),
            })
            .collect()
    }

    /// Angular frequencies with periods spaced geometrically from 1 down to 1e-2.
    pub fn time_frequencies(&self) -> Vec<f64> {
        let n = self.config.time_pairs;
        (0..n)
            .map(|k| {
                let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                let period = 10f64.powf(-2.0 * frac);
                2.0 * PI / period
            })
            .collect()
    }

    /// Runs the network on `tape`. `taps` selects which block outputs are
    /// returned alongside the velocity.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        t: Times<'_>,
        cond: &[Condition],
        taps: &FeatureTaps,
    ) -> Result<NetOutput> {
        let cfg = &self.config;
        taps.validate(cfg.depth)?;
        let n = tape.value(x).rows();
        if tape.value(x).cols() != cfg.data_dim || cond.len() != n {
            return Err(Error::shape("velocity_net", tape.value(x).shape(), &[cond.len(), cfg.data_dim]));
        }
        let tcol: Vec<f64> = match t {
            Times::Shared(v) => vec![v; n],
            Times::PerRow(v) if v.len() == n => v.to_vec(),
            Times::PerRow(v) => return Err(Error::shape("velocity_net times", &[n], &[v.len()])),
        };
        if tcol.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("timestep outside [0, 1]"));
        }
        let ids = self.cond_ids(cond)?;
        let p = &bound.vars;

        let tvar = tape.constant(Tensor::new(&[n, 1], tcol)?)?;
        let freqs = tape.constant(Tensor::new(&[1, cfg.time_pairs], self.time_frequencies())?)?;
        let phase = tape.matmul(tvar, freqs)?;
        let s = tape.sin(phase)?;
        let c = tape.cos(phase)?;
        let cemb = tape.gather(p[0], &ids)?;
        let inp = tape.concat(&[x, s, c, cemb])?;
        let pre = tape.affine(inp, p[1], p[2])?;
        let mut h = tape.silu(pre)?;

        let mut tapped = Vec::with_capacity(taps.len());
        let mut next_tap = taps.layers().iter().peekable();
        for i in 0..cfg.depth {
            let base = 3 + 4 * i;
            let z = tape.affine(h, p[base], p[base + 1])?;
            let z = tape.layer_norm(z, p[base + 2], p[base + 3])?;
            let z = tape.silu(z)?;
            h = tape.add(h, z)?;
            if next_tap.peek() == Some(&&i) {
                tapped.push(h);
                next_tap.next();
            }
        }
        let ob = 3 + 4 * cfg.depth;
        let velocity = tape.affine(h, p[ob], p[ob + 1])?;
        Ok(NetOutput { velocity, taps: tapped })
    }

    /// Gradient-free velocity evaluation.
    pub fn forward_velocity(&self, x: &Tensor, t: f64, cond: &[Condition]) -> Result<Tensor> {
        Ok(self.forward_features(x, t, cond, &FeatureTaps::none())?.1)
    }

    /// Gradient-free tap features plus the velocity. Large batches are
    /// evaluated in row chunks; every layer is row-independent, so the result
    /// is bit-identical to a single pass.
    pub fn forward_features(
        &self,
        x: &Tensor,
        t: f64,
        cond: &[Condition],
        taps: &FeatureTaps,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        if x.rank() != 2 || cond.len() != x.rows() {
            return Err(Error::shape("forward", x.shape(), &[cond.len()]));
        }
        let n = x.rows();
        let mut feats: Vec<Vec<Tensor>> = vec![Vec::new(); taps.len()];
        let mut vel = Vec::new();
        let mut start = 0;
        while start < n || (n == 0 && start == 0) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let xc = if start == 0 && end == n { x.clone() } else { x.select_rows(&rows)? };
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false)?;
            let xv = tape.constant(xc)?;
            let out = self.forward(&mut tape, &bound, xv, Times::Shared(t), &cond[start..end], taps)?;
            for (slot, &v) in feats.iter_mut().zip(&out.taps) {
                slot.push(tape.value(v).clone());
            }
            vel.push(tape.value(out.velocity).clone());
            if n == 0 {
                break;
            }
            start = end;
        }
        let feats = feats.iter().map(|parts| Tensor::vstack(&parts.iter().collect::<Vec<_>>())).collect::<Result<Vec<_>>>()?;
        Ok((feats, Tensor::vstack(&vel.iter().collect::<Vec<_>>())?))
    }

    /// Gradients of `bound` parameters, zero-filled where unreached.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut crate::ndcore::Gradients, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect()
    }
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &Tensor, t: f64, cond: &[Condition]) -> Result<Tensor> {
        self.forward_velocity(x, t, cond)
    }
}
