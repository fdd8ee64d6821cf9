//! Multi-head discriminator over proxy features.
//!
//! One head per (tap, noise level) pair. A head applies four affine layers to
//! each feature row, averages groups of rows, and applies four more layers
//! down to a single logit. Every hidden layer is followed by layer norm and
//! silu.

use crate::error::{Error, Result};
use crate::flow;
use crate::models::{Bound, Condition, FeatureTaps, ParamSet, Times, VelocityNet};
use crate::ndcore::{AdamW, AdamWConfig, Rng, Tape, Tensor, Var};

/// Affine layers per head, and how many of them act on individual rows.
pub const HEAD_LAYERS: usize = 8;
pub const PER_ROW_LAYERS: usize = 4;

/// Features indexed as `[level][tap]`.
pub type FeatureSet = Vec<Vec<Tensor>>;

#[derive(Clone, Debug, PartialEq)]
pub struct BankConfig {
    pub feature_dim: usize,
    pub head_width: usize,
    pub pool_group: usize,
    pub taps: FeatureTaps,
    pub t_star_levels: Vec<f64>,
    pub refresh_p: f64,
    pub literal_objective: bool,
    pub optimizer: AdamWConfig,
}

#[derive(Clone, Debug)]
struct Head {
    params: ParamSet,
    opt: AdamW,
}

/// Mean logits of one head on the last discriminator batch.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadStats {
    pub head: usize,
    pub tap: usize,
    pub t_star: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorBank {
    config: BankConfig,
    heads: Vec<Head>,
    refreshed_total: usize,
}

fn init_head(cfg: &BankConfig, rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for l in 0..HEAD_LAYERS {
        let fan_in = if l == 0 { cfg.feature_dim } else { cfg.head_width };
        let fan_out = if l + 1 == HEAD_LAYERS { 1 } else { cfg.head_width };
        let bound = 1.0 / (fan_in as f64).sqrt();
        p.push(format!("l{l}.w"), rng.uniform_tensor(&[fan_in, fan_out], -bound, bound));
        p.push(format!("l{l}.b"), Tensor::zeros(&[fan_out]));
        if l + 1 < HEAD_LAYERS {
            p.push(format!("l{l}.ln_g"), Tensor::ones(&[fan_out]));
            p.push(format!("l{l}.ln_b"), Tensor::zeros(&[fan_out]));
        }
    }
    p
}

impl DiscriminatorBank {
    pub fn new(config: BankConfig, rng: &mut Rng) -> Result<Self> {
        if config.t_star_levels.is_empty() || config.taps.is_empty() {
            return Err(Error::invalid("discriminator needs at least one tap and one noise level"));
        }
        if config.t_star_levels.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return Err(Error::invalid("noise levels must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&config.refresh_p) {
            return Err(Error::invalid("refresh probability must lie in [0, 1]"));
        }
        if config.pool_group == 0 || config.head_width == 0 || config.feature_dim == 0 {
            return Err(Error::invalid("head sizes must be positive"));
        }
        let n = config.taps.len() * config.t_star_levels.len();
        let heads = (0..n)
            .map(|_| {
                let params = init_head(&config, rng);
                let opt = AdamW::new(config.optimizer, params.tensors());
                Head { params, opt }
            })
            .collect();
        Ok(Self {
            config,
            heads,
            refreshed_total: 0,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Head handling tap `tap` (position in the tap list) at level `level`.
    pub fn head_index(&self, level: usize, tap: usize) -> usize {
        level * self.config.taps.len() + tap
    }

    pub fn head_params(&self, head: usize) -> &ParamSet {
        &self.heads[head].params
    }

    pub fn head_params_mut(&mut self, head: usize) -> &mut ParamSet {
        &mut self.heads[head].params
    }

    pub fn head_optimizer(&self, head: usize) -> &AdamW {
        &self.heads[head].opt
    }

    pub fn refreshed_total(&self) -> usize {
        self.refreshed_total
    }

    /// Order-sensitive hash over every head's parameters.
    pub fn fingerprint(&self) -> u64 {
        self.heads
            .iter()
            .fold(0xcbf29ce484222325u64, |h, head| (h ^ head.params.fingerprint()).wrapping_mul(0x100000001b3))
    }

    fn check_features(&self, feats: &[Vec<Tensor>]) -> Result<()> {
        let (nl, nt) = (self.config.t_star_levels.len(), self.config.taps.len());
        if feats.len() != nl || feats.iter().any(|f| f.len() != nt) {
            return Err(Error::invalid(format!(
                "feature structure {:?} does not match {nl} levels x {nt} taps",
                feats.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        for f in feats.iter().flatten() {
            if f.rank() != 2 || f.cols() != self.config.feature_dim {
                return Err(Error::shape("discriminator features", f.shape(), &[self.config.feature_dim]));
            }
        }
        Ok(())
    }

    fn bind_head(&self, tape: &mut Tape, head: usize, trainable: bool) -> Result<Vec<Var>> {
        self.heads[head]
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Logits `[n / group, 1]` of one head on `feat`.
    fn head_logits(&self, tape: &mut Tape, p: &[Var], feat: Var) -> Result<Var> {
        let n = tape.value(feat).rows();
        let group = self.config.pool_group.min(n.max(1));
        let mut h = feat;
        let mut k = 0;
        for l in 0..HEAD_LAYERS {
            if l == PER_ROW_LAYERS {
                h = tape.pool_rows(h, group)?;
            }
            h = tape.affine(h, p[k], p[k + 1])?;
            k += 2;
            if l + 1 < HEAD_LAYERS {
                h = tape.layer_norm(h, p[k], p[k + 1])?;
                h = tape.silu(h)?;
                k += 2;
            }
        }
        Ok(h)
    }

    /// Discriminator objective with head parameters bound as `head_vars`.
    fn disc_objective(
        &self,
        tape: &mut Tape,
        head_vars: &[Vec<Var>],
        real: &[Vec<Var>],
        fake: &[Vec<Var>],
    ) -> Result<(Var, Vec<(f64, f64)>)> {
        let mut terms = Vec::with_capacity(self.len());
        let mut stats = Vec::with_capacity(self.len());
        for (li, (r_level, f_level)) in real.iter().zip(fake).enumerate() {
            for (ti, (&r, &f)) in r_level.iter().zip(f_level).enumerate() {
                let hi = self.head_index(li, ti);
                let dr = self.head_logits(tape, &head_vars[hi], r)?;
                let df = self.head_logits(tape, &head_vars[hi], f)?;
                stats.push((tape.value(dr).mean(), tape.value(df).mean()));
                let term = head_disc_loss(tape, dr, df, self.config.literal_objective)?;
                terms.push(term);
            }
        }
        Ok((sum_terms(tape, &terms)?, stats))
    }

    /// Value of the discriminator loss summed over heads.
    pub fn disc_loss(&self, real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
        self.check_features(real)?;
        self.check_features(fake)?;
        let mut tape = Tape::new();
        let hv = (0..self.len()).map(|h| self.bind_head(&mut tape, h, false)).collect::<Result<Vec<_>>>()?;
        let rv = constants(&mut tape, real)?;
        let fv = constants(&mut tape, fake)?;
        let (loss, _) = self.disc_objective(&mut tape, &hv, &rv, &fv)?;
        Ok(tape.value(loss).item())
    }

    /// One AdamW step on every head. Only head parameters change.
    pub fn disc_update(&mut self, real: &FeatureSet, fake: &FeatureSet) -> Result<(f64, Vec<HeadStats>)> {
        self.check_features(real)?;
        self.check_features(fake)?;
        let mut tape = Tape::new();
        let hv = (0..self.len()).map(|h| self.bind_head(&mut tape, h, true)).collect::<Result<Vec<_>>>()?;
        let rv = constants(&mut tape, real)?;
        let fv = constants(&mut tape, fake)?;
        let (loss, raw) = self.disc_objective(&mut tape, &hv, &rv, &fv)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        for (head, vars) in self.heads.iter_mut().zip(&hv) {
            let g: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                .collect();
            head.opt.apply(head.params.tensors_mut(), &g)?;
        }
        let nt = self.config.taps.len();
        let stats = raw
            .into_iter()
            .enumerate()
            .map(|(head, (real_mean, fake_mean))| HeadStats {
                head,
                tap: self.config.taps.layers()[head % nt],
                t_star: self.config.t_star_levels[head / nt],
                real_mean,
                fake_mean,
            })
            .collect();
        Ok((value, stats))
    }

    /// Non-saturating generator loss recorded on `tape`. Head parameters are
    /// bound as constants, so gradients reach only the features.
    pub fn gen_loss_on_tape(&self, tape: &mut Tape, fake: &[Vec<Var>]) -> Result<Var> {
        let nl = self.config.t_star_levels.len();
        if fake.len() != nl || fake.iter().any(|f| f.len() != self.config.taps.len()) {
            return Err(Error::invalid("generator features do not match the bank layout"));
        }
        let mut terms = Vec::with_capacity(self.len());
        for (li, level) in fake.iter().enumerate() {
            for (ti, &f) in level.iter().enumerate() {
                let hv = self.bind_head(tape, self.head_index(li, ti), false)?;
                let d = self.head_logits(tape, &hv, f)?;
                let neg = tape.scale(d, -1.0)?;
                let l = tape.softplus(neg)?;
                terms.push(tape.mean(l)?);
            }
        }
        sum_terms(tape, &terms)
    }

    /// Value of the generator loss.
    pub fn gen_loss(&self, fake: &FeatureSet) -> Result<f64> {
        self.check_features(fake)?;
        let mut tape = Tape::new();
        let fv = constants(&mut tape, fake)?;
        let l = self.gen_loss_on_tape(&mut tape, &fv)?;
        Ok(tape.value(l).item())
    }

    /// Re-initializes each head independently with probability `refresh_p`,
    /// zeroing its optimizer state. Returns how many heads were refreshed.
    pub fn refresh_heads(&mut self, rng: &mut Rng) -> usize {
        let mut count = 0;
        for i in 0..self.heads.len() {
            if rng.bernoulli(self.config.refresh_p) {
                let params = init_head(&self.config, rng);
                self.heads[i].params = params;
                self.heads[i].opt.reset();
                count += 1;
            }
        }
        self.refreshed_total += count;
        count
    }
}

/// Per-head discriminator loss from real and fake logits.
fn head_disc_loss(tape: &mut Tape, dr: Var, df: Var, literal: bool) -> Result<Var> {
    let neg_r = tape.scale(dr, -1.0)?;
    let lr = tape.softplus(neg_r)?;
    let lr = tape.mean(lr)?;
    if literal {
        let neg_f = tape.scale(df, -1.0)?;
        let lf = tape.softplus(neg_f)?;
        let lf = tape.mean(lf)?;
        tape.sub(lr, lf)
    } else {
        let lf = tape.softplus(df)?;
        let lf = tape.mean(lf)?;
        tape.add(lr, lf)
    }
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or_else(|| Error::invalid("no loss terms"))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

fn constants(tape: &mut Tape, feats: &[Vec<Tensor>]) -> Result<Vec<Vec<Var>>> {
    feats
        .iter()
        .map(|level| level.iter().map(|t| tape.constant(t.clone())).collect())
        .collect()
}

/// Noises `x0` to `t_star` with fresh noise and returns the proxy's tap
/// features there (gradient-free).
pub fn extract_disc_features(
    proxy: &VelocityNet,
    x0: &Tensor,
    cond: &[Condition],
    t_star: f64,
    taps: &FeatureTaps,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    if !(0.0 < t_star && t_star < 1.0) {
        return Err(Error::invalid(format!("t_star must lie in (0, 1), got {t_star}")));
    }
    let eps = rng.normal_tensor(x0.shape());
    let xt = flow::interpolate(x0, &eps, t_star)?;
    Ok(proxy.forward_features(&xt.x, t_star, cond, taps)?.0)
}

/// Features at every level of the bank, `[level][tap]`. Each level draws its
/// noise from its own substream of `rng`.
pub fn extract_feature_set(
    proxy: &VelocityNet,
    x0: &Tensor,
    cond: &[Condition],
    taps: &FeatureTaps,
    levels: &[f64],
    rng: &Rng,
) -> Result<FeatureSet> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &t)| extract_disc_features(proxy, x0, cond, t, taps, &mut rng.substream_idx("level", i as u64)))
        .collect()
}

/// Differentiable features for the generator pass: `x0` is a tape variable,
/// the proxy is bound as constants, and the noise is drawn exactly as in
/// [`extract_feature_set`].
pub fn feature_set_on_tape(
    proxy: &VelocityNet,
    proxy_bound: &Bound,
    tape: &mut Tape,
    x0: Var,
    cond: &[Condition],
    taps: &FeatureTaps,
    levels: &[f64],
    rng: &Rng,
) -> Result<Vec<Vec<Var>>> {
    let shape = tape.value(x0).shape().to_vec();
    let mut out = Vec::with_capacity(levels.len());
    for (i, &t) in levels.iter().enumerate() {
        let eps = rng.substream_idx("level", i as u64).normal_tensor(&shape);
        let keep = tape.scale(x0, 1.0 - t)?;
        let noise = tape.constant(eps.scale(t))?;
        let xt = tape.add(keep, noise)?;
        let o = proxy.forward(tape, proxy_bound, xt, Times::Shared(t), cond, taps)?;
        out.push(o.taps);
    }
    Ok(out)
}
