//! Synthetic 2D data, flow-matching training of the multi-step teacher, and
//! closed-form Gaussian velocity oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, Schedule, VelocityField};
use crate::models::{Condition, FeatureTaps, NetConfig, Times, VelocityNet};
use crate::ndcore::{AdamW, AdamWConfig, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    GaussianMixture,
    Checkerboard,
    SingleGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub kind: DataKind,
    /// Mixture components or occupied checkerboard cells.
    pub modes: usize,
    /// Circle radius for mixtures, half-width of the board for checkerboards.
    pub radius: f64,
    pub sigma: f64,
    pub conditional: bool,
    #[serde(default)]
    pub offset: [f64; 2],
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            kind: DataKind::GaussianMixture,
            modes: 8,
            radius: 4.0,
            sigma: 0.3,
            conditional: true,
            offset: [0.0, 0.0],
        }
    }
}

impl DataSpec {
    pub fn single_gaussian(mean: [f64; 2], sigma: f64) -> Self {
        Self {
            kind: DataKind::SingleGaussian,
            modes: 1,
            radius: 0.0,
            sigma,
            conditional: false,
            offset: mean,
        }
    }

    pub fn checkerboard(half_width: f64) -> Self {
        Self {
            kind: DataKind::Checkerboard,
            modes: 8,
            radius: half_width,
            sigma: half_width / 4.0,
            conditional: true,
            offset: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::invalid("data spec needs at least one mode"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("data sigma must be positive, got {}", self.sigma)));
        }
        match self.kind {
            DataKind::SingleGaussian if self.modes != 1 => {
                Err(Error::invalid("single_gaussian has exactly one mode"))
            }
            DataKind::GaussianMixture if self.modes > 1 && !(self.radius > 0.0) => {
                Err(Error::invalid("mixture radius must be positive so centers are distinct"))
            }
            DataKind::Checkerboard if self.modes != 8 || !(self.radius > 0.0) => {
                Err(Error::invalid("checkerboard uses the 8 dark cells of a 4x4 board with positive half-width"))
            }
            _ => Ok(()),
        }
    }

    /// Number of condition classes a network needs for this data.
    pub fn classes(&self) -> usize {
        if self.conditional {
            self.modes
        } else {
            1
        }
    }

    /// Mode centers (cell centers for the checkerboard).
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let [ox, oy] = self.offset;
        match self.kind {
            DataKind::SingleGaussian => vec![[ox, oy]],
            DataKind::GaussianMixture => (0..self.modes)
                .map(|k| {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / self.modes as f64;
                    [ox + self.radius * a.cos(), oy + self.radius * a.sin()]
                })
                .collect(),
            DataKind::Checkerboard => {
                let cell = self.radius / 2.0;
                let mut out = Vec::new();
                for row in 0..4 {
                    for col in 0..4 {
                        if (row + col) % 2 == 0 {
                            out.push([
                                ox - self.radius + (col as f64 + 0.5) * cell,
                                oy - self.radius + (row as f64 + 0.5) * cell,
                            ]);
                        }
                    }
                }
                out
            }
        }
    }

    /// Axis-aligned support for the checkerboard: `[xmin, xmax, ymin, ymax]`.
    pub fn board_bounds(&self) -> [f64; 4] {
        let [ox, oy] = self.offset;
        [ox - self.radius, ox + self.radius, oy - self.radius, oy + self.radius]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub cond: Vec<Condition>,
    /// Generating mode of each row, conditional or not.
    pub modes: Vec<usize>,
}

pub fn gen_data(spec: &DataSpec, n: usize, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("gen_data needs n > 0"));
    }
    let centers = spec.centers();
    let mut data = Vec::with_capacity(2 * n);
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(centers.len());
        let [cx, cy] = centers[k];
        match spec.kind {
            DataKind::Checkerboard => {
                let half = spec.radius / 4.0;
                data.push(cx + rng.uniform_range(-half, half));
                data.push(cy + rng.uniform_range(-half, half));
            }
            _ => {
                data.push(cx + spec.sigma * rng.normal());
                data.push(cy + spec.sigma * rng.normal());
            }
        }
        modes.push(k);
    }
    let cond = modes
        .iter()
        .map(|&k| if spec.conditional { Condition::Class(k) } else { Condition::Class(0) })
        .collect();
    Ok(Dataset {
        x: Tensor::new(&[n, 2], data)?,
        cond,
        modes,
    })
}

/// Random draws consumed by one flow-matching batch.
#[derive(Clone, Debug)]
pub struct FmDraw {
    pub t: Vec<f64>,
    pub eps: Tensor,
    pub cond: Vec<Condition>,
}

/// Draws `t ~ U(0,1)`, `eps ~ N(0, I)`, replaces conditions by `Null` with
/// probability `cond_dropout_p`, and records the flow-matching loss
/// `mean_i ||(eps_i - x0_i) - net(x_t, t, c)||^2` on `tape`.
pub fn fm_loss_on_tape(
    net: &VelocityNet,
    tape: &mut Tape,
    bound: &crate::models::Bound,
    x0: &Tensor,
    cond: &[Condition],
    rng: &mut Rng,
    cond_dropout_p: f64,
) -> Result<(Var, FmDraw)> {
    if !(0.0..1.0).contains(&cond_dropout_p) {
        return Err(Error::invalid(format!("cond_dropout_p must lie in [0, 1), got {cond_dropout_p}")));
    }
    let n = x0.rows();
    if cond.len() != n {
        return Err(Error::shape("flow_matching_loss", x0.shape(), &[cond.len()]));
    }
    let d = x0.cols();
    let t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let eps = rng.normal_tensor(x0.shape());
    let cond: Vec<Condition> = cond
        .iter()
        .map(|&c| if rng.bernoulli(cond_dropout_p) { Condition::Null } else { c })
        .collect();
    let mut xt = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let (a, e) = (x0.data()[i * d + j], eps.data()[i * d + j]);
            xt.push((1.0 - t[i]) * a + t[i] * e);
            target.push(e - a);
        }
    }
    let xv = tape.constant(Tensor::new(x0.shape(), xt)?)?;
    let tv = tape.constant(Tensor::new(x0.shape(), target)?)?;
    let out = net.forward(tape, bound, xv, Times::PerRow(&t), &cond, &FeatureTaps::none())?;
    let mse = tape.mse(out.velocity, tv)?;
    let loss = tape.scale(mse, d as f64)?;
    Ok((loss, FmDraw { t, eps, cond }))
}

/// Value-only flow-matching loss.
pub fn flow_matching_loss(
    net: &VelocityNet,
    x0: &Tensor,
    cond: &[Condition],
    rng: &mut Rng,
    cond_dropout_p: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false)?;
    let (loss, _) = fm_loss_on_tape(net, &mut tape, &bound, x0, cond, rng, cond_dropout_p)?;
    Ok(tape.value(loss).item())
}

/// One AdamW step of flow matching on `net`. Returns the batch loss.
pub fn fm_train_step(
    net: &mut VelocityNet,
    opt: &mut AdamW,
    x0: &Tensor,
    cond: &[Condition],
    rng: &mut Rng,
    cond_dropout_p: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true)?;
    let (loss, _) = fm_loss_on_tape(net, &mut tape, &bound, x0, cond, rng, cond_dropout_p)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = net.collect_grads(&tape, &mut grads, &bound);
    opt.apply(net.params_mut().tensors_mut(), &g)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Learning rate at the final iteration as a fraction of the initial one
    /// (cosine decay); 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    /// Decay of the weight EMA that becomes the returned teacher; 0 keeps the
    /// raw weights.
    pub ema_decay: f64,
    pub cond_dropout_p: f64,
    /// Iterations before the divergence check arms.
    pub warmup: usize,
    pub sample_steps: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: 256,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            final_lr_fraction: 0.05,
            ema_decay: 0.0,
            cond_dropout_p: 0.1,
            warmup: 200,
            sample_steps: 50,
        }
    }
}

pub(crate) fn cosine_lr(base: f64, final_fraction: f64, it: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let p = it as f64 / (total - 1) as f64;
    let f = final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    base * f
}

/// A trained multi-step teacher plus what it was trained with.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub net: VelocityNet,
    pub cond_dropout_p: f64,
}

impl VelocityField for Teacher {
    fn velocity(&self, x: &Tensor, t: f64, cond: &[Condition]) -> Result<Tensor> {
        self.net.forward_velocity(x, t, cond)
    }
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub teacher: Teacher,
    /// `(iteration, loss)` for every iteration.
    pub curve: Vec<(usize, f64)>,
}

pub(crate) fn check_divergence(it: usize, loss: f64, initial: f64, warmup: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iteration: it,
            detail: format!("loss is {loss}"),
        });
    }
    if it >= warmup && loss > 10.0 * initial {
        return Err(Error::Diverged {
            iteration: it,
            detail: format!("loss {loss:.4e} exceeds 10x initial {initial:.4e}"),
        });
    }
    Ok(())
}

pub fn train_teacher(spec: &DataSpec, net: &NetConfig, config: &TeacherConfig, rng: &Rng) -> Result<TeacherRun> {
    spec.validate()?;
    if net.classes != spec.classes() {
        return Err(Error::invalid(format!(
            "net has {} classes but data has {}",
            net.classes,
            spec.classes()
        )));
    }
    let mut net = VelocityNet::new(*net, &mut rng.substream("teacher-init"))?;
    let mut opt = AdamW::new(config.optimizer, net.params().tensors());
    let data_rng = rng.substream("teacher-data");
    let fm_rng = rng.substream("teacher-fm");
    if !(0.0..1.0).contains(&config.ema_decay) {
        return Err(Error::invalid(format!("ema_decay must lie in [0, 1), got {}", config.ema_decay)));
    }
    let mut shadow = net.params().clone();
    let mut curve = Vec::with_capacity(config.iterations);
    let mut initial = f64::NAN;
    for it in 0..config.iterations {
        opt.config.lr = cosine_lr(config.optimizer.lr, config.final_lr_fraction, it, config.iterations);
        let batch = gen_data(spec, config.batch, &mut data_rng.substream_idx("batch", it as u64))?;
        let loss = fm_train_step(
            &mut net,
            &mut opt,
            &batch.x,
            &batch.cond,
            &mut fm_rng.substream_idx("draw", it as u64),
            config.cond_dropout_p,
        )?;
        if it == 0 {
            initial = loss;
        }
        check_divergence(it, loss, initial, config.warmup)?;
        curve.push((it, loss));
        if config.ema_decay > 0.0 {
            crate::models::ema_update(&mut shadow, net.params(), config.ema_decay)?;
        }
    }
    if config.ema_decay > 0.0 {
        net.set_params(shadow)?;
    }
    Ok(TeacherRun {
        teacher: Teacher {
            net,
            cond_dropout_p: config.cond_dropout_p,
        },
        curve,
    })
}

/// Exact marginal velocity `E[eps - x0 | x_t]` for isotropic Gaussian data
/// `N(mu, sigma^2 I)` on the straight path.
pub fn analytic_velocity_gaussian(mu: &[f64], sigma: f64, x_t: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("analytic velocity needs t in (0, 1], got {t}")));
    }
    let d = x_t.cols();
    if mu.len() != d {
        return Err(Error::shape("analytic_velocity_gaussian", &[mu.len()], x_t.shape()));
    }
    let a = 1.0 - t;
    let s2 = a * a * sigma * sigma + t * t;
    let gain = a * sigma * sigma / s2;
    let mut out = x_t.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (j, x) in row.iter_mut().enumerate() {
            let e_x0 = mu[j] + gain * (*x - a * mu[j]);
            let e_eps = (*x - a * e_x0) / t;
            *x = e_eps - e_x0;
        }
    }
    Ok(out)
}

/// Exact marginal score `-(x_t - (1-t) mu) / ((1-t)^2 sigma^2 + t^2)`.
pub fn analytic_score_gaussian(mu: &[f64], sigma: f64, x_t: &Tensor, t: f64) -> Result<Tensor> {
    let d = x_t.cols();
    if mu.len() != d {
        return Err(Error::shape("analytic_score_gaussian", &[mu.len()], x_t.shape()));
    }
    let a = 1.0 - t;
    let s2 = a * a * sigma * sigma + t * t;
    let mut out = x_t.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = -(*x - a * mu[j]) / s2;
        }
    }
    Ok(out)
}

/// Square grid of `side * side` points centred on the marginal mean
/// `(1 - t) mu`, spanning two marginal standard deviations each way.
pub fn marginal_grid(mu: &[f64; 2], sigma: f64, t: f64, side: usize) -> Result<Tensor> {
    if side < 2 {
        return Err(Error::invalid("grid needs at least two points per side"));
    }
    let a = 1.0 - t;
    let s = (a * a * sigma * sigma + t * t).sqrt();
    let coord = |i: usize| -2.0 * s + 4.0 * s * i as f64 / (side - 1) as f64;
    let mut data = Vec::with_capacity(2 * side * side);
    for i in 0..side {
        for j in 0..side {
            data.push(a * mu[0] + coord(i));
            data.push(a * mu[1] + coord(j));
        }
    }
    Tensor::new(&[side * side, 2], data)
}

/// Largest velocity error of `field` against the single-Gaussian oracle on
/// [`marginal_grid`] at each `t`, measured in units of the oracle's RMS
/// velocity magnitude over the same grid.
pub fn oracle_grid_error<F: VelocityField + ?Sized>(
    field: &F,
    mu: &[f64; 2],
    sigma: f64,
    times: &[f64],
    side: usize,
) -> Result<Vec<(f64, f64)>> {
    times
        .iter()
        .map(|&t| {
            let x = marginal_grid(mu, sigma, t, side)?;
            let cond = vec![Condition::Class(0); x.rows()];
            let v = field.velocity(&x, t, &cond)?;
            let exact = analytic_velocity_gaussian(mu, sigma, &x, t)?;
            let rms = (exact.sq_norm() / x.rows() as f64).sqrt();
            let worst = v
                .data()
                .chunks_exact(2)
                .zip(exact.data().chunks_exact(2))
                .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .fold(0.0, f64::max);
            Ok((t, worst / rms))
        })
        .collect()
}

/// Closed-form velocity field of a (conditional) isotropic Gaussian mixture.
/// `Class(k)` uses component `k` alone; `Null` uses the full mixture posterior.
#[derive(Clone, Debug)]
pub struct GaussianMixtureOracle {
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl GaussianMixtureOracle {
    pub fn from_spec(spec: &DataSpec) -> Result<Self> {
        if spec.kind == DataKind::Checkerboard {
            return Err(Error::invalid("no closed-form oracle for the checkerboard"));
        }
        Ok(Self {
            centers: spec.centers(),
            sigma: spec.sigma,
        })
    }

    fn row_velocity(&self, x: [f64; 2], t: f64, cond: Condition) -> [f64; 2] {
        let a = 1.0 - t;
        let s2 = a * a * self.sigma * self.sigma + t * t;
        let comp = |mu: &[f64; 2]| {
            let g = a * self.sigma * self.sigma / s2;
            let mut v = [0.0; 2];
            for j in 0..2 {
                let e0 = mu[j] + g * (x[j] - a * mu[j]);
                let ee = (x[j] - a * e0) / t;
                v[j] = ee - e0;
            }
            v
        };
        match cond {
            Condition::Class(k) => comp(&self.centers[k.min(self.centers.len() - 1)]),
            Condition::Null => {
                let logw: Vec<f64> = self
                    .centers
                    .iter()
                    .map(|m| {
                        let dx = x[0] - a * m[0];
                        let dy = x[1] - a * m[1];
                        -(dx * dx + dy * dy) / (2.0 * s2)
                    })
                    .collect();
                let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                let mut v = [0.0; 2];
                for (wk, m) in w.iter().zip(&self.centers) {
                    let vk = comp(m);
                    v[0] += wk / z * vk[0];
                    v[1] += wk / z * vk[1];
                }
                v
            }
        }
    }
}

impl VelocityField for GaussianMixtureOracle {
    fn velocity(&self, x: &Tensor, t: f64, cond: &[Condition]) -> Result<Tensor> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid(format!("oracle velocity needs t in (0, 1], got {t}")));
        }
        if x.cols() != 2 || x.rows() != cond.len() {
            return Err(Error::shape("mixture oracle", x.shape(), &[cond.len(), 2]));
        }
        let mut out = Vec::with_capacity(x.len());
        for (i, &c) in cond.iter().enumerate() {
            let r = x.row(i);
            out.extend_from_slice(&self.row_velocity([r[0], r[1]], t, c));
        }
        Tensor::new(x.shape(), out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub teacher_id: String,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub x0: Tensor,
    pub cond: Vec<Condition>,
    pub meta: SyntheticMeta,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    /// Random minibatch (with replacement).
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Result<(Tensor, Vec<Condition>)> {
        if self.is_empty() {
            return Err(Error::invalid("cannot draw from an empty synthetic set"));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.below(self.len())).collect();
        Ok((self.x0.select_rows(&idx)?, idx.iter().map(|&i| self.cond[i]).collect()))
    }
}

/// Uniformly random class labels (or `Class(0)` when `classes == 1`).
pub fn draw_conditions(classes: usize, n: usize, rng: &mut Rng) -> Vec<Condition> {
    (0..n).map(|_| Condition::Class(rng.below(classes))).collect()
}

/// Samples `n` teacher outputs with `steps` uniform Euler steps and CFG.
pub fn gen_synthetic_set(
    teacher: &Teacher,
    teacher_id: &str,
    n: usize,
    steps: usize,
    guidance_scale: f64,
    rng: &Rng,
) -> Result<SyntheticSet> {
    if guidance_scale != 1.0 && teacher.cond_dropout_p <= 0.0 {
        return Err(Error::invalid(
            "guidance needs a teacher trained with condition dropout (its null row is untrained)",
        ));
    }
    let meta = SyntheticMeta {
        teacher_id: teacher_id.to_string(),
        steps,
        guidance_scale,
        seed: rng.seed(),
    };
    let classes = teacher.net.config().classes;
    if n == 0 {
        return Ok(SyntheticSet {
            x0: Tensor::zeros(&[0, teacher.net.config().data_dim]),
            cond: Vec::new(),
            meta,
        });
    }
    let cond = draw_conditions(classes, n, &mut rng.substream("synthetic-cond"));
    let z = rng.substream("synthetic-z").normal_tensor(&[n, teacher.net.config().data_dim]);
    let schedule = Schedule::uniform(steps)?;
    let x0 = flow::sample_endpoints(teacher, &schedule, &z, &cond, guidance_scale)?;
    Ok(SyntheticSet { x0, cond, meta })
}
