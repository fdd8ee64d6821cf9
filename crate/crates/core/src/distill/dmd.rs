//! Distribution matching with a fake-score proxy, optional adversarial and
//! Gram terms, and timestep sharing.
//!
//! Per iteration: `update_ratio` proxy and discriminator updates on fresh
//! student samples, a head refresh draw, then one generator update. The
//! generator update picks a schedule point, re-runs the student there with
//! gradients, and pushes its predicted endpoint along the normalized score
//! difference evaluated at the next schedule timestep (or at the same one
//! after the noisier-start phase).

use super::two_step::gram_loss_on_tape;
use super::{DistillState, Stage};
use crate::adversarial::{extract_feature_set, feature_set_on_tape, DiscriminatorBank, FeatureSet, HeadStats};
use crate::config::DmdConfig;
use crate::error::{Error, Result};
use crate::flow::{self, Schedule, VelocityField};
use crate::io::{fmt_f64, Table};
use crate::models::{Bound, Condition, FeatureTaps, Times, VelocityNet};
use crate::ndcore::{AdamW, Rng, Tape, Tensor, Var};
use crate::teacher::{draw_conditions, fm_train_step, SyntheticSet, Teacher};

/// The student as seen by rollouts: one net, or two nets split by timestep.
#[derive(Clone, Copy, Debug)]
pub enum StudentView<'a> {
    Single(&'a VelocityNet),
    Split {
        low: &'a VelocityNet,
        high: &'a VelocityNet,
        boundary: f64,
    },
}

impl<'a> StudentView<'a> {
    pub fn net_for(&self, t: f64) -> &'a VelocityNet {
        match *self {
            StudentView::Single(n) => n,
            StudentView::Split { low, high, boundary } => {
                if t <= boundary {
                    low
                } else {
                    high
                }
            }
        }
    }
}

impl VelocityField for StudentView<'_> {
    fn velocity(&self, x: &Tensor, t: f64, cond: &[Condition]) -> Result<Tensor> {
        self.net_for(t).forward_velocity(x, t, cond)
    }
}

/// Where the generator update reads its input and which timestep it targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetPoint {
    pub input_index: usize,
    pub target_index: usize,
    pub input_t: f64,
    pub target_t: f64,
}

/// Uniform choice of target schedule index. With `noisier_start` the input
/// is the previous, noisier point and index 0 cannot be a target.
pub fn select_target(schedule: &Schedule, noisier_start: bool, rng: &mut Rng) -> Result<TargetPoint> {
    let s = schedule.steps();
    let (input_index, target_index) = if noisier_start {
        if s.len() < 2 {
            return Err(Error::invalid("noisier start needs at least two schedule steps"));
        }
        let i = 1 + rng.below(s.len() - 1);
        (i - 1, i)
    } else {
        let i = rng.below(s.len());
        (i, i)
    };
    Ok(TargetPoint {
        input_index,
        target_index,
        input_t: s[input_index],
        target_t: s[target_index],
    })
}

/// The student's own rollout from `z`: the point at every schedule step
/// (excluding the final sample), paired with its timestep.
pub fn student_rollout_with_shared_points<F: VelocityField + ?Sized>(
    student: &F,
    schedule: &Schedule,
    z: &Tensor,
    cond: &[Condition],
) -> Result<Vec<(Tensor, f64)>> {
    let mut traj = flow::sample(student, schedule, z, cond, 1.0)?;
    traj.pop();
    Ok(traj.into_iter().map(|p| (p.x, p.t)).collect())
}

/// Normalized score difference `(s_fake - s_real) / (mean|s_fake - s_real| + eps)`
/// and the normalizer.
pub fn dmd_direction(s_real: &Tensor, s_fake: &Tensor, eps: f64) -> Result<(Tensor, f64)> {
    let diff = s_fake.sub(s_real)?;
    let eta = diff.data().iter().map(|v| v.abs()).sum::<f64>() / diff.len().max(1) as f64 + eps;
    Ok((diff.scale(1.0 / eta), eta))
}

/// Everything the surrogate depends on apart from the student parameters.
/// `noise` and `direction` are held fixed (stop-gradient).
#[derive(Clone, Debug)]
pub struct SurrogateInputs {
    pub x_in: Tensor,
    pub t_in: f64,
    /// Per-row timestep at which the endpoint is re-noised.
    pub t_score: Vec<f64>,
    pub noise: Tensor,
    pub cond: Vec<Condition>,
    pub direction: Tensor,
}

struct Renoised {
    endpoint: Var,
    renoised: Var,
}

/// `x0 = x_in - t_in G(x_in, t_in)` and `(1 - t_s) x0 + t_s noise` on `tape`.
fn renoise_on_tape(
    student: &VelocityNet,
    tape: &mut Tape,
    bound: &Bound,
    x_in: &Tensor,
    t_in: f64,
    t_score: &[f64],
    noise: &Tensor,
    cond: &[Condition],
) -> Result<(Renoised, Tensor)> {
    let n = x_in.rows();
    if t_score.len() != n || noise.shape() != x_in.shape() {
        return Err(Error::shape("renoise", noise.shape(), x_in.shape()));
    }
    let xv = tape.constant(x_in.clone())?;
    let out = student.forward(tape, bound, xv, Times::Shared(t_in), cond, &FeatureTaps::none())?;
    let velocity = tape.value(out.velocity).clone();
    let step = tape.scale(out.velocity, -t_in)?;
    let endpoint = tape.add(xv, step)?;
    let keep = tape.constant(Tensor::new(&[n, 1], t_score.iter().map(|t| 1.0 - t).collect())?)?;
    let kept = tape.mul_col(endpoint, keep)?;
    let d = x_in.cols();
    let scaled: Vec<f64> = noise.data().iter().enumerate().map(|(k, e)| t_score[k / d] * e).collect();
    let nv = tape.constant(Tensor::new(x_in.shape(), scaled)?)?;
    let renoised = tape.add(kept, nv)?;
    Ok((Renoised { endpoint, renoised }, velocity))
}

/// `sum <direction, x_theta> / batch` recorded on `tape`.
fn surrogate_on_tape(tape: &mut Tape, direction: &Tensor, x_theta: Var) -> Result<Var> {
    let n = direction.rows().max(1);
    let g = tape.constant(direction.clone())?;
    let prod = tape.mul(g, x_theta)?;
    let s = tape.sum(prod)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Value of the DMD surrogate loss.
pub fn surrogate_loss(student: &VelocityNet, inp: &SurrogateInputs) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, false)?;
    let (r, _) = renoise_on_tape(student, &mut tape, &bound, &inp.x_in, inp.t_in, &inp.t_score, &inp.noise, &inp.cond)?;
    let l = surrogate_on_tape(&mut tape, &inp.direction, r.renoised)?;
    Ok(tape.value(l).item())
}

/// Gradient of [`surrogate_loss`] with respect to every student parameter.
pub fn surrogate_grad(student: &VelocityNet, inp: &SurrogateInputs) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, true)?;
    let (r, _) = renoise_on_tape(student, &mut tape, &bound, &inp.x_in, inp.t_in, &inp.t_score, &inp.noise, &inp.cond)?;
    let l = surrogate_on_tape(&mut tape, &inp.direction, r.renoised)?;
    let mut grads = tape.backward(l)?;
    Ok(student.collect_grads(&tape, &mut grads, &bound))
}

/// Guided velocity with one timestep per row. Rows sharing a timestep are
/// evaluated together.
fn velocity_per_row(net: &VelocityNet, x: &Tensor, t: &[f64], cond: &[Condition], guidance: f64) -> Result<Tensor> {
    if let Some(&t0) = t.first() {
        if t.iter().all(|&v| v == t0) {
            return flow::guided_velocity(net, x, t0, cond, guidance);
        }
    }
    let eval = |c: &[Condition]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = net.forward(&mut tape, &bound, xv, Times::PerRow(t), c, &FeatureTaps::none())?;
        Ok(tape.value(out.velocity).clone())
    };
    let vc = eval(cond)?;
    if guidance == 1.0 {
        return Ok(vc);
    }
    let vu = eval(&vec![Condition::Null; cond.len()])?;
    vu.zip_map(&vc, "guidance", |u, c| u + guidance * (c - u))
}

/// Score `-(x + (1 - t) v) / t` row by row, with the singularity guard.
fn score_per_row(
    net: &VelocityNet,
    x: &Tensor,
    t: &[f64],
    cond: &[Condition],
    guidance: f64,
    t_min: f64,
) -> Result<Tensor> {
    if let Some(&bad) = t.iter().find(|&&v| v < t_min) {
        return Err(Error::TimestepBelowGuard { t: bad, t_min });
    }
    let v = velocity_per_row(net, x, t, cond, guidance)?;
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .zip(v.data())
        .enumerate()
        .map(|(k, (&xi, &vi))| {
            let ti = t[k / d];
            -(xi + (1.0 - ti) * vi) / ti
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Options for one DMD-style stage.
#[derive(Clone, Debug)]
pub struct StageSettings {
    pub iterations: usize,
    pub batch: usize,
    pub dmd: DmdConfig,
    /// Gram-matrix weight; 0 disables the term.
    pub lambda_gram: f64,
    /// Taps and noise levels used for the Gram term when no discriminator
    /// bank is present.
    pub gram_taps: FeatureTaps,
    pub gram_levels: Vec<f64>,
    /// Every this many iterations the per-head logit means are kept.
    pub head_stats_every: usize,
}

impl StageSettings {
    pub fn from_dmd(dmd: &DmdConfig, batch: usize) -> Self {
        Self {
            iterations: dmd.iterations,
            batch,
            dmd: dmd.clone(),
            lambda_gram: 0.0,
            gram_taps: FeatureTaps::default(),
            gram_levels: Vec::new(),
            head_stats_every: 10,
        }
    }

    fn switch_iteration(&self) -> usize {
        (self.dmd.noisier_start_fraction * self.iterations as f64).round() as usize
    }
}

/// Result of one generator update.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorStepLog {
    pub target: TargetPoint,
    /// Timesteps at which the real and fake scores were evaluated, one per row.
    pub score_times: Vec<f64>,
    pub dmd_loss: f64,
    pub adv_loss: f64,
    pub gram_loss: f64,
    pub eta: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub noisier_start: bool,
    pub proxy_updates: usize,
    pub disc_updates: usize,
    pub generator_updates: usize,
    pub proxy_loss: f64,
    pub disc_loss: f64,
    pub refreshed: usize,
    pub generator: GeneratorStepLog,
}

#[derive(Clone, Debug, Default)]
pub struct StageLog {
    pub iterations: Vec<IterationLog>,
    pub head_stats: Vec<(usize, Vec<HeadStats>)>,
}

impl StageLog {
    pub const HEADER: [&'static str; 15] = [
        "iteration",
        "noisier_start",
        "proxy_updates",
        "disc_updates",
        "generator_updates",
        "proxy_loss",
        "disc_loss",
        "refreshed",
        "input_t",
        "target_t",
        "dmd_loss",
        "adv_loss",
        "gram_loss",
        "eta",
        "grad_norm",
    ];

    /// Proxy (and discriminator) updates per generator update over the run.
    pub fn update_ratio(&self) -> Option<(f64, f64)> {
        let g: usize = self.iterations.iter().map(|l| l.generator_updates).sum();
        if g == 0 {
            return None;
        }
        let p: usize = self.iterations.iter().map(|l| l.proxy_updates).sum();
        let d: usize = self.iterations.iter().map(|l| l.disc_updates).sum();
        Some((p as f64 / g as f64, d as f64 / g as f64))
    }

    pub fn refreshed_total(&self) -> usize {
        self.iterations.iter().map(|l| l.refreshed).sum()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(Self::HEADER);
        for l in &self.iterations {
            let g = &l.generator;
            t.push(vec![
                l.iteration.to_string(),
                l.noisier_start.to_string(),
                l.proxy_updates.to_string(),
                l.disc_updates.to_string(),
                l.generator_updates.to_string(),
                fmt_f64(l.proxy_loss),
                fmt_f64(l.disc_loss),
                l.refreshed.to_string(),
                fmt_f64(g.target.input_t),
                fmt_f64(g.target.target_t),
                fmt_f64(g.dmd_loss),
                fmt_f64(g.adv_loss),
                fmt_f64(g.gram_loss),
                fmt_f64(g.eta),
                fmt_f64(g.grad_norm),
            ])
            .expect("row width matches header");
        }
        t
    }

    pub fn head_stats_table(&self) -> Table {
        let header = ["iteration", "head", "tap", "t_star", "real_mean", "fake_mean"];
        let mut t = Table::new(header);
        for (it, stats) in &self.head_stats {
            for s in stats {
                t.push(vec![
                    it.to_string(),
                    s.head.to_string(),
                    s.tap.to_string(),
                    fmt_f64(s.t_star),
                    fmt_f64(s.real_mean),
                    fmt_f64(s.fake_mean),
                ])
                .expect("row width matches header");
            }
        }
        t
    }
}

/// One flow-matching step of the proxy on student samples.
pub fn proxy_update(
    proxy: &mut VelocityNet,
    opt: &mut AdamW,
    samples: &Tensor,
    cond: &[Condition],
    cond_dropout: f64,
    rng: &mut Rng,
) -> Result<f64> {
    fm_train_step(proxy, opt, samples, cond, rng, cond_dropout)
}

/// Read-only context of a generator update.
pub(crate) struct GeneratorContext<'a> {
    pub teacher: &'a Teacher,
    pub proxy: &'a VelocityNet,
    pub bank: Option<&'a DiscriminatorBank>,
    pub schedule: &'a Schedule,
    pub settings: &'a StageSettings,
    /// Proxy features of a real (synthetic) batch, for the Gram term.
    pub real_features: Option<&'a FeatureSet>,
}

/// One generator update on `trainee` from `x_in` towards `target`.
pub(crate) fn generator_step(
    trainee: &mut VelocityNet,
    opt: &mut AdamW,
    ctx: &GeneratorContext<'_>,
    x_in: &Tensor,
    cond: &[Condition],
    target: TargetPoint,
    rng: &mut Rng,
) -> Result<GeneratorStepLog> {
    let cfg = &ctx.settings.dmd;
    let n = x_in.rows();
    let mut tape = Tape::new();
    let bound = trainee.bind(&mut tape, true)?;

    // first pass only to read the stop-gradient noise estimate
    let v0 = trainee.forward_velocity(x_in, target.input_t, cond)?;
    let (t_score, noise) = if cfg.timestep_sharing {
        (vec![target.target_t; n], flow::velocity_to_eps(x_in, &v0, target.input_t)?)
    } else {
        let [lo, hi] = cfg.renoise_t_range;
        let ts: Vec<f64> = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        (ts, rng.normal_tensor(x_in.shape()))
    };
    if cfg.timestep_sharing {
        if let Some(&bad) = t_score.iter().find(|&&t| !ctx.schedule.contains(t)) {
            return Err(Error::Stage(format!("score evaluated at {bad}, which is not a schedule timestep")));
        }
    }
    let (r, _) = renoise_on_tape(trainee, &mut tape, &bound, x_in, target.input_t, &t_score, &noise, cond)?;
    let x_theta = tape.value(r.renoised).clone();

    let t_min = if cfg.timestep_sharing { ctx.schedule.t_min() } else { cfg.renoise_t_range[0].min(ctx.schedule.t_min()) };
    let s_real = score_per_row(&ctx.teacher.net, &x_theta, &t_score, cond, cfg.real_guidance, t_min)?;
    let s_fake = score_per_row(ctx.proxy, &x_theta, &t_score, cond, 1.0, t_min)?;
    let (direction, eta) = dmd_direction(&s_real, &s_fake, cfg.normalizer_eps)?;
    let dmd = surrogate_on_tape(&mut tape, &direction, r.renoised)?;
    let dmd_value = tape.value(dmd).item();
    let mut total = dmd;

    let feature_rng = rng.substream("generator-features");
    let want_adv = ctx.bank.is_some() && cfg.lambda_adv > 0.0;
    let want_gram = ctx.settings.lambda_gram > 0.0;
    let mut adv_value = 0.0;
    let mut gram_value = 0.0;
    if want_adv || want_gram {
        let (taps, levels) = match ctx.bank {
            Some(b) => (&b.config().taps, b.config().t_star_levels.as_slice()),
            None => (&ctx.settings.gram_taps, ctx.settings.gram_levels.as_slice()),
        };
        let proxy_bound = ctx.proxy.bind(&mut tape, false)?;
        let fake = feature_set_on_tape(ctx.proxy, &proxy_bound, &mut tape, r.endpoint, cond, taps, levels, &feature_rng)?;
        if want_adv {
            let bank = ctx.bank.expect("checked above");
            let adv = bank.gen_loss_on_tape(&mut tape, &fake)?;
            adv_value = tape.value(adv).item();
            let w = tape.scale(adv, cfg.lambda_adv)?;
            total = tape.add(total, w)?;
        }
        if want_gram {
            let real = ctx
                .real_features
                .ok_or_else(|| Error::invalid("Gram term needs real features"))?;
            let g = gram_loss_on_tape(&mut tape, real, &fake)?;
            gram_value = tape.value(g).item();
            let w = tape.scale(g, ctx.settings.lambda_gram)?;
            total = tape.add(total, w)?;
        }
    }

    let mut grads = tape.backward(total)?;
    let g = trainee.collect_grads(&tape, &mut grads, &bound);
    let grad_norm = g.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite("generator gradient"));
    }
    opt.apply(trainee.params_mut().tensors_mut(), &g)?;
    Ok(GeneratorStepLog {
        target,
        score_times: t_score,
        dmd_loss: dmd_value,
        adv_loss: adv_value,
        gram_loss: gram_value,
        eta,
        grad_norm,
    })
}

/// One generator update of `state.student` with timestep sharing settings
/// taken from `settings`. No adversarial or Gram term.
pub fn dmd_step_shared(
    state: &mut DistillState,
    settings: &StageSettings,
    x_in: &Tensor,
    cond: &[Condition],
    target: TargetPoint,
    rng: &mut Rng,
) -> Result<GeneratorStepLog> {
    let ctx = GeneratorContext {
        teacher: &state.teacher,
        proxy: &state.proxy,
        bank: None,
        schedule: &state.schedule,
        settings,
        real_features: None,
    };
    generator_step(&mut state.student, &mut state.student_opt, &ctx, x_in, cond, target, rng)
}

pub(crate) struct CriticLog {
    pub proxy_updates: usize,
    pub disc_updates: usize,
    pub proxy_loss: f64,
    pub disc_loss: f64,
    pub refreshed: usize,
    pub head_stats: Vec<HeadStats>,
}

/// Proxy and discriminator updates against fresh student samples, then one
/// refresh draw over the heads.
pub(crate) fn critic_phase(
    student: StudentView<'_>,
    schedule: &Schedule,
    proxy: &mut VelocityNet,
    proxy_opt: &mut AdamW,
    mut bank: Option<&mut DiscriminatorBank>,
    real: &SyntheticSet,
    settings: &StageSettings,
    rng: &Rng,
) -> Result<CriticLog> {
    let cfg = &settings.dmd;
    let classes = proxy.config().classes;
    let dim = proxy.config().data_dim;
    let mut log = CriticLog {
        proxy_updates: 0,
        disc_updates: 0,
        proxy_loss: 0.0,
        disc_loss: 0.0,
        refreshed: 0,
        head_stats: Vec::new(),
    };
    for k in 0..cfg.update_ratio {
        let mut r = rng.substream_idx("critic", k as u64);
        let c = draw_conditions(classes, settings.batch, &mut r);
        let z = r.normal_tensor(&[settings.batch, dim]);
        let fake = flow::sample_endpoints(&student, schedule, &z, &c, 1.0)?;
        log.proxy_loss += proxy_update(proxy, proxy_opt, &fake, &c, cfg.proxy_cond_dropout, &mut r)?;
        log.proxy_updates += 1;
        if let Some(b) = bank.as_deref_mut() {
            let (rx, rc) = real.draw(settings.batch, &mut r)?;
            let (taps, levels) = (b.config().taps.clone(), b.config().t_star_levels.clone());
            let rf = extract_feature_set(proxy, &rx, &rc, &taps, &levels, &r.substream("real"))?;
            let ff = extract_feature_set(proxy, &fake, &c, &taps, &levels, &r.substream("fake"))?;
            let (l, stats) = b.disc_update(&rf, &ff)?;
            log.disc_loss += l;
            log.disc_updates += 1;
            log.head_stats = stats;
        }
    }
    if log.proxy_updates > 0 {
        log.proxy_loss /= log.proxy_updates as f64;
    }
    if log.disc_updates > 0 {
        log.disc_loss /= log.disc_updates as f64;
    }
    if let Some(b) = bank {
        log.refreshed = b.refresh_heads(&mut rng.substream("refresh"));
    }
    Ok(log)
}

/// Draws a generator input: a student rollout from fresh noise, read at the
/// target's input index.
pub(crate) fn generator_input(
    student: StudentView<'_>,
    schedule: &Schedule,
    classes: usize,
    dim: usize,
    batch: usize,
    noisier_start: bool,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<Condition>, TargetPoint)> {
    let target = select_target(schedule, noisier_start, rng)?;
    let c = draw_conditions(classes, batch, rng);
    let z = rng.normal_tensor(&[batch, dim]);
    let mut points = student_rollout_with_shared_points(&student, schedule, &z, &c)?;
    let (x_in, t) = points.swap_remove(target.input_index);
    debug_assert_eq!(t, target.input_t);
    Ok((x_in, c, target))
}

/// Real-batch proxy features for the Gram term.
pub(crate) fn gram_reference(
    proxy: &VelocityNet,
    bank: Option<&DiscriminatorBank>,
    settings: &StageSettings,
    real: &SyntheticSet,
    rng: &mut Rng,
) -> Result<Option<FeatureSet>> {
    if settings.lambda_gram <= 0.0 {
        return Ok(None);
    }
    let (taps, levels) = match bank {
        Some(b) => (b.config().taps.clone(), b.config().t_star_levels.clone()),
        None => (settings.gram_taps.clone(), settings.gram_levels.clone()),
    };
    let (rx, rc) = real.draw(settings.batch, rng)?;
    Ok(Some(extract_feature_set(proxy, &rx, &rc, &taps, &levels, &rng.substream("gram-real"))?))
}

/// Runs the distribution-matching stage on `state.student`.
pub fn run_dmd_stage(
    state: &mut DistillState,
    mut bank: Option<&mut DiscriminatorBank>,
    settings: &StageSettings,
    real: &SyntheticSet,
    rng: &Rng,
) -> Result<StageLog> {
    state.require_stage(&[Stage::Dmd, Stage::TwoStep], "run_dmd_stage")?;
    validate_settings(settings, &state.schedule)?;
    let classes = state.student.config().classes;
    let dim = state.student.config().data_dim;
    let switch = settings.switch_iteration();
    let mut log = StageLog::default();
    for it in 0..settings.iterations {
        let noisier = it < switch && state.schedule.len() > 1;
        state.noisier_start = noisier;
        let it_rng = rng.substream_idx("iteration", it as u64);
        let critic = critic_phase(
            StudentView::Single(&state.student),
            &state.schedule,
            &mut state.proxy,
            &mut state.proxy_opt,
            bank.as_deref_mut(),
            real,
            settings,
            &it_rng.substream("critic"),
        )?;
        let mut g_rng = it_rng.substream("generator");
        let (x_in, c, target) = generator_input(
            StudentView::Single(&state.student),
            &state.schedule,
            classes,
            dim,
            settings.batch,
            noisier,
            &mut g_rng,
        )?;
        let real_features = gram_reference(&state.proxy, bank.as_deref(), settings, real, &mut g_rng)?;
        let ctx = GeneratorContext {
            teacher: &state.teacher,
            proxy: &state.proxy,
            bank: bank.as_deref(),
            schedule: &state.schedule,
            settings,
            real_features: real_features.as_ref(),
        };
        let generator = generator_step(&mut state.student, &mut state.student_opt, &ctx, &x_in, &c, target, &mut g_rng)?;
        if settings.head_stats_every > 0 && it % settings.head_stats_every == 0 && !critic.head_stats.is_empty() {
            log.head_stats.push((it, critic.head_stats.clone()));
        }
        log.iterations.push(IterationLog {
            iteration: it,
            noisier_start: noisier,
            proxy_updates: critic.proxy_updates,
            disc_updates: critic.disc_updates,
            generator_updates: 1,
            proxy_loss: critic.proxy_loss,
            disc_loss: critic.disc_loss,
            refreshed: critic.refreshed,
            generator,
        });
        state.iteration += 1;
    }
    state.noisier_start = false;
    state.check_teacher_frozen()?;
    Ok(log)
}

pub(crate) fn validate_settings(settings: &StageSettings, schedule: &Schedule) -> Result<()> {
    let cfg = &settings.dmd;
    if settings.batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.noisier_start_fraction) {
        return Err(Error::invalid("noisier_start_fraction must lie in [0, 1]"));
    }
    let [lo, hi] = cfg.renoise_t_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::invalid(format!("renoise_t_range {lo}..{hi} must lie inside (0, 1)")));
    }
    if schedule.is_empty() {
        return Err(Error::invalid("empty schedule"));
    }
    Ok(())
}
