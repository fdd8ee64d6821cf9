//! Trajectory-guidance pretraining: the student learns the teacher's average
//! velocity over each of its own intervals.

use super::{DistillState, Stage};
use crate::config::PretrainConfig;
use crate::error::{Error, Result};
use crate::flow::{self, Schedule, VelocityField};
use crate::models::{Bound, Condition, FeatureTaps, Times, VelocityNet};
use crate::ndcore::{Rng, Tape, Tensor, Var};
use crate::teacher::{check_divergence, draw_conditions};

/// Teacher points at each student step and the teacher's average velocity
/// over the interval the student traverses from there.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub points: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub cond: Vec<Condition>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            points: self.points.iter().map(|p| p.select_rows(idx)).collect::<Result<_>>()?,
            targets: self.targets.iter().map(|p| p.select_rows(idx)).collect::<Result<_>>()?,
            cond: idx.iter().map(|&i| self.cond[i]).collect(),
        })
    }
}

/// Rolls the teacher from `z` along its own trajectory with `substeps` Euler
/// steps per student interval.
pub fn teacher_trajectory_targets<F: VelocityField + ?Sized>(
    teacher: &F,
    schedule: &Schedule,
    z: &Tensor,
    cond: &[Condition],
    substeps: usize,
    guidance: f64,
) -> Result<TrajectoryBatch> {
    if substeps == 0 {
        return Err(Error::invalid("trajectory guidance needs at least one substep"));
    }
    let mut x = z.clone();
    let mut points = Vec::with_capacity(schedule.len());
    let mut targets = Vec::with_capacity(schedule.len());
    for (t_start, t_end) in schedule.intervals() {
        let start = x.clone();
        let h = (t_start - t_end) / substeps as f64;
        for k in 0..substeps {
            let t = t_start - k as f64 * h;
            let t_next = if k + 1 == substeps { t_end } else { t - h };
            let v = flow::guided_velocity(teacher, &x, t, cond, guidance)?;
            x = flow::euler_step(&x, &v, t, t_next)?;
        }
        let avg = x.zip_map(&start, "trajectory target", |end, s| (end - s) / (t_end - t_start))?;
        points.push(start);
        targets.push(avg);
    }
    Ok(TrajectoryBatch {
        points,
        targets,
        cond: cond.to_vec(),
    })
}

/// `sum_i mean_batch || t_i (G(x_i, t_i) - u_i) ||^2` recorded on `tape`.
fn tg_loss_on_tape(
    student: &VelocityNet,
    tape: &mut Tape,
    bound: &Bound,
    schedule: &Schedule,
    batch: &TrajectoryBatch,
) -> Result<Var> {
    let d = student.config().data_dim as f64;
    let mut total: Option<Var> = None;
    for ((&t, x), u) in schedule.steps().iter().zip(&batch.points).zip(&batch.targets) {
        let xv = tape.constant(x.clone())?;
        let uv = tape.constant(u.clone())?;
        let out = student.forward(tape, bound, xv, Times::Shared(t), &batch.cond, &FeatureTaps::none())?;
        let mse = tape.mse(out.velocity, uv)?;
        let term = tape.scale(mse, d * t * t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("empty schedule"))
}

/// Trajectory-guidance loss of the current student on a fresh teacher rollout
/// from `x_start`.
pub fn trajectory_guidance_loss(
    state: &DistillState,
    x_start: &Tensor,
    cond: &[Condition],
    substeps: usize,
    guidance: f64,
) -> Result<f64> {
    let batch = teacher_trajectory_targets(state.teacher(), &state.schedule, x_start, cond, substeps, guidance)?;
    let mut tape = Tape::new();
    let bound = state.student.bind(&mut tape, false)?;
    let loss = tg_loss_on_tape(&state.student, &mut tape, &bound, &state.schedule, &batch)?;
    Ok(tape.value(loss).item())
}

/// Runs trajectory-guidance pretraining and moves the state to the DMD stage.
/// Returns the `(iteration, loss)` curve.
pub fn pretrain_student(
    state: &mut DistillState,
    config: &PretrainConfig,
    batch: usize,
    rng: &Rng,
) -> Result<Vec<(usize, f64)>> {
    state.require_stage(&[Stage::Pretrain], "pretrain_student")?;
    let classes = state.student.config().classes;
    let dim = state.student.config().data_dim;
    state.reset_student_optimizer(config.optimizer);
    let pool = if config.trajectory_pool > 0 && config.iterations > 0 {
        let n = config.trajectory_pool;
        let c = draw_conditions(classes, n, &mut rng.substream("pool-cond"));
        let z = rng.substream("pool-z").normal_tensor(&[n, dim]);
        Some(teacher_trajectory_targets(
            state.teacher(),
            &state.schedule,
            &z,
            &c,
            config.substeps,
            config.teacher_guidance,
        )?)
    } else {
        None
    };
    let mut curve = Vec::with_capacity(config.iterations);
    let mut initial = f64::NAN;
    for it in 0..config.iterations {
        let mut r = rng.substream_idx("pretrain", it as u64);
        let tb = match &pool {
            Some(p) => {
                let idx: Vec<usize> = (0..batch).map(|_| r.below(p.len())).collect();
                p.select(&idx)?
            }
            None => {
                let c = draw_conditions(classes, batch, &mut r);
                let z = r.normal_tensor(&[batch, dim]);
                teacher_trajectory_targets(state.teacher(), &state.schedule, &z, &c, config.substeps, config.teacher_guidance)?
            }
        };
        let mut tape = Tape::new();
        let bound = state.student.bind(&mut tape, true)?;
        let loss = tg_loss_on_tape(&state.student, &mut tape, &bound, &state.schedule, &tb)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = state.student.collect_grads(&tape, &mut grads, &bound);
        state.student_opt.apply(state.student.params_mut().tensors_mut(), &g)?;
        if it == 0 {
            initial = value;
        }
        check_divergence(it, value, initial, config.iterations / 10)?;
        curve.push((it, value));
        state.iteration += 1;
    }
    state.check_teacher_frozen()?;
    state.stage = Stage::Dmd;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetConfig;
    use crate::ndcore::AdamWConfig;
    use crate::teacher::Teacher;

    struct Constant(f64);

    impl VelocityField for Constant {
        fn velocity(&self, x: &Tensor, _t: f64, _c: &[Condition]) -> Result<Tensor> {
            Ok(Tensor::full(x.shape(), self.0))
        }
    }

    fn tiny_state() -> DistillState {
        let cfg = NetConfig {
            width: 6,
            classes: 2,
            ..NetConfig::default()
        };
        let net = VelocityNet::new(cfg, &mut Rng::new(1)).unwrap();
        let teacher = Teacher {
            net,
            cond_dropout_p: 0.1,
        };
        DistillState::new(teacher, 4, AdamWConfig::with_lr(1e-3), AdamWConfig::with_lr(1e-3)).unwrap()
    }

    #[test]
    fn constant_field_quadrature_is_exact_for_any_substeps() {
        let s = Schedule::uniform(4).unwrap();
        let z = Rng::new(2).normal_tensor(&[5, 2]);
        let c = vec![Condition::Class(0); 5];
        let a = teacher_trajectory_targets(&Constant(0.7), &s, &z, &c, 1, 1.0).unwrap();
        let b = teacher_trajectory_targets(&Constant(0.7), &s, &z, &c, 8, 1.0).unwrap();
        for (ta, tb) in a.targets.iter().zip(&b.targets) {
            assert!(ta.sub(tb).unwrap().max_abs() < 1e-12);
            assert!(ta.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_teacher_and_zero_student_give_zero_loss() {
        let state = tiny_state();
        let z = Rng::new(3).normal_tensor(&[4, 2]);
        let c = vec![Condition::Class(1); 4];
        // the freshly initialized net has a zero output layer, so both the
        // teacher field and the student prediction vanish
        assert_eq!(trajectory_guidance_loss(&state, &z, &c, 8, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn matching_predictions_then_single_perturbation() {
        let state = tiny_state();
        let s = &state.schedule;
        let n = 3;
        let z = Rng::new(4).normal_tensor(&[n, 2]);
        let c = vec![Condition::Class(0); n];
        let mut tb = teacher_trajectory_targets(&Constant(0.3), s, &z, &c, 8, 1.0).unwrap();
        // the zero-output student predicts 0, so targets of 0 match exactly
        for t in &mut tb.targets {
            *t = Tensor::zeros(t.shape());
        }
        let eval = |tb: &TrajectoryBatch| {
            let mut tape = Tape::new();
            let bound = state.student.bind(&mut tape, false).unwrap();
            let l = tg_loss_on_tape(&state.student, &mut tape, &bound, s, tb).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(&tb), 0.0);
        let (i, delta) = (2, [0.4, -0.1]);
        tb.targets[i].data_mut()[0] = -delta[0];
        tb.targets[i].data_mut()[1] = -delta[1];
        let t = s.steps()[i];
        let expect = t * t * (delta[0] * delta[0] + delta[1] * delta[1]) / n as f64;
        assert!((eval(&tb) - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_iterations_only_advance_stage() {
        let mut state = tiny_state();
        let before = state.student.params().fingerprint();
        let cfg = PretrainConfig {
            iterations: 0,
            ..PretrainConfig::default()
        };
        let curve = pretrain_student(&mut state, &cfg, 4, &Rng::new(0)).unwrap();
        assert!(curve.is_empty());
        assert_eq!(state.stage, Stage::Dmd);
        assert_eq!(state.student.params().fingerprint(), before);
        assert!(pretrain_student(&mut state, &cfg, 4, &Rng::new(0)).is_err());
    }

    #[test]
    fn zero_substeps_rejected() {
        let s = Schedule::uniform(2).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert!(teacher_trajectory_targets(&Constant(0.0), &s, &z, &[Condition::Class(0)], 0, 1.0).is_err());
    }
}
