//! Rectified-flow primitives.
//!
//! Convention: `t = 1` is pure noise, `t = 0` is data, and the noising path is
//! the straight line `x_t = (1 - t) x0 + t eps`. Along that path the
//! conditional velocity is the constant `eps - x0`, the implied endpoint of a
//! velocity prediction is `x_t - t v`, and (with `alpha_t = 1 - t`,
//! `sigma_t = t`) the score is `-(x_t + (1 - t) v) / t`.

use crate::error::{Error, Result};
use crate::models::Condition;
use crate::ndcore::Tensor;

/// Anything that can predict a velocity for a batch of rows.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, cond: &[Condition]) -> Result<Tensor>;
}

/// Strictly decreasing student timesteps starting at 1, with an implicit
/// terminal 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    steps: Vec<f64>,
}

impl Schedule {
    /// `t_i = 1 - (i - 1) / n` for `i = 1..=n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        Ok(Self {
            steps: (0..n).map(|i| 1.0 - i as f64 / n as f64).collect(),
        })
    }

    pub fn from_steps(steps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("empty schedule"));
        }
        for w in steps.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::invalid(format!("schedule not strictly decreasing: {steps:?}")));
            }
        }
        if steps.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::invalid(format!("schedule steps must lie in (0, 1]: {steps:?}")));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Time reached after step `i` (0-based): the next step, or 0 at the end.
    pub fn next_time(&self, i: usize) -> f64 {
        self.steps.get(i + 1).copied().unwrap_or(0.0)
    }

    /// `(t_cur, t_next)` pairs including the final hop to 0.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.steps.len()).map(move |i| (self.steps[i], self.next_time(i)))
    }

    /// Score-singularity guard: half the smallest step.
    pub fn t_min(&self) -> f64 {
        self.steps[self.steps.len() - 1] / 2.0
    }

    pub fn contains(&self, t: f64) -> bool {
        self.steps.contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathPoint {
    pub x: Tensor,
    pub t: f64,
    /// `(x0, eps)` when the point was built by [`interpolate`].
    pub provenance: Option<(Tensor, Tensor)>,
}

fn check_unit(t: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("{what}: t = {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<PathPoint> {
    check_unit(t, "interpolate")?;
    let x = x0.zip_map(eps, "interpolate", |a, e| (1.0 - t) * a + t * e)?;
    Ok(PathPoint {
        x,
        t,
        provenance: Some((x0.clone(), eps.clone())),
    })
}

pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(x0)
}

pub fn velocity_to_x0(x_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t, "velocity_to_x0")?;
    x_t.zip_map(v, "velocity_to_x0", |x, v| x - t * v)
}

/// Noise implied by a velocity prediction: `x_t + (1 - t) v`.
pub fn velocity_to_eps(x_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t, "velocity_to_eps")?;
    x_t.zip_map(v, "velocity_to_eps", |x, v| x + (1.0 - t) * v)
}

pub fn score_from_velocity(x_t: &Tensor, v: &Tensor, t: f64, t_min: f64) -> Result<Tensor> {
    if !(t_min > 0.0) {
        return Err(Error::invalid(format!("t_min must be positive, got {t_min}")));
    }
    if t < t_min {
        return Err(Error::TimestepBelowGuard { t, t_min });
    }
    check_unit(t, "score_from_velocity")?;
    x_t.zip_map(v, "score_from_velocity", |x, v| -(x + (1.0 - t) * v) / t)?
        .check_finite("score_from_velocity")
}

pub fn euler_step(x_t: &Tensor, v: &Tensor, t_cur: f64, t_next: f64) -> Result<Tensor> {
    if t_next >= t_cur {
        return Err(Error::invalid(format!("euler_step must denoise: {t_cur} -> {t_next}")));
    }
    let dt = t_next - t_cur;
    x_t.zip_map(v, "euler_step", |x, v| x + dt * v)
}

/// `v_uncond + w (v_cond - v_uncond)`; `w == 1` skips the unconditional pass.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    model: &F,
    x: &Tensor,
    t: f64,
    cond: &[Condition],
    guidance_scale: f64,
) -> Result<Tensor> {
    let v_cond = model.velocity(x, t, cond)?;
    if guidance_scale == 1.0 {
        return Ok(v_cond);
    }
    let null = vec![Condition::Null; cond.len()];
    let v_uncond = model.velocity(x, t, &null)?;
    v_uncond.zip_map(&v_cond, "guidance", |u, c| u + guidance_scale * (c - u))
}

/// Euler integration from `z` at `t = 1` through every schedule step to 0.
/// Returns `len + 1` points: the start, each intermediate point, the endpoint.
pub fn sample<F: VelocityField + ?Sized>(
    model: &F,
    schedule: &Schedule,
    z: &Tensor,
    cond: &[Condition],
    guidance_scale: f64,
) -> Result<Vec<PathPoint>> {
    if z.rows() != cond.len() {
        return Err(Error::shape("sample", z.shape(), &[cond.len()]));
    }
    let mut traj = Vec::with_capacity(schedule.len() + 1);
    let mut x = z.clone();
    traj.push(PathPoint {
        x: x.clone(),
        t: schedule.steps()[0],
        provenance: None,
    });
    for (t_cur, t_next) in schedule.intervals() {
        let v = guided_velocity(model, &x, t_cur, cond, guidance_scale)?;
        x = euler_step(&x, &v, t_cur, t_next)?;
        traj.push(PathPoint {
            x: x.clone(),
            t: t_next,
            provenance: None,
        });
    }
    Ok(traj)
}

/// Final samples only.
pub fn sample_endpoints<F: VelocityField + ?Sized>(
    model: &F,
    schedule: &Schedule,
    z: &Tensor,
    cond: &[Condition],
    guidance_scale: f64,
) -> Result<Tensor> {
    let mut traj = sample(model, schedule, z, cond, guidance_scale)?;
    Ok(traj.pop().expect("trajectory has an endpoint").x)
}
