//! Gram-matrix feature loss and the 4 to 2 step continuation.

use super::dmd::{run_dmd_stage, StageLog, StageSettings};
use super::{DistillState, Stage};
use crate::adversarial::{DiscriminatorBank, FeatureSet};
use crate::error::{Error, Result};
use crate::flow::Schedule;
use crate::ndcore::{Rng, Tape, Tensor, Var};
use crate::teacher::SyntheticSet;

/// `F^T F / n` for features stored as rows.
pub fn gram_matrix(f: &Tensor) -> Result<Tensor> {
    let n = f.rows();
    if n == 0 {
        return Err(Error::invalid("Gram matrix of an empty batch"));
    }
    Ok(f.transpose()?.matmul(f)?.scale(1.0 / n as f64))
}

/// Mean over taps of the mean squared difference of Gram matrices.
pub fn gram_loss(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("Gram loss needs matching taps, got {} and {}", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.cols() != fb.cols() {
            return Err(Error::shape("gram_loss", fa.shape(), fb.shape()));
        }
        let d = gram_matrix(fa)?.sub(&gram_matrix(fb)?)?;
        total += d.sq_norm() / d.len() as f64;
    }
    Ok(total / a.len() as f64)
}

/// Gram loss of tape features against constant reference features, averaged
/// over noise levels.
pub(crate) fn gram_loss_on_tape(tape: &mut Tape, reference: &FeatureSet, feats: &[Vec<Var>]) -> Result<Var> {
    if reference.len() != feats.len() || feats.is_empty() {
        return Err(Error::invalid("Gram loss needs matching noise levels"));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (rl, fl) in reference.iter().zip(feats) {
        if rl.len() != fl.len() {
            return Err(Error::invalid("Gram loss needs matching taps"));
        }
        for (r, &f) in rl.iter().zip(fl) {
            let n = tape.value(f).rows();
            let ft = tape.transpose(f)?;
            let g = tape.matmul(ft, f)?;
            let g = tape.scale(g, 1.0 / n as f64)?;
            let gr = tape.constant(gram_matrix(r)?)?;
            let term = tape.mse(g, gr)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
            count += 1;
        }
    }
    let sum = total.expect("at least one term");
    tape.scale(sum, 1.0 / count as f64)
}

/// Continues a trained 4-step student on the uniform 2-step schedule with the
/// distribution-matching stage plus the Gram term (`settings.lambda_gram`).
pub fn distill_two_step(
    state: &mut DistillState,
    bank: Option<&mut DiscriminatorBank>,
    settings: &StageSettings,
    real: &SyntheticSet,
    rng: &Rng,
) -> Result<StageLog> {
    state.require_stage(&[Stage::Dmd, Stage::SplitFt], "distill_two_step")?;
    if state.schedule.len() <= 2 {
        return Err(Error::Stage("two-step continuation needs a student with more than two steps".into()));
    }
    state.schedule = Schedule::uniform(2)?;
    state.stage = Stage::TwoStep;
    state.reset_student_optimizer(settings.dmd.generator);
    run_dmd_stage(state, bank, settings, real, rng)
}
