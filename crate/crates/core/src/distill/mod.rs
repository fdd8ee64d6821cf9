//! Few-step student distillation.
//!
//! Stages run in order on a [`DistillState`]: trajectory-guidance pretraining,
//! distribution matching with an adversarial term, optional split-timestep
//! fine-tuning, and the 4 to 2 step continuation with a Gram-matrix term.

mod dmd;
mod pipeline;
mod split;
mod trajectory;
mod two_step;

pub use dmd::{
    dmd_direction, dmd_step_shared, proxy_update, run_dmd_stage, select_target, student_rollout_with_shared_points,
    surrogate_grad, surrogate_loss, GeneratorStepLog, IterationLog, StageLog, StageSettings, StudentView, SurrogateInputs,
    TargetPoint,
};
pub use pipeline::{bank_config, continue_two_step, distill_student, stage_settings, DistillRun, PipelineFlags};
pub use split::{split_timestep_finetune, SplitOutcome};
pub use trajectory::{pretrain_student, teacher_trajectory_targets, trajectory_guidance_loss, TrajectoryBatch};
pub use two_step::{distill_two_step, gram_loss, gram_matrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Schedule;
use crate::models::VelocityNet;
use crate::ndcore::{AdamW, AdamWConfig};
use crate::teacher::Teacher;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Dmd,
    SplitFt,
    TwoStep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Dmd => "dmd",
            Stage::SplitFt => "split_ft",
            Stage::TwoStep => "two_step",
        }
    }
}

/// Student, proxy and frozen teacher plus the optimizers of the trainable
/// nets.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub student: VelocityNet,
    pub proxy: VelocityNet,
    teacher: Teacher,
    teacher_fingerprint: u64,
    pub schedule: Schedule,
    pub stage: Stage,
    pub iteration: usize,
    pub noisier_start: bool,
    pub student_opt: AdamW,
    pub proxy_opt: AdamW,
}

impl DistillState {
    /// Student and proxy both start as copies of the teacher.
    pub fn new(teacher: Teacher, steps: usize, student_opt: AdamWConfig, proxy_opt: AdamWConfig) -> Result<Self> {
        let schedule = Schedule::uniform(steps)?;
        let student = teacher.net.clone();
        let proxy = teacher.net.clone();
        let teacher_fingerprint = teacher.net.params().fingerprint();
        Ok(Self {
            student_opt: AdamW::new(student_opt, student.params().tensors()),
            proxy_opt: AdamW::new(proxy_opt, proxy.params().tensors()),
            student,
            proxy,
            teacher,
            teacher_fingerprint,
            schedule,
            stage: Stage::Pretrain,
            iteration: 0,
            noisier_start: true,
        })
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    /// Errors if the teacher's parameters changed since construction.
    pub fn check_teacher_frozen(&self) -> Result<()> {
        if self.teacher.net.params().fingerprint() != self.teacher_fingerprint {
            return Err(Error::Stage("teacher parameters changed".into()));
        }
        Ok(())
    }

    /// Fresh optimizer state for the student (used at stage boundaries).
    pub fn reset_student_optimizer(&mut self, config: AdamWConfig) {
        self.student_opt = AdamW::new(config, self.student.params().tensors());
    }

    pub fn reset_proxy_optimizer(&mut self, config: AdamWConfig) {
        self.proxy_opt = AdamW::new(config, self.proxy.params().tensors());
    }

    pub(crate) fn require_stage(&self, allowed: &[Stage], op: &str) -> Result<()> {
        if !allowed.contains(&self.stage) {
            return Err(Error::Stage(format!(
                "{op} cannot run in stage {}",
                self.stage.name()
            )));
        }
        Ok(())
    }
}
