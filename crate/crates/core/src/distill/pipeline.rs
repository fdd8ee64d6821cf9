//! End-to-end student distillation from a run configuration.

use super::dmd::{run_dmd_stage, StageLog, StageSettings};
use super::split::{split_timestep_finetune, SplitOutcome};
use super::trajectory::pretrain_student;
use super::two_step::distill_two_step;
use super::{DistillState, Stage};
use crate::adversarial::{BankConfig, DiscriminatorBank};
use crate::config::RunConfig;
use crate::error::Result;
use crate::ndcore::Rng;
use crate::teacher::{SyntheticSet, Teacher};

/// Which pipeline components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineFlags {
    pub adversarial: bool,
    pub pretrain: bool,
    pub timestep_sharing: bool,
    pub refresh: bool,
    pub split_ft: bool,
}

impl PipelineFlags {
    pub fn full() -> Self {
        Self {
            adversarial: true,
            pretrain: true,
            timestep_sharing: true,
            refresh: true,
            split_ft: false,
        }
    }

    pub const ABLATIONS: [&'static str; 5] = ["full", "no_adv", "no_pretrain", "no_timestep_sharing", "no_refresh"];

    /// Flags for one of [`Self::ABLATIONS`].
    pub fn ablation(name: &str) -> Option<Self> {
        let mut f = Self::full();
        match name {
            "full" => {}
            "no_adv" => {
                f.adversarial = false;
                f.refresh = false;
            }
            "no_pretrain" => f.pretrain = false,
            "no_timestep_sharing" => f.timestep_sharing = false,
            "no_refresh" => f.refresh = false,
            _ => return None,
        }
        Some(f)
    }
}

/// Discriminator bank layout for `cfg`.
pub fn bank_config(cfg: &RunConfig, refresh: bool) -> BankConfig {
    let a = &cfg.adversarial;
    BankConfig {
        feature_dim: cfg.net.width,
        head_width: a.head_width,
        pool_group: a.pool_group,
        taps: a.taps.clone(),
        t_star_levels: a.t_star_levels.clone(),
        refresh_p: if refresh { a.refresh_p } else { 0.0 },
        literal_objective: a.literal_objective,
        optimizer: cfg.distill.dmd.discriminator,
    }
}

pub fn stage_settings(cfg: &RunConfig, flags: PipelineFlags) -> StageSettings {
    let mut s = StageSettings::from_dmd(&cfg.distill.dmd, cfg.distill.batch);
    s.dmd.timestep_sharing = flags.timestep_sharing;
    s.gram_taps = cfg.adversarial.taps.clone();
    s.gram_levels = cfg.adversarial.t_star_levels.clone();
    s
}

/// Everything produced by a distillation run.
#[derive(Clone, Debug)]
pub struct DistillRun {
    pub state: DistillState,
    pub bank: Option<DiscriminatorBank>,
    pub flags: PipelineFlags,
    pub pretrain_curve: Vec<(usize, f64)>,
    pub dmd_log: StageLog,
    pub split: Option<SplitOutcome>,
    pub two_step_log: Option<StageLog>,
}

/// Pretraining (unless disabled), the distribution-matching stage and
/// optionally split fine-tuning, producing a `cfg.distill.steps`-step student.
pub fn distill_student(
    cfg: &RunConfig,
    teacher: &Teacher,
    real: &SyntheticSet,
    flags: PipelineFlags,
    rng: &Rng,
) -> Result<DistillRun> {
    cfg.validate()?;
    let d = &cfg.distill;
    let mut state = DistillState::new(teacher.clone(), d.steps, d.pretrain.optimizer, d.dmd.proxy)?;
    let pretrain_curve = if flags.pretrain {
        pretrain_student(&mut state, &d.pretrain, d.batch, &rng.substream("pretrain"))?
    } else {
        state.stage = Stage::Dmd;
        Vec::new()
    };
    state.reset_student_optimizer(d.dmd.generator);
    let mut bank = if flags.adversarial && cfg.adversarial.enabled {
        Some(DiscriminatorBank::new(bank_config(cfg, flags.refresh), &mut rng.substream("bank"))?)
    } else {
        None
    };
    let settings = stage_settings(cfg, flags);
    let dmd_log = run_dmd_stage(&mut state, bank.as_mut(), &settings, real, &rng.substream("dmd"))?;
    let split = if flags.split_ft {
        let mut s = settings.clone();
        s.iterations = d.split.iterations;
        Some(split_timestep_finetune(&mut state, bank.as_mut(), &s, &d.split, real, &rng.substream("split"))?)
    } else {
        None
    };
    Ok(DistillRun {
        state,
        bank,
        flags,
        pretrain_curve,
        dmd_log,
        split,
        two_step_log: None,
    })
}

/// Continues a finished run to two steps with the Gram term.
pub fn continue_two_step(run: &mut DistillRun, cfg: &RunConfig, real: &SyntheticSet, rng: &Rng) -> Result<()> {
    let mut settings = stage_settings(cfg, run.flags);
    settings.iterations = cfg.distill.two_step.iterations;
    settings.lambda_gram = cfg.distill.two_step.lambda_gram;
    let log = distill_two_step(&mut run.state, run.bank.as_mut(), &settings, real, rng)?;
    run.two_step_log = Some(log);
    Ok(())
}
