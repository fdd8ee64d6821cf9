//! Split-timestep fine-tuning: two copies of the student each train on their
//! own half of the schedule, are smoothed by EMA, and are merged by weight
//! interpolation.

use super::dmd::{critic_phase, generator_input, generator_step, validate_settings, GeneratorContext, IterationLog, StageLog, StageSettings, StudentView};
use super::{DistillState, Stage};
use crate::adversarial::DiscriminatorBank;
use crate::config::SplitConfig;
use crate::error::{Error, Result};
use crate::models::{ema_update, merge_interpolate, ParamSet, VelocityNet};
use crate::ndcore::{AdamW, Rng};
use crate::teacher::SyntheticSet;

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    /// Student before fine-tuning.
    pub original: VelocityNet,
    pub merged: VelocityNet,
    /// EMA shadows of the low-noise (`t <= boundary`) and high-noise branches.
    pub low: VelocityNet,
    pub high: VelocityNet,
    pub low_updates: usize,
    pub high_updates: usize,
    pub log: StageLog,
}

/// Runs split fine-tuning and installs the merged student in `state`.
pub fn split_timestep_finetune(
    state: &mut DistillState,
    mut bank: Option<&mut DiscriminatorBank>,
    settings: &StageSettings,
    split: &SplitConfig,
    real: &SyntheticSet,
    rng: &Rng,
) -> Result<SplitOutcome> {
    state.require_stage(&[Stage::Dmd], "split_timestep_finetune")?;
    if state.schedule.len() <= 2 {
        return Err(Error::Stage("split fine-tuning is only defined for students with more than two steps".into()));
    }
    if !(0.0 < split.boundary && split.boundary < 1.0) {
        return Err(Error::invalid("split boundary must lie in (0, 1)"));
    }
    validate_settings(settings, &state.schedule)?;
    let original = state.student.clone();
    let mut low = original.clone();
    let mut high = original.clone();
    let mut low_opt = AdamW::new(settings.dmd.generator, low.params().tensors());
    let mut high_opt = AdamW::new(settings.dmd.generator, high.params().tensors());
    let mut low_ema: ParamSet = low.params().clone();
    let mut high_ema: ParamSet = high.params().clone();
    let classes = original.config().classes;
    let dim = original.config().data_dim;
    let (mut low_updates, mut high_updates) = (0, 0);
    let mut log = StageLog::default();
    for it in 0..split.iterations {
        let it_rng = rng.substream_idx("split", it as u64);
        let view = StudentView::Split {
            low: &low,
            high: &high,
            boundary: split.boundary,
        };
        let critic = critic_phase(
            view,
            &state.schedule,
            &mut state.proxy,
            &mut state.proxy_opt,
            bank.as_deref_mut(),
            real,
            settings,
            &it_rng.substream("critic"),
        )?;
        let mut g_rng = it_rng.substream("generator");
        let view = StudentView::Split {
            low: &low,
            high: &high,
            boundary: split.boundary,
        };
        let (x_in, c, target) = generator_input(view, &state.schedule, classes, dim, settings.batch, false, &mut g_rng)?;
        let ctx = GeneratorContext {
            teacher: &state.teacher,
            proxy: &state.proxy,
            bank: bank.as_deref(),
            schedule: &state.schedule,
            settings,
            real_features: None,
        };
        let generator = if target.input_t <= split.boundary {
            low_updates += 1;
            generator_step(&mut low, &mut low_opt, &ctx, &x_in, &c, target, &mut g_rng)?
        } else {
            high_updates += 1;
            generator_step(&mut high, &mut high_opt, &ctx, &x_in, &c, target, &mut g_rng)?
        };
        ema_update(&mut low_ema, low.params(), split.ema_beta)?;
        ema_update(&mut high_ema, high.params(), split.ema_beta)?;
        log.iterations.push(IterationLog {
            iteration: it,
            noisier_start: false,
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
    let merged_params = merge_interpolate(&low_ema, &high_ema, split.merge_ratio)?;
    let config = *original.config();
    let merged = VelocityNet::from_params(config, merged_params)?;
    let low = VelocityNet::from_params(config, low_ema)?;
    let high = VelocityNet::from_params(config, high_ema)?;
    state.student = merged.clone();
    state.reset_student_optimizer(settings.dmd.generator);
    state.stage = Stage::SplitFt;
    state.check_teacher_frozen()?;
    Ok(SplitOutcome {
        original,
        merged,
        low,
        high,
        low_updates,
        high_updates,
        log,
    })
}
