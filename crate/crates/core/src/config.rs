//! Experiment configuration. Every field has a default so a config file only
//! needs the keys it changes; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FeatureTaps, NetConfig};
use crate::ndcore::AdamWConfig;
use crate::teacher::{DataSpec, TeacherConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 20_000,
            steps: 32,
            guidance_scale: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    /// Euler substeps per student interval when integrating the teacher.
    pub substeps: usize,
    /// Number of precomputed teacher trajectories to draw batches from;
    /// 0 rolls the teacher out afresh every iteration.
    pub trajectory_pool: usize,
    pub teacher_guidance: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            optimizer: AdamWConfig::with_lr(1e-6),
            substeps: 8,
            trajectory_pool: 0,
            teacher_guidance: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmdConfig {
    pub iterations: usize,
    pub generator: AdamWConfig,
    pub proxy: AdamWConfig,
    pub discriminator: AdamWConfig,
    /// Proxy and discriminator updates per generator update.
    pub update_ratio: usize,
    /// Fraction of iterations that train from the previous (noisier) point.
    pub noisier_start_fraction: f64,
    pub normalizer_eps: f64,
    pub lambda_adv: f64,
    /// Guidance applied to the teacher when forming the real score.
    pub real_guidance: f64,
    pub proxy_cond_dropout: f64,
    pub timestep_sharing: bool,
    /// Range of the random timestep used when sharing is disabled.
    pub renoise_t_range: [f64; 2],
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            generator: AdamWConfig::with_lr(5e-6),
            proxy: AdamWConfig::with_lr(1e-6),
            discriminator: AdamWConfig::with_lr(5e-5),
            update_ratio: 10,
            noisier_start_fraction: 0.5,
            normalizer_eps: 1e-8,
            lambda_adv: 0.1,
            real_guidance: 1.0,
            proxy_cond_dropout: 0.0,
            timestep_sharing: true,
            renoise_t_range: [0.02, 0.98],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStepConfig {
    pub iterations: usize,
    pub lambda_gram: f64,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        Self {
            iterations: 1200,
            lambda_gram: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub iterations: usize,
    /// Timesteps at or below this value belong to the low-noise branch.
    pub boundary: f64,
    pub ema_beta: f64,
    /// Interpolation weight on the low-noise branch.
    pub merge_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            boundary: 0.5,
            ema_beta: 0.99,
            merge_ratio: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub pretrain: PretrainConfig,
    pub dmd: DmdConfig,
    pub two_step: TwoStepConfig,
    pub split: SplitConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            batch: 128,
            pretrain: PretrainConfig::default(),
            dmd: DmdConfig::default(),
            two_step: TwoStepConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub enabled: bool,
    pub taps: FeatureTaps,
    pub t_star_levels: Vec<f64>,
    pub head_width: usize,
    /// Rows averaged together after the per-sample layers.
    pub pool_group: usize,
    pub refresh_p: f64,
    /// Use the logit-difference reading of the objective instead of the
    /// non-saturating one.
    pub literal_objective: bool,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            taps: FeatureTaps::default(),
            t_star_levels: vec![0.95, 0.75, 0.5, 0.25, 0.05],
            head_width: 16,
            pool_group: 8,
            refresh_p: 0.005,
            literal_objective: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n: usize,
    pub teacher_steps: usize,
    /// Mode assignment radius in units of the data sigma.
    pub assign_radius_sigmas: f64,
    pub min_fraction: f64,
    pub quant_bits: Vec<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            teacher_steps: 50,
            assign_radius_sigmas: 3.0,
            min_fraction: 0.02,
            quant_bits: vec![64, 16, 8, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for multi-seed experiments (ablations, medians).
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub data: DataSpec,
    pub net: NetConfig,
    pub teacher: TeacherConfig,
    pub synthetic: SyntheticConfig,
    pub distill: DistillConfig,
    pub adversarial: AdversarialConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2],
            output_dir: "runs".into(),
            data: DataSpec::default(),
            net: NetConfig::default(),
            teacher: TeacherConfig::default(),
            synthetic: SyntheticConfig::default(),
            distill: DistillConfig::default(),
            adversarial: AdversarialConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced profile that runs the full pipeline on one CPU core in minutes.
    /// Learning rates keep the proxy : generator : discriminator proportions
    /// of the default profile.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.net.width = 32;
        c.teacher.iterations = 4000;
        c.teacher.batch = 128;
        c.teacher.optimizer.lr = 3e-3;
        c.synthetic.n = 10_000;
        c.synthetic.guidance_scale = 1.0;
        c.distill.batch = 64;
        c.distill.pretrain.iterations = 600;
        c.distill.pretrain.optimizer.lr = 3e-4;
        c.distill.pretrain.trajectory_pool = 4096;
        c.distill.dmd.iterations = 300;
        c.distill.dmd.generator.lr = 1e-4;
        c.distill.dmd.proxy.lr = 2e-5;
        c.distill.dmd.discriminator.lr = 1e-3;
        c.distill.two_step.iterations = 300;
        c.distill.split.iterations = 150;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            reason: e.inner().message().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        self.data.validate().map_err(|e| Error::Config {
            key: "data".into(),
            reason: e.to_string(),
        })?;
        if self.net.classes != self.data.classes() {
            return bad(
                "net.classes",
                format!("{} does not match the data's {} classes", self.net.classes, self.data.classes()),
            );
        }
        if self.net.data_dim != 2 {
            return bad("net.data_dim", "only 2D data is supported".into());
        }
        if self.net.width == 0 || self.net.depth == 0 {
            return bad("net", "width and depth must be positive".into());
        }
        if let Err(e) = self.adversarial.taps.validate(self.net.depth) {
            return bad("adversarial.taps", e.to_string());
        }
        if !(0.0..1.0).contains(&self.teacher.cond_dropout_p) {
            return bad("teacher.cond_dropout_p", "must lie in [0, 1)".into());
        }
        if self.teacher.batch == 0 {
            return bad("teacher.batch", "must be positive".into());
        }
        let d = &self.distill;
        if d.steps < 2 {
            return bad("distill.steps", "needs at least two student steps".into());
        }
        if d.batch == 0 {
            return bad("distill.batch", "must be positive".into());
        }
        if d.pretrain.substeps == 0 {
            return bad("distill.pretrain.substeps", "must be at least 1".into());
        }
        if d.dmd.update_ratio == 0 {
            return bad("distill.dmd.update_ratio", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&d.dmd.noisier_start_fraction) {
            return bad("distill.dmd.noisier_start_fraction", "must lie in [0, 1]".into());
        }
        let [lo, hi] = d.dmd.renoise_t_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad("distill.dmd.renoise_t_range", "need 0 < lo <= hi < 1".into());
        }
        let a = &self.adversarial;
        if a.enabled && (a.pool_group == 0 || d.batch % a.pool_group != 0) {
            return bad(
                "adversarial.pool_group",
                format!("must divide distill.batch ({}), got {}", d.batch, a.pool_group),
            );
        }
        if !(0.0..1.0).contains(&d.split.ema_beta) {
            return bad("distill.split.ema_beta", "must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&d.split.merge_ratio) {
            return bad("distill.split.merge_ratio", "must lie in [0, 1]".into());
        }
        if a.t_star_levels.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return bad("adversarial.t_star_levels", "levels must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&a.refresh_p) {
            return bad("adversarial.refresh_p", "must lie in [0, 1]".into());
        }
        if a.pool_group == 0 || a.head_width == 0 {
            return bad("adversarial", "pool_group and head_width must be positive".into());
        }
        if self.eval.n == 0 {
            return bad("eval.n", "must be positive".into());
        }
        Ok(())
    }
}
