//! Paired evaluation: every generator scored under one seed starts from the
//! same noise and conditions, and is compared to the same ground-truth draw.

use crate::config::RunConfig;
use crate::error::Result;
use crate::flow::{self, Schedule, VelocityField};
use crate::models::Condition;
use crate::ndcore::{Rng, Tensor};
use crate::teacher::gen_data;

use super::metrics::{MetricReport, Reference};

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub seed: u64,
    pub reference: Reference,
    /// Conditions of a second, independent ground-truth draw.
    pub cond: Vec<Condition>,
    /// Starting noise shared by every generator.
    pub noise: Tensor,
    /// The second ground-truth draw scored against the first.
    pub baseline: MetricReport,
}

impl EvalSet {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let rng = Rng::new(seed).substream("eval");
        let n = cfg.eval.n;
        let first = gen_data(&cfg.data, n, &mut rng.substream("reference"))?;
        let second = gen_data(&cfg.data, n, &mut rng.substream("paired"))?;
        let reference = Reference {
            data: first.x,
            centers: cfg.data.centers(),
            assign_radius: cfg.eval.assign_radius_sigmas * cfg.data.sigma,
            min_fraction: cfg.eval.min_fraction,
            conditional: cfg.data.conditional,
        };
        let baseline = reference.report("data", seed, &second.x, &second.cond)?;
        let noise = rng.substream("noise").normal_tensor(&[n, cfg.net.data_dim]);
        Ok(Self {
            seed,
            reference,
            cond: second.cond,
            noise,
            baseline,
        })
    }

    pub fn sample<F: VelocityField + ?Sized>(&self, model: &F, schedule: &Schedule, guidance: f64) -> Result<Tensor> {
        flow::sample_endpoints(model, schedule, &self.noise, &self.cond, guidance)
    }

    pub fn score_samples(&self, name: &str, samples: &Tensor) -> Result<MetricReport> {
        self.reference.report(name, self.seed, samples, &self.cond)
    }

    pub fn score<F: VelocityField + ?Sized>(
        &self,
        name: &str,
        model: &F,
        schedule: &Schedule,
        guidance: f64,
    ) -> Result<MetricReport> {
        self.score_samples(name, &self.sample(model, schedule, guidance)?)
    }
}
