//! Multi-seed experiments built on the full pipeline.

use crate::config::RunConfig;
use crate::distill::{distill_student, DistillRun, PipelineFlags};
use crate::error::{Error, Result};
use crate::flow::Schedule;
use crate::io::{fmt_f64, Table};
use crate::models::{parameter_bytes, quantize_weights, VelocityNet};
use crate::ndcore::Rng;
use crate::teacher::{gen_synthetic_set, train_teacher, SyntheticSet, TeacherRun};

use super::metrics::{median, MetricReport};
use super::protocol::EvalSet;

/// Teacher, synthetic set and evaluation set for one seed.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub teacher: TeacherRun,
    pub synthetic: SyntheticSet,
    pub eval: EvalSet,
    /// The teacher's reference sampler scored on `eval`.
    pub teacher_report: MetricReport,
}

impl SeedContext {
    pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let rng = Rng::new(seed);
        let teacher = train_teacher(&cfg.data, &cfg.net, &cfg.teacher, &rng.substream("teacher"))?;
        let synthetic = gen_synthetic_set(
            &teacher.teacher,
            &format!("teacher-seed{seed}"),
            cfg.synthetic.n,
            cfg.synthetic.steps,
            cfg.synthetic.guidance_scale,
            &rng.substream("synthetic"),
        )?;
        let eval = EvalSet::new(cfg, seed)?;
        let teacher_report = eval.score(
            &format!("teacher_{}step", cfg.eval.teacher_steps),
            &teacher.teacher,
            &Schedule::uniform(cfg.eval.teacher_steps)?,
            1.0,
        )?;
        Ok(Self {
            seed,
            teacher,
            synthetic,
            eval,
            teacher_report,
        })
    }

    pub fn distill(&self, cfg: &RunConfig, flags: PipelineFlags) -> Result<DistillRun> {
        distill_student(cfg, &self.teacher.teacher, &self.synthetic, flags, &Rng::new(self.seed).substream("distill"))
    }

    pub fn score_student(&self, name: &str, student: &VelocityNet, schedule: &Schedule) -> Result<MetricReport> {
        self.eval.score(name, student, schedule, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub variants: Vec<String>,
    /// `reports[seed][variant]`.
    pub reports: Vec<Vec<MetricReport>>,
    pub baselines: Vec<MetricReport>,
}

impl AblationResult {
    pub fn median_mmd(&self, variant: usize) -> f64 {
        median(&self.reports.iter().map(|r| r[variant].mmd2).collect::<Vec<_>>())
    }

    /// Ablations whose median MMD² exceeds the first variant's.
    pub fn beaten_by_first(&self) -> Vec<String> {
        let full = self.median_mmd(0);
        (1..self.variants.len())
            .filter(|&v| self.median_mmd(v) > full)
            .map(|v| self.variants[v].clone())
            .collect()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(MetricReport::HEADER);
        for r in self.baselines.iter().chain(self.reports.iter().flatten()) {
            t.push(r.cells()).expect("row width matches header");
        }
        t
    }

    pub fn median_table(&self) -> Table {
        let mut t = Table::new(["variant", "median_mmd2", "median_mode_coverage", "median_conditional_accuracy"]);
        for (v, name) in self.variants.iter().enumerate() {
            let col = |f: fn(&MetricReport) -> f64| median(&self.reports.iter().map(|r| f(&r[v])).collect::<Vec<_>>());
            t.push(vec![
                name.clone(),
                fmt_f64(col(|r| r.mmd2)),
                fmt_f64(col(|r| r.mode_coverage)),
                fmt_f64(col(|r| r.conditional_accuracy)),
            ])
            .expect("row width matches header");
        }
        t
    }
}

/// Runs every named variant on every seed with the same teacher, synthetic
/// data and evaluation set per seed. Variants must run the same number of
/// distribution-matching iterations.
pub fn run_ablation_matrix(cfg: &RunConfig, seeds: &[u64], variants: &[&str]) -> Result<AblationResult> {
    let flags = variants
        .iter()
        .map(|v| PipelineFlags::ablation(v).ok_or_else(|| Error::invalid(format!("unknown variant `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(seeds.len());
    let mut baselines = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let ctx = SeedContext::prepare(cfg, seed)?;
        let mut row = Vec::with_capacity(variants.len());
        let mut iterations = None;
        for (name, &f) in variants.iter().zip(&flags) {
            let run = ctx.distill(cfg, f)?;
            let its = run.dmd_log.iterations.len();
            if *iterations.get_or_insert(its) != its {
                return Err(Error::Stage(format!("variant {name} ran {its} iterations, expected {iterations:?}")));
            }
            row.push(ctx.score_student(name, &run.state.student, &run.state.schedule)?);
        }
        baselines.push(ctx.eval.baseline.clone());
        reports.push(row);
    }
    Ok(AblationResult {
        variants: variants.iter().map(|s| s.to_string()).collect(),
        reports,
        baselines,
    })
}

/// Metrics and parameter storage of `student` quantized to each bit width.
pub fn quantization_tradeoff(
    student: &VelocityNet,
    schedule: &Schedule,
    eval: &EvalSet,
    bits: &[u32],
) -> Result<Table> {
    let mut t = Table::new(["bits", "bytes", "mmd2", "mode_coverage", "conditional_accuracy"]);
    for &b in bits {
        let q = quantize_weights(student, b)?;
        let r = eval.score(&format!("{b}bit"), &q, schedule, 1.0)?;
        t.push(vec![
            b.to_string(),
            parameter_bytes(student, b).to_string(),
            fmt_f64(r.mmd2),
            fmt_f64(r.mode_coverage),
            fmt_f64(r.conditional_accuracy),
        ])?;
    }
    Ok(t)
}
