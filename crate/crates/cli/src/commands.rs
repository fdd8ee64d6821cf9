use std::path::{Path, PathBuf};

use flowdistill::adversarial::DiscriminatorBank;
use flowdistill::config::RunConfig;
use flowdistill::distill::{
    bank_config, distill_student, distill_two_step, stage_settings, DistillState, PipelineFlags, Stage,
};
use flowdistill::eval::{quantization_tradeoff, run_ablation_matrix, EvalSet, MetricReport};
use flowdistill::flow::{sample_endpoints, Schedule};
use flowdistill::io::{bar_svg, curve_table, samples_table, scatter_svg, Table};
use flowdistill::models::{
    load_checkpoint, load_checkpoint_expecting, quantize_weights, save_checkpoint, CheckpointMeta, VelocityNet,
};
use flowdistill::teacher::{draw_conditions, gen_data, gen_synthetic_set, train_teacher, SyntheticSet, Teacher};
use flowdistill::Rng;

use crate::error::CliError;
use crate::rundir::{require_file, RunDir};

const DROPOUT_KEY: &str = "cond_dropout_p";

fn save_net(dir: &mut RunDir, name: &str, net: &VelocityNet, meta: &CheckpointMeta) -> Result<PathBuf, CliError> {
    let p = dir.file(name);
    save_checkpoint(net, meta, &p)?;
    dir.record(name);
    Ok(p)
}

fn write_table(dir: &mut RunDir, name: &str, t: &Table) -> Result<(), CliError> {
    dir.write(name, t.to_csv().as_bytes()).map(|_| ())
}

fn report_table(reports: &[MetricReport]) -> Table {
    let mut t = Table::new(MetricReport::HEADER);
    for r in reports {
        t.push(r.cells()).expect("row width matches header");
    }
    t
}

fn load_teacher(dir: &mut RunDir, cfg: &RunConfig, path: &Path) -> Result<Teacher, CliError> {
    require_file(path)?;
    dir.input(path)?;
    let (net, meta) = load_checkpoint_expecting(path, &cfg.net)?;
    if meta.stage != "teacher" {
        return Err(CliError::Prerequisite(format!(
            "{} holds a `{}` checkpoint, expected a teacher",
            path.display(),
            meta.stage
        )));
    }
    let cond_dropout_p = match meta.extra.get(DROPOUT_KEY) {
        Some(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("{}: bad {DROPOUT_KEY} `{v}`", path.display())))?,
        None => cfg.teacher.cond_dropout_p,
    };
    Ok(Teacher { net, cond_dropout_p })
}

/// Schedule stored with a checkpoint, or a uniform one of `steps`.
fn schedule_for(meta: &CheckpointMeta, steps: Option<usize>, fallback: usize) -> Result<Schedule, CliError> {
    Ok(match steps {
        Some(n) => Schedule::uniform(n)?,
        None if !meta.schedule.is_empty() => Schedule::from_steps(meta.schedule.clone())?,
        None => Schedule::uniform(fallback)?,
    })
}

pub fn gen_data_cmd(cfg: &RunConfig, run_dir: Option<&Path>, n: Option<usize>) -> Result<PathBuf, CliError> {
    let mut dir = RunDir::open(cfg, "gen-data", run_dir)?;
    let n = n.unwrap_or(cfg.eval.n);
    let data = gen_data(&cfg.data, n, &mut Rng::new(cfg.seed).substream("data"))?;
    write_table(&mut dir, "data.csv", &samples_table(&data.x, &data.cond)?)?;
    let svg = scatter_svg(&data.x, &data.cond, &cfg.data.centers(), "ground truth")?;
    dir.write("data.svg", svg.as_bytes())?;
    dir.finish()
}

pub fn train_teacher_cmd(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut dir = RunDir::open(cfg, "train-teacher", run_dir)?;
    let rng = Rng::new(cfg.seed);
    let run = train_teacher(&cfg.data, &cfg.net, &cfg.teacher, &rng.substream("teacher"))?;
    let mut meta = CheckpointMeta {
        stage: "teacher".into(),
        iteration: cfg.teacher.iterations as u64,
        ..CheckpointMeta::default()
    };
    meta.extra.insert(DROPOUT_KEY.into(), run.teacher.cond_dropout_p.to_string());
    save_net(&mut dir, "teacher.ckpt", &run.teacher.net, &meta)?;
    write_table(&mut dir, "teacher_curve.csv", &curve_table("fm_loss", &run.curve))?;
    dir.finish()
}

pub struct DistillArgs<'a> {
    pub teacher: &'a Path,
    pub target_steps: usize,
    pub from: Option<&'a Path>,
    pub flags: PipelineFlags,
}

fn synthetic(cfg: &RunConfig, teacher: &Teacher, dir: &mut RunDir) -> Result<SyntheticSet, CliError> {
    let set = gen_synthetic_set(
        teacher,
        &format!("teacher-seed{}", cfg.seed),
        cfg.synthetic.n,
        cfg.synthetic.steps,
        cfg.synthetic.guidance_scale,
        &Rng::new(cfg.seed).substream("synthetic"),
    )?;
    write_table(dir, "synthetic.csv", &samples_table(&set.x0, &set.cond)?)?;
    Ok(set)
}

fn student_meta(state: &DistillState) -> CheckpointMeta {
    CheckpointMeta {
        stage: state.stage.name().to_string(),
        iteration: state.iteration as u64,
        schedule: state.schedule.steps().to_vec(),
        ..CheckpointMeta::default()
    }
}

pub fn distill_cmd(cfg: &RunConfig, run_dir: Option<&Path>, args: &DistillArgs) -> Result<PathBuf, CliError> {
    match (args.target_steps, args.from) {
        (4, None) | (2, Some(_)) => {}
        (2, None) => {
            return Err(CliError::Prerequisite(
                "two-step distillation starts from a four-step student; pass --from <student.ckpt>".into(),
            ))
        }
        (4, Some(_)) => return Err(CliError::Usage("--from only applies to --target-steps 2".into())),
        (n, _) => return Err(CliError::Usage(format!("--target-steps must be 4 or 2, got {n}"))),
    }
    if args.target_steps == 2 && args.flags.split_ft {
        return Err(CliError::Usage("--split-ft applies to the four-step stage".into()));
    }
    if let Some(p) = args.from {
        require_file(p)?;
    }
    let mut dir = RunDir::open(cfg, "distill", run_dir)?;
    let teacher = load_teacher(&mut dir, cfg, args.teacher)?;
    let real = synthetic(cfg, &teacher, &mut dir)?;
    let rng = Rng::new(cfg.seed).substream("distill");

    if let Some(from) = args.from {
        dir.input(from)?;
        let (student, meta) = load_checkpoint_expecting(from, &cfg.net)?;
        if meta.schedule.len() != 4 || !matches!(meta.stage.as_str(), "dmd" | "split_ft") {
            return Err(CliError::Prerequisite(format!(
                "{} is a `{}` checkpoint with {} steps; two-step distillation needs a finished four-step student",
                from.display(),
                meta.stage,
                meta.schedule.len()
            )));
        }
        let d = &cfg.distill;
        let mut state = DistillState::new(teacher, 4, d.dmd.generator, d.dmd.proxy)?;
        state.student = student;
        state.stage = if meta.stage == "split_ft" { Stage::SplitFt } else { Stage::Dmd };
        let mut bank = if args.flags.adversarial && cfg.adversarial.enabled {
            Some(DiscriminatorBank::new(bank_config(cfg, args.flags.refresh), &mut rng.substream("bank"))?)
        } else {
            None
        };
        let mut settings = stage_settings(cfg, args.flags);
        settings.iterations = d.two_step.iterations;
        settings.lambda_gram = d.two_step.lambda_gram;
        let log = distill_two_step(&mut state, bank.as_mut(), &settings, &real, &rng.substream("two_step"))?;
        write_table(&mut dir, "two_step_log.csv", &log.to_table())?;
        save_net(&mut dir, "student.ckpt", &state.student, &student_meta(&state))?;
        return dir.finish();
    }

    let run = distill_student(cfg, &teacher.clone(), &real, args.flags, &rng)?;
    if !run.pretrain_curve.is_empty() {
        write_table(&mut dir, "pretrain_curve.csv", &curve_table("trajectory_loss", &run.pretrain_curve))?;
    }
    write_table(&mut dir, "dmd_log.csv", &run.dmd_log.to_table())?;
    write_table(&mut dir, "head_stats.csv", &run.dmd_log.head_stats_table())?;
    if let Some(split) = &run.split {
        write_table(&mut dir, "split_log.csv", &split.log.to_table())?;
        let meta = CheckpointMeta {
            stage: "dmd".into(),
            schedule: run.state.schedule.steps().to_vec(),
            ..CheckpointMeta::default()
        };
        save_net(&mut dir, "pre_merge.ckpt", &split.original, &meta)?;
    }
    save_net(&mut dir, "student.ckpt", &run.state.student, &student_meta(&run.state))?;
    dir.finish()
}

pub fn eval_cmd(cfg: &RunConfig, run_dir: Option<&Path>, checkpoint: &Path, steps: Option<usize>) -> Result<PathBuf, CliError> {
    require_file(checkpoint)?;
    let mut dir = RunDir::open(cfg, "eval", run_dir)?;
    dir.input(checkpoint)?;
    let (net, meta) = load_checkpoint_expecting(checkpoint, &cfg.net)?;
    let schedule = schedule_for(&meta, steps, cfg.eval.teacher_steps)?;
    let eval = EvalSet::new(cfg, cfg.seed)?;
    let name = format!("{}_{}step", meta.stage, schedule.len());
    let samples = eval.sample(&net, &schedule, 1.0)?;
    let report = eval.score_samples(&name, &samples)?;
    write_table(&mut dir, "metrics.csv", &report_table(&[eval.baseline.clone(), report]))?;
    let svg = scatter_svg(&samples, &eval.cond, &cfg.data.centers(), &name)?;
    dir.write("samples.svg", svg.as_bytes())?;
    dir.finish()
}

pub fn ablate_cmd(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut dir = RunDir::open(cfg, "ablate", run_dir)?;
    let result = run_ablation_matrix(cfg, &cfg.seeds, &PipelineFlags::ABLATIONS)?;
    write_table(&mut dir, "ablation.csv", &result.to_table())?;
    write_table(&mut dir, "ablation_median.csv", &result.median_table())?;
    let medians: Vec<f64> = (0..result.variants.len()).map(|v| result.median_mmd(v)).collect();
    let svg = bar_svg(&result.variants, &medians, "median MMD²")?;
    dir.write("ablation.svg", svg.as_bytes())?;
    dir.finish()
}

pub fn quantize_cmd(cfg: &RunConfig, run_dir: Option<&Path>, checkpoint: &Path, bits: u32) -> Result<PathBuf, CliError> {
    require_file(checkpoint)?;
    let mut dir = RunDir::open(cfg, "quantize", run_dir)?;
    dir.input(checkpoint)?;
    let (net, mut meta) = load_checkpoint(checkpoint)?;
    let q = quantize_weights(&net, bits)?;
    let schedule = schedule_for(&meta, None, cfg.eval.teacher_steps)?;
    meta.extra.insert("quantized_bits".into(), bits.to_string());
    save_net(&mut dir, &format!("quantized_{bits}bit.ckpt"), &q, &meta)?;
    if net.config() == &cfg.net {
        let eval = EvalSet::new(cfg, cfg.seed)?;
        let table = quantization_tradeoff(&net, &schedule, &eval, &[bits])?;
        write_table(&mut dir, "tradeoff.csv", &table)?;
    }
    dir.finish()
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub n: usize,
    pub steps: Option<usize>,
    pub guidance: f64,
}

pub fn sample_cmd(cfg: &RunConfig, run_dir: Option<&Path>, args: &SampleArgs) -> Result<PathBuf, CliError> {
    require_file(args.checkpoint)?;
    let mut dir = RunDir::open(cfg, "sample", run_dir)?;
    dir.input(args.checkpoint)?;
    let (net, meta) = load_checkpoint(args.checkpoint)?;
    let schedule = schedule_for(&meta, args.steps, cfg.eval.teacher_steps)?;
    let rng = Rng::new(cfg.seed).substream("sample");
    let c = net.config();
    let cond = draw_conditions(c.classes, args.n, &mut rng.substream("cond"));
    let z = rng.substream("noise").normal_tensor(&[args.n, c.data_dim]);
    let x = sample_endpoints(&net, &schedule, &z, &cond, args.guidance)?;
    write_table(&mut dir, "samples.csv", &samples_table(&x, &cond)?)?;
    let title = format!("{} steps, guidance {}", schedule.len(), args.guidance);
    let svg = scatter_svg(&x, &cond, &cfg.data.centers(), &title)?;
    dir.write("samples.svg", svg.as_bytes())?;
    dir.finish()
}
