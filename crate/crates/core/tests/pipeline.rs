use flowdistill::config::RunConfig;
use flowdistill::distill::{continue_two_step, distill_student, PipelineFlags, Stage};
use flowdistill::models::FeatureTaps;
use flowdistill::teacher::{gen_synthetic_set, train_teacher};
use flowdistill::Rng;

fn tiny() -> RunConfig {
    let mut c = RunConfig::desk();
    c.net.width = 8;
    c.net.depth = 3;
    c.teacher.iterations = 30;
    c.teacher.batch = 32;
    c.distill.batch = 16;
    c.distill.pretrain.iterations = 3;
    c.distill.pretrain.trajectory_pool = 64;
    c.distill.dmd.iterations = 6;
    c.distill.dmd.update_ratio = 2;
    c.distill.two_step.iterations = 2;
    c.distill.split.iterations = 2;
    c.adversarial.taps = FeatureTaps::new(vec![1, 2]);
    c.adversarial.t_star_levels = vec![0.75, 0.25];
    c
}

fn run(cfg: &RunConfig, seed: u64, flags: PipelineFlags) -> flowdistill::distill::DistillRun {
    let rng = Rng::new(seed);
    let teacher = train_teacher(&cfg.data, &cfg.net, &cfg.teacher, &rng.substream("teacher")).unwrap();
    let real = gen_synthetic_set(&teacher.teacher, "t", 128, 4, 1.0, &rng.substream("synthetic")).unwrap();
    distill_student(cfg, &teacher.teacher, &real, flags, &rng.substream("distill")).unwrap()
}

#[test]
fn distillation_is_deterministic_per_seed() {
    let cfg = tiny();
    let a = run(&cfg, 3, PipelineFlags::full());
    let b = run(&cfg, 3, PipelineFlags::full());
    assert_eq!(a.state.student.params().fingerprint(), b.state.student.params().fingerprint());
    assert_eq!(a.dmd_log.to_table().to_csv(), b.dmd_log.to_table().to_csv());
    let c = run(&cfg, 4, PipelineFlags::full());
    assert_ne!(a.state.student.params().fingerprint(), c.state.student.params().fingerprint());
}

#[test]
fn noisier_start_phase_then_matched_phase() {
    let cfg = tiny();
    let r = run(&cfg, 5, PipelineFlags::full());
    let switch = (cfg.distill.dmd.noisier_start_fraction * cfg.distill.dmd.iterations as f64).round() as usize;
    for (i, it) in r.dmd_log.iterations.iter().enumerate() {
        let tp = it.generator.target;
        if i < switch {
            assert!(it.noisier_start);
            assert_eq!(tp.input_index + 1, tp.target_index);
            assert!(tp.input_t > tp.target_t);
        } else {
            assert!(!it.noisier_start);
            assert_eq!(tp.input_index, tp.target_index);
        }
        assert!(it.generator.score_times.iter().all(|&t| r.state.schedule.contains(t)));
        assert_eq!(it.proxy_updates, cfg.distill.dmd.update_ratio);
        assert_eq!(it.disc_updates, cfg.distill.dmd.update_ratio);
    }
    assert_eq!(r.state.stage, Stage::Dmd);
    assert_eq!(r.state.schedule.len(), 4);
    r.state.check_teacher_frozen().unwrap();
}

#[test]
fn ablation_flags_change_the_run() {
    let cfg = tiny();
    let no_adv = run(&cfg, 6, PipelineFlags::ablation("no_adv").unwrap());
    assert!(no_adv.bank.is_none());
    assert!(no_adv.dmd_log.iterations.iter().all(|i| i.disc_updates == 0 && i.generator.adv_loss == 0.0));
    let no_pre = run(&cfg, 6, PipelineFlags::ablation("no_pretrain").unwrap());
    assert!(no_pre.pretrain_curve.is_empty());
    let random_t = run(&cfg, 6, PipelineFlags::ablation("no_timestep_sharing").unwrap());
    let off = random_t
        .dmd_log
        .iterations
        .iter()
        .flat_map(|i| i.generator.score_times.iter())
        .filter(|&&t| !random_t.state.schedule.contains(t))
        .count();
    assert!(off > 0);
}

#[test]
fn two_step_continuation_and_split() {
    let cfg = tiny();
    let mut flags = PipelineFlags::full();
    flags.split_ft = true;
    let mut r = run(&cfg, 7, flags);
    let split = r.split.as_ref().unwrap();
    assert_eq!(split.low_updates + split.high_updates, cfg.distill.split.iterations);
    assert_eq!(r.state.stage, Stage::SplitFt);
    let real = gen_synthetic_set(r.state.teacher(), "t", 64, 4, 1.0, &Rng::new(8)).unwrap();
    continue_two_step(&mut r, &cfg, &real, &Rng::new(9)).unwrap();
    assert_eq!(r.state.schedule.len(), 2);
    assert_eq!(r.state.stage, Stage::TwoStep);
    assert_eq!(r.two_step_log.as_ref().unwrap().iterations.len(), cfg.distill.two_step.iterations);
}
