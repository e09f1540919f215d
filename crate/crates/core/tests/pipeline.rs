use std::sync::{Mutex, OnceLock};

use tge_core::harness::*;
use tge_core::offline_rl::Backbone;
use tge_core::trajdata::{EnvSpec, MixtureSpec, PolicyKind};

/// Records every log line so cache reuse can be asserted on.
struct Capture(Mutex<Vec<String>>);

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata<'_>) -> bool {
        true
    }
    fn log(&self, r: &log::Record<'_>) {
        self.0.lock().unwrap().push(r.args().to_string());
    }
    fn flush(&self) {}
}

fn capture() -> &'static Capture {
    static CAP: OnceLock<&'static Capture> = OnceLock::new();
    CAP.get_or_init(|| {
        let cap: &'static Capture = Box::leak(Box::new(Capture(Mutex::new(Vec::new()))));
        log::set_logger(cap).expect("no other logger");
        log::set_max_level(log::LevelFilter::Info);
        cap
    })
}

fn tiny_config(env: EnvSpec) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(env);
    cfg.mixture = MixtureSpec {
        n_suboptimal_transitions: 400,
        n_expert_trajectories: 1,
        behavior_kind: PolicyKind::Random,
        seed: 3,
    };
    cfg.diffusion.horizon = 4;
    cfg.diffusion.d_z = 8;
    cfg.diffusion.base_dim = 4;
    cfg.diffusion.dim_mults = vec![1, 2];
    cfg.diffusion.train_steps = 20;
    cfg.diffusion.log_every = 5;
    cfg.reward.m = 3;
    cfg.rl.steps = 40;
    cfg.rl.log_every = 20;
    cfg.rl.eval_episodes_during_training = 2;
    cfg.rl.rebrac.hidden = vec![16, 16];
    cfg.rl.rebrac.batch_size = 32;
    cfg.rl.bc.hidden = vec![16, 16];
    cfg.rl.bc.batch_size = 32;
    cfg.eval_episodes = 3;
    cfg.seeds = vec![0, 1];
    cfg
}

fn paths(root: &std::path::Path) -> RunPaths {
    RunPaths {
        out_dir: root.join("out"),
        cache_dir: root.join("cache"),
    }
}

#[test]
fn second_run_reuses_every_stage_and_matches() {
    let cap = capture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(EnvSpec::PointMass2d);
    cfg.rl.bc_baseline = true;
    let p = paths(dir.path());

    let first = run_pipeline_in(&cfg, &p).unwrap();
    assert!(first.reused_stages.is_empty());
    // Two seeds share one diffusion model but train their own policies.
    assert_eq!(first.seeds.len(), 2);
    assert_ne!(first.seeds[0].train_log, first.seeds[1].train_log);
    assert!(first.seeds.iter().all(|s| s.baseline.is_some()));
    let diffusion_dirs = std::fs::read_dir(&p.cache_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("diffusion-")
        })
        .count();
    assert_eq!(diffusion_dirs, 1);

    let second = run_pipeline_in(&cfg, &p).unwrap();
    for stage in [
        "data",
        "diffusion",
        "embed",
        "annotate",
        "policy",
        "baseline",
    ] {
        assert!(
            second.reused_stages.iter().any(|s| s == stage),
            "{stage} not reused"
        );
    }
    let cache = p.cache_dir.display().to_string();
    let lines = cap.0.lock().unwrap();
    assert!(lines
        .iter()
        .any(|l| l.contains("stage diffusion: reusing cached") && l.contains(&cache)));
    drop(lines);

    let mut a = first.clone();
    let mut b = second.clone();
    a.reused_stages.clear();
    b.reused_stages.clear();
    assert_eq!(a, b);

    let on_disk = read_record(&p.out_dir.join("record.json")).unwrap();
    assert_eq!(on_disk.seeds, second.seeds);
    assert!(p.out_dir.join("seed-0").join("train_curve.svg").is_file());
}

#[test]
fn fresh_directories_reproduce_the_score_exactly() {
    let cfg = tiny_config(EnvSpec::SineWalker1d);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = run_pipeline_in(&cfg, &paths(d1.path())).unwrap();
    let r2 = run_pipeline_in(&cfg, &paths(d2.path())).unwrap();
    assert_eq!(r1.mean_score().to_bits(), r2.mean_score().to_bits());
    assert_eq!(r1.model_hash, r2.model_hash);
    assert_eq!(r1.config_hash, r2.config_hash);
    for (name, path) in &r1.artifacts {
        let other = &r2.artifacts[name];
        assert_eq!(
            std::fs::read(path).unwrap(),
            std::fs::read(other).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn stage_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(EnvSpec::PointMass2d);
    // More neighbors than the expert episode has segments.
    cfg.reward.m = 500;
    let err = run_pipeline_in(&cfg, &paths(dir.path())).unwrap_err();
    match &err {
        tge_core::Error::Stage {
            stage, artifacts, ..
        } => {
            assert_eq!(stage, "annotate");
            assert!(artifacts.is_empty() || artifacts.iter().all(|a| a.starts_with(dir.path())));
        }
        other => panic!("unexpected {other}"),
    }
    assert!(!err.is_config());
}

#[test]
fn sweep_writes_long_csv_and_shares_upstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(EnvSpec::PointMass2d);
    cfg.seeds = vec![0];
    cfg.rl.backbone = Backbone::Rebrac;
    let values = vec!["1".to_string(), "2".to_string()];
    let res = run_sweep(&cfg, SweepAxis::M, &values, dir.path()).unwrap();
    assert_eq!(res.rows.len(), 2);
    let csv = std::fs::read_to_string(&res.csv_path).unwrap();
    assert!(csv.starts_with("axis,value,seed,score\nm,1,0,"));
    // Only annotation and RL depend on m.
    assert!(res.records[1]
        .1
        .reused_stages
        .iter()
        .any(|s| s == "diffusion"));
    assert!(!res.records[1]
        .1
        .reused_stages
        .iter()
        .any(|s| s == "annotate"));
}
