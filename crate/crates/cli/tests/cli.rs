use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
env = "pointmass2d"
seeds = [0]
eval_episodes = 3

[mixture]
n_suboptimal_transitions = 400
n_expert_trajectories = 1

[diffusion]
horizon = 4
d_z = 8
base_dim = 4
dim_mults = [1, 2]
train_steps = 10

[reward]
m = 3

[rl]
steps = 20
log_every = 10
eval_episodes_during_training = 0

[rl.rebrac]
hidden = [8, 8]
batch_size = 16

[rl.bc]
hidden = [8, 8]
batch_size = 16
"#;

fn tge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "env = \"pointmass2d\"\nhorizon = 3\n",
    )
    .unwrap();
    let out = tge(dir.path(), &["--config", "bad.toml", "pipeline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon"));

    let out = tge(dir.path(), &["pipeline"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tge(
        dir.path(),
        &[
            "sweep",
            "--env",
            "pointmass2d",
            "--axis",
            "depth",
            "--values",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TINY.replace("m = 3", "m = 400");
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let out = tge(
        dir.path(),
        &["--config", "c.toml", "--out-dir", "run", "pipeline"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("annotate"));
}

#[test]
fn verbs_chain_into_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), TINY).unwrap();
    let c = ["--config", "c.toml", "--out-dir", "w"];
    let run = |extra: &[&str]| ok(&tge(d, &[&c[..], extra].concat()));

    run(&["gen-data", "--kind", "random", "--transitions", "300"]);
    run(&["gen-data", "--kind", "expert", "--transitions", "300"]);
    run(&["gen-data", "--demo"]);
    run(&[
        "mix-data",
        "--suboptimal",
        "w/random.tge",
        "--experts",
        "w/expert.tge",
        "--demo",
        "w/demo.tge",
        "--transitions",
        "300",
    ]);
    run(&["train-diffusion", "--data", "w/behavioral.tge"]);
    run(&[
        "embed",
        "--model",
        "w/model.bin",
        "--data",
        "w/behavioral.tge",
    ]);
    run(&[
        "embed",
        "--model",
        "w/model.bin",
        "--data",
        "w/demo.normalized.tge",
        "-o",
        "w/expert.emb",
    ]);
    run(&[
        "annotate",
        "--data",
        "w/behavioral.tge",
        "--embeddings",
        "w/embeddings.emb",
        "--expert-embeddings",
        "w/expert.emb",
    ]);
    run(&["train-rl", "--annotated", "w/annotated.tge"]);
    let eval = run(&["eval", "--policy", "w/policy.bin"]);
    assert!(eval.contains("normalized_score"));
    run(&[
        "plot",
        "--annotated",
        "w/annotated.tge",
        "--embeddings",
        "w/embeddings.emb",
        "--labels-from",
        "w/behavioral.tge",
    ]);
    for f in [
        "reward_histogram.svg",
        "reward_histogram.csv",
        "embedding_projection.csv",
        "train_log.csv",
    ] {
        assert!(d.join("w").join(f).is_file(), "{f}");
    }
}

#[test]
fn pipeline_and_sweep_report_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), TINY).unwrap();
    let out = ok(&tge(
        d,
        &[
            "--config",
            "c.toml",
            "--out-dir",
            "p",
            "--threads",
            "1",
            "pipeline",
        ],
    ));
    assert!(out.contains("mean normalized score"));
    ok(&tge(
        d,
        &["--out-dir", "plots", "plot", "--record", "p/record.json"],
    ));
    assert!(d.join("plots/train_curve_seed0.svg").is_file());

    let out = ok(&tge(
        d,
        &[
            "--config",
            "c.toml",
            "--out-dir",
            "s",
            "--seed",
            "4",
            "sweep",
            "--axis",
            "sigma",
            "--values",
            "0.5,2",
        ],
    ));
    assert!(out.contains("sigma=2"));
    let csv = std::fs::read_to_string(d.join("s/sweep_sigma.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("sigma,0.5,4,"));
}
