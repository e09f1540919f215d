use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use tge_core::diffusion::{train_diffusion as fit_diffusion, DiffusionModel};
use tge_core::embedding::{embed_dataset, read_embeddings, write_embeddings};
use tge_core::harness::{
    export_embedding_projection, export_reward_histogram, export_training_curve, read_record,
    run_pipeline_in, run_sweep, ExperimentConfig, RunPaths, SweepAxis,
};
use tge_core::offline_rl::{
    bc_train, evaluate_policy, iql_train, rebrac_train, write_log_csv, Backbone, PolicyBundle,
    TrainOptions,
};
use tge_core::reward::{annotate as annotate_dataset, read_annotated, write_annotated};
use tge_core::trajdata::{
    generate_expert_demo, generate_toy_dataset, labels_path, mix_with_provenance,
    normalize_observations, read_dataset, read_labels, write_dataset, EnvSpec, PolicyKind,
    TrajectoryDataset,
};
use tge_core::Error;

use crate::Global;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::config(msg).into()
}

impl Global {
    /// The `--config` file, or defaults for `env`.
    fn experiment(&self, env: Option<EnvSpec>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let env = env.ok_or_else(|| config_error("pass --env or --config"))?;
                ExperimentConfig::new(env)
            }
        };
        if let Some(env) = env {
            cfg.env = env;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.clone());
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn output(&self, explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
        let path = explicit
            .clone()
            .unwrap_or_else(|| self.out_dir().join(default_name));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    env: Option<EnvSpec>,
    /// Scripted behavior policy: expert, medium or random.
    #[arg(long, default_value = "random")]
    kind: PolicyKind,
    #[arg(long, default_value_t = 10_000)]
    transitions: usize,
    /// Record the single observation-only expert episode instead.
    #[arg(long)]
    demo: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

pub fn gen_data(g: &Global, a: &GenData) -> Result<()> {
    let cfg = g.experiment(a.env)?;
    let (ds, name) = if a.demo {
        (
            generate_expert_demo(cfg.env, g.seed.unwrap_or(cfg.demo_seed))?,
            "demo.tge".to_string(),
        )
    } else {
        let seed = g.seed.unwrap_or(cfg.mixture.seed);
        (
            generate_toy_dataset(cfg.env, a.kind, a.transitions, seed)?,
            format!("{:?}.tge", a.kind).to_lowercase(),
        )
    };
    let out = g.output(&a.output, &name)?;
    write_dataset(&out, &ds)?;
    println!(
        "{} ({} trajectories, {} transitions)",
        out.display(),
        ds.len(),
        ds.num_transitions()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct MixData {
    #[arg(long)]
    suboptimal: PathBuf,
    /// Pool the expert trajectories are drawn from.
    #[arg(long)]
    experts: PathBuf,
    /// Defaults to the config's mixture size.
    #[arg(long)]
    transitions: Option<usize>,
    #[arg(long)]
    n_expert: Option<usize>,
    /// Observation-only demo to normalize with the mixture's statistics.
    #[arg(long)]
    demo: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

pub fn mix_data(g: &Global, a: &MixData) -> Result<()> {
    let sub = read_with_labels(&a.suboptimal)?;
    let experts = read_with_labels(&a.experts)?;
    let env = EnvSpec::for_dims(sub.state_dim, sub.action_dim);
    let cfg = g.experiment(env)?;
    let mut spec = cfg.mixture.clone();
    if let Some(n) = a.transitions {
        spec.n_suboptimal_transitions = n;
    }
    if let Some(n) = a.n_expert {
        spec.n_expert_trajectories = n;
    }
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let (mixed, _) = mix_with_provenance(&sub, &experts, &spec)?;
    let (mixed, norm) = normalize_observations(&mixed)?;
    let out = g.output(&a.output, "behavioral.tge")?;
    write_dataset(&out, &mixed)?;
    println!("{} ({} trajectories)", out.display(), mixed.len());
    if let Some(demo) = &a.demo {
        let normed = norm.apply(&read_dataset(demo)?)?;
        let p = out.with_file_name("demo.normalized.tge");
        write_dataset(&p, &normed)?;
        println!("{}", p.display());
    }
    Ok(())
}

/// Reads a dataset and reattaches its label sidecar, if there is one, so the
/// mixture keeps evaluation labels.
fn read_with_labels(path: &Path) -> Result<TrajectoryDataset> {
    let mut ds = read_dataset(path)?;
    if labels_path(path).is_file() {
        let labels = read_labels(path)?;
        if labels.len() != ds.len() {
            return Err(Error::format(format!(
                "{}: label sidecar does not match the dataset",
                path.display()
            ))
            .into());
        }
        for (t, l) in ds.trajectories.iter_mut().zip(labels) {
            t.source_label = l;
        }
    }
    Ok(ds)
}

#[derive(Args, Debug)]
pub struct TrainDiffusion {
    /// Normalized behavioral dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

pub fn train_diffusion(g: &Global, a: &TrainDiffusion) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let mut cfg = g
        .experiment(EnvSpec::for_dims(ds.state_dim, ds.action_dim))?
        .diffusion;
    if let Some(s) = a.steps {
        cfg.train_steps = s;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let trained = fit_diffusion(&ds, &cfg)?;
    let out = g.output(&a.output, "model.bin")?;
    let hash = trained.model.save(&out)?;
    let mut csv = String::from("step,loss\n");
    for (s, l) in &trained.loss_curve {
        csv.push_str(&format!("{s},{l}\n"));
    }
    std::fs::write(out.with_extension("loss.csv"), csv)?;
    println!("{} (model {hash})", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct Embed {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

pub fn embed(g: &Global, a: &Embed) -> Result<()> {
    let model = DiffusionModel::load(&a.model)?;
    let ds = read_dataset(&a.data)?;
    let set = embed_dataset(&model, &ds, model.config.horizon, a.stride)?;
    let out = g.output(&a.output, "embeddings.emb")?;
    write_embeddings(&out, &set)?;
    println!("{} ({} segments)", out.display(), set.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct Annotate {
    /// Normalized behavioral dataset the embeddings were computed from.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    expert_embeddings: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

pub fn annotate(g: &Global, a: &Annotate) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let cfg = g.experiment(EnvSpec::for_dims(ds.state_dim, ds.action_dim))?;
    let ann = annotate_dataset(
        &ds,
        &read_embeddings(&a.embeddings)?,
        &read_embeddings(&a.expert_embeddings)?,
        &cfg.reward,
    )?;
    let out = g.output(&a.output, "annotated.tge")?;
    write_annotated(&out, &ann)?;
    println!("{} ({} rewards)", out.display(), ann.rewards.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainRl {
    #[arg(long)]
    annotated: PathBuf,
    /// Overrides the config's backbone: rebrac, iql or bc.
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for policy.bin and train_log.csv.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

pub fn train_rl(g: &Global, a: &TrainRl) -> Result<()> {
    let ann = read_annotated(&a.annotated)?;
    let ds = &ann.dataset;
    let cfg = g.experiment(EnvSpec::for_dims(ds.state_dim, ds.action_dim))?;
    let opts = TrainOptions {
        steps: a.steps.unwrap_or(cfg.rl.steps),
        seed: g.seed.unwrap_or(cfg.seeds[0]),
        log_every: cfg.rl.log_every,
        eval_env: (cfg.rl.eval_episodes_during_training > 0).then_some(cfg.env),
        eval_episodes: cfg.rl.eval_episodes_during_training.max(1),
    };
    let out = match a.backbone.unwrap_or(cfg.rl.backbone) {
        Backbone::Rebrac => rebrac_train(&ann, &cfg.rl.rebrac, &opts)?,
        Backbone::Iql => iql_train(&ann, &cfg.rl.iql, &opts)?,
        Backbone::Bc => bc_train(ds, &cfg.rl.bc, &opts)?,
    };
    let dir = a.output.clone().unwrap_or_else(|| g.out_dir());
    std::fs::create_dir_all(&dir)?;
    out.bundle.save(&dir.join("policy.bin"))?;
    write_log_csv(&out.log, &dir.join("train_log.csv"))?;
    if let Some(last) = out.log.last().and_then(|r| r.normalized_score) {
        println!("final training-time score {last:.2}");
    }
    println!("{}", dir.join("policy.bin").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    env: Option<EnvSpec>,
    #[arg(long)]
    episodes: Option<usize>,
}

pub fn eval(g: &Global, a: &Eval) -> Result<()> {
    let bundle = PolicyBundle::load(&a.policy)?;
    let env = a
        .env
        .or_else(|| EnvSpec::for_dims(bundle.state_dim, bundle.action_dim));
    let cfg = g.experiment(env)?;
    let episodes = a.episodes.unwrap_or(cfg.eval_episodes);
    let res = evaluate_policy(cfg.env, &bundle, episodes, g.seed.unwrap_or(0))?;
    println!("{}", serde_json::to_string_pretty(&res)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct Pipeline {
    #[arg(long)]
    env: Option<EnvSpec>,
}

fn resolve_run(g: &Global, env: Option<EnvSpec>) -> Result<ExperimentConfig> {
    let mut cfg = g.experiment(env)?;
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

pub fn pipeline(g: &Global, a: &Pipeline) -> Result<()> {
    let cfg = resolve_run(g, a.env)?;
    let paths = RunPaths::resolve(&cfg);
    let rec = run_pipeline_in(&cfg, &paths)?;
    for s in &rec.seeds {
        println!(
            "seed {}: normalized score {:.2}",
            s.seed, s.eval.normalized_score
        );
    }
    println!("mean normalized score {:.2}", rec.mean_score());
    if let Some(b) = rec.mean_baseline_score() {
        println!("mean BC baseline score {b:.2}");
    }
    println!("{}", paths.out_dir.join("record.json").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct Sweep {
    #[arg(long)]
    env: Option<EnvSpec>,
    /// horizon, sigma, m, kernel, backbone or mixture.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated; mixture values are `kind:n_expert`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

pub fn sweep(g: &Global, a: &Sweep) -> Result<()> {
    let cfg = resolve_run(g, a.env)?;
    let out = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("sweep-{}", a.axis)));
    let res = run_sweep(&cfg, a.axis, &a.values, &out)?;
    for (v, score) in res.mean_scores() {
        println!("{}={v}: mean normalized score {score:.2}", a.axis);
    }
    println!("{}", res.csv_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct Plot {
    /// Run record whose training curves to draw.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Annotated dataset for the reward histogram.
    #[arg(long)]
    annotated: Option<PathBuf>,
    /// Embeddings for the 2-D projection.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Dataset whose label sidecar marks expert and suboptimal trajectories.
    #[arg(long)]
    labels_from: Option<PathBuf>,
}

fn labels(a: &Plot) -> Result<Vec<Option<tge_core::trajdata::SourceLabel>>> {
    let p = a
        .labels_from
        .as_deref()
        .ok_or_else(|| config_error("--labels-from is required for this plot"))?;
    Ok(read_labels(p)?)
}

pub fn plot(g: &Global, a: &Plot) -> Result<()> {
    if a.record.is_none() && a.annotated.is_none() && a.embeddings.is_none() {
        return Err(config_error(
            "nothing to plot: pass --record, --annotated or --embeddings",
        ));
    }
    let out = g.out_dir();
    std::fs::create_dir_all(&out)?;
    if let Some(r) = &a.record {
        let rec = read_record(r)?;
        for s in &rec.seeds {
            let prefix = out.join(format!("train_curve_seed{}", s.seed));
            export_training_curve(&s.train_log, &prefix)?;
            print_written(&prefix);
        }
    }
    if let Some(p) = &a.annotated {
        let summary = export_reward_histogram(
            &read_annotated(p)?,
            &labels(a)?,
            &out.join("reward_histogram"),
        )?;
        for (name, s) in [
            ("expert", &summary.expert),
            ("suboptimal", &summary.suboptimal),
        ] {
            if let Some(s) = s {
                println!(
                    "{name}: n={} mean={:.4} var={:.4} iqr={:.4} kurtosis={:.3}",
                    s.n, s.mean, s.variance, s.iqr, s.excess_kurtosis
                );
            }
        }
        print_written(&out.join("reward_histogram"));
    }
    if let Some(p) = &a.embeddings {
        let proj = export_embedding_projection(
            &read_embeddings(p)?,
            &labels(a)?,
            &out.join("embedding_projection"),
        )?;
        println!(
            "explained variance {:.4} / {:.4}",
            proj.explained_variance[0], proj.explained_variance[1]
        );
        print_written(&out.join("embedding_projection"));
    }
    Ok(())
}

fn print_written(prefix: &Path) {
    println!("{}.svg", prefix.display());
}
