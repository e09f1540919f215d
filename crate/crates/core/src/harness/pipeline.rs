use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ExperimentConfig;
use super::export::{export_training_curve, rewards_by_label};
use super::stats::GroupStats;
use crate::diffusion::{train_diffusion, DiffusionModel};
use crate::embedding::{embed_dataset, read_embeddings, write_embeddings, EmbeddingSet};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::offline_rl::{
    bc_train, evaluate_policy, iql_train, rebrac_train, Backbone, EvalResult, LogRow, PolicyBundle,
    TrainOptions, TrainOutput,
};
use crate::reward::{annotate, read_annotated, write_annotated, AnnotatedDataset};
use crate::trajdata::{
    generate_expert_demo, generate_mixture, normalize_observations, read_dataset, read_labels,
    write_dataset, SourceLabel, TrajectoryDataset,
};

const STAGE_MARKER: &str = "stage.json";
/// Bumped whenever dataset generation changes, so cached datasets are not reused.
const DATA_GENERATOR_VERSION: u32 = 2;

/// Outcome of one offline RL seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub eval: EvalResult,
    /// Unweighted BC trained on the same data, when requested.
    pub baseline: Option<EvalResult>,
    pub train_log: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub expert: Option<GroupStats>,
    pub suboptimal: Option<GroupStats>,
}

/// Everything a finished run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub model_hash: String,
    pub seeds: Vec<SeedResult>,
    pub reward_stats: RewardStats,
    pub diffusion_loss: Vec<(usize, f64)>,
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Stages satisfied from the cache, in execution order.
    pub reused_stages: Vec<String>,
}

impl RunRecord {
    pub fn mean_score(&self) -> f64 {
        self.seeds
            .iter()
            .map(|s| s.eval.normalized_score)
            .sum::<f64>()
            / self.seeds.len() as f64
    }

    pub fn mean_baseline_score(&self) -> Option<f64> {
        let b: Option<Vec<f64>> = self
            .seeds
            .iter()
            .map(|s| s.baseline.as_ref().map(|e| e.normalized_score))
            .collect();
        b.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Directory layout for one run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl RunPaths {
    /// `out_dir` defaults to `runs/<config hash>`, the cache to `<out_dir>/cache`.
    pub fn resolve(cfg: &ExperimentConfig) -> Self {
        let out_dir = cfg
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(cfg.hash()));
        let cache_dir = cfg
            .cache_dir
            .clone()
            .unwrap_or_else(|| out_dir.join("cache"));
        RunPaths { out_dir, cache_dir }
    }
}

/// Content-addressed stage directories under a cache root.
#[derive(Clone, Debug)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StageCache { root: root.into() }
    }

    pub fn key_hash<K: Serialize>(stage: &str, key: &K) -> String {
        let bytes = serde_json::to_vec(&json!({ "stage": stage, "key": key }))
            .expect("stage key serializes");
        fsutil::short_hash(&bytes)
    }

    pub fn dir(&self, stage: &str, hash: &str) -> PathBuf {
        self.root.join(format!("{stage}-{hash}"))
    }

    /// Produces the stage's files unless a complete copy exists, then loads
    /// them. Loading always goes through the files, so a hit and a recompute
    /// feed identical values downstream.
    pub fn run<K, T>(
        &self,
        stage: &str,
        key: &K,
        reused: &mut Vec<String>,
        produce: impl FnOnce(&Path) -> Result<()>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<(T, String, PathBuf)>
    where
        K: Serialize,
    {
        let hash = Self::key_hash(stage, key);
        let dir = self.dir(stage, &hash);
        let wrap = |e: Error, dir: &Path| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
            artifacts: list_files(dir),
        };
        if dir.join(STAGE_MARKER).is_file() {
            log::info!("stage {stage}: reusing cached artifacts {}", dir.display());
            reused.push(stage.to_string());
        } else {
            log::info!("stage {stage}: computing into {}", dir.display());
            std::fs::create_dir_all(&dir).map_err(|e| wrap(e.into(), &dir))?;
            produce(&dir).map_err(|e| wrap(e, &dir))?;
            let marker =
                serde_json::to_vec_pretty(&json!({ "stage": stage, "hash": hash, "key": key }))
                    .map_err(|e| wrap(e.into(), &dir))?;
            fsutil::atomic_write(&dir.join(STAGE_MARKER), &marker).map_err(|e| wrap(e, &dir))?;
        }
        let value = load(&dir).map_err(|e| wrap(e, &dir))?;
        Ok((value, hash, dir))
    }
}

fn list_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// Normalized behavioral mixture, its labels and the normalized expert episode.
pub struct DataArtifacts {
    pub behavioral: TrajectoryDataset,
    pub labels: Vec<Option<SourceLabel>>,
    pub expert: TrajectoryDataset,
}

/// Intermediate products of the shared (seed-independent) stages.
pub struct SharedStages {
    pub data: DataArtifacts,
    pub model: DiffusionModel,
    pub diffusion_loss: Vec<(usize, f64)>,
    pub behavioral_embeddings: EmbeddingSet,
    pub expert_embeddings: EmbeddingSet,
    pub annotated: AnnotatedDataset,
    pub hashes: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub reused: Vec<String>,
}

/// Data, diffusion, embedding and annotation stages.
pub fn run_shared_stages(cfg: &ExperimentConfig, cache: &StageCache) -> Result<SharedStages> {
    cfg.validate()?;
    let mut reused = Vec::new();
    let mut hashes = BTreeMap::new();
    let mut artifacts = BTreeMap::new();

    let data_key = json!({
        "env": cfg.env,
        "mixture": cfg.mixture,
        "demo_seed": cfg.demo_seed,
        "generator": DATA_GENERATOR_VERSION,
    });
    let (data, h, dir) = cache.run(
        "data",
        &data_key,
        &mut reused,
        |dir| {
            let (mix, _) = generate_mixture(cfg.env, &cfg.mixture)?;
            let (norm_mix, norm) = normalize_observations(&mix)?;
            let demo = norm.apply(&generate_expert_demo(cfg.env, cfg.demo_seed)?)?;
            write_dataset(&dir.join("behavioral.tge"), &norm_mix)?;
            write_dataset(&dir.join("expert.tge"), &demo)
        },
        |dir| {
            let p = dir.join("behavioral.tge");
            Ok(DataArtifacts {
                behavioral: read_dataset(&p)?,
                labels: read_labels(&p)?,
                expert: read_dataset(&dir.join("expert.tge"))?,
            })
        },
    )?;
    artifacts.insert("dataset".into(), dir.join("behavioral.tge"));
    artifacts.insert(
        "labels".into(),
        crate::trajdata::labels_path(&dir.join("behavioral.tge")),
    );
    artifacts.insert("expert_demo".into(), dir.join("expert.tge"));
    hashes.insert("data".into(), h.clone());

    let diff_key = json!({ "data": h, "diffusion": cfg.diffusion });
    let ((model, diffusion_loss), h, dir) = cache.run(
        "diffusion",
        &diff_key,
        &mut reused,
        |dir| {
            let trained = train_diffusion(&data.behavioral, &cfg.diffusion)?;
            trained.model.save(&dir.join("model.bin"))?;
            let mut csv = String::from("step,loss\n");
            for (s, l) in &trained.loss_curve {
                csv.push_str(&format!("{s},{l}\n"));
            }
            fsutil::atomic_write(&dir.join("loss_curve.csv"), csv.as_bytes())?;
            fsutil::atomic_write(
                &dir.join("loss_curve.json"),
                &serde_json::to_vec(&trained.loss_curve)?,
            )
        },
        |dir| {
            let model = DiffusionModel::load(&dir.join("model.bin"))?;
            let curve: Vec<(usize, f64)> =
                serde_json::from_slice(&std::fs::read(dir.join("loss_curve.json"))?)?;
            Ok((model, curve))
        },
    )?;
    artifacts.insert("model".into(), dir.join("model.bin"));
    artifacts.insert("diffusion_loss".into(), dir.join("loss_curve.csv"));
    hashes.insert("diffusion".into(), h.clone());

    let embed_key = json!({ "diffusion": h, "stride": 1, "encode_step": 0 });
    let ((behavioral_embeddings, expert_embeddings), h, dir) = cache.run(
        "embed",
        &embed_key,
        &mut reused,
        |dir| {
            let hz = model.config.horizon;
            write_embeddings(
                &dir.join("behavioral.emb"),
                &embed_dataset(&model, &data.behavioral, hz, 1)?,
            )?;
            write_embeddings(
                &dir.join("expert.emb"),
                &embed_dataset(&model, &data.expert, hz, 1)?,
            )
        },
        |dir| {
            Ok((
                read_embeddings(&dir.join("behavioral.emb"))?,
                read_embeddings(&dir.join("expert.emb"))?,
            ))
        },
    )?;
    artifacts.insert("behavioral_embeddings".into(), dir.join("behavioral.emb"));
    artifacts.insert("expert_embeddings".into(), dir.join("expert.emb"));
    hashes.insert("embed".into(), h.clone());

    let ann_key = json!({ "embed": h, "reward": cfg.reward });
    let (annotated, h, dir) = cache.run(
        "annotate",
        &ann_key,
        &mut reused,
        |dir| {
            let ann = annotate(
                &data.behavioral,
                &behavioral_embeddings,
                &expert_embeddings,
                &cfg.reward,
            )?;
            write_annotated(&dir.join("annotated.tge"), &ann)
        },
        |dir| read_annotated(&dir.join("annotated.tge")),
    )?;
    artifacts.insert("annotated".into(), dir.join("annotated.tge"));
    hashes.insert("annotate".into(), h);

    Ok(SharedStages {
        data,
        model,
        diffusion_loss,
        behavioral_embeddings,
        expert_embeddings,
        annotated,
        hashes,
        artifacts,
        reused,
    })
}

/// Seed of the final evaluation episodes for RL seed `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_add(1_000_000)
}

fn train_options(cfg: &ExperimentConfig, seed: u64) -> TrainOptions {
    let during = cfg.rl.eval_episodes_during_training;
    TrainOptions {
        steps: cfg.rl.steps,
        seed,
        log_every: cfg.rl.log_every,
        eval_env: (during > 0).then_some(cfg.env),
        eval_episodes: during.max(1),
    }
}

fn policy_stage(
    cache: &StageCache,
    stage: &str,
    key: serde_json::Value,
    reused: &mut Vec<String>,
    train: impl FnOnce() -> Result<TrainOutput>,
) -> Result<(TrainOutput, PathBuf)> {
    let (out, _, dir) = cache.run(
        stage,
        &key,
        reused,
        |dir| {
            let out = train()?;
            out.bundle.save(&dir.join("policy.bin"))?;
            fsutil::atomic_write(&dir.join("train_log.json"), &serde_json::to_vec(&out.log)?)?;
            crate::offline_rl::write_log_csv(&out.log, &dir.join("train_log.csv"))
        },
        |dir| {
            Ok(TrainOutput {
                bundle: PolicyBundle::load(&dir.join("policy.bin"))?,
                log: serde_json::from_slice(&std::fs::read(dir.join("train_log.json"))?)?,
            })
        },
    )?;
    Ok((out, dir.join("policy.bin")))
}

/// Runs the offline RL stage for one seed on top of the shared stages.
pub fn run_seed(
    cfg: &ExperimentConfig,
    shared: &SharedStages,
    cache: &StageCache,
    seed: u64,
    reused: &mut Vec<String>,
    artifacts: &mut BTreeMap<String, PathBuf>,
) -> Result<SeedResult> {
    let opts = train_options(cfg, seed);
    let backbone_cfg = match cfg.rl.backbone {
        Backbone::Rebrac => serde_json::to_value(&cfg.rl.rebrac)?,
        Backbone::Iql => serde_json::to_value(&cfg.rl.iql)?,
        Backbone::Bc => serde_json::to_value(&cfg.rl.bc)?,
    };
    let key = json!({
        "annotate": shared.hashes["annotate"],
        "backbone": cfg.rl.backbone,
        "config": backbone_cfg,
        "opts": opts,
    });
    let (out, path) = policy_stage(cache, "policy", key, reused, || match cfg.rl.backbone {
        Backbone::Rebrac => rebrac_train(&shared.annotated, &cfg.rl.rebrac, &opts),
        Backbone::Iql => iql_train(&shared.annotated, &cfg.rl.iql, &opts),
        Backbone::Bc => bc_train(&shared.annotated.dataset, &cfg.rl.bc, &opts),
    })?;
    artifacts.insert(format!("policy_seed{seed}"), path);
    let eval =
        evaluate_policy(cfg.env, &out.bundle, cfg.eval_episodes, eval_seed(seed)).map_err(|e| {
            Error::Stage {
                stage: "eval".into(),
                source: Box::new(e),
                artifacts: vec![],
            }
        })?;

    let baseline = if cfg.rl.bc_baseline {
        // Rewards play no part, so the key skips every reward-dependent stage.
        let key = json!({ "data": shared.hashes["data"], "config": cfg.rl.bc, "opts": opts });
        let (bc, path) = policy_stage(cache, "baseline", key, reused, || {
            bc_train(&shared.annotated.dataset, &cfg.rl.bc, &opts)
        })?;
        artifacts.insert(format!("baseline_seed{seed}"), path);
        Some(evaluate_policy(
            cfg.env,
            &bc.bundle,
            cfg.eval_episodes,
            eval_seed(seed),
        )?)
    } else {
        None
    };
    Ok(SeedResult {
        seed,
        eval,
        baseline,
        train_log: out.log,
    })
}

/// Data generation through evaluation for every configured seed. Writes
/// `record.json` plus per-seed training curves to the output directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let paths = RunPaths::resolve(cfg);
    run_pipeline_in(cfg, &paths)
}

pub fn run_pipeline_in(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<RunRecord> {
    let cache = StageCache::new(&paths.cache_dir);
    let shared = run_shared_stages(cfg, &cache)?;
    let mut reused = shared.reused.clone();
    let mut artifacts = shared.artifacts.clone();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let r = run_seed(cfg, &shared, &cache, seed, &mut reused, &mut artifacts)?;
        log::info!(
            "seed {seed}: normalized score {:.2}",
            r.eval.normalized_score
        );
        seeds.push(r);
    }
    let (expert, sub) = rewards_by_label(&shared.annotated, &shared.data.labels)?;
    let record = RunRecord {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        model_hash: shared.model.hash().to_string(),
        seeds,
        reward_stats: RewardStats {
            expert: GroupStats::of(&expert),
            suboptimal: GroupStats::of(&sub),
        },
        diffusion_loss: shared.diffusion_loss.clone(),
        artifacts,
        reused_stages: reused,
    };
    write_run_outputs(&record, &paths.out_dir)?;
    Ok(record)
}

fn write_run_outputs(record: &RunRecord, out_dir: &Path) -> Result<()> {
    for s in &record.seeds {
        export_training_curve(
            &s.train_log,
            &out_dir.join(format!("seed-{}", s.seed)).join("train_curve"),
        )?;
    }
    let mut rec = record.clone();
    rec.artifacts
        .insert("record".into(), out_dir.join("record.json"));
    fsutil::atomic_write(
        &out_dir.join("record.json"),
        &serde_json::to_vec_pretty(&rec)?,
    )
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
