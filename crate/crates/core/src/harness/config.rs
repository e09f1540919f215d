use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::offline_rl::{BCConfig, Backbone, IQLConfig, ReBRACConfig};
use crate::reward::RewardConfig;
use crate::trajdata::{EnvSpec, MixtureSpec};

/// Offline RL stage settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub backbone: Backbone,
    pub steps: usize,
    /// Training-curve interval; 0 logs only the final step.
    pub log_every: usize,
    /// Episodes per evaluation during training; 0 disables those evaluations.
    pub eval_episodes_during_training: usize,
    /// Also train unweighted BC on the same data with the same seeds.
    pub bc_baseline: bool,
    pub rebrac: ReBRACConfig,
    pub iql: IQLConfig,
    pub bc: BCConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            backbone: Backbone::Rebrac,
            steps: 10_000,
            log_every: 1_000,
            eval_episodes_during_training: 10,
            bc_baseline: false,
            rebrac: ReBRACConfig::default(),
            iql: IQLConfig::default(),
            bc: BCConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("rl.steps must be positive"));
        }
        match self.backbone {
            Backbone::Rebrac => self.rebrac.validate()?,
            Backbone::Iql => self.iql.validate()?,
            Backbone::Bc => self.bc.validate()?,
        }
        if self.bc_baseline {
            self.bc.validate()?;
        }
        Ok(())
    }
}

/// Everything one end-to-end run needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub mixture: MixtureSpec,
    /// Seed of the single observation-only expert episode.
    #[serde(default)]
    pub demo_seed: u64,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub rl: RlConfig,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Offline RL seeds; the data and diffusion stages use their own seeds.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

fn default_eval_episodes() -> usize {
    50
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl ExperimentConfig {
    /// Defaults for `env` with every sub-config at its default.
    pub fn new(env: EnvSpec) -> Self {
        ExperimentConfig {
            env,
            mixture: MixtureSpec::default(),
            demo_seed: 0,
            diffusion: DiffusionConfig::default(),
            reward: RewardConfig::default(),
            rl: RlConfig::default(),
            eval_episodes: default_eval_episodes(),
            seeds: default_seeds(),
            out_dir: None,
            cache_dir: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes must be positive"));
        }
        if self.mixture.n_suboptimal_transitions == 0 && self.mixture.n_expert_trajectories == 0 {
            return Err(Error::config("mixture is empty"));
        }
        self.diffusion.validate()?;
        self.reward.validate()?;
        self.rl.validate()
    }

    /// Hash of everything that affects results (output locations excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.cache_dir = None;
        fsutil::short_hash(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_table_defaults() {
        let cfg = ExperimentConfig::from_toml_str("env = \"pointmass2d\"\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::new(EnvSpec::PointMass2d));
        assert_eq!(cfg.diffusion.horizon, 32);
        assert_eq!(cfg.reward.m, 10);
        assert_eq!(cfg.reward.kernel.sigma, 1.0);
        assert_eq!(cfg.rl.rebrac.beta_actor, 0.4);
        assert_eq!(cfg.rl.iql.expectile, 0.8);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for bad in [
            "env = \"pointmass2d\"\nhorizon = 8\n",
            "env = \"pointmass2d\"\n[diffusion]\nhorizn = 8\n",
            "env = \"pointmass2d\"\n[rl.rebrac]\nbeta = 0.1\n",
            "env = \"pointmass2d\"\n[reward.kernel]\nkind = \"logarithmic\"\nsigma = 1.0\nwidth = 2\n",
        ] {
            let err = ExperimentConfig::from_toml_str(bad).unwrap_err();
            assert!(err.is_config(), "{bad}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(ExperimentConfig::from_toml_str("env = \"pointmass2d\"\nseeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("env = \"hopper\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str(
            "env = \"pointmass2d\"\n[rl.iql]\nexpectile = 1.0\n[rl]\nbackbone = \"iql\"\n"
        )
        .is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::new(EnvSpec::SineWalker1d);
        cfg.diffusion.horizon = 8;
        cfg.rl.backbone = Backbone::Iql;
        cfg.out_dir = Some("runs/a".into());
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut moved = cfg.clone();
        moved.out_dir = Some("elsewhere".into());
        assert_eq!(moved.hash(), cfg.hash());
        moved.seeds = vec![7];
        assert_ne!(moved.hash(), cfg.hash());
    }
}
