//! Validated configuration records. Every field has a default, so a config
//! file only lists what it overrides; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{Suite, TaskSpec, VARIANTS_PER_SUITE};
use crate::error::{LapoError, Result};
use crate::latent::LatentConfig;
use crate::net::{candidate_positions, LatentMode};
use crate::params::PolicyDims;

/// Latent-length regime: a fixed count, or adaptive over the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthMode {
    Fixed(usize),
    Adaptive,
}

impl FromStr for LengthMode {
    type Err = LapoError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(Self::Adaptive);
        }
        s.strip_prefix("fixed:")
            .and_then(|n| n.parse().ok())
            .map(Self::Fixed)
            .ok_or_else(|| LapoError::Config(format!("latent mode must be fixed:N or adaptive, got {s:?}")))
    }
}

impl fmt::Display for LengthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(n) => write!(f, "fixed:{n}"),
            Self::Adaptive => f.write_str("adaptive"),
        }
    }
}

impl Serialize for LengthMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LengthMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Lapo,
    PpoActionOnly,
}

impl FromStr for Baseline {
    type Err = LapoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lapo" => Ok(Self::Lapo),
            "ppo-action-only" => Ok(Self::PpoActionOnly),
            _ => Err(LapoError::Config(format!("unknown baseline {s:?}"))),
        }
    }
}

/// Suite selection for demos, training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSel {
    One(Suite),
    All,
}

impl SuiteSel {
    pub fn suites(&self) -> Vec<Suite> {
        match self {
            Self::One(s) => vec![*s],
            Self::All => Suite::ALL.to_vec(),
        }
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.suites()
            .into_iter()
            .flat_map(|s| (0..VARIANTS_PER_SUITE).map(move |v| TaskSpec { suite: s, variant: v }))
            .collect()
    }
}

impl FromStr for SuiteSel {
    type Err = LapoError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(Self::All)
        } else {
            s.parse().map(Self::One)
        }
    }
}

impl fmt::Display for SuiteSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::One(s) => write!(f, "{s}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl Serialize for SuiteSel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SuiteSel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Supervised warm-up. The peak rate is sized for this small network; a
/// multi-billion-parameter backbone would use something near 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub w_latent: f64,
    pub w_end: f64,
    pub w_action: f64,
    /// Lengths sampled uniformly in adaptive mode.
    pub train_lengths: Vec<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            weight_decay: 0.01,
            w_latent: 1.0,
            w_end: 0.1,
            w_action: 1.0,
            train_lengths: vec![2, 4, 6, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Std of the Gaussian likelihood model for latents.
    pub sigma: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
    pub p_exit: f64,
    pub candidates: usize,
    pub temperature: f64,
    pub rollout_batch: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub actor_lr: f64,
    pub value_lr_mult: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub advantage_normalize: bool,
    pub sigma_explore: f64,
    pub updates: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            sigma: 1.0,
            eps_min: 0.2,
            eps_max: 0.28,
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 0.1,
            beta: 1.0,
            p_exit: 0.99,
            candidates: 4,
            temperature: 1.6,
            rollout_batch: 64,
            minibatches: 4,
            epochs: 4,
            actor_lr: 3e-4,
            value_lr_mult: 10.0,
            weight_decay: 0.0,
            grad_clip: 10.0,
            eval_every: 5,
            eval_rollouts: 10,
            advantage_normalize: true,
            sigma_explore: 0.0,
            updates: 200,
        }
    }
}

impl RlConfig {
    pub fn validate(&self, n_max: usize) -> Result<()> {
        let bad = |m: String| Err(LapoError::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.eps_min > 0.0 && self.eps_max > 0.0) {
            return bad("clip bounds must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.rollout_batch == 0 || self.minibatches == 0 || self.epochs == 0 {
            return bad("rollout batch, minibatches and epochs must be positive".into());
        }
        if self.minibatches > self.rollout_batch {
            return bad("more minibatches than trajectories".into());
        }
        if self.eval_every == 0 || self.eval_rollouts == 0 {
            return bad("eval_every and eval_rollouts must be positive".into());
        }
        if !(self.grad_clip > 0.0) || self.sigma_explore < 0.0 {
            return bad("grad_clip must be positive and sigma_explore non-negative".into());
        }
        if [self.lambda1, self.lambda2, self.lambda3, self.actor_lr, self.value_lr_mult]
            .iter()
            .any(|x| !(*x >= 0.0 && x.is_finite()))
        {
            return bad("loss weights and learning rates must be finite and non-negative".into());
        }
        LatentMode::AdaptiveSample { beta: self.beta }.validate(n_max)?;
        LatentMode::AdaptiveExit { p_exit: self.p_exit }.validate(n_max)?;
        candidate_positions(n_max, self.candidates)?;
        Ok(())
    }
}

/// Output locations; relative paths resolve against the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub demos: PathBuf,
    pub cache: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("lapo-lab-out"),
            demos: PathBuf::from("demos.bin"),
            cache: PathBuf::from("latents.bin"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics_dir: PathBuf::from("metrics"),
        }
    }
}

impl Paths {
    /// Anchors every relative path under `out_dir` (itself anchored at `root`).
    pub fn resolve(&self, root: Option<&Path>) -> Self {
        let out = match root {
            Some(r) if self.out_dir.is_relative() => r.join(&self.out_dir),
            _ => self.out_dir.clone(),
        };
        let under = |p: &PathBuf| if p.is_relative() { out.join(p) } else { p.clone() };
        Self {
            demos: under(&self.demos),
            cache: under(&self.cache),
            checkpoint_dir: under(&self.checkpoint_dir),
            metrics_dir: under(&self.metrics_dir),
            out_dir: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub jobs: usize,
    pub suite: SuiteSel,
    pub holdout_variant: Option<u32>,
    pub latent_mode: LengthMode,
    pub baseline: Baseline,
    pub demos_per_task: usize,
    pub horizon: usize,
    pub model: PolicyDims,
    pub latent: LatentConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2],
            deterministic: false,
            jobs: 1,
            suite: SuiteSel::One(Suite::Reach),
            holdout_variant: None,
            latent_mode: LengthMode::Adaptive,
            baseline: Baseline::Lapo,
            demos_per_task: 1,
            horizon: 8,
            model: PolicyDims::default(),
            latent: LatentConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LapoError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LapoError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the baseline mapping: the action-only baseline drops latents
    /// and the latent and end loss terms.
    pub fn apply_baseline(&mut self) {
        if self.baseline == Baseline::PpoActionOnly {
            self.latent_mode = LengthMode::Fixed(0);
            self.rl.lambda1 = 0.0;
            self.rl.lambda3 = 0.0;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.horizon != self.horizon {
            return Err(LapoError::Config(format!(
                "model horizon {} differs from chunk horizon {}",
                self.model.horizon, self.horizon
            )));
        }
        if self.latent.k != self.model.d_model {
            return Err(LapoError::Config(format!(
                "latent width k = {} must equal d_model = {}",
                self.latent.k, self.model.d_model
            )));
        }
        if self.latent.k > self.latent.teacher_dim || self.latent.k == 0 {
            return Err(LapoError::Config("latent k must lie in 1..=teacher_dim".into()));
        }
        if self.latent.n_max != self.model.n_max {
            return Err(LapoError::Config("latent and model N_max differ".into()));
        }
        if self.latent.delta_z == 0 {
            return Err(LapoError::Config("delta_z must be positive".into()));
        }
        if let LengthMode::Fixed(n) = self.latent_mode {
            if n > self.model.n_max {
                return Err(LapoError::Config(format!("fixed length {n} exceeds N_max")));
            }
        }
        if self.sft.batch_size == 0 || self.sft.train_lengths.is_empty() {
            return Err(LapoError::Config("SFT batch size and length set must be non-empty".into()));
        }
        if self.sft.train_lengths.iter().any(|&n| n == 0 || n > self.model.n_max) {
            return Err(LapoError::Config("SFT lengths must lie in 1..=N_max".into()));
        }
        if self.latent_mode == LengthMode::Adaptive {
            let cands = candidate_positions(self.model.n_max, self.rl.candidates)?;
            if let Some(n) = self.sft.train_lengths.iter().find(|n| !cands.contains(n)) {
                return Err(LapoError::Config(format!(
                    "SFT length {n} is not a candidate position {cands:?}"
                )));
            }
        }
        if let Some(h) = self.holdout_variant {
            if h >= VARIANTS_PER_SUITE {
                return Err(LapoError::Config(format!(
                    "holdout variant {h} out of range 0..{VARIANTS_PER_SUITE}"
                )));
            }
        }
        if self.demos_per_task == 0 || self.jobs == 0 {
            return Err(LapoError::Config("demos_per_task and jobs must be positive".into()));
        }
        self.rl.validate(self.model.n_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_toml("[rl]\ngama = 0.9\n").unwrap_err();
        assert!(matches!(err, LapoError::Config(_)));
    }

    #[test]
    fn partial_file_and_round_trip() {
        let c = ExperimentConfig::from_toml(
            "suite = \"all\"\nlatent_mode = \"fixed:4\"\n[rl]\nlambda1 = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.suite, SuiteSel::All);
        assert_eq!(c.latent_mode, LengthMode::Fixed(4));
        assert_eq!(c.rl.lambda1, 0.5);
        assert_eq!(c.rl.gamma, 0.99);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn baseline_mapping() {
        let mut c = ExperimentConfig {
            baseline: Baseline::PpoActionOnly,
            ..Default::default()
        };
        c.apply_baseline();
        assert_eq!(c.latent_mode, LengthMode::Fixed(0));
        assert_eq!((c.rl.lambda1, c.rl.lambda3), (0.0, 0.0));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_values() {
        let mut c = ExperimentConfig::default();
        c.rl.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.rl.p_exit = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.rl.sigma = -1.0;
        assert!(c.validate().is_err());
        assert!("fixed:x".parse::<LengthMode>().is_err());
        assert_eq!("fixed:8".parse::<LengthMode>().unwrap(), LengthMode::Fixed(8));
    }
}
