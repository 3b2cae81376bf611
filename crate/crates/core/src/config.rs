//! Run configuration: every tunable with its default, two presets, and TOML I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which method a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Joint masked multimodal reconstruction + PPO over vision and touch.
    M3l,
    /// Per-modality reconstruction steps (vision, then touch), then PPO.
    Sequential,
    /// Reconstruction and policy over vision tokens only.
    VisionOnlyMae,
    /// PPO only; no reconstruction loss.
    EndToEnd,
    /// Multimodal reconstruction, vision-only policy input.
    M3lVisionPolicy,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] =
        [TrainMode::M3l, TrainMode::Sequential, TrainMode::VisionOnlyMae, TrainMode::EndToEnd, TrainMode::M3lVisionPolicy];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::M3l => "m3l",
            TrainMode::Sequential => "sequential",
            TrainMode::VisionOnlyMae => "vision_only_mae",
            TrainMode::EndToEnd => "end_to_end",
            TrainMode::M3lVisionPolicy => "m3l_vision_policy",
        }
    }

    /// Modalities fed to the actor and critic.
    pub fn policy_modalities(self) -> Modalities {
        match self {
            TrainMode::M3l | TrainMode::Sequential | TrainMode::EndToEnd => Modalities::BOTH,
            TrainMode::VisionOnlyMae | TrainMode::M3lVisionPolicy => Modalities::VISION,
        }
    }

    /// Modalities reconstructed by the autoencoder (`None` when there is no reconstruction loss).
    pub fn reconstruction_modalities(self) -> Option<Modalities> {
        match self {
            TrainMode::EndToEnd => None,
            TrainMode::VisionOnlyMae => Some(Modalities::VISION),
            _ => Some(Modalities::BOTH),
        }
    }

    /// Whether the model ever needs tactile input.
    pub fn uses_touch(self) -> bool {
        self.policy_modalities().touch || self.reconstruction_modalities().is_some_and(|m| m.touch)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// A nonempty subset of {vision, touch}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Modalities {
    pub vision: bool,
    pub touch: bool,
}

impl Modalities {
    pub const BOTH: Modalities = Modalities { vision: true, touch: true };
    pub const VISION: Modalities = Modalities { vision: true, touch: false };
    pub const TOUCH: Modalities = Modalities { vision: false, touch: true };

    pub fn new(vision: bool, touch: bool) -> Result<Self> {
        if !vision && !touch {
            return Err(Error::EmptyModalities);
        }
        Ok(Self { vision, touch })
    }

    pub fn is_subset_of(self, other: Modalities) -> bool {
        (!self.vision || other.vision) && (!self.touch || other.touch)
    }
}

impl FromStr for Modalities {
    type Err = Error;

    /// Comma-separated list, e.g. `vision,touch`.
    fn from_str(s: &str) -> Result<Self> {
        let (mut vision, mut touch) = (false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "vision" => vision = true,
                "touch" => touch = true,
                other => return Err(Error::Config(format!("unknown modality `{other}`"))),
            }
        }
        Modalities::new(vision, touch)
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.vision, self.touch) {
            (true, true) => f.write_str("vision,touch"),
            (true, false) => f.write_str("vision"),
            (false, true) => f.write_str("touch"),
            (false, false) => f.write_str(""),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Update schedule for the representation and RL losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One step on the summed loss per minibatch.
    Joint,
    /// `rep_steps_per_rl_step` representation steps on chunks, then one RL step.
    Interleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Episode length cap.
    pub max_steps: usize,
    /// Peg-to-target distance (m) that counts as inserted.
    pub success_threshold: f64,
    pub success_bonus: f64,
    /// Largest displacement per axis per step (m) for an action component of 1.
    pub max_displacement: f64,
    /// Contact spring stiffness (N/m).
    pub contact_stiffness: f64,
    /// Coulomb coefficient between pads and peg.
    pub friction: f64,
    /// Constant per-pad grip force (N).
    pub grip_force: f64,
    pub peg_mass: f64,
    /// Per-taxel force (N) mapped to a normalized reading of 1.
    pub taxel_force_max: f64,
    /// Radial clearance between peg and hole (m).
    pub hole_clearance: f64,
    /// Frames stacked along channels.
    pub frame_stack: usize,
    /// Restrict the training split to these shape ids (empty: all training shapes).
    pub train_shapes: Vec<String>,
    /// Optional shape library file replacing the built-in one.
    pub shape_library: Option<String>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 300,
            success_threshold: 0.005,
            success_bonus: 1000.0,
            max_displacement: 0.01,
            contact_stiffness: 1000.0,
            friction: 0.5,
            grip_force: 4.0,
            peg_mass: 0.05,
            taxel_force_max: 0.05,
            hole_clearance: 0.002,
            frame_stack: 4,
            train_shapes: Vec::new(),
            shape_library: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Token width.
    pub dim: usize,
    /// Total stride of the vision stem (pixels per token edge).
    pub vision_stride: usize,
    /// Total stride of the touch stem (taxels per token edge).
    pub touch_stride: usize,
    /// Channels after the first stem layer.
    pub conv_channels: usize,
    pub mask_ratio: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { dim: 128, vision_stride: 8, touch_stride: 8, conv_channels: 64, mask_ratio: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Weight of the taxel reconstruction error.
    pub beta_t: f64,
    /// Compute the reconstruction error over every token instead of masked ones only.
    pub loss_on_all_tokens: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 4,
            encoder_heads: 4,
            decoder_layers: 2,
            decoder_dim: 64,
            decoder_heads: 4,
            mlp_ratio: 4,
            beta_t: 10.0,
            loss_on_all_tokens: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub head_heads: usize,
    pub head_mlp_hidden: usize,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub beta_v: f64,
    pub beta_h: f64,
    pub learning_rate: f64,
    pub init_log_std: f64,
    pub normalize_advantages: bool,
    /// Global gradient norm cap (0 disables).
    pub max_grad_norm: f64,
    /// Multiplier applied to environment rewards before advantage estimation.
    pub reward_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            head_heads: 4,
            head_mlp_hidden: 256,
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            beta_v: 0.5,
            beta_h: 0.01,
            learning_rate: 1e-4,
            init_log_std: 0.0,
            normalize_advantages: true,
            max_grad_norm: 0.5,
            reward_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub n_envs: usize,
    /// Transitions per rollout (summed over environments).
    pub rollout_length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Representation steps per RL step in the interleaved schedule.
    pub rep_steps_per_rl_step: usize,
    pub total_env_steps: u64,
    /// Write a checkpoint every this many rollout cycles.
    pub checkpoint_every: usize,
    /// Number of most recent checkpoints kept on disk.
    pub keep_checkpoints: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_envs: 8,
            rollout_length: 32768,
            epochs: 10,
            batch_size: 512,
            schedule: Schedule::Joint,
            rep_steps_per_rl_step: 16,
            total_env_steps: 3_000_000,
            checkpoint_every: 1,
            keep_checkpoints: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_checkpoint: usize,
    /// How many of the most recent checkpoints are evaluated.
    pub checkpoints: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes_per_checkpoint: 25, checkpoints: 4, split: Split::Test, seed: 12345 }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub mode: TrainMode,
    pub output_dir: String,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub mae: MaeConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Table-scale hyperparameters.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            seed: 0,
            mode: TrainMode::M3l,
            output_dir: "runs".into(),
            env: EnvConfig::default(),
            tokenizer: TokenizerConfig::default(),
            mae: MaeConfig::default(),
            policy: PolicyConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Scaled-down preset for a single workstation.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.preset = "desk".into();
        cfg.env.train_shapes = vec!["square".into(), "cross".into(), "t_shape".into()];
        cfg.trainer.rollout_length = 2048;
        cfg.trainer.total_env_steps = 1_000_000;
        cfg.policy.reward_scale = 0.01;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Sets a dotted key such as `trainer.rollout_length` from a TOML literal;
    /// bare words are taken as strings. Errors name the key. Cross-field
    /// invariants are left to [`RunConfig::validate`] so several keys can be set in any order.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}`"));
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(unknown());
        }
        let mut cur = &mut root;
        for p in &parts[..parts.len() - 1] {
            cur = cur.as_table_mut().and_then(|t| t.get_mut(*p)).ok_or_else(unknown)?;
        }
        let table = cur.as_table_mut().ok_or_else(unknown)?;
        table.insert(parts[parts.len() - 1].to_string(), parsed);
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {}", e.message())))?;
        *self = cfg;
        Ok(())
    }

    /// Checks cross-field invariants; the message names the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}`: {why}")));
        let t = &self.tokenizer;
        if t.dim == 0 || !t.dim.is_multiple_of(4) {
            return bad("tokenizer.dim", "must be a positive multiple of 4");
        }
        for (key, stride, size) in
            [("tokenizer.vision_stride", t.vision_stride, crate::env::IMAGE_SIZE), ("tokenizer.touch_stride", t.touch_stride, crate::env::TAXEL_GRID)]
        {
            if stride < 2 || stride % 2 != 0 || size % stride != 0 {
                return bad(key, "must be an even divisor of the input size");
            }
        }
        if !(0.0..=1.0).contains(&t.mask_ratio) {
            return bad("tokenizer.mask_ratio", "must lie in [0, 1]");
        }
        let m = &self.mae;
        if m.encoder_heads == 0 || !t.dim.is_multiple_of(m.encoder_heads) {
            return bad("mae.encoder_heads", "must divide tokenizer.dim");
        }
        if m.decoder_dim == 0 || !m.decoder_dim.is_multiple_of(4) {
            return bad("mae.decoder_dim", "must be a positive multiple of 4");
        }
        if m.decoder_heads == 0 || !m.decoder_dim.is_multiple_of(m.decoder_heads) {
            return bad("mae.decoder_heads", "must divide mae.decoder_dim");
        }
        let p = &self.policy;
        if p.head_heads == 0 || !t.dim.is_multiple_of(p.head_heads) {
            return bad("policy.head_heads", "must divide tokenizer.dim");
        }
        if !(p.clip_epsilon > 0.0 && p.clip_epsilon < 1.0) {
            return bad("policy.clip_epsilon", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&p.gamma) {
            return bad("policy.gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&p.gae_lambda) {
            return bad("policy.gae_lambda", "must lie in [0, 1]");
        }
        if p.learning_rate < 0.0 {
            return bad("policy.learning_rate", "must be non-negative");
        }
        let tr = &self.trainer;
        if tr.n_envs == 0 {
            return bad("trainer.n_envs", "must be positive");
        }
        if tr.rollout_length == 0 || !tr.rollout_length.is_multiple_of(tr.n_envs) {
            return bad("trainer.rollout_length", "must be a positive multiple of trainer.n_envs");
        }
        if tr.batch_size == 0 || !tr.rollout_length.is_multiple_of(tr.batch_size) {
            return bad("trainer.batch_size", "must divide trainer.rollout_length");
        }
        if tr.rep_steps_per_rl_step == 0 {
            return bad("trainer.rep_steps_per_rl_step", "must be at least 1");
        }
        if tr.schedule == Schedule::Interleaved && !tr.batch_size.is_multiple_of(tr.rep_steps_per_rl_step) {
            return bad("trainer.rep_steps_per_rl_step", "must divide trainer.batch_size");
        }
        if tr.keep_checkpoints == 0 || tr.checkpoint_every == 0 {
            return bad("trainer.keep_checkpoints", "checkpoint cadence and retention must be positive");
        }
        let e = &self.env;
        if e.frame_stack == 0 {
            return bad("env.frame_stack", "must be at least 1");
        }
        if e.max_steps == 0 || e.max_steps > 300 {
            return bad("env.max_steps", "must lie in 1..=300");
        }
        if e.success_threshold <= 0.0 || e.max_displacement <= 0.0 || e.taxel_force_max <= 0.0 {
            return bad("env", "thresholds, displacement and force scale must be positive");
        }
        if self.eval.episodes_per_checkpoint == 0 || self.eval.checkpoints == 0 {
            return bad("eval.episodes_per_checkpoint", "must be positive");
        }
        Ok(())
    }
}
