//! Run configuration: TOML-backed, with defaults matching the desk-scale
//! setup. `VISA_SEED` in the environment overrides the configured seed.

use crate::error::{Result, VisaError};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: String,
    pub num_identities: usize,
    pub train_identities: usize,
    pub samples_per_id_per_view: usize,
    pub identity_dim: usize,
    pub view_dim: usize,
    pub noise_sigma: f64,
    pub view_strength: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub cameras_per_view: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: "data/synth".into(),
            num_identities: 16,
            train_identities: 8,
            samples_per_id_per_view: 4,
            identity_dim: 6,
            view_dim: 4,
            noise_sigma: 0.05,
            view_strength: 0.8,
            image_height: 64,
            image_width: 32,
            cameras_per_view: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub mlp_ratio: f64,
    /// Subtract the view stream from the class readout after every layer
    /// (cumulative); `false` subtracts only the final stream.
    pub progressive_subtraction: bool,
    /// Apply the subtraction inside the residual stream instead of on a
    /// separate readout copy.
    pub subtract_in_residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            patch: 16,
            channels: 1,
            mlp_ratio: 2.0,
            progressive_subtraction: true,
            subtract_in_residual: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum RouterMode {
    /// One expert pool per branch; the specific branch's router also sees
    /// the sample's view label as an input feature.
    SoftViewFeature,
    /// Experts split into aerial-only / ground-only / shared pools; routing
    /// is restricted to the sample's pools.
    HardPartition,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EtgmConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub tokens_per_expert: usize,
    pub router_mode: RouterMode,
    /// Condition experts on [branch vector; patch features]; `false` uses
    /// the branch vector alone.
    pub condition_on_patches: bool,
}

impl Default for EtgmConfig {
    fn default() -> Self {
        EtgmConfig {
            num_experts: 4,
            top_k: 2,
            tokens_per_expert: 2,
            router_mode: RouterMode::SoftViewFeature,
            condition_on_patches: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FusionReadout {
    Mean,
    Cls,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DlfmConfig {
    pub top_k_neighbors: usize,
    pub gcn_layers: usize,
    pub gcn_residual: bool,
    pub fusion_readout: FusionReadout,
}

impl Default for DlfmConfig {
    fn default() -> Self {
        DlfmConfig {
            top_k_neighbors: 4,
            gcn_layers: 2,
            gcn_residual: true,
            fusion_readout: FusionReadout::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum OrthoTargets {
    Global,
    GlobalQueries,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub label_smoothing: f64,
    pub lambda_balance: f64,
    pub ortho_targets: OrthoTargets,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            label_smoothing: 0.1,
            lambda_balance: 0.001,
            ortho_targets: OrthoTargets::Global,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            initial_lr: 8e-3,
            final_lr: 1.6e-6,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 20,
            warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// P: identities per batch.
    pub num_identities: usize,
    /// K: instances per identity.
    pub instances_per_identity: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            num_identities: 4,
            instances_per_identity: 4,
        }
    }
}

impl BatchConfig {
    pub fn batch_size(&self) -> usize {
        self.num_identities * self.instances_per_identity
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_vab: bool,
    pub use_etgm: bool,
    pub use_dlfm: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_vab: true,
            use_etgm: true,
            use_dlfm: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "runs/default".into(),
            checkpoint_every: 10,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub etgm: EtgmConfig,
    pub dlfm: DlfmConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub batch: BatchConfig,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn desk_default() -> Self {
        RunConfig {
            seed: 42,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| VisaError::Config(e.to_string()))?;
        cfg.apply_env_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn apply_env_seed(&mut self) {
        if let Ok(s) = std::env::var("VISA_SEED") {
            if let Ok(seed) = s.trim().parse::<u64>() {
                self.seed = seed;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.num_identities < 2 {
            return Err(VisaError::Config("num_identities must be >= 2".into()));
        }
        if d.train_identities == 0 || d.train_identities >= d.num_identities {
            return Err(VisaError::Config(
                "train_identities must leave at least one evaluation identity".into(),
            ));
        }
        if d.samples_per_id_per_view < 1 {
            return Err(VisaError::Config("samples_per_id_per_view must be >= 1".into()));
        }
        let e = &self.encoder;
        if d.image_height % e.patch != 0 || d.image_width % e.patch != 0 {
            return Err(VisaError::Config(format!(
                "patch size {} must divide image {}x{}",
                e.patch, d.image_height, d.image_width
            )));
        }
        if e.dim % e.heads != 0 {
            return Err(VisaError::Config("encoder dim must be divisible by heads".into()));
        }
        let m = &self.etgm;
        if m.top_k < 1 || m.top_k > m.num_experts {
            return Err(VisaError::Config(format!(
                "top_k {} out of range 1..={}",
                m.top_k, m.num_experts
            )));
        }
        if m.tokens_per_expert < 1 || m.tokens_per_expert > 16 {
            return Err(VisaError::Config("tokens_per_expert must be in 1..=16".into()));
        }
        let g = &self.dlfm;
        let n_patches = (d.image_height / e.patch) * (d.image_width / e.patch);
        if g.top_k_neighbors < 1 || g.top_k_neighbors > n_patches.min(32) {
            return Err(VisaError::Config(format!(
                "top_k_neighbors {} out of range 1..={}",
                g.top_k_neighbors,
                n_patches.min(32)
            )));
        }
        if self.optim.epochs < 1 {
            return Err(VisaError::Config("epochs must be >= 1".into()));
        }
        if self.batch.num_identities < 2 || self.batch.instances_per_identity < 2 {
            return Err(VisaError::Config(
                "PK batches need >= 2 identities and >= 2 instances each".into(),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.dataset.image_height / self.encoder.patch)
            * (self.dataset.image_width / self.encoder.patch)
    }

    /// SHA-256 over the canonical TOML serialization.
    pub fn hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_toml_string().as_bytes());
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::desk_default();
        let text = cfg.to_toml_string();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_rejects_bad_patch_size() {
        let mut cfg = RunConfig::desk_default();
        cfg.dataset.image_height = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_rejects_bad_top_k() {
        let mut cfg = RunConfig::desk_default();
        cfg.etgm.top_k = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::desk_default();
        let mut b = a.clone();
        b.loss.margin = 0.5;
        assert_ne!(a.hash(), b.hash());
    }
}
