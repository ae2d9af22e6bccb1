//! The three-stage optimization protocol — patch-discrimination pretraining,
//! joint local-discrimination training, prior-guided adversarial clustering —
//! plus the downstream fine-tuning loop, with checkpointing, plateau
//! learning-rate scheduling, and JSON-lines metrics.

mod checkpoint;
mod infer;
mod loops;
mod metrics;
mod optimizer;
mod schedule;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_pipeline::{AugmentConfig, SourceKind};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Stage, Temperature};
use crate::networks::BackboneConfig;

pub use checkpoint::{Checkpoint, RngCursor, SchedSnapshot};
pub use infer::{predict_cluster_probs, predict_segmentation};
pub use loops::{
    run_finetune, run_local_discrimination, run_patch_pretrain, run_prior_guided,
    warm_start_assignment,
};
pub use metrics::{read_metrics, EpochRecord, MetricsWriter};
pub use optimizer::{Adam, AdamSlot};
pub use schedule::{plateau_lr_schedule, PlateauScheduler};

/// Halving factor applied by the plateau scheduler.
pub const PLATEAU_FACTOR: f64 = 0.5;

/// Everything that determines one unsupervised training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub max_epochs: usize,
    /// Image groups per batch; each group is two augmented views of one image.
    pub groups_per_batch: usize,
    /// Interpolated images added to each batch.
    pub mixups_per_batch: usize,
    /// Learning rate for the representation network.
    pub lr: f64,
    /// Learning rate for the discriminator (adversarial stage only).
    pub disc_lr: f64,
    /// Epochs without validation improvement before the lr halves; 0 disables.
    pub plateau_patience: usize,
    pub weights: LossWeights,
    /// Side of the patch grid; each view splits into `patch_grid`² patches.
    pub patch_grid: usize,
    pub temperature: Temperature,
    /// Fraction of images held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub augment: AugmentConfig,
}

impl StageConfig {
    /// Patch-discrimination pretraining defaults.
    pub fn pretrain(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            max_epochs: 20,
            groups_per_batch: 16,
            mixups_per_batch: 8,
            lr: 1e-3,
            disc_lr: 0.0,
            plateau_patience: 3,
            weights: LossWeights::default(),
            patch_grid: 4,
            temperature: Temperature::default(),
            val_fraction: 0.1,
            seed,
            backbone: BackboneConfig::default(),
            augment: AugmentConfig::default(),
        }
    }

    /// Joint local-discrimination defaults.
    pub fn local_discrimination(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Ld,
            max_epochs: 80,
            groups_per_batch: 6,
            mixups_per_batch: 3,
            plateau_patience: 0,
            ..Self::pretrain(seed)
        }
    }

    /// Prior-guided adversarial clustering defaults.
    pub fn prior(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Prior,
            disc_lr: 2e-4,
            ..Self::local_discrimination(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.backbone.validate()?;
        self.augment.validate()?;
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.groups_per_batch == 0 {
            return Err(Error::Config("groups_per_batch must be at least 1".into()));
        }
        if self.mixups_per_batch > 0 && self.groups_per_batch < 2 {
            return Err(Error::Config(
                "mixup sampling needs at least 2 groups per batch".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.stage == Stage::Prior && !(self.disc_lr > 0.0 && self.disc_lr.is_finite()) {
            return Err(Error::Config(format!(
                "disc_lr must be positive for the adversarial stage, got {}",
                self.disc_lr
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0,1), got {}",
                self.val_fraction
            )));
        }
        let s = self.augment.out_size;
        if s % 32 != 0 {
            return Err(Error::Config(format!(
                "augmented image side must be a multiple of 32, got {s}"
            )));
        }
        if self.patch_grid == 0 || s % self.patch_grid != 0 {
            return Err(Error::Config(format!(
                "patch_grid {} must divide the image side {s}",
                self.patch_grid
            )));
        }
        Ok(())
    }

    /// Validate and additionally check the config names the expected stage.
    pub fn validate_for(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::Config(format!(
                "config is for stage '{}', expected '{}'",
                self.stage, stage
            )));
        }
        Ok(())
    }
}

/// What guides the adversarial clustering stage: which structures the
/// references describe, and which cluster channel should produce each one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Structure order; must match the reference mask channel order.
    pub structure_names: Vec<String>,
    /// structure name → cluster channel, distinct and each below the
    /// cluster count.
    pub cluster_channels: BTreeMap<String, usize>,
    pub source_kind: SourceKind,
    /// Replace `cluster_channels` with the channels scoring the highest
    /// Dice against the mean reference masks before training starts.
    pub warm_start: bool,
}

impl PriorSpec {
    pub fn validate(&self, cluster_count: usize) -> Result<()> {
        if self.structure_names.is_empty() {
            return Err(Error::Config("prior needs at least one structure".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.structure_names {
            if !self.warm_start {
                let ch = self.cluster_channels.get(name).ok_or_else(|| {
                    Error::Config(format!("structure '{name}' has no assigned cluster channel"))
                })?;
                if *ch >= cluster_count {
                    return Err(Error::Config(format!(
                        "channel {ch} for '{name}' exceeds cluster count {cluster_count}"
                    )));
                }
                if !seen.insert(*ch) {
                    return Err(Error::Config(format!(
                        "cluster channel {ch} assigned to more than one structure"
                    )));
                }
            }
        }
        if self.structure_names.len() > cluster_count {
            return Err(Error::Config(format!(
                "{} structures cannot fit into {} cluster channels",
                self.structure_names.len(),
                cluster_count
            )));
        }
        Ok(())
    }
}

/// Two-phase downstream fine-tuning schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Epochs with the encoder frozen.
    pub frozen_epochs: usize,
    /// Epochs with everything trainable at the lower rate.
    pub full_epochs: usize,
    pub frozen_lr: f64,
    pub full_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub decoder: crate::networks::SegmentationDecoderConfig,
}

impl FinetuneConfig {
    pub fn new(seed: u64) -> Self {
        FinetuneConfig {
            frozen_epochs: 100,
            full_epochs: 100,
            frozen_lr: 1e-3,
            full_lr: 1e-4,
            batch_size: 6,
            seed,
            backbone: BackboneConfig::default(),
            decoder: crate::networks::SegmentationDecoderConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if self.frozen_epochs + self.full_epochs == 0 {
            return Err(Error::Config("fine-tuning needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [("frozen_lr", self.frozen_lr), ("full_lr", self.full_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Where a run writes its artifacts; both are optional.
#[derive(Debug, Clone, Default)]
pub struct TrainSink<'a> {
    /// JSON-lines metrics, one record per epoch.
    pub metrics_path: Option<&'a Path>,
    /// Diagnostic checkpoint written when training aborts on divergence.
    pub diverged_path: Option<&'a Path>,
}

/// A finished (or aborted-and-diagnosed) training run.
pub struct RunArtifacts<F: crate::autodiff::Scalar> {
    pub checkpoint: Checkpoint<F>,
    pub records: Vec<EpochRecord>,
}

impl<F: crate::autodiff::Scalar> std::fmt::Debug for RunArtifacts<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunArtifacts")
            .field("stage", &self.checkpoint.stage)
            .field("epoch", &self.checkpoint.epoch)
            .field("records", &self.records.len())
            .finish()
    }
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let json = serde_json::to_string(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    Ok(format!("{:x}", h.finalize()))
}

/// Stateless seed mixer (splitmix-style) so augmentation seeds depend only on
/// (run seed, epoch, sample) and never on consumption order.
pub(crate) fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ c.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Salt for parameter initialization streams.
pub(crate) const INIT_SALT: u64 = 0x1717_0000_0000_0001;
/// Salt for the train/validation split.
pub(crate) const SPLIT_SALT: u64 = 0x1717_0000_0000_0002;
/// Salt for fixed validation-time augmentation and mixup.
pub(crate) const VAL_SALT: u64 = 0x1717_0000_0000_0003;

/// The run's main random stream plus enough bookkeeping to save and restore
/// its exact position in a checkpoint.
pub struct TrainRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl TrainRng {
    pub fn new(seed: u64) -> Self {
        TrainRng {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn restore(cursor: &RngCursor) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cursor.seed);
        rng.set_word_pos(cursor.word_pos());
        TrainRng {
            seed: cursor.seed,
            rng,
        }
    }

    pub fn cursor(&self) -> RngCursor {
        RngCursor::new(self.seed, self.rng.get_word_pos())
    }

    pub fn chacha(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
