use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branches::Branch;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionInput};
use crate::losses::{AdversarialForm, LossWeights};
use crate::networks::{DiscriminatorConfig, GeneratorConfig};
use crate::optim::AdamConfig;
use crate::synthdata::SceneConfig;

/// The ablation ladder, each setting adding one component to the previous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Spatial branches only, averaged.
    A,
    /// Temporal branches only, averaged.
    B,
    /// Downstream temporal and spatial branches, averaged.
    C,
    /// All four branches, averaged.
    D,
    /// D plus the temporal discriminator.
    E,
    /// E plus attention fusion: the full model.
    #[default]
    F,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D, Ablation::E, Ablation::F];

    pub fn branches(self) -> &'static [Branch] {
        use Branch::*;
        match self {
            Ablation::A => &[SpatialDown, SpatialUp],
            Ablation::B => &[TemporalDown, TemporalUp],
            Ablation::C => &[TemporalDown, SpatialDown],
            Ablation::D | Ablation::E | Ablation::F => &Branch::ALL,
        }
    }

    pub fn temporal_discriminator(self) -> bool {
        self >= Ablation::E
    }

    pub fn attention_fusion(self) -> bool {
        self == Ablation::F
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ablation::ALL
            .into_iter()
            .find(|a| s.len() == 1 && s.eq_ignore_ascii_case(&a.to_string()))
            .ok_or_else(|| Error::config(format!("unknown ablation setting `{s}` (expected one of A-F)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSettings {
    pub base_width: usize,
    pub n_down: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSettings {
    pub feature_width: usize,
    pub input: FusionInput,
}

/// Everything a training run needs. Missing JSON fields take the desk-scale
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data_root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    /// Used by `gen-data`; its image size must match the generator's.
    pub scene: SceneConfig,
    /// Frames per training window.
    pub clip_length: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorSettings,
    pub fusion: FusionSettings,
    pub loss: LossWeights,
    pub adversarial_form: AdversarialForm,
    /// Also train the spatial discriminator on every branch's
    /// (conditioning frame, output) pairs, not only on the final output.
    pub branch_discriminator_terms: bool,
    pub ablation: Ablation,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Horizontal flips and shifted crops, identical across a clip's views.
    pub augment: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            data_root: None,
            train_split: "train".into(),
            test_split: "test".into(),
            scene: SceneConfig::default(),
            clip_length: 5,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorSettings { base_width: 32, n_down: 3 },
            fusion: FusionSettings { feature_width: 16, input: FusionInput::Frames },
            loss: LossWeights::default(),
            adversarial_form: AdversarialForm::NonSaturating,
            branch_discriminator_terms: true,
            ablation: Ablation::F,
            epochs: 200,
            batch_size: 8,
            steps: None,
            optimizer: AdamConfig::default(),
            seed: 0,
            augment: false,
            checkpoint_dir: None,
            log_path: None,
            checkpoint_every: 0,
        }
    }

    /// Smallest runnable configuration, for tests: 8x8 frames, two levels.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.clip_length = 2;
        c.generator = GeneratorConfig { image_size: 8, depth: 2, base_width: 8, ..GeneratorConfig::desk() };
        c.discriminator = DiscriminatorSettings { base_width: 4, n_down: 1 };
        c.fusion.feature_width = 4;
        c.batch_size = 1;
        c
    }

    pub fn image_size(&self) -> usize {
        self.generator.image_size
    }

    /// Sets the frame size everywhere, reducing the generator depth when the
    /// new size cannot support it.
    pub fn set_image_size(&mut self, size: usize) {
        self.generator.image_size = size;
        self.scene.image_size = size;
        if size > 0 {
            let max_depth = size.trailing_zeros() as usize;
            self.generator.depth = self.generator.depth.min(max_depth);
        }
    }

    pub fn d_spatial_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig::spatial(self.image_size(), self.discriminator.base_width, self.discriminator.n_down)
    }

    pub fn d_temporal_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig::temporal(
            self.image_size(),
            self.discriminator.base_width,
            self.discriminator.n_down,
            self.clip_length,
        )
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            image_size: self.image_size(),
            feature_width: self.fusion.feature_width,
            input: self.fusion.input,
            decoder_channels: match self.fusion.input {
                FusionInput::Frames => 0,
                FusionInput::DecoderFeatures => self.generator.base_width,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.clip_length == 0 {
            return Err(Error::config("clip_length must be at least 1"));
        }
        if self.optimizer.lr <= 0.0 || !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::config("optimizer needs lr > 0 and betas in [0, 1)"));
        }
        self.generator.validate()?;
        self.d_spatial_config().validate()?;
        self.fusion_config().validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
