//! Run configuration: flat dotted-key text files covering model dimensions,
//! expert placement, optimizer schedule, and dataset paths. Every field has
//! a default, so configs only state what they change.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockConfig;
use crate::data::SynthConfig;
use crate::encoders::ImageShape;
use crate::fusion::FusionMode;
use crate::model::{Model, ModelConfig};
use crate::moe::{apply_placement, LayerSelector, MoeConfig, MoePlacement, MoeSite, TrainMode};
use crate::optim::AdamState;
use crate::tensor::{Result, TensorError};

/// Independent deterministic random streams derived from one run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const PLACEMENT: u64 = 2;
    pub const GRADCHECK: u64 = 3;
    pub const EPOCH_BASE: u64 = 1000;
}

/// A ChaCha stream for (seed, stream id); epochs use `EPOCH_BASE + epoch`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub max_answer_len: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub fusion: FusionMode,
    pub alignment: bool,
    pub single_encoder: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let synth = SynthConfig::default();
        ModelSection {
            k: synth.k,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            vocab_size: synth.vocab_size(),
            max_answer_len: 2,
            image_height: synth.image.height,
            image_width: synth.image.width,
            patch_size: synth.image.patch_size,
            fusion: FusionMode::QgaSoftmax,
            alignment: true,
            single_encoder: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MoeSection {
    pub enabled: bool,
    pub n_experts: usize,
    pub k_top: usize,
    pub noise_std: f64,
    pub expert_init_noise: f64,
    pub site: MoeSite,
    pub layers: LayerSelector,
    pub train_mode: TrainMode,
    /// Weight of the load-balancing loss in the joint objective.
    pub lambda: f64,
}

impl Default for MoeSection {
    fn default() -> Self {
        let moe = MoeConfig::default();
        MoeSection {
            enabled: false,
            n_experts: moe.n_experts,
            k_top: moe.k_top,
            noise_std: moe.noise_std,
            expert_init_noise: moe.expert_init_noise,
            site: MoeSite::Decoder,
            layers: LayerSelector::Odd,
            train_mode: TrainMode::ExpertsOnly,
            lambda: 0.1,
        }
    }
}

impl MoeSection {
    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            n_experts: self.n_experts,
            k_top: self.k_top,
            noise_std: self.noise_std,
            expert_init_noise: self.expert_init_noise,
        }
    }

    pub fn placement(&self) -> MoePlacement {
        MoePlacement {
            site: self.site,
            layers: self.layers,
            train_mode: self.train_mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 0.001,
            decay_factor: 0.2,
            decay_epochs: vec![6, 9],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 10,
            seed: 7,
        }
    }
}

impl OptimizerSection {
    pub fn adam_state(&self) -> AdamState {
        let mut s = AdamState::new(self.lr, self.decay_factor, self.decay_epochs.clone());
        s.beta1 = self.beta1;
        s.beta2 = self.beta2;
        s.epsilon = self.epsilon;
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct DataSection {
    /// Training split path; empty means "not set".
    pub dataset: String,
    pub val_dataset: String,
    pub test_dataset: String,
    /// Generator settings used by the data generation command.
    pub synth: SynthConfig,
}

/// Ablation grid settings: which variants run and on what budget.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblateSection {
    pub variants: Vec<String>,
    /// Epochs for from-scratch variants and the shared pretrained backbone.
    pub pretrain_epochs: usize,
    /// Epochs for expert fine-tuning variants, starting from the backbone.
    pub finetune_epochs: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: [
                "base",
                "no-qga",
                "no-alignment",
                "single-encoder",
                "moe-decoder-odd-experts-only",
                "moe-decoder-even-experts-only",
                "moe-decoder-odd-full",
                "moe-decoder-odd-backbone-only",
                "moe-encoder-all-full",
                "aux-0.01",
                "aux-0.1",
                "aux-0.5",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            pretrain_epochs: 6,
            finetune_epochs: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub moe: MoeSection,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
    pub ablate: AblateSection,
    /// Output directory for logs, checkpoints, and reports.
    pub output: String,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| TensorError::InvalidConfig(format!("config parse error: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TensorError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            block: BlockConfig {
                d_model: self.model.d_model,
                n_heads: self.model.n_heads,
                d_ff: self.model.d_ff,
                n_enc_layers: self.model.n_enc_layers,
                n_dec_layers: self.model.n_dec_layers,
                k: self.model.k,
                vocab_size: self.model.vocab_size,
            },
            image: ImageShape {
                channels: 3,
                height: self.model.image_height,
                width: self.model.image_width,
                patch_size: self.model.patch_size,
            },
            max_answer_len: self.model.max_answer_len,
            fusion: self.model.fusion,
            alignment: self.model.alignment,
            single_encoder: self.model.single_encoder,
            lambda_aux: self.moe.lambda,
        }
    }

    /// Build the model for this config, applying expert placement when
    /// enabled. Fully determined by the config seed.
    pub fn build_model(&self) -> Result<Model> {
        let seed = self.optimizer.seed;
        let mut model = Model::new(self.model_config(), stream_seed(seed, streams::INIT))?;
        if self.moe.enabled {
            let mut rng = stream_rng(seed, streams::PLACEMENT);
            apply_placement(&mut model, &self.moe.placement(), &self.moe.moe_config(), &mut rng)?;
        }
        Ok(model)
    }

    /// Small preset for the finite-difference verification command.
    pub fn gradcheck_default() -> Self {
        let synth = SynthConfig {
            n_attributes: 4,
            n_values: 3,
            n_fillers: 4,
            n_distractors: 0,
            k: 8,
            image: ImageShape {
                channels: 3,
                height: 8,
                width: 8,
                patch_size: 4,
            },
            n_train: 4,
            n_val: 2,
            n_test: 2,
            seed: 11,
            ..SynthConfig::default()
        };
        RunConfig {
            model: ModelSection {
                k: 8,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                n_enc_layers: 2,
                n_dec_layers: 2,
                vocab_size: synth.vocab_size(),
                max_answer_len: 2,
                image_height: 8,
                image_width: 8,
                patch_size: 4,
                ..ModelSection::default()
            },
            moe: MoeSection {
                enabled: true,
                site: MoeSite::Decoder,
                layers: LayerSelector::Odd,
                train_mode: TrainMode::Full,
                lambda: 0.1,
                ..MoeSection::default()
            },
            optimizer: OptimizerSection {
                seed: 11,
                ..OptimizerSection::default()
            },
            data: DataSection {
                synth,
                ..DataSection::default()
            },
            ablate: AblateSection::default(),
            output: String::new(),
        }
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x ^ (x >> 31)
}
