//! Flat run configuration shared by every command.
//!
//! The file is TOML with one level of `key = value` pairs. Unknown keys are
//! rejected and missing keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowfix::backbone::{ModelConfig, Variant};
use flowfix::codec::{AeTrainConfig, CodecKind, CodecSpec};
use flowfix::data::{BuildSpec, CleanSource, Crop, Interpolation, PreprocessSpec};
use flowfix::metrics::SsimSpec;
use flowfix::motion::{GateSpec, MotionSpec};
use flowfix::sampler::{SampleConfig, Solver};
use flowfix::trainer::TrainConfig;
use flowfix::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seed for model initialization, data order and conditioning drop.
    pub seed: u64,

    // dataset
    /// Directory of grayscale PNGs; empty means synthetic phantoms.
    pub source_dir: String,
    pub phantom_count: usize,
    pub phantom_first_seed: u64,
    pub target_size: usize,
    pub interpolation: Interpolation,
    pub gate_s0: f64,
    pub gate_s1: f64,
    pub gate_max_retries: usize,
    pub motion_dmax: f64,
    pub motion_theta_max: f64,
    pub motion_initial_severity: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub pairs_per_image: usize,
    pub gate_tolerance: f64,
    pub data_seed: u64,

    // codec
    pub codec: CodecKind,
    pub codec_spatial_factor: usize,
    pub codec_latent_channels: usize,
    pub codec_train_steps: usize,
    pub codec_batch_size: usize,
    pub codec_lr: f64,

    // model
    pub variant: Variant,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub control_depth: usize,
    pub p_drop: f64,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub eval_pairs: usize,
    pub logit_mean: f64,
    pub logit_std: f64,

    // sampling
    pub steps: usize,
    pub guidance: f64,
    pub solver: Solver,
    pub sample_seed: u64,

    // evaluation
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub kid_subsets: usize,
    /// 0 picks `min(n, m, 100)`.
    pub kid_subset_size: usize,
    pub feature_seed: u64,

    // ablation and generation
    pub ablate_steps: Vec<usize>,
    pub ablate_guidance: Vec<f64>,
    pub ablate_grid_rows: usize,
    pub generate_count: usize,
    pub generate_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gate = GateSpec::default();
        let motion = MotionSpec::default();
        let train = TrainConfig::default();
        let sample = SampleConfig::default();
        let ssim = SsimSpec::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: train.seed,
            source_dir: String::new(),
            phantom_count: 500,
            phantom_first_seed: 0,
            target_size: 128,
            interpolation: Interpolation::Bilinear,
            gate_s0: gate.s0,
            gate_s1: gate.s1,
            gate_max_retries: gate.max_retries,
            motion_dmax: motion.dmax,
            motion_theta_max: motion.theta_max,
            motion_initial_severity: motion.initial_severity,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            pairs_per_image: 1,
            gate_tolerance: 0.0,
            data_seed: 0,
            codec: CodecKind::Identity,
            codec_spatial_factor: 1,
            codec_latent_channels: 1,
            codec_train_steps: 2000,
            codec_batch_size: 8,
            codec_lr: 1e-3,
            variant: Variant::Primary,
            patch_size: 8,
            hidden_dim: 128,
            depth: 2,
            heads: 4,
            control_depth: 1,
            p_drop: train.p_drop,
            epochs: train.epochs,
            batch_size: 8,
            lr: train.lr,
            warmup_steps: train.warmup_steps,
            grad_clip_norm: train.grad_clip_norm,
            max_steps: 3000,
            eval_every: 0,
            eval_pairs: train.eval_pairs,
            logit_mean: train.logit_mean,
            logit_std: train.logit_std,
            steps: sample.steps,
            guidance: sample.guidance,
            solver: sample.solver,
            sample_seed: sample.seed,
            ssim_window: ssim.window_size,
            ssim_sigma: ssim.window_sigma,
            kid_subsets: 100,
            kid_subset_size: 0,
            feature_seed: 0,
            ablate_steps: vec![2, 5, 10, 20, 40],
            ablate_guidance: (0..10).map(|i| 1.0 + 0.1 * i as f64).map(|g| (g * 10.0).round() / 10.0).collect(),
            ablate_grid_rows: 4,
            generate_count: 16,
            generate_steps: 10,
        }
    }
}

impl RunConfig {
    /// Parses a config file; every problem is an [`Error::Config`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every derived module config; failures become config errors.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let as_config = |e: Error| match e {
            Error::Parameter(m) | Error::Shape(m) => Error::Config(m),
            other => other,
        };
        self.build_spec().validate().map_err(as_config)?;
        self.codec_spec().validate().map_err(as_config)?;
        self.codec_spec().latent_shape(self.target_size).map_err(as_config)?;
        self.model_config().validate().map_err(as_config)?;
        self.train_config().validate().map_err(as_config)?;
        self.sample_config().validate().map_err(as_config)?;
        let ssim = self.ssim_spec();
        ssim.validate().map_err(as_config)?;
        if ssim.window_size > self.target_size {
            return Err(Error::Config("ssim_window larger than target_size".into()));
        }
        if self.kid_subsets == 0 {
            return Err(Error::Config("kid_subsets must be positive".into()));
        }
        if self.generate_steps == 0 || self.ablate_steps.iter().any(|&s| s == 0) || self.ablate_guidance.iter().any(|&g| !(g >= 0.0)) {
            return Err(Error::Config("generation and ablation need steps >= 1 and guidance >= 0".into()));
        }
        Ok(())
    }

    pub fn build_spec(&self) -> BuildSpec {
        let source = if self.source_dir.is_empty() {
            CleanSource::Phantoms {
                first_seed: self.phantom_first_seed,
                count: self.phantom_count,
            }
        } else {
            CleanSource::Directory(PathBuf::from(&self.source_dir))
        };
        BuildSpec {
            source,
            preprocess: PreprocessSpec {
                target_size: self.target_size,
                interpolation: self.interpolation,
                crop: Crop::Center,
            },
            gate: GateSpec {
                s0: self.gate_s0,
                s1: self.gate_s1,
                max_retries: self.gate_max_retries,
            },
            motion: MotionSpec {
                dmax: self.motion_dmax,
                theta_max: self.motion_theta_max,
                initial_severity: self.motion_initial_severity,
            },
            split_fractions: [self.split_train, self.split_val, self.split_test],
            pairs_per_image: self.pairs_per_image,
            gate_tolerance: self.gate_tolerance,
            seed: self.data_seed,
        }
    }

    pub fn codec_spec(&self) -> CodecSpec {
        CodecSpec {
            kind: self.codec,
            spatial_factor: self.codec_spatial_factor,
            latent_channels: self.codec_latent_channels,
        }
    }

    pub fn ae_train_config(&self) -> AeTrainConfig {
        AeTrainConfig {
            steps: self.codec_train_steps,
            batch_size: self.codec_batch_size,
            lr: self.codec_lr,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            latent_channels: self.codec_latent_channels,
            latent_size: self.target_size / self.codec_spatial_factor.max(1),
            patch_size: self.patch_size,
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            heads: self.heads,
            control_depth: self.control_depth,
            variant: self.variant,
            p_drop: self.p_drop,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            grad_clip_norm: self.grad_clip_norm,
            p_drop: self.p_drop,
            seed: self.seed,
            variant: self.variant,
            eval_every: self.eval_every,
            max_steps: self.max_steps,
            logit_mean: self.logit_mean,
            logit_std: self.logit_std,
            eval_pairs: self.eval_pairs,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.steps,
            guidance: self.guidance,
            solver: self.solver,
            seed: self.sample_seed,
        }
    }

    pub fn ssim_spec(&self) -> SsimSpec {
        SsimSpec {
            window_size: self.ssim_window,
            window_sigma: self.ssim_sigma,
            ..SsimSpec::default()
        }
    }
}
