//! Flow-matching optimization with conditioning drop, global gradient
//! clipping and a linear warm-up.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    apply_condition_drop, Backbone, BatchInputs, ConditioningBundle, ModelConfig, Variant,
};
use crate::checkpoint::Archive;
use crate::codec::{Codec, CodecKind, CodecSpec, StridedAutoencoder};
use crate::data::{DatasetManifest, Split};
use crate::error::{param_err, Error, Result};
use crate::flow::{gaussian_like, interpolate, sample_timesteps, target_velocity};
use crate::grid::{ImageGrid, LatentGrid};
use crate::metrics::{mae_normed, ssim, SsimSpec};
use crate::nn::{Adam, AdamConfig};
use crate::sampler::{restore_batch, SampleConfig};

/// Recorded in every checkpoint: the optimizer actually used.
pub const OPTIMIZER_NOTE: &str = "adam (beta1 0.9, beta2 0.999, eps 1e-8, no weight decay) in place of CAME";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub p_drop: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Validation every this many steps; 0 disables it.
    pub eval_every: usize,
    /// Stop after this many steps even if epochs remain; 0 means no cap.
    pub max_steps: usize,
    pub logit_mean: f64,
    pub logit_std: f64,
    /// Upper bound on VAL pairs used per evaluation.
    pub eval_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            warmup_steps: 30,
            grad_clip_norm: 0.1,
            p_drop: 0.1,
            seed: 1,
            variant: Variant::Primary,
            eval_every: 0,
            max_steps: 0,
            logit_mean: 0.0,
            logit_std: 1.0,
            eval_pairs: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return param_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.grad_clip_norm > 0.0) {
            return param_err("grad_clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return param_err(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return param_err("batch_size and epochs must be positive");
        }
        if !(self.logit_std > 0.0) {
            return param_err("logit_std must be positive");
        }
        Ok(())
    }

    /// Learning rate for 1-based update `step`: `lr * step / warmup` during
    /// warm-up, then `lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps as u64;
        if step < w {
            self.lr * step as f64 / w as f64
        } else {
            self.lr
        }
    }
}

/// What one update did.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Global norm after clipping.
    pub grad_norm: f64,
    pub raw_grad_norm: f64,
    pub lr: f64,
    /// Per-sample conditioning-drop outcome.
    #[serde(skip)]
    pub dropped: Vec<bool>,
}

/// One (clean target, corrupted source) pair, already in `[-1, 1]`.
pub type TrainPair = (ImageGrid, ImageGrid);

/// Model, optimizer state and random stream.
pub struct Trainer {
    pub model: Backbone<f32>,
    pub codec: Codec,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, codec: Codec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model_config.variant != config.variant || model_config.p_drop != config.p_drop {
            return Err(Error::Config(
                "model and training configs disagree on variant or p_drop".into(),
            ));
        }
        let model = Backbone::new(model_config, config.seed)?;
        let adam = Adam::new(&model.params, AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            codec,
            config,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn encode(&self, img: &ImageGrid) -> Result<LatentGrid> {
        let z = self.codec.encode(img)?;
        if z.shape() != self.model.config().latent_shape() {
            return Err(Error::Shape(format!(
                "image encodes to {:?}, model expects {:?}",
                z.shape(),
                self.model.config().latent_shape()
            )));
        }
        Ok(z)
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[TrainPair]) -> Result<StepStats> {
        if batch.is_empty() {
            return param_err("empty training batch");
        }
        let cfg = &self.config;
        let mut x_t = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut bundles = Vec::with_capacity(batch.len());
        let mut dropped = Vec::with_capacity(batch.len());
        let ts = sample_timesteps(batch.len(), cfg.logit_mean, cfg.logit_std, &mut self.rng)?;
        for ((clean, corrupted), &t) in batch.iter().zip(&ts) {
            let x = self.encode(clean)?;
            let src = self.encode(corrupted)?;
            let eps = gaussian_like(x.shape(), &mut self.rng);
            x_t.push(interpolate(&x, &eps, t)?);
            targets.push(target_velocity(&x, &eps)?);
            let (b, d) = apply_condition_drop(
                &ConditioningBundle::from_source(&src),
                cfg.p_drop,
                cfg.variant,
                &mut self.rng,
            )?;
            bundles.push(b);
            dropped.push(d);
        }
        let x_refs: Vec<&LatentGrid> = x_t.iter().collect();
        let b_refs: Vec<&ConditioningBundle> = bundles.iter().collect();
        let inputs = BatchInputs::new(self.model.config(), &x_refs, &ts, &b_refs)?;
        let target_refs: Vec<&LatentGrid> = targets.iter().collect();
        let target_mat = self.model.patchify_batch(&target_refs);
        let (loss, mut grads) = self.model.loss_and_grads(&inputs, &target_mat);

        let step = self.step + 1;
        let raw_norm = grads.global_norm();
        if !loss.is_finite() || !raw_norm.is_finite() {
            let snapshot = serde_json::json!({
                "step": step,
                "loss": loss.to_string(),
                "grad_norm": raw_norm.to_string(),
                "t": ts.iter().map(|t| t.value()).collect::<Vec<_>>(),
                "dropped": dropped,
                "lr": cfg.lr_at(step),
            });
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient; snapshot {snapshot}"
            )));
        }
        if raw_norm > cfg.grad_clip_norm {
            grads.scale(cfg.grad_clip_norm / raw_norm);
        }
        let grad_norm = grads.global_norm();
        let lr = cfg.lr_at(step);
        self.adam.step(&mut self.model.params, &grads, lr);
        self.step = step;
        Ok(StepStats {
            step,
            loss,
            grad_norm,
            raw_grad_norm: raw_norm,
            lr,
            dropped,
        })
    }
}

/// A trained flow model and how to load it.
pub struct FlowCheckpoint {
    pub model: Backbone<f32>,
    pub codec: Codec,
    pub metadata: BTreeMap<String, String>,
}

const CODEC_FILE: &str = "codec.safetensors";

impl FlowCheckpoint {
    /// Writes the model archive; a learned codec goes beside it.
    pub fn save(
        path: &Path,
        model: &Backbone<f32>,
        codec: &Codec,
        train: Option<&TrainConfig>,
        steps: u64,
    ) -> Result<()> {
        let mut meta = BTreeMap::from([
            ("kind".to_string(), "flow".to_string()),
            ("model_config".to_string(), serde_json::to_string(model.config()).expect("serializes")),
            ("codec_spec".to_string(), serde_json::to_string(&codec.spec()).expect("serializes")),
            ("optimizer".to_string(), OPTIMIZER_NOTE.to_string()),
            ("steps".to_string(), steps.to_string()),
        ]);
        if let Some(t) = train {
            meta.insert("train_config".into(), serde_json::to_string(t).expect("serializes"));
        }
        Archive::from_params(&model.params, meta).save(path)?;
        if let Codec::StridedAe(ae) = codec {
            ae.save(&path.with_file_name(CODEC_FILE))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        if archive.meta("kind")? != "flow" {
            return Err(Error::Checkpoint(format!("{} is not a flow checkpoint", path.display())));
        }
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let config: ModelConfig = serde_json::from_str(archive.meta("model_config")?).map_err(bad)?;
        let spec: CodecSpec = serde_json::from_str(archive.meta("codec_spec")?).map_err(bad)?;
        let mut model = Backbone::<f32>::new(config, 0)?;
        archive.fill(&mut model.params)?;
        let codec = match spec.kind {
            CodecKind::Identity => Codec::Identity,
            CodecKind::StridedAe => {
                let ae = StridedAutoencoder::load(&path.with_file_name(CODEC_FILE))?;
                if ae.spec() != spec {
                    return Err(Error::Checkpoint("codec file does not match checkpoint".into()));
                }
                Codec::StridedAe(Box::new(ae))
            }
        };
        Ok(FlowCheckpoint {
            model,
            codec,
            metadata: archive.metadata,
        })
    }
}

/// Output locations of a finished run.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

#[derive(Serialize)]
struct EvalRecord {
    step: u64,
    pairs: usize,
    val_ssim: f64,
    val_mae: f64,
}

fn load_split(manifest: &DatasetManifest, split: Split, limit: usize) -> Result<Vec<TrainPair>> {
    manifest
        .split(split)
        .into_iter()
        .take(limit)
        .map(|r| manifest.load_pair(r))
        .collect()
}

/// Mean SSIM and MAE of restored VAL images against their clean targets.
pub fn evaluate_pairs(
    model: &Backbone<f32>,
    codec: &Codec,
    pairs: &[TrainPair],
    sample: &SampleConfig,
) -> Result<(f64, f64)> {
    let sources: Vec<ImageGrid> = pairs.iter().map(|p| p.1.clone()).collect();
    let restored = restore_batch(model, &sources, sample, codec)?;
    let spec = SsimSpec::default();
    let (mut s, mut m) = (0.0, 0.0);
    for (r, (clean, _)) in restored.iter().zip(pairs) {
        s += ssim(r, clean, &spec)?;
        m += mae_normed(r, clean)?;
    }
    let n = pairs.len() as f64;
    Ok((s / n, m / n))
}

/// Trains on the TRAIN split of `manifest`, writing `model.safetensors`,
/// `train_log.jsonl` and (when enabled) `eval_log.jsonl` into `out_dir`.
pub fn fit(
    manifest: &DatasetManifest,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    codec: Codec,
    sample: &SampleConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    let train = load_split(manifest, Split::Train, usize::MAX)?;
    if train.is_empty() {
        return Err(Error::Build("manifest has no TRAIN pairs".into()));
    }
    let val = if train_config.eval_every > 0 {
        load_split(manifest, Split::Val, train_config.eval_pairs)?
    } else {
        Vec::new()
    };
    fit_pairs(&train, &val, model_config, train_config, codec, sample, out_dir)
}

/// [`fit`] on in-memory pairs.
pub fn fit_pairs(
    train: &[TrainPair],
    val: &[TrainPair],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    codec: Codec,
    sample: &SampleConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(model_config.clone(), codec, train_config.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let eval_path = out_dir.join("eval_log.jsonl");
    let mut log = Vec::new();
    let mut eval_log = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    shuffle_rng.set_stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let cap = if train_config.max_steps == 0 {
        u64::MAX
    } else {
        train_config.max_steps as u64
    };
    'epochs: for epoch in 0..train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(train_config.batch_size) {
            if trainer.steps_taken() >= cap {
                break 'epochs;
            }
            let batch: Vec<TrainPair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let stats = trainer.train_step(&batch)?;
            losses.push(stats.loss);
            serde_json::to_writer(
                &mut log,
                &serde_json::json!({
                    "step": stats.step,
                    "epoch": epoch,
                    "loss": stats.loss,
                    "grad_norm": stats.grad_norm,
                    "lr": stats.lr,
                }),
            )
            .expect("log record serializes");
            log.push(b'\n');
            let every = train_config.eval_every as u64;
            if every > 0 && !val.is_empty() && stats.step % every == 0 {
                let (s, m) = evaluate_pairs(&trainer.model, &trainer.codec, val, sample)?;
                serde_json::to_writer(
                    &mut eval_log,
                    &EvalRecord {
                        step: stats.step,
                        pairs: val.len(),
                        val_ssim: s,
                        val_mae: m,
                    },
                )
                .expect("eval record serializes");
                eval_log.push(b'\n');
            }
        }
    }
    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&log_path, &log)?;
    if !eval_log.is_empty() {
        write(&eval_path, &eval_log)?;
    }
    let checkpoint = out_dir.join("model.safetensors");
    FlowCheckpoint::save(
        &checkpoint,
        &trainer.model,
        &trainer.codec,
        Some(train_config),
        trainer.steps_taken(),
    )?;
    Ok(FitOutcome {
        checkpoint,
        log: log_path,
        steps: trainer.steps_taken(),
        final_loss: *losses.last().unwrap_or(&f64::NAN),
        losses,
    })
}
