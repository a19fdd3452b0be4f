//! Image <-> latent mappings. `Identity` runs flow matching in pixel space;
//! `StridedAe` is a small convolutional autoencoder trained separately and
//! frozen before flow training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{param_err, shape_err, Error, Result};
use crate::grid::{ImageGrid, LatentGrid, PixelRange};
use crate::nn::{
    silu_backward, silu_forward, upsample2x, upsample2x_backward, Adam, AdamConfig, Conv2d,
    ConvCache, Grads, ParamStore,
};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    StridedAe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub kind: CodecKind,
    pub spatial_factor: usize,
    pub latent_channels: usize,
}

impl Default for CodecSpec {
    fn default() -> Self {
        CodecSpec::identity()
    }
}

impl CodecSpec {
    pub fn identity() -> Self {
        CodecSpec {
            kind: CodecKind::Identity,
            spatial_factor: 1,
            latent_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CodecKind::Identity => {
                if self.spatial_factor != 1 || self.latent_channels != 1 {
                    return param_err(
                        "identity codec needs spatial_factor 1 and latent_channels 1",
                    );
                }
            }
            CodecKind::StridedAe => {
                if self.spatial_factor < 2 || !self.spatial_factor.is_power_of_two() {
                    return param_err(format!(
                        "strided autoencoder spatial_factor must be a power of two >= 2, got {}",
                        self.spatial_factor
                    ));
                }
                if self.latent_channels == 0 {
                    return param_err("latent_channels must be positive");
                }
            }
        }
        Ok(())
    }

    /// Latent `(channels, height, width)` for a square image of side `size`.
    pub fn latent_shape(&self, size: usize) -> Result<(usize, usize, usize)> {
        if size % self.spatial_factor != 0 {
            return shape_err(format!(
                "image side {size} not divisible by spatial_factor {}",
                self.spatial_factor
            ));
        }
        let s = size / self.spatial_factor;
        Ok((self.latent_channels, s, s))
    }
}

fn check_divisible(img: &ImageGrid, factor: usize) -> Result<()> {
    if img.height % factor != 0 || img.width % factor != 0 {
        return shape_err(format!(
            "image {:?} not divisible by spatial_factor {factor}",
            img.shape()
        ));
    }
    Ok(())
}

const BASE_WIDTH: usize = 16;
const MAX_WIDTH: usize = 64;

/// Strided convolutional encoder/decoder pair.
#[derive(Clone, Debug)]
pub struct StridedAutoencoder {
    spec: CodecSpec,
    pub params: ParamStore<f32>,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

struct AeCache<T> {
    /// Pre-activation outputs and conv caches, in layer order.
    enc: Vec<(Mat<T>, ConvCache<T>, (usize, usize))>,
    dec: Vec<(Mat<T>, ConvCache<T>, (usize, usize))>,
}

impl StridedAutoencoder {
    pub fn new(spec: CodecSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.kind != CodecKind::StridedAe {
            return param_err("autoencoder needs a strided_ae codec spec");
        }
        let levels = spec.spatial_factor.trailing_zeros() as usize;
        let width = |i: usize| (BASE_WIDTH << i).min(MAX_WIDTH);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut enc = vec![Conv2d::new(&mut params, &mut rng, "encoder.in", 1, width(0), 3, 1, 1)];
        for i in 0..levels {
            enc.push(Conv2d::new(
                &mut params,
                &mut rng,
                &format!("encoder.down.{i}"),
                width(i),
                width(i + 1),
                3,
                2,
                1,
            ));
        }
        enc.push(Conv2d::new(
            &mut params,
            &mut rng,
            "encoder.out",
            width(levels),
            spec.latent_channels,
            3,
            1,
            1,
        ));
        let mut dec = vec![Conv2d::new(
            &mut params,
            &mut rng,
            "decoder.in",
            spec.latent_channels,
            width(levels),
            3,
            1,
            1,
        )];
        for i in (0..levels).rev() {
            dec.push(Conv2d::new(
                &mut params,
                &mut rng,
                &format!("decoder.up.{i}"),
                width(i + 1),
                width(i),
                3,
                1,
                1,
            ));
        }
        dec.push(Conv2d::new(&mut params, &mut rng, "decoder.out", width(0), 1, 3, 1, 1));
        Ok(StridedAutoencoder {
            spec,
            params,
            enc,
            dec,
        })
    }

    pub fn spec(&self) -> CodecSpec {
        self.spec
    }

    /// `x`: one image per row in `[-1, 1]`. Returns latents, one per row.
    fn encode_rows<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Mat<T>,
        h: usize,
        w: usize,
        caches: Option<&mut Vec<(Mat<T>, ConvCache<T>, (usize, usize))>>,
    ) -> (Mat<T>, (usize, usize)) {
        let mut store = Vec::new();
        let (mut cur, mut hw) = (x.clone(), (h, w));
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            let (y, cache) = conv.forward(p, &cur, hw.0, hw.1);
            let in_hw = hw;
            hw = conv.out_hw(hw.0, hw.1);
            cur = if i == last { y.clone() } else { silu_forward(&y) };
            store.push((y, cache, in_hw));
        }
        if let Some(c) = caches {
            *c = store;
        }
        (cur, hw)
    }

    fn decode_rows<T: Real>(
        &self,
        p: &ParamStore<T>,
        z: &Mat<T>,
        h: usize,
        w: usize,
        caches: Option<&mut Vec<(Mat<T>, ConvCache<T>, (usize, usize))>>,
    ) -> (Mat<T>, (usize, usize)) {
        let mut store = Vec::new();
        let (mut cur, mut hw) = (z.clone(), (h, w));
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate() {
            if i > 0 && i < last {
                cur = upsample2x(&cur, conv.in_channels, hw.0, hw.1);
                hw = (hw.0 * 2, hw.1 * 2);
            }
            let (y, cache) = conv.forward(p, &cur, hw.0, hw.1);
            let in_hw = hw;
            hw = conv.out_hw(hw.0, hw.1);
            cur = if i == last { y.clone() } else { silu_forward(&y) };
            store.push((y, cache, in_hw));
        }
        if let Some(c) = caches {
            *c = store;
        }
        (cur, hw)
    }

    fn forward_train<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Mat<T>,
        size: usize,
    ) -> (Mat<T>, AeCache<T>) {
        let mut cache = AeCache {
            enc: Vec::new(),
            dec: Vec::new(),
        };
        let (z, (zh, zw)) = self.encode_rows(p, x, size, size, Some(&mut cache.enc));
        let (out, _) = self.decode_rows(p, &z, zh, zw, Some(&mut cache.dec));
        (out, cache)
    }

    fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &AeCache<T>, dout: &Mat<T>) -> Grads<T> {
        let mut g = p.zero_grads();
        let mut d = dout.clone();
        let last = self.dec.len() - 1;
        for i in (0..self.dec.len()).rev() {
            let (pre, conv_cache, in_hw) = &cache.dec[i];
            if i != last {
                d = silu_backward(pre, &d);
            }
            d = self.dec[i].backward(p, &mut g, conv_cache, &d);
            if i > 0 && i < last {
                d = upsample2x_backward(&d, self.dec[i].in_channels, in_hw.0 / 2, in_hw.1 / 2);
            }
        }
        let last = self.enc.len() - 1;
        for i in (0..self.enc.len()).rev() {
            let (pre, conv_cache, _) = &cache.enc[i];
            if i != last {
                d = silu_backward(pre, &d);
            }
            d = self.enc[i].backward(p, &mut g, conv_cache, &d);
        }
        g
    }

    pub fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        if !image.is_square() {
            return shape_err(format!("codec needs square images, got {:?}", image.shape()));
        }
        check_divisible(image, self.spec.spatial_factor)?;
        let sym = image.to_range(PixelRange::Symmetric);
        let x = Mat::from_vec(1, sym.data.len(), sym.data);
        let (z, (zh, zw)) = self.encode_rows(&self.params, &x, image.height, image.width, None);
        LatentGrid::new(self.spec.latent_channels, zh, zw, z.data)
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<ImageGrid> {
        if latent.channels != self.spec.latent_channels || latent.height != latent.width {
            return shape_err(format!(
                "latent {:?} does not match codec with {} channels",
                latent.shape(),
                self.spec.latent_channels
            ));
        }
        let z = Mat::from_vec(1, latent.len(), latent.data.clone());
        let (x, (h, w)) = self.decode_rows(&self.params, &z, latent.height, latent.width, None);
        Ok(ImageGrid::new(h, w, PixelRange::Symmetric, x.data)?.clamped())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BTreeMap::from([
            ("kind".to_string(), "codec".to_string()),
            (
                "codec_spec".to_string(),
                serde_json::to_string(&self.spec).expect("spec serializes"),
            ),
        ]);
        Archive::from_params(&self.params, meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        if archive.meta("kind")? != "codec" {
            return Err(Error::Checkpoint(format!(
                "{} is not a codec archive",
                path.display()
            )));
        }
        let spec: CodecSpec = serde_json::from_str(archive.meta("codec_spec")?)
            .map_err(|e| Error::Checkpoint(format!("bad codec spec: {e}")))?;
        let mut ae = StridedAutoencoder::new(spec, 0)?;
        archive.fill(&mut ae.params)?;
        Ok(ae)
    }
}

/// Reconstruction-training settings for the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            seed: 1,
        }
    }
}

/// Trains an autoencoder on square images with a mean-squared reconstruction
/// loss. Returns the model and the per-step loss.
pub fn train_autoencoder(
    images: &[ImageGrid],
    spec: CodecSpec,
    cfg: &AeTrainConfig,
) -> Result<(StridedAutoencoder, Vec<f64>)> {
    if images.is_empty() || cfg.batch_size == 0 || cfg.steps == 0 {
        return param_err("autoencoder training needs images, steps and a batch size");
    }
    let size = images[0].height;
    for img in images {
        if img.shape() != (size, size) {
            return shape_err("autoencoder training needs uniform square images");
        }
        check_divisible(img, spec.spatial_factor)?;
    }
    let mut ae = StridedAutoencoder::new(spec, cfg.seed)?;
    let mut adam = Adam::new(&ae.params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let pixels = size * size;
    for _ in 0..cfg.steps {
        let mut x = Mat::zeros(cfg.batch_size, pixels);
        for r in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sym = images[order[cursor]].to_range(PixelRange::Symmetric);
            x.row_mut(r).copy_from_slice(&sym.data);
            cursor += 1;
        }
        let (out, cache) = ae.forward_train(&ae.params, &x, size);
        let n = out.data.len() as f64;
        let mut loss = 0.0;
        let mut dout = Mat::zeros(out.rows, out.cols);
        for ((d, &o), &t) in dout.data.iter_mut().zip(&out.data).zip(&x.data) {
            let diff = o - t;
            loss += (diff as f64).powi(2);
            *d = (2.0 * diff as f64 / n) as f32;
        }
        if !loss.is_finite() {
            return Err(Error::Numerical("autoencoder loss became non-finite".into()));
        }
        let grads = ae.backward(&ae.params, &cache, &dout);
        adam.step(&mut ae.params, &grads, cfg.lr);
        losses.push(loss / n);
    }
    Ok((ae, losses))
}

/// A constructed codec.
#[derive(Clone, Debug)]
pub enum Codec {
    Identity,
    StridedAe(Box<StridedAutoencoder>),
}

impl Codec {
    pub fn spec(&self) -> CodecSpec {
        match self {
            Codec::Identity => CodecSpec::identity(),
            Codec::StridedAe(ae) => ae.spec(),
        }
    }

    /// Identity: the image in `[-1, 1]` reinterpreted as a one-channel latent.
    pub fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        match self {
            Codec::Identity => {
                let sym = image.to_range(PixelRange::Symmetric);
                LatentGrid::new(1, sym.height, sym.width, sym.data)
            }
            Codec::StridedAe(ae) => ae.encode(image),
        }
    }

    /// Output is in `[-1, 1]`, clamped.
    pub fn decode(&self, latent: &LatentGrid) -> Result<ImageGrid> {
        match self {
            Codec::Identity => {
                if latent.channels != 1 {
                    return shape_err(format!(
                        "identity codec needs one latent channel, got {}",
                        latent.channels
                    ));
                }
                Ok(ImageGrid::new(
                    latent.height,
                    latent.width,
                    PixelRange::Symmetric,
                    latent.data.clone(),
                )?
                .clamped())
            }
            Codec::StridedAe(ae) => ae.decode(latent),
        }
    }
}
