//! Image feature extractors for the distribution metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, Result};
use crate::grid::{ImageGrid, PixelRange};
use crate::nn::{silu_forward, Conv2d, ParamStore};
use crate::tensor::Mat;

pub const FEATURE_DIM: usize = 64;

/// Maps images to fixed-length feature rows.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, images: &[ImageGrid]) -> Result<Mat<f64>>;
}

/// Frozen, randomly initialized convolutional encoder: three stride-2 3x3
/// convolutions with SiLU, then global average pooling to 64 features.
#[derive(Clone, Debug)]
pub struct RandomConvEncoder {
    params: ParamStore<f64>,
    convs: Vec<Conv2d>,
}

impl RandomConvEncoder {
    pub const DEFAULT_SEED: u64 = 0;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [1, 16, 32, FEATURE_DIM];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut params, &mut rng, &format!("conv{i}"), w[0], w[1], 3, 2, 1))
            .collect();
        RandomConvEncoder { params, convs }
    }
}

impl Default for RandomConvEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for RandomConvEncoder {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, images: &[ImageGrid]) -> Result<Mat<f64>> {
        let first = images
            .first()
            .ok_or_else(|| crate::Error::Parameter("no images to extract features from".into()))?;
        let (h, w) = first.shape();
        if h < 8 || w < 8 {
            return shape_err(format!("images must be at least 8x8, got {h}x{w}"));
        }
        let mut x = Mat::zeros(images.len(), h * w);
        for (r, img) in images.iter().enumerate() {
            if img.shape() != (h, w) {
                return shape_err(format!(
                    "feature extraction needs uniform shapes: {:?} vs {:?}",
                    img.shape(),
                    (h, w)
                ));
            }
            let sym = img.to_range(PixelRange::Symmetric);
            for (dst, &v) in x.row_mut(r).iter_mut().zip(&sym.data) {
                *dst = v as f64;
            }
        }
        let (mut ch, mut cw) = (h, w);
        for conv in &self.convs {
            let (y, _) = conv.forward(&self.params, &x, ch, cw);
            x = silu_forward(&y);
            (ch, cw) = conv.out_hw(ch, cw);
        }
        let l = ch * cw;
        let mut out = Mat::zeros(images.len(), FEATURE_DIM);
        for r in 0..images.len() {
            for (c, chunk) in x.row(r).chunks_exact(l).enumerate() {
                out.row_mut(r)[c] = chunk.iter().sum::<f64>() / l as f64;
            }
        }
        Ok(out)
    }
}

/// Features for `images` under `extractor`, one row per image.
pub fn extract_features(images: &[ImageGrid], extractor: &dyn FeatureExtractor) -> Result<Mat<f64>> {
    if images.is_empty() {
        return param_err("no images to extract features from");
    }
    extractor.extract(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;

    #[test]
    fn shape_and_determinism() {
        let imgs: Vec<_> = (0..3).map(|s| generate_phantom(s, 32).unwrap()).collect();
        let enc = RandomConvEncoder::default();
        let f = extract_features(&imgs, &enc).unwrap();
        assert_eq!((f.rows, f.cols), (3, FEATURE_DIM));
        let g = extract_features(&imgs, &RandomConvEncoder::default()).unwrap();
        assert_eq!(f, g);
        assert_ne!(f.row(0), f.row(1));

        let twice = vec![imgs[0].clone(), imgs[0].clone()];
        let t = extract_features(&twice, &enc).unwrap();
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(t.row(0), f.row(0));
    }

    #[test]
    fn errors() {
        let enc = RandomConvEncoder::default();
        assert!(matches!(
            extract_features(&[], &enc),
            Err(crate::Error::Parameter(_))
        ));
        let mixed = vec![
            generate_phantom(0, 32).unwrap(),
            generate_phantom(1, 48).unwrap(),
        ];
        assert!(matches!(
            extract_features(&mixed, &enc),
            Err(crate::Error::Shape(_))
        ));
    }
}
