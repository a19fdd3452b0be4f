//! Full-reference (SSIM, MAE) and distribution (FID, KID) metrics.

mod distribution;
mod features;

pub use distribution::{default_subset_size, fit_stats, frechet_distance, kid, FeatureStats, KidResult, EIGEN_CLAMP};
pub use features::{extract_features, FeatureExtractor, RandomConvEncoder, FEATURE_DIM};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::grid::{ImageGrid, PixelRange};

/// Gaussian-window SSIM parameters. Images are mapped to `[0, 1]` before
/// comparison, so `data_range` is 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimSpec {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimSpec {
    fn default() -> Self {
        SsimSpec {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return param_err(format!(
                "ssim window_size must be odd and positive, got {}",
                self.window_size
            ));
        }
        if !(self.window_sigma > 0.0) {
            return param_err("ssim window_sigma must be positive");
        }
        if !(self.data_range > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return param_err("ssim constants must be positive");
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps.
    pub fn window(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let taps: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.into_iter().map(|v| v / total).collect()
    }
}

fn unit_values(img: &ImageGrid) -> Vec<f64> {
    img.data
        .iter()
        .map(|&v| img.range.to_unit(v) as f64)
        .collect()
}

/// Valid-mode separable filtering of an `h x w` array.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &x[r * w..(r + 1) * w];
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                acc += g * src[c + t];
            }
            rows[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (t, &g) in taps.iter().enumerate() {
            let src = &rows[(r + t) * ow..(r + t + 1) * ow];
            for (o, &v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += g * v;
            }
        }
    }
    out
}

/// Mean SSIM over every valid window position.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, spec: &SsimSpec) -> Result<f64> {
    a.ensure_same_shape(b)?;
    spec.validate()?;
    let (h, w) = a.shape();
    if spec.window_size > h || spec.window_size > w {
        return param_err(format!(
            "ssim window {} larger than image {h}x{w}",
            spec.window_size
        ));
    }
    let taps = spec.window();
    let xa = unit_values(a);
    let xb = unit_values(b);
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&xa, h, w, &taps);
    let mu_b = filter_valid(&xb, h, w, &taps);
    let e_aa = filter_valid(&sq(&xa, &xa), h, w, &taps);
    let e_bb = filter_valid(&sq(&xb, &xb), h, w, &taps);
    let e_ab = filter_valid(&sq(&xa, &xb), h, w, &taps);
    let (c1, c2) = (spec.c1(), spec.c2());
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean absolute difference after mapping both images to `[0, 1]`.
pub fn mae_normed(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| (a.range.to_unit(p) as f64 - b.range.to_unit(q) as f64).abs())
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Converts an image to the unit range, for callers that report in `[0, 1]`.
pub fn to_unit(img: &ImageGrid) -> ImageGrid {
    img.to_range(PixelRange::Unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(h, w, PixelRange::Unit, (0..h * w).map(|_| rng.random()).collect()).unwrap()
    }

    /// Direct 2-D windowed SSIM, one window position at a time.
    fn ssim_oracle(a: &ImageGrid, b: &ImageGrid) -> f64 {
        let k = 11usize;
        let sigma = 1.5f64;
        let mut g2 = vec![0.0f64; k * k];
        for y in 0..k {
            for x in 0..k {
                let dy = y as f64 - 5.0;
                let dx = x as f64 - 5.0;
                g2[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let norm: f64 = g2.iter().sum();
        g2.iter_mut().for_each(|v| *v /= norm);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let px = |img: &ImageGrid, r: usize, c: usize| img.range.to_unit(img.get(r, c)) as f64;
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=a.height - k {
            for c0 in 0..=a.width - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        ma += g2[y * k + x] * px(a, r0 + y, c0 + x);
                        mb += g2[y * k + x] * px(b, r0 + y, c0 + x);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let da = px(a, r0 + y, c0 + x) - ma;
                        let db = px(b, r0 + y, c0 + x) - mb;
                        va += g2[y * k + x] * da * da;
                        vb += g2[y * k + x] * db * db;
                        cov += g2[y * k + x] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = random_image(0, 40, 33);
        assert_eq!(ssim(&a, &a, &SsimSpec::default()).unwrap(), 1.0);
        let flat = ImageGrid::filled(16, 16, PixelRange::Symmetric, -0.3);
        assert_eq!(ssim(&flat, &flat, &SsimSpec::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        let a = crate::phantom::generate_phantom(3, 32).unwrap();
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in &mut b.data {
            *v = (*v + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0);
        }
        let got = ssim(&a, &b, &SsimSpec::default()).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_uses_declared_range() {
        let a = random_image(1, 24, 24);
        let b = random_image(2, 24, 24);
        let s = ssim(&a, &b, &SsimSpec::default()).unwrap();
        let s2 = ssim(
            &a.to_range(PixelRange::Symmetric),
            &b.to_range(PixelRange::Symmetric),
            &SsimSpec::default(),
        )
        .unwrap();
        assert!((s - s2).abs() < 1e-6);
    }

    #[test]
    fn ssim_errors() {
        let a = random_image(3, 8, 8);
        let b = random_image(4, 8, 9);
        assert!(matches!(
            ssim(&a, &b, &SsimSpec::default()),
            Err(crate::Error::Shape(_))
        ));
        assert!(matches!(
            ssim(&a, &a, &SsimSpec::default()),
            Err(crate::Error::Parameter(_))
        ));
        let even = SsimSpec {
            window_size: 4,
            ..Default::default()
        };
        assert!(ssim(&a, &a, &even).is_err());
    }

    #[test]
    fn mae_cases() {
        let z = ImageGrid::filled(4, 4, PixelRange::Unit, 0.0);
        let o = ImageGrid::filled(4, 4, PixelRange::Unit, 1.0);
        assert_eq!(mae_normed(&z, &o).unwrap(), 1.0);
        assert_eq!(mae_normed(&o, &o).unwrap(), 0.0);
        // -1 in the symmetric range is 0 in the unit range
        let zs = ImageGrid::filled(4, 4, PixelRange::Symmetric, -1.0);
        assert_eq!(mae_normed(&zs, &z).unwrap(), 0.0);

        let a = random_image(5, 9, 7);
        let b = random_image(6, 9, 7);
        let mut sum = 0.0f64;
        for r in 0..9 {
            for c in 0..7 {
                sum += (a.get(r, c) as f64 - b.get(r, c) as f64).abs();
            }
        }
        assert!((mae_normed(&a, &b).unwrap() - sum / 63.0).abs() <= 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ssim_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(s1, 16, 20);
            let b = random_image(s2 + 1000, 16, 20);
            let spec = SsimSpec::default();
            let ab = ssim(&a, &b, &spec).unwrap();
            prop_assert_eq!(ab, ssim(&b, &a, &spec).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn mae_triangle(s in 0u64..1000) {
            let a = random_image(s, 6, 6);
            let b = random_image(s + 1, 6, 6);
            let c = random_image(s + 2, 6, 6);
            let ac = mae_normed(&a, &c).unwrap();
            let ab = mae_normed(&a, &b).unwrap();
            let bc = mae_normed(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
