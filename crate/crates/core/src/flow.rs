//! Linear flow-matching path, logit-normal timesteps, velocity target and
//! loss.
//!
//! Orientation: `t = 0` is data and `t = 1` is noise, so
//! `x_t = (1 - t) x + t eps` and the regression target is `eps - x`. Samplers
//! integrate from `t = 1` down to `t = 0`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::grid::LatentGrid;

/// Sampled timesteps are clamped to `[T_MIN, 1 - T_MIN]`.
pub const T_MIN: f64 = 1e-5;

/// A time strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct FlowTimestep(f64);

impl FlowTimestep {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t < 1.0) {
            return param_err(format!("timestep {t} outside (0, 1)"));
        }
        Ok(FlowTimestep(t))
    }

    /// Clamps into the open interval used for training and sampling.
    pub fn clamped(t: f64) -> Self {
        FlowTimestep(t.clamp(T_MIN, 1.0 - T_MIN))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Parameters of the logit-normal timestep distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitNormal {
    pub mean: f64,
    pub std: f64,
}

impl Default for LogitNormal {
    fn default() -> Self {
        LogitNormal {
            mean: 0.0,
            std: 1.0,
        }
    }
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

/// Draws `count` times `t = logistic(z)`, `z ~ N(mean, std^2)`.
pub fn sample_timesteps(
    count: usize,
    mean: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FlowTimestep>> {
    if count == 0 {
        return param_err("timestep count must be at least 1");
    }
    if !(std > 0.0) || !std.is_finite() {
        return param_err(format!("logit-normal std must be positive, got {std}"));
    }
    Ok((0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            FlowTimestep::clamped(logistic(mean + std * z))
        })
        .collect())
}

/// `x_t = (1 - t) x + t eps`.
pub fn interpolate(x_data: &LatentGrid, noise: &LatentGrid, t: FlowTimestep) -> Result<LatentGrid> {
    interpolate_at(x_data, noise, t.value())
}

/// [`interpolate`] for any real `t`, including the path endpoints.
pub fn interpolate_at(x_data: &LatentGrid, noise: &LatentGrid, t: f64) -> Result<LatentGrid> {
    x_data.ensure_same_shape(noise)?;
    let data = x_data
        .data
        .iter()
        .zip(&noise.data)
        .map(|(&x, &e)| ((1.0 - t) * x as f64 + t * e as f64) as f32)
        .collect();
    Ok(LatentGrid {
        data,
        ..*x_data
    })
}

/// `u = eps - x`, the constant time derivative of the linear path.
pub fn target_velocity(x_data: &LatentGrid, noise: &LatentGrid) -> Result<LatentGrid> {
    x_data.ensure_same_shape(noise)?;
    let data = x_data
        .data
        .iter()
        .zip(&noise.data)
        .map(|(&x, &e)| e - x)
        .collect();
    Ok(LatentGrid {
        data,
        ..*x_data
    })
}

/// Mean squared error over every element.
pub fn fm_loss(predicted: &LatentGrid, target: &LatentGrid) -> Result<f64> {
    predicted.ensure_same_shape(target)?;
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predicted
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// One training example on the path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x_t: LatentGrid,
    pub t: FlowTimestep,
    pub target_v: LatentGrid,
}

impl FlowSample {
    pub fn new(x_data: &LatentGrid, noise: &LatentGrid, t: FlowTimestep) -> Result<Self> {
        Ok(FlowSample {
            x_t: interpolate(x_data, noise, t)?,
            t,
            target_v: target_velocity(x_data, noise)?,
        })
    }
}

/// Standard Gaussian latent of the given shape.
pub fn gaussian_like(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> LatentGrid {
    let (c, h, w) = shape;
    LatentGrid {
        channels: c,
        height: h,
        width: w,
        data: (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;

    fn rand_latent(seed: u64) -> LatentGrid {
        gaussian_like((2, 4, 5), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn timestep_degenerate_std_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ts = sample_timesteps(100, 0.0, 1e-12, &mut rng).unwrap();
        assert!(ts.iter().all(|t| (t.value() - 0.5).abs() < 1e-9));
    }

    #[test]
    fn timestep_median_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ts: Vec<f64> = sample_timesteps(100_000, 0.0, 1.0, &mut rng)
            .unwrap()
            .into_iter()
            .map(FlowTimestep::value)
            .collect();
        assert!(ts.iter().all(|&t| t > 0.0 && t < 1.0));
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ts[ts.len() / 2];
        assert!((0.49..=0.51).contains(&median), "median {median}");
    }

    #[test]
    fn logit_of_samples_recovers_mean() {
        for (seed, mean, std) in [(2, 0.0, 1.0), (3, -0.7, 0.5), (4, 1.3, 2.0)] {
            let n = 20_000;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ts = sample_timesteps(n, mean, std, &mut rng).unwrap();
            let m: f64 = ts.iter().map(|t| logit(t.value())).sum::<f64>() / n as f64;
            assert!(
                (m - mean).abs() < 3.0 * std / (n as f64).sqrt(),
                "mean {m} vs {mean}"
            );
        }
    }

    #[test]
    fn timestep_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_timesteps(4, 0.0, 0.0, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            sample_timesteps(4, 0.0, -1.0, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(sample_timesteps(0, 0.0, 1.0, &mut rng).is_err());
        assert!(FlowTimestep::new(0.0).is_err());
        assert!(FlowTimestep::new(1.0).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x = rand_latent(5);
        let e = rand_latent(6);
        let near0 = interpolate(&x, &e, FlowTimestep::new(1e-9).unwrap()).unwrap();
        let near1 = interpolate(&x, &e, FlowTimestep::new(1.0 - 1e-9).unwrap()).unwrap();
        assert!(near0.max_abs_diff(&x) <= 1e-6);
        assert!(near1.max_abs_diff(&e) <= 1e-6);

        let zeros = LatentGrid::zeros(1, 3, 3);
        let ones = LatentGrid::filled(1, 3, 3, 1.0);
        let mid = interpolate(&zeros, &ones, FlowTimestep::new(0.5).unwrap()).unwrap();
        assert!(mid.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn velocity_cases() {
        let x = rand_latent(7);
        assert!(target_velocity(&x, &x).unwrap().data.iter().all(|&v| v == 0.0));
        let zeros = LatentGrid::zeros(1, 2, 2);
        let ones = LatentGrid::filled(1, 2, 2, 1.0);
        assert_eq!(target_velocity(&zeros, &ones).unwrap(), ones);
    }

    #[test]
    fn velocity_is_path_derivative() {
        let x = rand_latent(8);
        let e = rand_latent(9);
        let u = target_velocity(&x, &e).unwrap();
        let h = 1e-3;
        for t in [0.05, 0.3, 0.5, 0.77, 0.95] {
            let a = interpolate_at(&x, &e, t).unwrap();
            let b = interpolate_at(&x, &e, t + h).unwrap();
            let worst = a
                .data
                .iter()
                .zip(&b.data)
                .zip(&u.data)
                .map(|((p, q), v)| ((q - p) as f64 / h - *v as f64).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 10.0 * h, "t={t}: {worst}");
        }
    }

    #[test]
    fn loss_cases_and_oracle() {
        let zeros = LatentGrid::zeros(1, 3, 4);
        let ones = LatentGrid::filled(1, 3, 4, 1.0);
        assert_eq!(fm_loss(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(fm_loss(&ones, &ones).unwrap(), 0.0);

        let p = rand_latent(10);
        let q = rand_latent(11);
        // double loop over channels then pixels
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for c in 0..p.channels {
            for i in 0..p.height * p.width {
                let k = c * p.height * p.width + i;
                sum += (p.data[k] as f64 - q.data[k] as f64).powi(2);
                count += 1;
            }
        }
        let got = fm_loss(&p, &q).unwrap();
        assert!((got - sum / count as f64).abs() < 1e-12);
        assert_eq!(got, fm_loss(&q, &p).unwrap());
        assert!(got > 0.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = LatentGrid::zeros(1, 2, 2);
        let b = LatentGrid::zeros(1, 2, 3);
        assert!(matches!(interpolate_at(&a, &b, 0.5), Err(Error::Shape(_))));
        assert!(matches!(target_velocity(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(fm_loss(&a, &b), Err(Error::Shape(_))));
    }
}
