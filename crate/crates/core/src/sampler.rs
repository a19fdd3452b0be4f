//! Guided ODE integration from noise (`t = 1`) to data (`t = 0`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ConditioningBundle, Variant};
use crate::codec::Codec;
use crate::error::{param_err, Error, Result};
use crate::flow::{gaussian_like, FlowTimestep};
use crate::grid::{ImageGrid, LatentGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun2,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Solver::Euler),
            "heun2" | "heun" => Ok(Solver::Heun2),
            other => Err(Error::Config(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub solver: Solver,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 5,
            guidance: 1.0,
            solver: Solver::Euler,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return param_err("sampling steps must be at least 1");
        }
        if !(self.guidance >= 0.0) || !self.guidance.is_finite() {
            return param_err(format!("guidance must be >= 0, got {}", self.guidance));
        }
        Ok(())
    }
}

/// Anything that predicts velocities for a batch of noisy latents.
pub trait VelocityModel {
    fn variant(&self) -> Variant;
    fn latent_shape(&self) -> (usize, usize, usize);
    fn velocity(
        &self,
        x_t: &[&LatentGrid],
        t: FlowTimestep,
        bundles: &[&ConditioningBundle],
    ) -> Result<Vec<LatentGrid>>;
}

impl VelocityModel for Backbone<f32> {
    fn variant(&self) -> Variant {
        self.config().variant
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.config().latent_shape()
    }

    fn velocity(
        &self,
        x_t: &[&LatentGrid],
        t: FlowTimestep,
        bundles: &[&ConditioningBundle],
    ) -> Result<Vec<LatentGrid>> {
        self.predict(x_t, &vec![t; x_t.len()], bundles)
    }
}

/// `v_uncond + g (v_cond - v_uncond)`, evaluated in f64.
pub fn cfg_velocity(v_cond: &LatentGrid, v_uncond: &LatentGrid, guidance: f64) -> Result<LatentGrid> {
    v_cond.ensure_same_shape(v_uncond)?;
    let data = v_cond
        .data
        .iter()
        .zip(&v_uncond.data)
        .map(|(&c, &u)| {
            let (c, u) = (c as f64, u as f64);
            (u + guidance * (c - u)) as f32
        })
        .collect();
    Ok(LatentGrid {
        data,
        ..*v_cond
    })
}

/// Conditional and unconditional bundles for one item.
fn bundles_for(variant: Variant, source: Option<&LatentGrid>) -> Result<(ConditioningBundle, ConditioningBundle)> {
    let uncond = ConditioningBundle::unconditional(variant, source)?;
    let cond = match source {
        Some(s) => ConditioningBundle::from_source(s),
        // no source: the conditional branch is the unconditional one
        None => uncond.clone(),
    };
    Ok((cond, uncond))
}

/// Items evaluated per model call; bounds activation memory.
const CHUNK: usize = 16;

struct Guided<'a, M: ?Sized> {
    model: &'a M,
    cond: Vec<ConditioningBundle>,
    uncond: Vec<ConditioningBundle>,
    guidance: f64,
    two_branch: bool,
}

impl<M: VelocityModel + ?Sized> Guided<'_, M> {
    fn eval(&self, x: &[LatentGrid], t: f64) -> Result<Vec<LatentGrid>> {
        let t = FlowTimestep::clamped(t);
        let mut out = Vec::with_capacity(x.len());
        for start in (0..x.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x.len());
            let mut xs: Vec<&LatentGrid> = x[start..end].iter().collect();
            let mut bs: Vec<&ConditioningBundle> = self.cond[start..end].iter().collect();
            if self.two_branch {
                xs.extend(x[start..end].iter());
                bs.extend(self.uncond[start..end].iter());
            }
            let v = self.model.velocity(&xs, t, &bs)?;
            let k = end - start;
            if self.two_branch {
                for i in 0..k {
                    out.push(cfg_velocity(&v[i], &v[k + i], self.guidance)?);
                }
            } else {
                out.extend(v);
            }
        }
        Ok(out)
    }
}

fn axpy_all(x: &[LatentGrid], scale: f64, v: &[LatentGrid]) -> Result<Vec<LatentGrid>> {
    x.iter().zip(v).map(|(x, v)| x.axpy(scale as f32, v)).collect()
}

/// Integrates every item from its seeded noise to `t = 0` and returns the
/// terminal latents. Item `i` uses noise seeded by `seeds[i]`.
///
/// `force_two_branch` evaluates the unconditional branch even at `g = 1`.
pub fn integrate<M: VelocityModel + ?Sized>(
    model: &M,
    sources: &[Option<&LatentGrid>],
    seeds: &[u64],
    config: &SampleConfig,
    force_two_branch: bool,
) -> Result<Vec<LatentGrid>> {
    config.validate()?;
    if sources.is_empty() {
        return param_err("nothing to sample");
    }
    if seeds.len() != sources.len() {
        return param_err("one seed per source is required");
    }
    let variant = model.variant();
    let mut cond = Vec::with_capacity(sources.len());
    let mut uncond = Vec::with_capacity(sources.len());
    for s in sources {
        if variant == Variant::Primary && s.is_none() {
            return Err(Error::Contract(
                "primary variant cannot sample without a source image".into(),
            ));
        }
        let (c, u) = bundles_for(variant, *s)?;
        cond.push(c);
        uncond.push(u);
    }
    let guided = Guided {
        model,
        cond,
        uncond,
        guidance: config.guidance,
        two_branch: force_two_branch || config.guidance != 1.0,
    };

    let shape = model.latent_shape();
    let mut x: Vec<LatentGrid> = seeds
        .iter()
        .map(|&s| gaussian_like(shape, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let n = config.steps;
    for k in 0..n {
        let t0 = 1.0 - k as f64 / n as f64;
        let t1 = 1.0 - (k + 1) as f64 / n as f64;
        let dt = t1 - t0;
        let v0 = guided.eval(&x, t0)?;
        x = match config.solver {
            Solver::Euler => axpy_all(&x, dt, &v0)?,
            Solver::Heun2 => {
                let pred = axpy_all(&x, dt, &v0)?;
                let v1 = guided.eval(&pred, t1)?;
                let avg: Vec<LatentGrid> = v0
                    .iter()
                    .zip(&v1)
                    .map(|(a, b)| cfg_velocity(a, b, 0.5))
                    .collect::<Result<_>>()?;
                axpy_all(&x, dt, &avg)?
            }
        };
    }
    Ok(x)
}

fn encode_source(codec: &Codec, source: &ImageGrid, shape: (usize, usize, usize)) -> Result<LatentGrid> {
    let z = codec.encode(source)?;
    if z.shape() != shape {
        return Err(Error::Shape(format!(
            "source encodes to {:?}, model expects {:?}",
            z.shape(),
            shape
        )));
    }
    Ok(z)
}

/// Restores (or, for BIS without a source, generates) one image.
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    source: Option<&ImageGrid>,
    config: &SampleConfig,
    codec: &Codec,
) -> Result<ImageGrid> {
    let latent = source
        .map(|s| encode_source(codec, s, model.latent_shape()))
        .transpose()?;
    let x = integrate(model, &[latent.as_ref()], &[config.seed], config, false)?;
    codec.decode(&x[0])
}

/// [`sample`] over a list; item `i` uses seed `config.seed + i`.
pub fn restore_batch<M: VelocityModel + ?Sized>(
    model: &M,
    sources: &[ImageGrid],
    config: &SampleConfig,
    codec: &Codec,
) -> Result<Vec<ImageGrid>> {
    if sources.is_empty() {
        return param_err("restore_batch needs at least one source");
    }
    let latents = sources
        .iter()
        .map(|s| encode_source(codec, s, model.latent_shape()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Option<&LatentGrid>> = latents.iter().map(Some).collect();
    let seeds: Vec<u64> = (0..sources.len() as u64)
        .map(|i| config.seed.wrapping_add(i))
        .collect();
    integrate(model, &refs, &seeds, config, false)?
        .iter()
        .map(|x| codec.decode(x))
        .collect()
}
