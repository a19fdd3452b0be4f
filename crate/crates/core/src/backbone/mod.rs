//! Transformer velocity network conditioned only on a source latent.
//!
//! The noisy latent `x`, the conditioning latent `y` and the control latent
//! all go through one shared patch embedding. `y` tokens are read through
//! cross-attention in every block. Control tokens run through duplicated
//! copies of the first `control_depth` blocks whose outputs are added back
//! through zero-initialized projections.

mod block;
pub mod embed;
mod model;

pub use model::{Backbone, BatchInputs, ForwardCache};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::grid::LatentGrid;

/// Which inputs the conditioning drop removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Only `y` is dropped; the control branch always sees the source.
    Primary,
    /// `y` and control are dropped together, which also trains a fully
    /// unconditional mode.
    Bis,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Primary => "primary",
            Variant::Bis => "bis",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "primary" => Ok(Variant::Primary),
            "bis" => Ok(Variant::Bis),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub control_depth: usize,
    pub variant: Variant,
    pub p_drop: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 1,
            latent_size: 128,
            patch_size: 8,
            hidden_dim: 64,
            depth: 4,
            heads: 4,
            control_depth: 2,
            variant: Variant::Primary,
            p_drop: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("latent_size", self.latent_size),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("control_depth", self.control_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return param_err(format!("{name} must be positive"));
            }
        }
        if self.latent_size % self.patch_size != 0 {
            return param_err(format!(
                "patch_size {} does not divide latent_size {}",
                self.patch_size, self.latent_size
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return param_err(format!(
                "heads {} does not divide hidden_dim {}",
                self.heads, self.hidden_dim
            ));
        }
        if self.hidden_dim % 4 != 0 {
            return param_err("hidden_dim must be divisible by 4 for 2-D positions");
        }
        if self.control_depth > self.depth {
            return param_err(format!(
                "control_depth {} exceeds depth {}",
                self.control_depth, self.depth
            ));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return param_err(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.latent_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.latent_size, self.latent_size)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The `y` input: a latent, or the null value used for the unconditional
/// branch.
#[derive(Clone, Debug, PartialEq)]
pub enum YInput {
    Latent(LatentGrid),
    Zero,
}

/// The control input: a latent, or absent (branch switched off).
#[derive(Clone, Debug, PartialEq)]
pub enum ControlInput {
    Latent(LatentGrid),
    Absent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub y: YInput,
    pub control: ControlInput,
}

impl ConditioningBundle {
    /// Conditional bundle: the source latent plays both roles.
    pub fn from_source(source: &LatentGrid) -> Self {
        ConditioningBundle {
            y: YInput::Latent(source.clone()),
            control: ControlInput::Latent(source.clone()),
        }
    }

    /// Null bundle for the unconditional branch of `variant`.
    pub fn unconditional(variant: Variant, source: Option<&LatentGrid>) -> Result<Self> {
        match variant {
            Variant::Primary => match source {
                Some(s) => Ok(ConditioningBundle {
                    y: YInput::Zero,
                    control: ControlInput::Latent(s.clone()),
                }),
                None => Err(Error::Contract(
                    "primary variant needs a control latent on every branch".into(),
                )),
            },
            Variant::Bis => Ok(ConditioningBundle {
                y: YInput::Zero,
                control: ControlInput::Absent,
            }),
        }
    }

    pub fn check_variant(&self, variant: Variant) -> Result<()> {
        if variant == Variant::Primary && self.control == ControlInput::Absent {
            return Err(Error::Contract(
                "primary variant requires the control input".into(),
            ));
        }
        Ok(())
    }
}

/// Draws one Bernoulli(`p_drop`) and, on a hit, nulls the inputs the variant
/// drops. Returns the new bundle and whether it was dropped.
pub fn apply_condition_drop(
    bundle: &ConditioningBundle,
    p_drop: f64,
    variant: Variant,
    rng: &mut ChaCha8Rng,
) -> Result<(ConditioningBundle, bool)> {
    bundle.check_variant(variant)?;
    if !(0.0..=1.0).contains(&p_drop) {
        return param_err(format!("p_drop {p_drop} outside [0, 1]"));
    }
    let u: f64 = rng.random();
    if u >= p_drop {
        return Ok((bundle.clone(), false));
    }
    let dropped = match variant {
        Variant::Primary => ConditioningBundle {
            y: YInput::Zero,
            control: bundle.control.clone(),
        },
        Variant::Bis => ConditioningBundle {
            y: YInput::Zero,
            control: ControlInput::Absent,
        },
    };
    Ok((dropped, true))
}
