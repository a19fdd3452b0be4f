//! Patchification, fixed positional encodings and sinusoidal timestep
//! features.

use crate::tensor::{Mat, Real};

/// Splits a `C x H x W` latent into non-overlapping `p x p` patches.
/// Token order is row-major over the patch grid; features are ordered
/// `(py, px, c)`.
pub fn patchify<T: Real>(data: &[f32], channels: usize, size: usize, patch: usize) -> Mat<T> {
    let g = size / patch;
    let pd = patch * patch * channels;
    let mut out = Mat::zeros(g * g, pd);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..channels {
                        let v = data[(c * size + gy * patch + py) * size + gx * patch + px];
                        row[(py * patch + px) * channels + c] = T::from_f64(v as f64);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`] for the token rows `[r0, r0 + tokens)`.
pub fn unpatchify<T: Real>(
    tokens: &Mat<T>,
    r0: usize,
    channels: usize,
    size: usize,
    patch: usize,
) -> Vec<f32> {
    let g = size / patch;
    let mut out = vec![0.0f32; channels * size * size];
    for gy in 0..g {
        for gx in 0..g {
            let row = tokens.row(r0 + gy * g + gx);
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..channels {
                        out[(c * size + gy * patch + py) * size + gx * patch + px] =
                            row[(py * patch + px) * channels + c].to_f64() as f32;
                    }
                }
            }
        }
    }
    out
}

/// 2-D sine-cosine positional table, `grid^2 x dim`. The first half of the
/// features encodes the row coordinate, the second half the column.
pub fn positional_table<T: Real>(grid: usize, dim: usize) -> Mat<T> {
    assert_eq!(dim % 4, 0, "positional dim must be divisible by 4");
    let quarter = dim / 4;
    let mut out = Mat::zeros(grid * grid, dim);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for (half, pos) in [(0usize, gy), (1usize, gx)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    let arg = pos as f64 * omega;
                    row[half * 2 * quarter + k] = T::from_f64(arg.sin());
                    row[half * 2 * quarter + quarter + k] = T::from_f64(arg.cos());
                }
            }
        }
    }
    out
}

pub const TIME_FREQ_DIM: usize = 256;
const TIME_SCALE: f64 = 1000.0;

/// `[cos(s t f_i), sin(s t f_i)]` with geometric frequencies, one row per
/// timestep.
pub fn timestep_features<T: Real>(ts: &[f64]) -> Mat<T> {
    let half = TIME_FREQ_DIM / 2;
    let mut out = Mat::zeros(ts.len(), TIME_FREQ_DIM);
    for (r, &t) in ts.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t * TIME_SCALE * freq;
            row[i] = T::from_f64(arg.cos());
            row[half + i] = T::from_f64(arg.sin());
        }
    }
    out
}
