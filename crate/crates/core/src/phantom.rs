//! Seeded synthetic phantoms: soft-edged ellipses and ribbons on a dark
//! background, loosely shaped like a head slice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Result};
use crate::grid::{ImageGrid, PixelRange};

/// Edge softness in pixels.
const SOFTNESS: f64 = 1.2;

enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
        value: f64,
    },
    /// Band of half-width `half_width` around a sinusoidal centre line.
    Ribbon {
        cx: f64,
        cy: f64,
        angle: f64,
        length: f64,
        amplitude: f64,
        wavelength: f64,
        half_width: f64,
        value: f64,
    },
}

fn smoothstep(edge_distance: f64) -> f64 {
    // edge_distance > 0 inside, in pixels
    let t = (edge_distance / SOFTNESS + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Shape {
    fn coverage(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
                value,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                let r = (u * u + v * v).sqrt();
                // approximate signed distance to the boundary in pixels
                (smoothstep((1.0 - r) * rx.min(ry)), value)
            }
            Shape::Ribbon {
                cx,
                cy,
                angle,
                length,
                amplitude,
                wavelength,
                half_width,
                value,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let centre = amplitude * (std::f64::consts::TAU * u / wavelength).sin();
                let across = half_width - (v - centre).abs();
                let along = length / 2.0 - u.abs();
                (smoothstep(across.min(along)), value)
            }
        }
    }
}

/// Deterministic phantom of `size x size` pixels in `[0, 1]`.
pub fn generate_phantom(seed: u64, size: usize) -> Result<ImageGrid> {
    if size < 32 {
        return param_err(format!("phantom size must be at least 32, got {size}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let half = n / 2.0;

    let head_rx = half * rng.random_range(0.55..0.8);
    let head_ry = half * rng.random_range(0.6..0.85);
    let head_cx = half + rng.random_range(-0.06..0.06) * n;
    let head_cy = half + rng.random_range(-0.06..0.06) * n;
    let head_angle = rng.random_range(-0.4..0.4);
    let mut shapes = vec![Shape::Ellipse {
        cx: head_cx,
        cy: head_cy,
        rx: head_rx,
        ry: head_ry,
        angle: head_angle,
        value: rng.random_range(0.25..0.45),
    }];

    let extra = rng.random_range(2..=6);
    for _ in 0..extra {
        // positions inside the head, in its rotated frame
        let (s, c) = f64::sin_cos(head_angle);
        let (u, v) = (
            rng.random_range(-0.6..0.6) * head_rx,
            rng.random_range(-0.6..0.6) * head_ry,
        );
        let cx = head_cx + c * u - s * v;
        let cy = head_cy + s * u + c * v;
        let value = if rng.random_bool(0.75) {
            rng.random_range(0.15..0.55)
        } else {
            -rng.random_range(0.1..0.25)
        };
        if rng.random_bool(0.65) {
            shapes.push(Shape::Ellipse {
                cx,
                cy,
                rx: n * rng.random_range(0.04..0.2),
                ry: n * rng.random_range(0.04..0.2),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                value,
            });
        } else {
            shapes.push(Shape::Ribbon {
                cx,
                cy,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                length: n * rng.random_range(0.2..0.5),
                amplitude: n * rng.random_range(0.0..0.06),
                wavelength: n * rng.random_range(0.15..0.5),
                half_width: n * rng.random_range(0.01..0.035),
                value,
            });
        }
    }

    let mut data = vec![0.0f32; size * size];
    for (i, px) in data.iter_mut().enumerate() {
        let x = (i % size) as f64 + 0.5;
        let y = (i / size) as f64 + 0.5;
        let mut acc = 0.0;
        for shape in &shapes {
            let (alpha, value) = shape.coverage(x, y);
            acc += alpha * value;
        }
        *px = acc.clamp(0.0, 1.0) as f32;
    }
    ImageGrid::new(size, size, PixelRange::Unit, data)
}
