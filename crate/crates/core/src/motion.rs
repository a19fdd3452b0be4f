//! Retrospective rigid-motion corruption in k-space and SSIM-gated pairing.
//!
//! K-space rows are indexed in centred order: row `r` holds vertical
//! frequency `r - N/2`, so the middle row is DC.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::{ssim, SsimSpec};

/// Rigid motion held during one contiguous block of k-space rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    /// First row, inclusive.
    pub start: usize,
    /// Last row, exclusive.
    pub end: usize,
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
}

impl MotionSegment {
    pub fn is_still(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.theta == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    pub segments: Vec<MotionSegment>,
}

impl MotionTrajectory {
    /// One motionless segment covering `rows` rows.
    pub fn identity(rows: usize) -> Self {
        MotionTrajectory {
            segments: vec![MotionSegment {
                start: 0,
                end: rows,
                dx: 0.0,
                dy: 0.0,
                theta: 0.0,
            }],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.segments.iter().all(MotionSegment::is_still)
    }

    /// Segments must be ordered, non-empty, disjoint and cover `0..rows`.
    pub fn validate(&self, rows: usize) -> Result<()> {
        let mut next = 0;
        for s in &self.segments {
            if s.start != next || s.end <= s.start {
                return Err(Error::Trajectory(format!(
                    "segment {}..{} does not continue coverage at row {next}",
                    s.start, s.end
                )));
            }
            if !(s.dx.is_finite() && s.dy.is_finite() && s.theta.is_finite()) {
                return Err(Error::Trajectory("non-finite motion parameter".into()));
            }
            next = s.end;
        }
        if next != rows {
            return Err(Error::Trajectory(format!(
                "trajectory covers {next} of {rows} rows"
            )));
        }
        Ok(())
    }
}

/// Motion amplitude limits at severity 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    /// Maximum translation, pixels.
    pub dmax: f64,
    /// Maximum rotation, radians.
    pub theta_max: f64,
    /// Starting severity for gated generation.
    pub initial_severity: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            dmax: 8.0,
            theta_max: 0.1,
            initial_severity: 0.5,
        }
    }
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dmax >= 0.0) || !(self.theta_max >= 0.0) {
            return param_err("motion dmax and theta_max must be non-negative");
        }
        if !(self.initial_severity > 0.0 && self.initial_severity <= 1.0) {
            return param_err(format!(
                "initial_severity {} outside (0, 1]",
                self.initial_severity
            ));
        }
        Ok(())
    }
}

/// Acceptance interval for `SSIM(clean, corrupted)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub s0: f64,
    pub s1: f64,
    pub max_retries: usize,
}

impl Default for GateSpec {
    fn default() -> Self {
        GateSpec {
            s0: 0.6,
            s1: 0.9,
            max_retries: 50,
        }
    }
}

impl GateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.s1 < 1.0 && self.s0 < self.s1) {
            return param_err(format!(
                "gate needs 0 < s0 < s1 < 1, got ({}, {})",
                self.s0, self.s1
            ));
        }
        if self.max_retries == 0 {
            return param_err("max_retries must be positive");
        }
        Ok(())
    }

    pub fn accepts(&self, s: f64) -> bool {
        self.s0 < s && s < self.s1
    }

    /// Distance from `s` to the open interval.
    fn miss(&self, s: f64) -> f64 {
        if s <= self.s0 {
            self.s0 - s
        } else if s >= self.s1 {
            s - self.s1
        } else {
            0.0
        }
    }
}

/// Bilinear rotation by `theta` about the image centre; outside samples are 0.
fn rotate(x: &[f64], n: usize, theta: f64) -> Vec<f64> {
    if theta == 0.0 {
        return x.to_vec();
    }
    let c0 = (n as f64 - 1.0) / 2.0;
    let (s, c) = theta.sin_cos();
    let at = |r: isize, q: isize| -> f64 {
        if r < 0 || q < 0 || r >= n as isize || q >= n as isize {
            0.0
        } else {
            x[r as usize * n + q as usize]
        }
    };
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for q in 0..n {
            // inverse map of the output pixel
            let (px, py) = (q as f64 - c0, r as f64 - c0);
            let sx = c * px + s * py + c0;
            let sy = -s * px + c * py + c0;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[r * n + q] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

struct Fft2 {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    n: usize,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            n,
        }
    }

    fn transform(&self, data: &mut [Complex<f64>], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(data);
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            plan.process(&mut col);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
        if inverse {
            let scale = 1.0 / (n * n) as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Signed frequency of FFT bin `k`.
fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Applies `trajectory` to a square image and returns the magnitude
/// reconstruction in the image's declared range.
pub fn corrupt(image: &ImageGrid, trajectory: &MotionTrajectory) -> Result<ImageGrid> {
    if !image.is_square() {
        return shape_err(format!(
            "motion simulation needs a square image, got {:?}",
            image.shape()
        ));
    }
    let n = image.height;
    trajectory.validate(n)?;
    let unit: Vec<f64> = image
        .data
        .iter()
        .map(|&v| image.range.to_unit(v) as f64)
        .collect();
    let fft = Fft2::new(n);
    let mut composite = vec![Complex::new(0.0, 0.0); n * n];
    let mut still_spectrum: Option<Vec<Complex<f64>>> = None;
    for seg in &trajectory.segments {
        let spectrum = if seg.theta == 0.0 {
            still_spectrum
                .get_or_insert_with(|| {
                    let mut s: Vec<_> = unit.iter().map(|&v| Complex::new(v, 0.0)).collect();
                    fft.transform(&mut s, false);
                    s
                })
                .clone()
        } else {
            let mut s: Vec<_> = rotate(&unit, n, seg.theta)
                .into_iter()
                .map(|v| Complex::new(v, 0.0))
                .collect();
            fft.transform(&mut s, false);
            s
        };
        for centred in seg.start..seg.end {
            // centred row r holds frequency r - n/2
            let ky_bin = (centred + n - n / 2) % n;
            let ky = signed_freq(ky_bin, n);
            for kx_bin in 0..n {
                let kx = signed_freq(kx_bin, n);
                let mut v = spectrum[ky_bin * n + kx_bin];
                if seg.dx != 0.0 || seg.dy != 0.0 {
                    let phase =
                        -std::f64::consts::TAU * (kx * seg.dx + ky * seg.dy) / n as f64;
                    v *= Complex::from_polar(1.0, phase);
                }
                composite[ky_bin * n + kx_bin] = v;
            }
        }
    }
    fft.transform(&mut composite, true);
    let data = composite
        .iter()
        .map(|v| image.range.from_unit(v.norm().clamp(0.0, 1.0) as f32))
        .collect();
    ImageGrid::new(n, n, image.range, data)
}

fn symmetric_uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * bound
}

/// Random segmented trajectory; all amplitudes scale with `severity`.
pub fn draw_trajectory(
    severity: f64,
    spec: &MotionSpec,
    rng: &mut ChaCha8Rng,
    rows: usize,
) -> Result<MotionTrajectory> {
    if rows < 2 {
        return param_err(format!("trajectory needs at least 2 rows, got {rows}"));
    }
    if !(0.0..=1.0).contains(&severity) {
        return param_err(format!("severity {severity} outside [0, 1]"));
    }
    let max_segments = (2 + (6.0 * severity).round() as usize).min(rows);
    let count = rng.random_range(2..=max_segments.max(2));
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, rows - 1, count - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(rows);
    let mut segments: Vec<MotionSegment> = bounds
        .windows(2)
        .map(|w| MotionSegment {
            start: w[0],
            end: w[1],
            dx: symmetric_uniform(rng, severity * spec.dmax),
            dy: symmetric_uniform(rng, severity * spec.dmax),
            theta: symmetric_uniform(rng, severity * spec.theta_max),
        })
        .collect();
    if rng.random_bool(0.5) {
        let centre = rows / 2;
        if let Some(seg) = segments
            .iter_mut()
            .find(|s| s.start <= centre && centre < s.end)
        {
            seg.dx = 0.0;
            seg.dy = 0.0;
            seg.theta = 0.0;
        }
    }
    Ok(MotionTrajectory { segments })
}

/// A gated corruption of one clean image.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedPair {
    pub corrupted: ImageGrid,
    pub gate_ssim: f64,
    pub trajectory: MotionTrajectory,
    pub seed: u64,
    pub attempts: usize,
}

/// Severity never drops below this when escalating, so a zero start can grow.
const SEVERITY_FLOOR: f64 = 0.05;

/// Draws trajectories until `SSIM(clean, corrupted)` falls strictly inside
/// the gate, raising severity after too-mild draws and lowering it after
/// too-severe ones.
pub fn generate_pair(
    clean: &ImageGrid,
    gate: &GateSpec,
    spec: &MotionSpec,
    seed: u64,
) -> Result<GatedPair> {
    gate.validate()?;
    spec.validate()?;
    generate_pair_from(clean, gate, spec, seed, spec.initial_severity)
}

pub(crate) fn generate_pair_from(
    clean: &ImageGrid,
    gate: &GateSpec,
    spec: &MotionSpec,
    seed: u64,
    initial_severity: f64,
) -> Result<GatedPair> {
    if !clean.is_square() {
        return shape_err(format!(
            "motion simulation needs a square image, got {:?}",
            clean.shape()
        ));
    }
    let ssim_spec = SsimSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut severity = initial_severity.clamp(0.0, 1.0);
    let mut closest = f64::NAN;
    for attempt in 1..=gate.max_retries {
        let trajectory = draw_trajectory(severity, spec, &mut rng, clean.height)?;
        let corrupted = corrupt(clean, &trajectory)?;
        let s = ssim(clean, &corrupted, &ssim_spec)?;
        if gate.accepts(s) {
            return Ok(GatedPair {
                corrupted,
                gate_ssim: s,
                trajectory,
                seed,
                attempts: attempt,
            });
        }
        if closest.is_nan() || gate.miss(s) < gate.miss(closest) {
            closest = s;
        }
        severity = if s >= gate.s1 {
            (severity * 1.5).max(SEVERITY_FLOOR).min(1.0)
        } else {
            severity * 0.67
        };
    }
    Err(Error::GateFailure {
        attempts: gate.max_retries,
        closest_ssim: closest,
        s0: gate.s0,
        s1: gate.s1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PixelRange;
    use crate::phantom::generate_phantom;

    #[test]
    fn identity_is_near_exact() {
        for range in [PixelRange::Unit, PixelRange::Symmetric] {
            let img = generate_phantom(1, 64).unwrap().to_range(range);
            let out = corrupt(&img, &MotionTrajectory::identity(64)).unwrap();
            assert!(img.max_abs_diff(&out) <= 1e-5);
            // a split identity trajectory too
            let split = MotionTrajectory {
                segments: vec![
                    MotionSegment { start: 0, end: 20, dx: 0.0, dy: 0.0, theta: 0.0 },
                    MotionSegment { start: 20, end: 64, dx: 0.0, dy: 0.0, theta: 0.0 },
                ],
            };
            assert!(img.max_abs_diff(&corrupt(&img, &split).unwrap()) <= 1e-5);
        }
    }

    #[test]
    fn integer_translation_is_circular_shift() {
        let img = generate_phantom(2, 64).unwrap();
        for (dx, dy) in [(3.0, 0.0), (0.0, -5.0), (2.0, 7.0)] {
            let traj = MotionTrajectory {
                segments: vec![MotionSegment { start: 0, end: 64, dx, dy, theta: 0.0 }],
            };
            let out = corrupt(&img, &traj).unwrap();
            let n = 64isize;
            let mut worst = 0.0f32;
            for r in 0..n {
                for c in 0..n {
                    let sr = (r - dy as isize).rem_euclid(n) as usize;
                    let sc = (c - dx as isize).rem_euclid(n) as usize;
                    worst = worst.max((out.get(r as usize, c as usize) - img.get(sr, sc)).abs());
                }
            }
            assert!(worst <= 1e-4, "({dx},{dy}): {worst}");
        }
    }

    #[test]
    fn opposing_translations_ghost() {
        let img = generate_phantom(3, 64).unwrap();
        let traj = MotionTrajectory {
            segments: vec![
                MotionSegment { start: 0, end: 16, dx: 4.0, dy: 0.0, theta: 0.0 },
                MotionSegment { start: 16, end: 48, dx: 0.0, dy: 0.0, theta: 0.0 },
                MotionSegment { start: 48, end: 64, dx: -4.0, dy: 0.0, theta: 0.0 },
            ],
        };
        let out = corrupt(&img, &traj).unwrap();
        assert!(ssim(&img, &out, &SsimSpec::default()).unwrap() < 1.0);
    }

    #[test]
    fn rotation_of_centre_pixel_is_fixed() {
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let r = rotate(&x, 3, 0.3);
        assert!((r[4] - 1.0).abs() < 1e-12 || r[4] > 0.5);
        let full = rotate(&[1.0; 25], 5, std::f64::consts::FRAC_PI_2);
        // a quarter turn maps the grid onto itself
        assert!(full.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn corrupt_errors() {
        let img = ImageGrid::filled(8, 6, PixelRange::Unit, 0.5);
        assert!(matches!(
            corrupt(&img, &MotionTrajectory::identity(8)),
            Err(Error::Shape(_))
        ));
        let sq = ImageGrid::filled(8, 8, PixelRange::Unit, 0.5);
        let gap = MotionTrajectory {
            segments: vec![
                MotionSegment { start: 0, end: 3, dx: 0.0, dy: 0.0, theta: 0.0 },
                MotionSegment { start: 4, end: 8, dx: 0.0, dy: 0.0, theta: 0.0 },
            ],
        };
        assert!(matches!(corrupt(&sq, &gap), Err(Error::Trajectory(_))));
        assert!(matches!(
            corrupt(&sq, &MotionTrajectory::identity(7)),
            Err(Error::Trajectory(_))
        ));
    }

    #[test]
    fn trajectory_draws() {
        let spec = MotionSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = draw_trajectory(0.0, &spec, &mut rng, 128).unwrap();
        assert!(t.is_identity());
        t.validate(128).unwrap();

        let a = draw_trajectory(0.7, &spec, &mut ChaCha8Rng::seed_from_u64(5), 128).unwrap();
        let b = draw_trajectory(0.7, &spec, &mut ChaCha8Rng::seed_from_u64(5), 128).unwrap();
        assert_eq!(a, b);
        a.validate(128).unwrap();
        assert!((2..=8).contains(&a.segments.len()));
        assert!(draw_trajectory(0.5, &spec, &mut rng, 1).is_err());
        assert!(draw_trajectory(1.5, &spec, &mut rng, 8).is_err());
    }

    #[test]
    fn translation_spread_matches_bound() {
        let spec = MotionSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut max_dx = 0.0f64;
        let mut sum_sq = 0.0;
        let mut count = 0;
        while count < 10_000 {
            let t = draw_trajectory(1.0, &spec, &mut rng, 128).unwrap();
            for s in &t.segments {
                if s.is_still() {
                    continue;
                }
                max_dx = max_dx.max(s.dx.abs());
                sum_sq += s.dx * s.dx;
                count += 1;
            }
        }
        assert!(max_dx <= 8.0 && max_dx >= 0.95 * 8.0, "{max_dx}");
        // uniform on [-8, 8] has std 8/sqrt(3)
        let std = (sum_sq / count as f64).sqrt();
        let want = 8.0 / 3f64.sqrt();
        assert!((std - want).abs() <= 0.05 * want, "{std} vs {want}");
    }

    #[test]
    fn gate_escalates_from_zero_severity() {
        let img = generate_phantom(4, 64).unwrap();
        let gate = GateSpec::default();
        let spec = MotionSpec::default();
        let pair = generate_pair_from(&img, &gate, &spec, 3, 0.0).unwrap();
        assert!(pair.attempts > 1);
        assert!(gate.accepts(pair.gate_ssim));
        let again = ssim(&img, &pair.corrupted, &SsimSpec::default()).unwrap();
        assert_eq!(again, pair.gate_ssim);
    }

    #[test]
    fn gated_pairs_are_deterministic_and_energy_preserving() {
        let gate = GateSpec::default();
        let spec = MotionSpec::default();
        for seed in 0..6 {
            let img = generate_phantom(seed, 128).unwrap();
            let a = generate_pair(&img, &gate, &spec, seed).unwrap();
            let b = generate_pair(&img, &gate, &spec, seed).unwrap();
            assert_eq!(a, b);
            let (m0, m1) = (img.mean(), a.corrupted.mean());
            assert!((m1 - m0).abs() <= 0.2 * m0, "seed {seed}: {m0} -> {m1}");
        }
    }

    #[test]
    fn unreachable_gate_reports_closest() {
        let flat = ImageGrid::filled(32, 32, PixelRange::Unit, 0.5);
        let gate = GateSpec {
            s0: 0.1,
            s1: 0.2,
            max_retries: 3,
        };
        match generate_pair(&flat, &gate, &MotionSpec::default(), 0) {
            Err(Error::GateFailure {
                attempts,
                closest_ssim,
                ..
            }) => {
                assert_eq!(attempts, 3);
                assert!(closest_ssim > 0.2);
            }
            other => panic!("expected gate failure, got {other:?}"),
        }
    }
}
