//! Deterministic preprocessing, image files, and paired dataset manifests.
//!
//! A dataset directory holds `dataset.json` (build settings), `manifest.jsonl`
//! (one [`PairRecord`] per line) and the images. Each image is written twice:
//! a 16-bit grayscale PNG for viewing and a raw `.f32` sidecar that reloads
//! bit-exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::grid::{ImageGrid, PixelRange};
use crate::metrics::{ssim, SsimSpec};
use crate::motion::{generate_pair, GateSpec, MotionSpec, MotionTrajectory};
use crate::phantom::generate_phantom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Interpolation::Nearest),
            "bilinear" => Ok(Interpolation::Bilinear),
            other => Err(Error::Config(format!("unknown interpolation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub interpolation: Interpolation,
    pub crop: Crop,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            target_size: 128,
            interpolation: Interpolation::Bilinear,
            crop: Crop::Center,
        }
    }
}

fn resize(img: &ImageGrid, h: usize, w: usize, interp: Interpolation) -> ImageGrid {
    if (h, w) == img.shape() {
        return img.clone();
    }
    let sy = img.height as f64 / h as f64;
    let sx = img.width as f64 / w as f64;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            // pixel centres at half-integers
            let fy = (r as f64 + 0.5) * sy - 0.5;
            let fx = (c as f64 + 0.5) * sx - 0.5;
            let v = match interp {
                Interpolation::Nearest => {
                    let y = (fy.round().max(0.0) as usize).min(img.height - 1);
                    let x = (fx.round().max(0.0) as usize).min(img.width - 1);
                    img.get(y, x)
                }
                Interpolation::Bilinear => {
                    let fy = fy.clamp(0.0, (img.height - 1) as f64);
                    let fx = fx.clamp(0.0, (img.width - 1) as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
                    let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
                    let top = img.get(y0, x0) as f64 * (1.0 - wx) + img.get(y0, x1) as f64 * wx;
                    let bot = img.get(y1, x0) as f64 * (1.0 - wx) + img.get(y1, x1) as f64 * wx;
                    (top * (1.0 - wy) + bot * wy) as f32
                }
            };
            data.push(v);
        }
    }
    ImageGrid {
        height: h,
        width: w,
        range: img.range,
        data,
    }
}

/// Short side to `target_size` (aspect kept), centre crop to a square, then
/// map the declared range onto `[-1, 1]`. Images are never upsampled.
pub fn preprocess(image: &ImageGrid, spec: &PreprocessSpec) -> Result<ImageGrid> {
    let n = spec.target_size;
    if n == 0 {
        return param_err("target_size must be positive");
    }
    let short = image.height.min(image.width);
    if short < n {
        return shape_err(format!(
            "image {:?} is smaller than target size {n}",
            image.shape()
        ));
    }
    let (h, w) = if image.height <= image.width {
        (n, ((image.width * n) as f64 / image.height as f64).round() as usize)
    } else {
        (((image.height * n) as f64 / image.width as f64).round() as usize, n)
    };
    let resized = resize(image, h.max(n), w.max(n), spec.interpolation);
    let (top, left) = ((resized.height - n) / 2, (resized.width - n) / 2);
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        let row = (top + r) * resized.width + left;
        data.extend_from_slice(&resized.data[row..row + n]);
    }
    let cropped = ImageGrid::new(n, n, image.range, data)?;
    Ok(cropped.to_range(PixelRange::Symmetric).clamped())
}

const SIDECAR_MAGIC: &[u8; 4] = b"FFXR";

/// Location of the exact `.f32` copy written beside a PNG.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("f32")
}

/// Writes `<path>` (16-bit PNG of the unit-mapped, clamped image) and the
/// exact `.f32` sidecar beside it.
pub fn save_image(path: &Path, img: &ImageGrid) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let pixels: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (img.range.to_unit(v).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        img.width as u32,
        img.height as u32,
        pixels,
    )
    .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;

    let mut raw = Vec::with_capacity(16 + 4 * img.data.len());
    raw.extend_from_slice(SIDECAR_MAGIC);
    raw.extend_from_slice(&(img.height as u32).to_le_bytes());
    raw.extend_from_slice(&(img.width as u32).to_le_bytes());
    let range_tag: u32 = match img.range {
        PixelRange::Unit => 0,
        PixelRange::Symmetric => 1,
    };
    raw.extend_from_slice(&range_tag.to_le_bytes());
    for v in &img.data {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let side = sidecar_path(path);
    fs::write(&side, raw).map_err(|e| Error::io(&side, e))
}

/// Reloads the exact image written by [`save_image`] from its sidecar.
pub fn load_image_exact(path: &Path) -> Result<ImageGrid> {
    let side = sidecar_path(path);
    let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let bad = |msg: &str| Error::Image {
        path: side.clone(),
        message: msg.to_string(),
    };
    if raw.len() < 16 || &raw[..4] != SIDECAR_MAGIC {
        return Err(bad("not a sidecar file"));
    }
    let word = |i: usize| u32::from_le_bytes(raw[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    let range = match word(12) {
        0 => PixelRange::Unit,
        1 => PixelRange::Symmetric,
        _ => return Err(bad("unknown range tag")),
    };
    if raw.len() != 16 + 4 * h * w {
        return Err(bad("truncated sidecar"));
    }
    let data = raw[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageGrid::new(h, w, range, data)
}

/// Reads any grayscale-convertible PNG as a unit-range image.
pub fn load_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    ImageGrid::new(h as usize, w as usize, PixelRange::Unit, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One aligned (clean, corrupted) pair. Paths are relative to the dataset
/// root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub clean_id: String,
    pub split: Split,
    pub clean_path: PathBuf,
    pub corrupted_path: PathBuf,
    pub size: usize,
    pub range: PixelRange,
    pub gate_ssim: f64,
    pub attempts: usize,
    pub seed: u64,
    pub trajectory: MotionTrajectory,
}

/// Where clean images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanSource {
    Phantoms { first_seed: u64, count: usize },
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSpec {
    pub source: CleanSource,
    pub preprocess: PreprocessSpec,
    pub gate: GateSpec,
    pub motion: MotionSpec,
    /// Train, val and test fractions.
    pub split_fractions: [f64; 3],
    pub pairs_per_image: usize,
    /// Fraction of pairs allowed to fail the gate (they are skipped).
    pub gate_tolerance: f64,
    pub seed: u64,
}

impl Default for BuildSpec {
    fn default() -> Self {
        BuildSpec {
            source: CleanSource::Phantoms {
                first_seed: 0,
                count: 200,
            },
            preprocess: PreprocessSpec::default(),
            gate: GateSpec::default(),
            motion: MotionSpec::default(),
            split_fractions: [0.8, 0.1, 0.1],
            pairs_per_image: 1,
            gate_tolerance: 0.0,
            seed: 0,
        }
    }
}

impl BuildSpec {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        self.motion.validate()?;
        let f = self.split_fractions;
        if f.iter().any(|&v| !(v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return param_err(format!("split fractions {f:?} must be non-negative and sum to 1"));
        }
        if self.pairs_per_image == 0 {
            return param_err("pairs_per_image must be positive");
        }
        if !(0.0..=1.0).contains(&self.gate_tolerance) {
            return param_err("gate_tolerance must lie in [0, 1]");
        }
        if let CleanSource::Phantoms { count: 0, .. } = self.source {
            return param_err("phantom count must be positive");
        }
        Ok(())
    }
}

/// A built dataset: settings plus records, rooted at a directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub spec: BuildSpec,
    pub records: Vec<PairRecord>,
}

const SPEC_FILE: &str = "dataset.json";
const MANIFEST_FILE: &str = "manifest.jsonl";

/// Split sizes for `n` identities: rounded train and val counts, test takes
/// the rest.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = ((fractions[0] * n as f64).round() as usize).min(n);
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train);
    [train, val, n - train - val]
}

fn sanitize(stem: &str) -> String {
    stem.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn load_clean_sources(spec: &BuildSpec) -> Result<Vec<(String, ImageGrid)>> {
    match &spec.source {
        CleanSource::Phantoms { first_seed, count } => (0..*count as u64)
            .map(|i| {
                let seed = first_seed + i;
                let img = generate_phantom(seed, spec.preprocess.target_size.max(32))?;
                Ok((format!("phantom_{seed:06}"), img))
            })
            .collect(),
        CleanSource::Directory(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::Build(format!("no PNG images in {}", dir.display())));
            }
            let mut out = Vec::with_capacity(paths.len());
            for p in paths {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                out.push((sanitize(stem), load_png(&p)?));
            }
            Ok(out)
        }
    }
}

/// Preprocesses every clean image, draws gated pairs, assigns splits by clean
/// identity and writes everything under `root`.
pub fn build_dataset(spec: &BuildSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let sources = load_clean_sources(spec)?;
    let mut order: Vec<usize> = (0..sources.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let counts = split_counts(sources.len(), spec.split_fractions);
    let mut split_of = vec![Split::Train; sources.len()];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let total = sources.len() * spec.pairs_per_image;
    for (i, (id, raw)) in sources.iter().enumerate() {
        let clean = preprocess(raw, &spec.preprocess)?;
        let clean_rel = PathBuf::from("clean").join(format!("{id}.png"));
        save_image(&root.join(&clean_rel), &clean)?;
        // per-image stream so items do not depend on each other
        let mut item_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        item_rng.set_stream(i as u64 + 1);
        for j in 0..spec.pairs_per_image {
            let pair_seed: u64 = item_rng.random();
            match generate_pair(&clean, &spec.gate, &spec.motion, pair_seed) {
                Ok(pair) => {
                    let rel = PathBuf::from("corrupted").join(format!("{id}_{j}.png"));
                    save_image(&root.join(&rel), &pair.corrupted)?;
                    records.push(PairRecord {
                        clean_id: id.clone(),
                        split: split_of[i],
                        clean_path: clean_rel.clone(),
                        corrupted_path: rel,
                        size: clean.height,
                        range: clean.range,
                        gate_ssim: pair.gate_ssim,
                        attempts: pair.attempts,
                        seed: pair_seed,
                        trajectory: pair.trajectory,
                    });
                }
                Err(e @ Error::GateFailure { .. }) => failures.push(format!("{id}#{j}: {e}")),
                Err(e) => return Err(e),
            }
        }
    }
    if failures.len() as f64 > spec.gate_tolerance * total as f64 {
        return Err(Error::Build(format!(
            "{} of {total} pairs failed the gate:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        spec: spec.clone(),
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

impl DatasetManifest {
    fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let spec_path = self.root.join(SPEC_FILE);
        let text = serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n";
        fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
        let path = self.root.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.write_all(b"\n").expect("write to vec");
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let spec_path = root.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: BuildSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Build(format!("{}: {e}", spec_path.display())))?;
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Build(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<PairRecord>>>()?;
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            spec,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Exact `(clean, corrupted)` images of a record.
    pub fn load_pair(&self, record: &PairRecord) -> Result<(ImageGrid, ImageGrid)> {
        Ok((
            load_image_exact(&self.root.join(&record.clean_path))?,
            load_image_exact(&self.root.join(&record.corrupted_path))?,
        ))
    }

    /// Checks split disjointness, that every file reloads with the recorded
    /// shape and range, and that each pair still passes the gate.
    pub fn verify(&self) -> Result<()> {
        let mut seen: std::collections::BTreeMap<&str, Split> = Default::default();
        let gate = self.spec.gate;
        for r in &self.records {
            if let Some(&prev) = seen.get(r.clean_id.as_str()) {
                if prev != r.split {
                    return Err(Error::Build(format!(
                        "clean image {} appears in {prev} and {}",
                        r.clean_id, r.split
                    )));
                }
            }
            seen.insert(&r.clean_id, r.split);
            let (clean, corrupted) = self.load_pair(r)?;
            for img in [&clean, &corrupted] {
                if img.shape() != (r.size, r.size) || img.range != r.range {
                    return Err(Error::Build(format!(
                        "{}: stored image does not match its record",
                        r.clean_id
                    )));
                }
            }
            let s = ssim(&clean, &corrupted, &SsimSpec::default())?;
            if !gate.accepts(s) || s != r.gate_ssim {
                return Err(Error::Build(format!(
                    "{}: recomputed ssim {s} vs recorded {} outside ({}, {})",
                    r.clean_id, r.gate_ssim, gate.s0, gate.s1
                )));
            }
        }
        Ok(())
    }
}
