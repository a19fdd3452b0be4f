//! Operator commands. Every command writes the resolved config into each
//! directory it creates.

use std::fs;
use std::path::{Path, PathBuf};

use flowfix::backbone::{Backbone, Variant};
use flowfix::codec::{train_autoencoder, Codec, CodecKind};
use flowfix::data::{
    build_dataset, load_image_exact, load_png, preprocess, save_image, sidecar_path, DatasetManifest,
    PreprocessSpec, Split,
};
use flowfix::grid::LatentGrid;
use flowfix::sampler::{integrate, restore_batch, SampleConfig};
use flowfix::trainer::{fit, FitOutcome, FlowCheckpoint};
use flowfix::{Error, ImageGrid, PixelRange, Result};

use crate::config::RunConfig;
use crate::report::{
    distribution_row, distribution_table, fingerprint, paired_row, paired_table, DistributionRow,
    PairedRow,
};

pub const CONFIG_FILE: &str = "run_config.toml";
pub const MODEL_FILE: &str = "model.safetensors";

/// Resolved config plus the root that relative paths hang off.
#[derive(Clone, Debug)]
pub struct Context {
    pub workdir: PathBuf,
    pub config: RunConfig,
}

impl Context {
    pub fn new(workdir: impl Into<PathBuf>, config: RunConfig) -> Self {
        Context {
            workdir: workdir.into(),
            config,
        }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn output_dir(&self, p: &Path) -> Result<PathBuf> {
        let dir = self.path(p);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let file = dir.join(CONFIG_FILE);
        fs::write(&file, self.config.to_toml()).map_err(|e| Error::io(&file, e))?;
        Ok(dir)
    }
}

/// One input image, with its clean reference when it came from a dataset.
#[derive(Clone, Debug)]
pub struct NamedInput {
    pub name: String,
    pub source: ImageGrid,
    pub reference: Option<ImageGrid>,
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Loads a PNG, preferring its exact sidecar, as a `[-1, 1]` image.
pub fn load_any(path: &Path) -> Result<ImageGrid> {
    let img = if sidecar_path(path).exists() {
        load_image_exact(path)?
    } else {
        load_png(path)?
    };
    Ok(img.to_range(PixelRange::Symmetric))
}

/// Sorted `(stem, image)` pairs for every PNG directly inside `dir`.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, ImageGrid)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Parameter(format!("no PNG images in {}", dir.display())));
    }
    paths.iter().map(|p| Ok((stem(p), load_any(p)?))).collect()
}

/// Restoration inputs: the corrupted images of `split` when `dir` is a
/// dataset, otherwise every PNG in `dir` brought to `size`.
pub fn read_inputs(dir: &Path, split: Split, size: usize) -> Result<Vec<NamedInput>> {
    if dir.join("manifest.jsonl").exists() {
        let manifest = DatasetManifest::load(dir)?;
        let items: Vec<NamedInput> = manifest
            .split(split)
            .into_iter()
            .map(|r| {
                let (clean, corrupted) = manifest.load_pair(r)?;
                Ok(NamedInput {
                    name: stem(&r.corrupted_path),
                    source: corrupted,
                    reference: Some(clean),
                })
            })
            .collect::<Result<_>>()?;
        if items.is_empty() {
            return Err(Error::Parameter(format!("dataset has no {split} pairs")));
        }
        return Ok(items);
    }
    let spec = PreprocessSpec {
        target_size: size,
        ..PreprocessSpec::default()
    };
    load_dir(dir)?
        .into_iter()
        .map(|(name, img)| {
            let source = if img.shape() == (size, size) {
                img
            } else {
                preprocess(&img, &spec)?
            };
            Ok(NamedInput {
                name,
                source,
                reference: None,
            })
        })
        .collect()
}

/// Accepts a checkpoint file or the run directory holding it.
pub fn load_checkpoint(path: &Path) -> Result<FlowCheckpoint> {
    let file = if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    };
    FlowCheckpoint::load(&file)
}

pub fn simulate(ctx: &Context, out: &Path) -> Result<DatasetManifest> {
    let root = ctx.output_dir(out)?;
    let manifest = build_dataset(&ctx.config.build_spec(), &root)?;
    let count = |s| manifest.split(s).len();
    println!(
        "dataset {}: {} pairs (train {}, val {}, test {})",
        root.display(),
        manifest.records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(manifest)
}

pub fn train(ctx: &Context, data: &Path, out: &Path) -> Result<FitOutcome> {
    let cfg = &ctx.config;
    let manifest = DatasetManifest::load(&ctx.path(data))?;
    let size = manifest.spec.preprocess.target_size;
    if size != cfg.target_size {
        return Err(Error::Config(format!(
            "dataset images are {size}x{size} but target_size is {}",
            cfg.target_size
        )));
    }
    let dir = ctx.output_dir(out)?;
    let codec = match cfg.codec {
        CodecKind::Identity => Codec::Identity,
        CodecKind::StridedAe => {
            let images: Vec<ImageGrid> = manifest
                .split(Split::Train)
                .into_iter()
                .map(|r| manifest.load_pair(r).map(|p| p.0))
                .collect::<Result<_>>()?;
            let (ae, losses) =
                train_autoencoder(&images, cfg.codec_spec(), &cfg.ae_train_config())?;
            println!(
                "codec trained for {} steps, final loss {:.6}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            Codec::StridedAe(Box::new(ae))
        }
    };
    let outcome = fit(
        &manifest,
        &cfg.model_config(),
        &cfg.train_config(),
        codec,
        &cfg.sample_config(),
        &dir,
    )?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        outcome.steps,
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    Ok(outcome)
}

/// Items per restore call; seeds continue across chunks.
const RESTORE_CHUNK: usize = 64;

/// Restores every source with seed `config.seed + index`.
pub fn restore_all(
    model: &Backbone<f32>,
    codec: &Codec,
    sources: &[ImageGrid],
    config: &SampleConfig,
) -> Result<Vec<ImageGrid>> {
    let mut out = Vec::with_capacity(sources.len());
    for (k, chunk) in sources.chunks(RESTORE_CHUNK).enumerate() {
        let cfg = SampleConfig {
            seed: config.seed.wrapping_add((k * RESTORE_CHUNK) as u64),
            ..config.clone()
        };
        out.extend(restore_batch(model, chunk, &cfg, codec)?);
    }
    Ok(out)
}

/// Writes `restored/`, plus `corrupted/` and `reference/` for dataset input.
pub fn restore(
    ctx: &Context,
    checkpoint: &Path,
    input: &Path,
    split: Split,
    out: &Path,
) -> Result<Vec<NamedInput>> {
    let ckpt = load_checkpoint(&ctx.path(checkpoint))?;
    let size = ckpt.codec.spec().latent_shape(ctx.config.target_size)?;
    if (size.0, size.1) != (ckpt.model.config().latent_channels, ckpt.model.config().latent_size) {
        return Err(Error::Config(
            "target_size does not match the checkpoint's latent size".into(),
        ));
    }
    let items = read_inputs(&ctx.path(input), split, ctx.config.target_size)?;
    let dir = ctx.output_dir(out)?;
    let sources: Vec<ImageGrid> = items.iter().map(|i| i.source.clone()).collect();
    let restored = restore_all(&ckpt.model, &ckpt.codec, &sources, &ctx.config.sample_config())?;
    for (item, r) in items.iter().zip(&restored) {
        let file = format!("{}.png", item.name);
        save_image(&dir.join("restored").join(&file), r)?;
        if let Some(reference) = &item.reference {
            save_image(&dir.join("reference").join(&file), reference)?;
            save_image(&dir.join("corrupted").join(&file), &item.source)?;
        }
    }
    println!("restored {} images into {}", restored.len(), dir.join("restored").display());
    Ok(items
        .into_iter()
        .zip(restored)
        .map(|(i, r)| NamedInput {
            name: i.name,
            source: r,
            reference: i.reference,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Paired,
    Distribution,
}

/// A finished evaluation: the text table and one JSON object per row.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub table: String,
    pub paired: Vec<PairedRow>,
    pub distribution: Vec<DistributionRow>,
}

/// `NAME=DIR`, or a bare `DIR` named after its last component.
pub fn parse_method(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, dir)) if !name.is_empty() => (name.to_string(), PathBuf::from(dir)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (name, p)
        }
    }
}

fn matched(
    images: Vec<(String, ImageGrid)>,
    reference: &[(String, ImageGrid)],
    dir: &Path,
) -> Result<Vec<ImageGrid>> {
    let mut by_name: std::collections::BTreeMap<String, ImageGrid> = images.into_iter().collect();
    reference
        .iter()
        .map(|(name, _)| {
            by_name.remove(name).ok_or_else(|| {
                Error::Parameter(format!("{} has no image named {name}", dir.display()))
            })
        })
        .collect()
}

pub fn eval(
    ctx: &Context,
    methods: &[(String, PathBuf)],
    reference: &Path,
    mode: EvalMode,
    out: &Path,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::Parameter("eval needs at least one input directory".into()));
    }
    let cfg = &ctx.config;
    let reference_dir = ctx.path(reference);
    let reference = load_dir(&reference_dir)?;
    let reference_images: Vec<ImageGrid> = reference.iter().map(|r| r.1.clone()).collect();
    let reference_print = fingerprint(&reference_images);
    let mut report = EvalReport {
        table: String::new(),
        paired: Vec::new(),
        distribution: Vec::new(),
    };
    let mut jsonl = String::new();
    for (name, dir) in methods {
        let dir = ctx.path(dir);
        let images = load_dir(&dir)?;
        let mut record = match mode {
            EvalMode::Paired => {
                let images = matched(images, &reference, &dir)?;
                let row = paired_row(name, &images, &reference_images, &cfg.ssim_spec())?;
                let mut v = serde_json::to_value(&row).expect("serializes");
                v["input_fingerprint"] = fingerprint(&images).into();
                report.paired.push(row);
                v
            }
            EvalMode::Distribution => {
                let images: Vec<ImageGrid> = images.into_iter().map(|i| i.1).collect();
                let row = distribution_row(
                    name,
                    &images,
                    &reference_images,
                    cfg.feature_seed,
                    cfg.kid_subsets,
                    cfg.kid_subset_size,
                    cfg.seed,
                )?;
                let mut v = serde_json::to_value(&row).expect("serializes");
                v["input_fingerprint"] = fingerprint(&images).into();
                report.distribution.push(row);
                v
            }
        };
        record["mode"] = format!("{mode:?}").to_lowercase().into();
        record["reference_fingerprint"] = reference_print.clone().into();
        jsonl.push_str(&record.to_string());
        jsonl.push('\n');
    }
    report.table = match mode {
        EvalMode::Paired => paired_table(&report.paired),
        EvalMode::Distribution => distribution_table(&report.distribution),
    };
    let dir = ctx.output_dir(out)?;
    for (file, text) in [("report.txt", &report.table), ("report.jsonl", &jsonl)] {
        let path = dir.join(file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    print!("{}", report.table);
    Ok(report)
}

/// Guidance-0 samples. PRIMARY has no unconditional mode without a source,
/// so it is fed an all-zeros control latent; the second value flags that
/// the result is expected to be degenerate.
pub fn generate_images(
    model: &Backbone<f32>,
    codec: &Codec,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<(Vec<ImageGrid>, bool)> {
    if count == 0 {
        return Err(Error::Parameter("count must be at least 1".into()));
    }
    let config = SampleConfig {
        steps,
        guidance: 0.0,
        seed,
        ..SampleConfig::default()
    };
    let (c, h, w) = model.config().latent_shape();
    let zeros = LatentGrid::zeros(c, h, w);
    let primary = model.config().variant == Variant::Primary;
    let sources: Vec<Option<&LatentGrid>> = vec![primary.then_some(&zeros); count];
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
    let latents = integrate(model, &sources, &seeds, &config, false)?;
    let images = latents.iter().map(|z| codec.decode(z)).collect::<Result<_>>()?;
    Ok((images, primary))
}

pub const PRIMARY_GENERATION_WARNING: &str =
    "warning: the primary variant has no unconditional mode; guidance-0 samples are expected to be degenerate";

pub fn generate(ctx: &Context, checkpoint: &Path, out: &Path) -> Result<Vec<ImageGrid>> {
    let cfg = &ctx.config;
    if cfg.generate_count == 0 {
        return Err(Error::Parameter("count must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&ctx.path(checkpoint))?;
    let (images, degenerate) = generate_images(
        &ckpt.model,
        &ckpt.codec,
        cfg.generate_count,
        cfg.generate_steps,
        cfg.sample_seed,
    )?;
    if degenerate {
        eprintln!("{PRIMARY_GENERATION_WARNING}");
    }
    let dir = ctx.output_dir(out)?;
    for (i, img) in images.iter().enumerate() {
        save_image(&dir.join(format!("{i:04}.png")), img)?;
    }
    println!("generated {} images into {}", images.len(), dir.display());
    Ok(images)
}

/// Tiles equally sized images row by row, with a one-pixel white gutter.
pub fn tile(rows: &[Vec<ImageGrid>]) -> Result<ImageGrid> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Parameter("empty figure grid".into()))?;
    let (h, w) = first.shape();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * (h + 1) - 1;
    let gw = cols * (w + 1) - 1;
    let mut grid = ImageGrid::filled(gh, gw, PixelRange::Symmetric, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.shape() != (h, w) {
                return Err(Error::Shape("figure tiles differ in size".into()));
            }
            let img = img.to_range(PixelRange::Symmetric);
            for y in 0..h {
                let dst = (r * (h + 1) + y) * gw + c * (w + 1);
                grid.data[dst..dst + w].copy_from_slice(&img.data[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(grid)
}

/// 8-bit PNG without a sidecar, for figures.
pub fn save_figure(path: &Path, img: &ImageGrid) -> Result<()> {
    let pixels: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (img.range.to_unit(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(img.width as u32, img.height as u32, pixels)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Result of one ablation setting.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub grid: &'static str,
    pub steps: usize,
    pub guidance: f64,
    pub ssim: Option<f64>,
    pub mae: Option<f64>,
}

fn sweep(
    ckpt: &FlowCheckpoint,
    items: &[NamedInput],
    settings: &[(usize, f64)],
    base: &SampleConfig,
    ctx: &Context,
    grid: &'static str,
) -> Result<(Vec<AblationRow>, Vec<Vec<ImageGrid>>)> {
    let sources: Vec<ImageGrid> = items.iter().map(|i| i.source.clone()).collect();
    let references: Option<Vec<ImageGrid>> = items.iter().map(|i| i.reference.clone()).collect();
    let shown = ctx.config.ablate_grid_rows.min(items.len());
    let mut figure: Vec<Vec<ImageGrid>> = sources[..shown].iter().map(|s| vec![s.clone()]).collect();
    let mut rows = Vec::with_capacity(settings.len());
    for &(steps, guidance) in settings {
        let cfg = SampleConfig {
            steps,
            guidance,
            ..base.clone()
        };
        let out = restore_all(&ckpt.model, &ckpt.codec, &sources, &cfg)?;
        let (ssim, mae) = match &references {
            Some(refs) => {
                let row = paired_row(grid, &out, refs, &ctx.config.ssim_spec())?;
                (Some(row.ssim), Some(row.mae))
            }
            None => (None, None),
        };
        rows.push(AblationRow {
            grid,
            steps,
            guidance,
            ssim,
            mae,
        });
        for (f, img) in figure.iter_mut().zip(out) {
            f.push(img);
        }
    }
    if let Some(refs) = &references {
        for (f, r) in figure.iter_mut().zip(refs) {
            f.push(r.clone());
        }
    }
    Ok((rows, figure))
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    let mut out = format!("{:<9} | {:>5} | {:>8} | {:>6} | {:>12}\n", "Grid", "Steps", "Guidance", "SSIM", "MAE (normed)");
    out.push_str(&format!("{}\n", "-".repeat(52)));
    for r in rows {
        out.push_str(&format!(
            "{:<9} | {:>5} | {:>8.1} | {:>6} | {:>12}\n",
            r.grid,
            r.steps,
            r.guidance,
            fmt(r.ssim),
            fmt(r.mae)
        ));
    }
    out
}

/// Step and guidance sweeps with figure grids, and a guidance-0 generation
/// grid. `limit` caps how many inputs are swept (0 means all).
pub fn ablate(
    ctx: &Context,
    checkpoint: &Path,
    input: &Path,
    split: Split,
    limit: usize,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let cfg = &ctx.config;
    let ckpt = load_checkpoint(&ctx.path(checkpoint))?;
    let mut items = read_inputs(&ctx.path(input), split, cfg.target_size)?;
    if limit > 0 {
        items.truncate(limit);
    }
    let dir = ctx.output_dir(out)?;
    let base = cfg.sample_config();
    let step_settings: Vec<(usize, f64)> = cfg.ablate_steps.iter().map(|&s| (s, 1.0)).collect();
    let guidance_settings: Vec<(usize, f64)> =
        cfg.ablate_guidance.iter().map(|&g| (cfg.steps, g)).collect();
    let (mut rows, fig) = sweep(&ckpt, &items, &step_settings, &base, ctx, "steps")?;
    save_figure(&dir.join("steps_grid.png"), &tile(&fig)?)?;
    let (more, fig) = sweep(&ckpt, &items, &guidance_settings, &base, ctx, "guidance")?;
    save_figure(&dir.join("guidance_grid.png"), &tile(&fig)?)?;
    rows.extend(more);

    let n = cfg.ablate_grid_rows.max(1);
    let (generated, degenerate) = generate_images(
        &ckpt.model,
        &ckpt.codec,
        n * n,
        cfg.generate_steps,
        cfg.sample_seed,
    )?;
    if degenerate {
        eprintln!("{PRIMARY_GENERATION_WARNING}");
    }
    let fig: Vec<Vec<ImageGrid>> = generated.chunks(n).map(<[ImageGrid]>::to_vec).collect();
    save_figure(&dir.join("generation_grid.png"), &tile(&fig)?)?;

    let table = ablation_table(&rows);
    let jsonl: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializes") + "\n")
        .collect();
    for (file, text) in [("ablation.txt", &table), ("ablation.jsonl", &jsonl)] {
        let path = dir.join(file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    print!("{table}");
    Ok(rows)
}
