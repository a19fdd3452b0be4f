//! Evaluation reports: a plain-text table for people and one JSON line per
//! row for tools.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use flowfix::metrics::{
    default_subset_size, extract_features, fit_stats, frechet_distance, kid, mae_normed, ssim,
    KidResult, RandomConvEncoder, SsimSpec,
};
use flowfix::{Error, ImageGrid, Result};

/// One paired-evaluation row (SSIM and MAE against references).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRow {
    pub method: String,
    pub count: usize,
    pub ssim: f64,
    pub ssim_std: f64,
    pub mae: f64,
    pub mae_std: f64,
}

/// One distribution-evaluation row (FID and KID against a reference set).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionRow {
    pub method: String,
    pub count: usize,
    pub reference_count: usize,
    pub fid: f64,
    pub kid: KidResult,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-pair SSIM and MAE, then their means.
pub fn paired_row(
    method: &str,
    restored: &[ImageGrid],
    reference: &[ImageGrid],
    spec: &SsimSpec,
) -> Result<PairedRow> {
    if restored.is_empty() || restored.len() != reference.len() {
        return Err(Error::Parameter(format!(
            "paired evaluation needs equal non-empty sets, got {} and {}",
            restored.len(),
            reference.len()
        )));
    }
    let mut s = Vec::with_capacity(restored.len());
    let mut m = Vec::with_capacity(restored.len());
    for (a, b) in restored.iter().zip(reference) {
        s.push(ssim(a, b, spec)?);
        m.push(mae_normed(a, b)?);
    }
    let (ssim, ssim_std) = mean_std(&s);
    let (mae, mae_std) = mean_std(&m);
    Ok(PairedRow {
        method: method.to_string(),
        count: restored.len(),
        ssim,
        ssim_std,
        mae,
        mae_std,
    })
}

/// FID and KID of `images` against `reference` with the default encoder.
pub fn distribution_row(
    method: &str,
    images: &[ImageGrid],
    reference: &[ImageGrid],
    feature_seed: u64,
    kid_subsets: usize,
    kid_subset_size: usize,
    kid_seed: u64,
) -> Result<DistributionRow> {
    if images.len() < 2 || reference.len() < 2 {
        return Err(Error::Parameter(
            "distribution metrics need at least two images per set".into(),
        ));
    }
    let encoder = RandomConvEncoder::new(feature_seed);
    let fa = extract_features(images, &encoder)?;
    let fb = extract_features(reference, &encoder)?;
    let fid = frechet_distance(&fit_stats(&fa)?, &fit_stats(&fb)?)?;
    let subset = if kid_subset_size == 0 {
        default_subset_size(fa.rows, fb.rows)
    } else {
        kid_subset_size
    };
    let kid = kid(&fa, &fb, subset, kid_subsets, kid_seed)?;
    Ok(DistributionRow {
        method: method.to_string(),
        count: images.len(),
        reference_count: reference.len(),
        fid,
        kid,
    })
}

fn render(header: [&str; 3], rows: &[[String; 3]]) -> String {
    let mut widths = header.map(|h| h.chars().count());
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: [&str; 3]| {
        format!(
            "{:<w0$} | {:>w1$} | {:>w2$}\n",
            cells[0],
            cells[1],
            cells[2],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        )
    };
    let mut out = line(header);
    out.push_str(&format!(
        "{}-|-{}-|-{}\n",
        "-".repeat(widths[0]),
        "-".repeat(widths[1]),
        "-".repeat(widths[2])
    ));
    for r in rows {
        out.push_str(&line([&r[0], &r[1], &r[2]]));
    }
    out
}

/// `Method | SSIM ↑ | MAE (normed) ↓`
pub fn paired_table(rows: &[PairedRow]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| [r.method.clone(), format!("{:.3}", r.ssim), format!("{:.3}", r.mae)])
        .collect();
    render(["Method", "SSIM \u{2191}", "MAE (normed) \u{2193}"], &cells)
}

/// `Method | FID ↓ | KID ↓` with KID as `mean ± std`.
pub fn distribution_table(rows: &[DistributionRow]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| [r.method.clone(), format!("{:.2}", r.fid), r.kid.to_string()])
        .collect();
    render(["Method", "FID \u{2193}", "KID \u{2193}"], &cells)
}

/// Hex SHA-256 over image shapes and raw values, in order.
pub fn fingerprint(images: &[ImageGrid]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update((img.height as u64).to_le_bytes());
        h.update((img.width as u64).to_le_bytes());
        for v in &img.data {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}
