//! Feature-distribution statistics: Fréchet distance and kernel inception
//! distance.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Mat;

/// Eigenvalues down to `-EIGEN_CLAMP * trace` are treated as round-off and
/// clamped to zero.
pub const EIGEN_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn fit_stats(features: &Mat<f64>) -> Result<FeatureStats> {
    let (n, d) = (features.rows, features.cols);
    if n < 2 {
        return param_err(format!("need at least 2 feature rows, got {n}"));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = DMatrix::zeros(n, d);
    for r in 0..n {
        for (j, v) in features.row(r).iter().enumerate() {
            centered[(r, j)] = v - mean[j];
        }
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    // exact symmetry
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(FeatureStats {
        mean,
        cov,
        count: n,
    })
}

/// Symmetric eigenvalues with round-off negatives clamped to zero.
fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let scale = sym.trace().abs().max(f64::MIN_POSITIVE);
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIGEN_CLAMP * scale {
            return Err(Error::Numerical(format!(
                "{what} is not positive semidefinite: eigenvalue {v:.3e} vs trace {scale:.3e}"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))`.
///
/// The trace of the product square root is taken as the trace of
/// `(S_p^(1/2) S_q S_p^(1/2))^(1/2)`, which is symmetric and has the same
/// eigenvalues.
pub fn frechet_distance(p: &FeatureStats, q: &FeatureStats) -> Result<f64> {
    if p.dim() != q.dim() {
        return shape_err(format!(
            "feature dimensions differ: {} vs {}",
            p.dim(),
            q.dim()
        ));
    }
    let dmu: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let ep = clamped_eigen(p.cov.clone(), "first covariance")?;
    let sqrt_p = &ep.eigenvectors
        * DMatrix::from_diagonal(&ep.eigenvalues.map(f64::sqrt))
        * ep.eigenvectors.transpose();
    let inner = &sqrt_p * &q.cov * &sqrt_p;
    let ei = clamped_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = dmu + p.cov.trace() + q.cov.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for KidResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6} \u{00b1} {:.6}", self.mean, self.std)
    }
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD^2 between two equally sized sets.
fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(s[i], s[j]);
                }
            }
        }
        acc
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    within(x) / (m * (m - 1.0)) + within(y) / (m * (m - 1.0)) - 2.0 * cross / (m * m)
}

/// KID: mean and (population) standard deviation of unbiased MMD^2 over
/// `n_subsets` random subset pairs. Subset `i` draws from its own ChaCha
/// stream so results do not depend on evaluation order.
pub fn kid(
    features_a: &Mat<f64>,
    features_b: &Mat<f64>,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<KidResult> {
    if features_a.cols != features_b.cols {
        return shape_err(format!(
            "feature dimensions differ: {} vs {}",
            features_a.cols, features_b.cols
        ));
    }
    if subset_size < 2 || subset_size > features_a.rows.min(features_b.rows) {
        return param_err(format!(
            "kid subset_size {subset_size} must be in [2, {}]",
            features_a.rows.min(features_b.rows)
        ));
    }
    if n_subsets == 0 {
        return param_err("kid n_subsets must be at least 1");
    }
    let values: Vec<f64> = (0..n_subsets)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let ia = index::sample(&mut rng, features_a.rows, subset_size);
            let ib = index::sample(&mut rng, features_b.rows, subset_size);
            let xa: Vec<&[f64]> = ia.iter().map(|r| features_a.row(r)).collect();
            let xb: Vec<&[f64]> = ib.iter().map(|r| features_b.row(r)).collect();
            mmd2_unbiased(&xa, &xb)
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(KidResult {
        mean,
        std: var.sqrt(),
    })
}

/// Default KID subset size for sets of `n` and `m` rows.
pub fn default_subset_size(n: usize, m: usize) -> usize {
    100.min(n).min(m)
}
