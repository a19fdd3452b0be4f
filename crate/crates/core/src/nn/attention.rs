//! Multi-head scaled dot-product attention over batched token matrices.
//!
//! Queries are `B*Nq x d`, keys and values `B*Nk x d`; heads are contiguous
//! column slices of width `d / heads`.

use crate::tensor::{gemm, Mat, Real, View, ViewMut};

pub struct AttentionCache<T> {
    /// Softmax probabilities, `B x H x Nq x Nk`.
    pub probs: Vec<T>,
    pub batch: usize,
    pub heads: usize,
    pub nq: usize,
    pub nk: usize,
}

pub fn attention_forward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    batch: usize,
    heads: usize,
) -> (Mat<T>, AttentionCache<T>) {
    let d = q.cols;
    assert_eq!(k.cols, d);
    assert_eq!(v.cols, d);
    assert_eq!(d % heads, 0, "heads must divide width");
    let hd = d / heads;
    let nq = q.rows / batch;
    let nk = k.rows / batch;
    assert_eq!(nq * batch, q.rows);
    assert_eq!(nk * batch, k.rows);
    assert_eq!(v.rows, k.rows);

    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::ZERO; batch * heads * nq * nk];
    let mut out = Mat::zeros(q.rows, d);
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
            gemm(
                scale,
                View::sub(&q.data, d, b * nq, h * hd, nq, hd),
                View::sub(&k.data, d, b * nk, h * hd, nk, hd).t(),
                T::ZERO,
                ViewMut::new(p, nq, nk),
            );
            for row in p.chunks_exact_mut(nk) {
                softmax_in_place(row);
            }
            gemm(
                T::ONE,
                View::new(p, nq, nk),
                View::sub(&v.data, d, b * nk, h * hd, nk, hd),
                T::ZERO,
                ViewMut::sub(&mut out.data, d, b * nq, h * hd, nq, hd),
            );
        }
    }
    (
        out,
        AttentionCache {
            probs,
            batch,
            heads,
            nq,
            nk,
        },
    )
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    // separate lanes keep the reduction vectorizable
    let mut lanes = [T::ZERO; 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += v;
        }
    }
    let mut sum = chunks.remainder().iter().fold(T::ZERO, |a, &v| a + v);
    for l in lanes {
        sum += l;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cache: &AttentionCache<T>,
    dout: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let AttentionCache {
        batch,
        heads,
        nq,
        nk,
        ..
    } = *cache;
    let d = q.cols;
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut dq = Mat::zeros(q.rows, d);
    let mut dk = Mat::zeros(k.rows, d);
    let mut dv = Mat::zeros(v.rows, d);
    let mut ds = vec![T::ZERO; nq * nk];
    for b in 0..batch {
        for h in 0..heads {
            let p = &cache.probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
            let do_bh = View::sub(&dout.data, d, b * nq, h * hd, nq, hd);
            gemm(
                T::ONE,
                View::new(p, nq, nk).t(),
                do_bh,
                T::ZERO,
                ViewMut::sub(&mut dv.data, d, b * nk, h * hd, nk, hd),
            );
            // dP = dO V^T
            gemm(
                T::ONE,
                do_bh,
                View::sub(&v.data, d, b * nk, h * hd, nk, hd).t(),
                T::ZERO,
                ViewMut::new(&mut ds, nq, nk),
            );
            for (ds_row, p_row) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                let mut dot = T::ZERO;
                for (&g, &pv) in ds_row.iter().zip(p_row) {
                    dot += g * pv;
                }
                for (g, &pv) in ds_row.iter_mut().zip(p_row) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            gemm(
                T::ONE,
                View::new(&ds, nq, nk),
                View::sub(&k.data, d, b * nk, h * hd, nk, hd),
                T::ZERO,
                ViewMut::sub(&mut dq.data, d, b * nq, h * hd, nq, hd),
            );
            gemm(
                T::ONE,
                View::new(&ds, nq, nk).t(),
                View::sub(&q.data, d, b * nq, h * hd, nq, hd),
                T::ZERO,
                ViewMut::sub(&mut dk.data, d, b * nk, h * hd, nk, hd),
            );
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_vec(rows, cols, crate::nn::normal_init(rng, rows * cols, 1.0))
    }

    /// Direct per-element evaluation of softmax(QK^T/sqrt(hd)) V.
    fn naive(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>, batch: usize, heads: usize) -> Mat<f64> {
        let d = q.cols;
        let hd = d / heads;
        let nq = q.rows / batch;
        let nk = k.rows / batch;
        let mut out = Mat::zeros(q.rows, d);
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..nq {
                    let scores: Vec<f64> = (0..nk)
                        .map(|j| {
                            (0..hd)
                                .map(|c| {
                                    q.data[(b * nq + i) * d + h * hd + c]
                                        * k.data[(b * nk + j) * d + h * hd + c]
                                })
                                .sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..hd {
                        out.data[(b * nq + i) * d + h * hd + c] = (0..nk)
                            .map(|j| e[j] / z * v.data[(b * nk + j) * d + h * hd + c])
                            .sum();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (
            rand_mat(&mut rng, 2 * 3, 4),
            rand_mat(&mut rng, 2 * 5, 4),
            rand_mat(&mut rng, 2 * 5, 4),
        );
        let (out, _) = attention_forward(&q, &k, &v, 2, 2);
        assert!(out.max_abs_diff(&naive(&q, &k, &v, 2, 2)) < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, k, v) = (
            rand_mat(&mut rng, 2 * 3, 4),
            rand_mat(&mut rng, 2 * 4, 4),
            rand_mat(&mut rng, 2 * 4, 4),
        );
        let w = rand_mat(&mut rng, 6, 4);
        let loss = |q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>| -> f64 {
            let (o, _) = attention_forward(q, k, v, 2, 2);
            o.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attention_forward(&q, &k, &v, 2, 2);
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &w);
        let h = 1e-6;
        for (which, analytic) in [(0, &dq), (1, &dk), (2, &dv)] {
            for i in 0..analytic.data.len() {
                let mut args = [q.clone(), k.clone(), v.clone()];
                args[which].data[i] += h;
                let lp = loss(&args[0], &args[1], &args[2]);
                args[which].data[i] -= 2.0 * h;
                let lm = loss(&args[0], &args[1], &args[2]);
                let numeric = (lp - lm) / (2.0 * h);
                assert!(
                    (numeric - analytic.data[i]).abs() < 1e-7,
                    "input {which} idx {i}: {numeric} vs {}",
                    analytic.data[i]
                );
            }
        }
    }
}
