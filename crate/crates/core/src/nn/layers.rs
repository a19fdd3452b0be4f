use rand_chacha::ChaCha8Rng;

use super::{xavier_uniform, Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Mat, Real, View, ViewMut};

/// Fully connected layer `y = x W^T + b` with `W` stored `out x in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum LinearInit {
    Xavier,
    Zero,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
    ) -> Self {
        let w_init = match init {
            LinearInit::Xavier => xavier_uniform(rng, in_dim, out_dim),
            LinearInit::Zero => vec![0.0; in_dim * out_dim],
        };
        let w = store.add(format!("{name}.weight"), vec![out_dim, in_dim], w_init);
        let b = store.add(format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim]);
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    /// A copy of `src` under a new name, sharing nothing but initial values.
    pub fn duplicate<T: Real>(store: &mut ParamStore<T>, src: &Linear, name: &str) -> Self {
        let w = store.add_copy(format!("{name}.weight"), src.w);
        let b = src.b.map(|b| store.add_copy(format!("{name}.bias"), b));
        Linear { w, b, ..*src }
    }

    fn weight<'a, T: Real>(&self, p: &'a ParamStore<T>) -> View<'a, T> {
        View::new(p.get(self.w), self.out_dim, self.in_dim)
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.in_dim, "linear input width");
        let mut y = Mat::zeros(x.rows, self.out_dim);
        if let Some(b) = self.b {
            let bias = p.get(b);
            for r in 0..y.rows {
                y.row_mut(r).copy_from_slice(bias);
            }
            gemm(T::ONE, x.view(), self.weight(p).t(), T::ONE, y.view_mut());
        } else {
            gemm(T::ONE, x.view(), self.weight(p).t(), T::ZERO, y.view_mut());
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &Mat<T>,
        dy: &Mat<T>,
    ) -> Mat<T> {
        self.backward_params(g, x, dy);
        let mut dx = Mat::zeros(dy.rows, self.in_dim);
        gemm(T::ONE, dy.view(), self.weight(p), T::ZERO, dx.view_mut());
        dx
    }

    /// Parameter gradients only, for layers whose input is not trainable.
    pub fn backward_params<T: Real>(&self, g: &mut Grads<T>, x: &Mat<T>, dy: &Mat<T>) {
        assert_eq!(dy.cols, self.out_dim);
        assert_eq!(x.rows, dy.rows);
        gemm(
            T::ONE,
            dy.view().t(),
            x.view(),
            T::ONE,
            ViewMut::new(g.get_mut(self.w), self.out_dim, self.in_dim),
        );
        if let Some(b) = self.b {
            let db = g.get_mut(b);
            for r in 0..dy.rows {
                for (acc, v) in db.iter_mut().zip(dy.row(r)) {
                    *acc += *v;
                }
            }
        }
    }
}

pub struct NormCache<T> {
    pub normalized: Mat<T>,
    pub inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-6;

/// Per-row layer normalization without affine parameters.
pub fn layer_norm_forward<T: Real>(x: &Mat<T>) -> NormCache<T> {
    let d = x.cols;
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    let mut normalized = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let is = T::ONE / (var + eps).sqrt();
        for (o, &v) in normalized.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    NormCache {
        normalized,
        inv_std,
    }
}

pub fn layer_norm_backward<T: Real>(cache: &NormCache<T>, dy: &Mat<T>) -> Mat<T> {
    let d = dy.cols;
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    for r in 0..dy.rows {
        let y = cache.normalized.row(r);
        let g = dy.row(r);
        let mut mean_g = T::ZERO;
        let mut mean_gy = T::ZERO;
        for (&gi, &yi) in g.iter().zip(y) {
            mean_g += gi;
            mean_gy += gi * yi;
        }
        mean_g *= inv_d;
        mean_gy *= inv_d;
        let is = cache.inv_std[r];
        for ((o, &gi), &yi) in dx.row_mut(r).iter_mut().zip(g).zip(y) {
            *o = is * (gi - mean_g - yi * mean_gy);
        }
    }
    dx
}

/// `x * (1 + scale_b) + shift_b`, where per-sample shift and scale are
/// column chunks of `mods` (`B x k*d`). `x` has `B * tokens` rows.
pub fn modulate<T: Real>(
    x: &Mat<T>,
    mods: &Mat<T>,
    shift_chunk: usize,
    scale_chunk: usize,
    tokens: usize,
) -> Mat<T> {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    for r in 0..x.rows {
        let m = mods.row(r / tokens);
        let shift = &m[shift_chunk * d..(shift_chunk + 1) * d];
        let scale = &m[scale_chunk * d..(scale_chunk + 1) * d];
        for j in 0..d {
            out.data[r * d + j] = x.data[r * d + j] * (T::ONE + scale[j]) + shift[j];
        }
    }
    out
}

/// Backward of [`modulate`]: accumulates into `dmods`, returns `dL/dx`.
pub fn add_modulated_grads<T: Real>(
    x: &Mat<T>,
    mods: &Mat<T>,
    dy: &Mat<T>,
    shift_chunk: usize,
    scale_chunk: usize,
    tokens: usize,
    dmods: &mut Mat<T>,
) -> Mat<T> {
    let d = x.cols;
    let mut dx = Mat::zeros(x.rows, d);
    for r in 0..x.rows {
        let b = r / tokens;
        for j in 0..d {
            let gy = dy.data[r * d + j];
            let scale = mods.data[b * mods.cols + scale_chunk * d + j];
            dx.data[r * d + j] = gy * (T::ONE + scale);
            dmods.data[b * mods.cols + scale_chunk * d + j] += gy * x.data[r * d + j];
            dmods.data[b * mods.cols + shift_chunk * d + j] += gy;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu_forward<T: Real>(x: &Mat<T>) -> Mat<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh()))
            .collect(),
    }
}

pub fn gelu_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let a3 = T::from_f64(3.0 * 0.044715);
    let half = T::from_f64(0.5);
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| {
                let th = (c * (v + a * v * v * v)).tanh();
                let d = half * (T::ONE + th)
                    + half * v * (T::ONE - th * th) * c * (T::ONE + a3 * v * v);
                g * d
            })
            .collect(),
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

pub fn silu_forward<T: Real>(x: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

pub fn silu_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * (s + v * s * (T::ONE - s))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_vec(rows, cols, super::super::normal_init(rng, rows * cols, 1.0))
    }

    /// Scalar loss `sum(w .* f(x))` for a fixed random `w`, differentiated
    /// numerically with central differences.
    fn check_input_grad(
        f: impl Fn(&Mat<f64>) -> Mat<f64>,
        df: impl Fn(&Mat<f64>, &Mat<f64>) -> Mat<f64>,
        x: &Mat<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let y = f(x);
        let w = rand_mat(rng, y.rows, y.cols);
        let analytic = df(x, &w);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let lp: f64 = f(&xp).data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (numeric - analytic.data[i]).abs() < 1e-6 * (1.0 + numeric.abs()),
                "index {i}: numeric {numeric} analytic {}",
                analytic.data[i]
            );
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 5);
        check_input_grad(
            |x| layer_norm_forward(x).normalized,
            |x, w| layer_norm_backward(&layer_norm_forward(x), w),
            &x,
            &mut rng,
        );
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 4, 3);
        check_input_grad(gelu_forward, gelu_backward, &x, &mut rng);
        check_input_grad(silu_forward, silu_backward, &x, &mut rng);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 4, 3, LinearInit::Xavier);
        store.get_mut(lin.b.unwrap()).copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = rand_mat(&mut rng, 5, 4);
        check_input_grad(
            |x| lin.forward(&store, x),
            |x, w| {
                let mut g = store.zero_grads();
                lin.backward(&store, &mut g, x, w)
            },
            &x,
            &mut rng,
        );

        // weight gradient
        let w = rand_mat(&mut rng, 5, 3);
        let mut g = store.zero_grads();
        lin.backward(&store, &mut g, &x, &w);
        let h = 1e-6;
        for i in 0..12 {
            let mut sp = store.clone();
            sp.get_mut(lin.w)[i] += h;
            let mut sm = store.clone();
            sm.get_mut(lin.w)[i] -= h;
            let l = |s: &ParamStore<f64>| -> f64 {
                lin.forward(s, &x).data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
            };
            let numeric = (l(&sp) - l(&sm)) / (2.0 * h);
            assert!((numeric - g.get(lin.w)[i]).abs() < 1e-6);
        }
        let colsum: Vec<f64> = (0..3)
            .map(|j| (0..5).map(|r| w.data[r * 3 + j]).sum())
            .collect();
        for j in 0..3 {
            assert!((g.get(lin.b.unwrap())[j] - colsum[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn modulate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 6, 2); // 2 samples x 3 tokens
        let mods = rand_mat(&mut rng, 2, 4);
        check_input_grad(
            |x| modulate(x, &mods, 0, 1, 3),
            |x, w| {
                let mut dm = Mat::zeros(2, 4);
                add_modulated_grads(x, &mods, w, 0, 1, 3, &mut dm)
            },
            &x,
            &mut rng,
        );
        check_input_grad(
            |m| modulate(&x, m, 1, 0, 3),
            |m, w| {
                let mut dm = Mat::zeros(2, 4);
                add_modulated_grads(&x, m, w, 1, 0, 3, &mut dm);
                dm
            },
            &mods,
            &mut rng,
        );
    }
}
