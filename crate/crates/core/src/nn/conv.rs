//! 2-D convolution via im2col. Feature maps are stored one sample per row of
//! a [`Mat`], channel-major (`C*H*W` columns).

use rand_chacha::ChaCha8Rng;

use super::{normal_init, Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Mat, Real, View, ViewMut};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<T> {
    /// One im2col buffer per sample, `C*k*k x OH*OW`.
    cols: Vec<Vec<T>>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-normal initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            normal_init(rng, out_channels * fan_in, (2.0 / fan_in as f64).sqrt()),
        );
        let b = store.add(
            format!("{name}.bias"),
            vec![out_channels],
            vec![0.0; out_channels],
        );
        Conv2d {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let l = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < h
                                && (ix as usize) < w
                            {
                                x[(c * h + iy as usize) * w + ix as usize]
                            } else {
                                T::ZERO
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let l = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            dx[(c * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Mat<T>,
        h: usize,
        w: usize,
    ) -> (Mat<T>, ConvCache<T>) {
        assert_eq!(x.cols, self.in_channels * h * w, "conv input shape");
        let (oh, ow) = self.out_hw(h, w);
        let l = oh * ow;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let weight = View::new(p.get(self.w), self.out_channels, ckk);
        let bias = p.get(self.b);
        let mut y = Mat::zeros(x.rows, self.out_channels * l);
        let mut all_cols = Vec::with_capacity(x.rows);
        for s in 0..x.rows {
            let mut cols = vec![T::ZERO; ckk * l];
            self.im2col(x.row(s), h, w, &mut cols);
            let out = y.row_mut(s);
            for (oc, chunk) in out.chunks_exact_mut(l).enumerate() {
                chunk.fill(bias[oc]);
            }
            gemm(
                T::ONE,
                weight,
                View::new(&cols, ckk, l),
                T::ONE,
                ViewMut::new(out, self.out_channels, l),
            );
            all_cols.push(cols);
        }
        (
            y,
            ConvCache {
                cols: all_cols,
                in_hw: (h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &ConvCache<T>,
        dy: &Mat<T>,
    ) -> Mat<T> {
        let (h, w) = cache.in_hw;
        let l = cache.out_hw.0 * cache.out_hw.1;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let weight = View::new(p.get(self.w), self.out_channels, ckk);
        let mut dx = Mat::zeros(dy.rows, self.in_channels * h * w);
        let mut dcols = vec![T::ZERO; ckk * l];
        for s in 0..dy.rows {
            let dys = View::new(dy.row(s), self.out_channels, l);
            gemm(
                T::ONE,
                dys,
                View::new(&cache.cols[s], ckk, l).t(),
                T::ONE,
                ViewMut::new(g.get_mut(self.w), self.out_channels, ckk),
            );
            let db = g.get_mut(self.b);
            for (oc, chunk) in dy.row(s).chunks_exact(l).enumerate() {
                let mut acc = T::ZERO;
                for &v in chunk {
                    acc += v;
                }
                db[oc] += acc;
            }
            gemm(
                T::ONE,
                weight.t(),
                dys,
                T::ZERO,
                ViewMut::new(&mut dcols, ckk, l),
            );
            self.col2im(&dcols, h, w, dx.row_mut(s));
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling of `channels` maps of size `h x w`.
pub fn upsample2x<T: Real>(x: &Mat<T>, channels: usize, h: usize, w: usize) -> Mat<T> {
    let mut y = Mat::zeros(x.rows, channels * 4 * h * w);
    for s in 0..x.rows {
        let src = x.row(s);
        let dst = y.row_mut(s);
        for c in 0..channels {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(c * 2 * h + yy) * 2 * w + xx] = src[(c * h + yy / 2) * w + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(dy: &Mat<T>, channels: usize, h: usize, w: usize) -> Mat<T> {
    let mut dx = Mat::zeros(dy.rows, channels * h * w);
    for s in 0..dy.rows {
        let src = dy.row(s);
        let dst = dx.row_mut(s);
        for c in 0..channels {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(c * h + yy / 2) * w + xx / 2] += src[(c * 2 * h + yy) * 2 * w + xx];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv2d, p: &ParamStore<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = conv.out_hw(h, w);
        let k = conv.kernel;
        let wt = p.get(conv.w);
        let b = p.get(conv.b);
        let mut out = vec![0.0; conv.out_channels * oh * ow];
        for oc in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt[((oc * conv.in_channels + c) * k + ky) * k + kx]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn strided_conv_matches_naive_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, 2, 1);
        store.get_mut(conv.b).copy_from_slice(&[0.1, 0.2, -0.3]);
        let (h, w) = (6, 6);
        let x = Mat::from_vec(2, 2 * h * w, normal_init(&mut rng, 2 * 2 * h * w, 1.0));
        let (y, cache) = conv.forward(&store, &x, h, w);
        assert_eq!(conv.out_hw(h, w), (3, 3));
        for s in 0..2 {
            let expect = naive(&conv, &store, x.row(s), h, w);
            for (a, b) in y.row(s).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let wts = Mat::from_vec(y.rows, y.cols, normal_init(&mut rng, y.data.len(), 1.0));
        let mut g = store.zero_grads();
        let dx = conv.backward(&store, &mut g, &cache, &wts);
        let loss = |st: &ParamStore<f64>, x: &Mat<f64>| -> f64 {
            let (y, _) = conv.forward(st, x, h, w);
            y.data.iter().zip(&wts.data).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-7);
        }
        for i in (0..store.get(conv.w).len()).step_by(5) {
            let mut sp = store.clone();
            sp.get_mut(conv.w)[i] += eps;
            let mut sm = store.clone();
            sm.get_mut(conv.w)[i] -= eps;
            let num = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * eps);
            assert!((num - g.get(conv.w)[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let x = Mat::from_vec(1, 2 * 2 * 3, (0..12).map(|v| v as f64).collect());
        let y = upsample2x(&x, 2, 2, 3);
        assert_eq!(y.cols, 2 * 4 * 6);
        assert_eq!(y.data[0], 0.0);
        assert_eq!(y.data[1], 0.0);
        assert_eq!(y.data[2], 1.0);
        // <up(x), y> == <x, up^T(y)>
        let dy = Mat::from_vec(1, 48, (0..48).map(|v| (v as f64).cos()).collect());
        let dx = upsample2x_backward(&dy, 2, 2, 3);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
