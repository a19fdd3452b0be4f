//! Transformer block: adaptive-norm self-attention, cross-attention to the
//! conditioning tokens, and a gated MLP.

use rand_chacha::ChaCha8Rng;

use crate::nn::{
    add_modulated_grads, attention_backward, attention_forward, gelu_backward, gelu_forward,
    layer_norm_backward, layer_norm_forward, modulate, AttentionCache, Grads, Linear, LinearInit,
    NormCache, ParamStore,
};
use crate::tensor::{Mat, Real};

// Column chunks of the per-sample modulation vector.
const SHIFT_ATTN: usize = 0;
const SCALE_ATTN: usize = 1;
const GATE_ATTN: usize = 2;
const SHIFT_MLP: usize = 3;
const SCALE_MLP: usize = 4;
const GATE_MLP: usize = 5;

#[derive(Clone, Debug)]
pub struct Block {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    cross_q: Linear,
    cross_kv: Linear,
    cross_proj: Linear,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

pub struct BlockCache<T> {
    mods: Mat<T>,
    ln1: NormCache<T>,
    m1: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    att1: AttentionCache<T>,
    a1: Mat<T>,
    o1: Mat<T>,
    ln2: NormCache<T>,
    cq: Mat<T>,
    ck: Mat<T>,
    cv: Mat<T>,
    att2: AttentionCache<T>,
    a2: Mat<T>,
    ln3: NormCache<T>,
    m3: Mat<T>,
    u: Mat<T>,
    gu: Mat<T>,
    f: Mat<T>,
}

/// Gradients flowing out of a block.
pub struct BlockGrads<T> {
    pub dh: Mat<T>,
    pub dcond: Mat<T>,
    pub dy_tokens: Mat<T>,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        let mut lin = |n: &str, i: usize, o: usize, init: LinearInit| {
            Linear::new(store, rng, &format!("{name}.{n}"), i, o, init)
        };
        Block {
            modulation: lin("modulation", dim, 6 * dim, LinearInit::Zero),
            qkv: lin("attn.qkv", dim, 3 * dim, LinearInit::Xavier),
            proj: lin("attn.proj", dim, dim, LinearInit::Xavier),
            cross_q: lin("cross.q", dim, dim, LinearInit::Xavier),
            cross_kv: lin("cross.kv", dim, 2 * dim, LinearInit::Xavier),
            cross_proj: lin("cross.proj", dim, dim, LinearInit::Xavier),
            fc1: lin("mlp.fc1", dim, 4 * dim, LinearInit::Xavier),
            fc2: lin("mlp.fc2", 4 * dim, dim, LinearInit::Xavier),
            heads,
        }
    }

    /// Parameter-wise copy of `src` registered under `name`.
    pub fn duplicate<T: Real>(store: &mut ParamStore<T>, src: &Block, name: &str) -> Self {
        let mut dup = |l: &Linear, n: &str| Linear::duplicate(store, l, &format!("{name}.{n}"));
        Block {
            modulation: dup(&src.modulation, "modulation"),
            qkv: dup(&src.qkv, "attn.qkv"),
            proj: dup(&src.proj, "attn.proj"),
            cross_q: dup(&src.cross_q, "cross.q"),
            cross_kv: dup(&src.cross_kv, "cross.kv"),
            cross_proj: dup(&src.cross_proj, "cross.proj"),
            fc1: dup(&src.fc1, "mlp.fc1"),
            fc2: dup(&src.fc2, "mlp.fc2"),
            heads: src.heads,
        }
    }

    /// `h`: `B*N x d` hidden states; `cond`: `B x d` activated time
    /// embedding; `y_tokens`: `B*Ny x d` conditioning tokens.
    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        h: &Mat<T>,
        cond: &Mat<T>,
        y_tokens: &Mat<T>,
    ) -> (Mat<T>, BlockCache<T>) {
        let batch = cond.rows;
        let n = h.rows / batch;
        let d = h.cols;
        let mods = self.modulation.forward(p, cond);

        let ln1 = layer_norm_forward(h);
        let m1 = modulate(&ln1.normalized, &mods, SHIFT_ATTN, SCALE_ATTN, n);
        let qkv = self.qkv.forward(p, &m1);
        let mut parts = split_cols(&qkv, 3).into_iter();
        let (q, k, v) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        let (a1, att1) = attention_forward(&q, &k, &v, batch, self.heads);
        let o1 = self.proj.forward(p, &a1);
        let h1 = gated_residual(h, &mods, GATE_ATTN, &o1, n);

        let ln2 = layer_norm_forward(&h1);
        let cq = self.cross_q.forward(p, &ln2.normalized);
        let ckv = self.cross_kv.forward(p, y_tokens);
        let mut parts = split_cols(&ckv, 2).into_iter();
        let (ck, cv) = (parts.next().unwrap(), parts.next().unwrap());
        let (a2, att2) = attention_forward(&cq, &ck, &cv, batch, self.heads);
        let o2 = self.cross_proj.forward(p, &a2);
        let h2 = h1.add(&o2);

        let ln3 = layer_norm_forward(&h2);
        let m3 = modulate(&ln3.normalized, &mods, SHIFT_MLP, SCALE_MLP, n);
        let u = self.fc1.forward(p, &m3);
        let gu = gelu_forward(&u);
        let f = self.fc2.forward(p, &gu);
        let out = gated_residual(&h2, &mods, GATE_MLP, &f, n);
        debug_assert_eq!(out.cols, d);

        (
            out,
            BlockCache {
                mods,
                ln1,
                m1,
                q,
                k,
                v,
                att1,
                a1,
                o1,
                ln2,
                cq,
                ck,
                cv,
                att2,
                a2,
                ln3,
                m3,
                u,
                gu,
                f,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &BlockCache<T>,
        cond: &Mat<T>,
        y_tokens: &Mat<T>,
        dout: &Mat<T>,
    ) -> BlockGrads<T> {
        let c = cache;
        let batch = cond.rows;
        let n = dout.rows / batch;
        let mut dmods = Mat::zeros(c.mods.rows, c.mods.cols);

        // out = h2 + gate_mlp * f
        let mut dh2 = dout.clone();
        let df = gated_residual_backward(dout, &c.mods, GATE_MLP, &c.f, n, &mut dmods);
        let dgu = self.fc2.backward(p, g, &c.gu, &df);
        let du = gelu_backward(&c.u, &dgu);
        let dm3 = self.fc1.backward(p, g, &c.m3, &du);
        let dln3 = add_modulated_grads(
            &c.ln3.normalized,
            &c.mods,
            &dm3,
            SHIFT_MLP,
            SCALE_MLP,
            n,
            &mut dmods,
        );
        dh2.add_assign(&layer_norm_backward(&c.ln3, &dln3));

        // h2 = h1 + cross(ln(h1), y)
        let mut dh1 = dh2.clone();
        let da2 = self.cross_proj.backward(p, g, &c.a2, &dh2);
        let (dcq, dck, dcv) = attention_backward(&c.cq, &c.ck, &c.cv, &c.att2, &da2);
        let dln2 = self.cross_q.backward(p, g, &c.ln2.normalized, &dcq);
        let dy_tokens = self
            .cross_kv
            .backward(p, g, y_tokens, &concat_cols(&[&dck, &dcv]));
        dh1.add_assign(&layer_norm_backward(&c.ln2, &dln2));

        // h1 = h + gate_attn * attn(modulate(ln(h)))
        let mut dh = dh1.clone();
        let do1 = gated_residual_backward(&dh1, &c.mods, GATE_ATTN, &c.o1, n, &mut dmods);
        let da1 = self.proj.backward(p, g, &c.a1, &do1);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.att1, &da1);
        let dm1 = self
            .qkv
            .backward(p, g, &c.m1, &concat_cols(&[&dq, &dk, &dv]));
        let dln1 = add_modulated_grads(
            &c.ln1.normalized,
            &c.mods,
            &dm1,
            SHIFT_ATTN,
            SCALE_ATTN,
            n,
            &mut dmods,
        );
        dh.add_assign(&layer_norm_backward(&c.ln1, &dln1));

        let dcond = self.modulation.backward(p, g, cond, &dmods);
        BlockGrads {
            dh,
            dcond,
            dy_tokens,
        }
    }
}

/// `h + gate_b * a` with the per-sample gate taken from `mods`.
fn gated_residual<T: Real>(h: &Mat<T>, mods: &Mat<T>, chunk: usize, a: &Mat<T>, n: usize) -> Mat<T> {
    let d = h.cols;
    let mut out = h.clone();
    for r in 0..h.rows {
        let gate = &mods.row(r / n)[chunk * d..(chunk + 1) * d];
        for j in 0..d {
            out.data[r * d + j] += gate[j] * a.data[r * d + j];
        }
    }
    out
}

/// Returns `dL/da` and accumulates the gate gradient into `dmods`.
fn gated_residual_backward<T: Real>(
    dout: &Mat<T>,
    mods: &Mat<T>,
    chunk: usize,
    a: &Mat<T>,
    n: usize,
    dmods: &mut Mat<T>,
) -> Mat<T> {
    let d = dout.cols;
    let mut da = Mat::zeros(dout.rows, d);
    for r in 0..dout.rows {
        let b = r / n;
        for j in 0..d {
            let gy = dout.data[r * d + j];
            da.data[r * d + j] = gy * mods.data[b * mods.cols + chunk * d + j];
            dmods.data[b * mods.cols + chunk * d + j] += gy * a.data[r * d + j];
        }
    }
    da
}

pub(crate) fn split_cols<T: Real>(m: &Mat<T>, parts: usize) -> Vec<Mat<T>> {
    let w = m.cols / parts;
    (0..parts)
        .map(|i| {
            let mut out = Mat::zeros(m.rows, w);
            for r in 0..m.rows {
                out.row_mut(r).copy_from_slice(&m.row(r)[i * w..(i + 1) * w]);
            }
            out
        })
        .collect()
}

pub(crate) fn concat_cols<T: Real>(parts: &[&Mat<T>]) -> Mat<T> {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|m| m.cols).sum();
    let mut out = Mat::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        for m in parts {
            out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            off += m.cols;
        }
    }
    out
}
