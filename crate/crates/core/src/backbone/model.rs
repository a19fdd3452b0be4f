use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{Block, BlockCache};
use super::embed::{patchify, positional_table, timestep_features, unpatchify, TIME_FREQ_DIM};
use super::{ConditioningBundle, ControlInput, ModelConfig, YInput};
use crate::error::{shape_err, Error, Result};
use crate::flow::FlowTimestep;
use crate::grid::LatentGrid;
use crate::nn::{
    add_modulated_grads, layer_norm_backward, layer_norm_forward, modulate, silu_backward,
    silu_forward, Grads, Linear, LinearInit, NormCache, ParamStore,
};
use crate::tensor::{Mat, Real};

#[derive(Clone, Debug)]
struct Layers {
    patch_embed: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<Block>,
    control_in: Linear,
    control_blocks: Vec<Block>,
    control_out: Vec<Linear>,
    final_modulation: Linear,
    final_proj: Linear,
}

impl Layers {
    fn build<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let d = config.hidden_dim;
        let pd = config.patch_dim();
        let patch_embed = Linear::new(store, rng, "patch_embed", pd, d, LinearInit::Xavier);
        let time_fc1 = Linear::new(store, rng, "time_embed.fc1", TIME_FREQ_DIM, d, LinearInit::Xavier);
        let time_fc2 = Linear::new(store, rng, "time_embed.fc2", d, d, LinearInit::Xavier);
        let blocks: Vec<Block> = (0..config.depth)
            .map(|i| Block::new(store, rng, &format!("blocks.{i}"), d, config.heads))
            .collect();
        let control_in = Linear::new(store, rng, "control.input_proj", d, d, LinearInit::Xavier);
        let control_blocks = blocks[..config.control_depth]
            .iter()
            .enumerate()
            .map(|(i, b)| Block::duplicate(store, b, &format!("control.blocks.{i}")))
            .collect();
        let control_out = (0..config.control_depth)
            .map(|i| {
                Linear::new(store, rng, &format!("control.output_proj.{i}"), d, d, LinearInit::Zero)
            })
            .collect();
        let final_modulation =
            Linear::new(store, rng, "final.modulation", d, 2 * d, LinearInit::Zero);
        let final_proj = Linear::new(store, rng, "final.proj", d, pd, LinearInit::Xavier);
        Layers {
            patch_embed,
            time_fc1,
            time_fc2,
            blocks,
            control_in,
            control_blocks,
            control_out,
            final_modulation,
            final_proj,
        }
    }
}

/// Batched network inputs in patch form.
#[derive(Clone, Debug)]
pub struct BatchInputs<T> {
    pub batch: usize,
    /// `B*N x patch_dim`
    pub x: Mat<T>,
    pub t: Vec<f64>,
    /// `B*N x patch_dim`; null `y` is an all-zeros latent.
    pub y: Mat<T>,
    /// `B*N x patch_dim`, or `None` when every sample's control is absent.
    pub control: Option<Mat<T>>,
    pub control_mask: Vec<bool>,
}

impl<T: Real> BatchInputs<T> {
    pub fn new(
        config: &ModelConfig,
        x_t: &[&LatentGrid],
        t: &[FlowTimestep],
        bundles: &[&ConditioningBundle],
    ) -> Result<Self> {
        let batch = x_t.len();
        if batch == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        if t.len() != batch || bundles.len() != batch {
            return shape_err(format!(
                "batch lengths differ: x {batch}, t {}, bundles {}",
                t.len(),
                bundles.len()
            ));
        }
        let n = config.tokens();
        let pd = config.patch_dim();
        let (c, s, _) = config.latent_shape();
        let check = |g: &LatentGrid, what: &str| -> Result<()> {
            if g.shape() != config.latent_shape() {
                return shape_err(format!(
                    "{what} latent {:?} does not match model {:?}",
                    g.shape(),
                    config.latent_shape()
                ));
            }
            Ok(())
        };
        let mut x = Mat::zeros(batch * n, pd);
        let mut y = Mat::zeros(batch * n, pd);
        let mut control = Mat::zeros(batch * n, pd);
        let mut control_mask = Vec::with_capacity(batch);
        let copy_into = |dst: &mut Mat<T>, b: usize, g: &LatentGrid| {
            let tokens: Mat<T> = patchify(&g.data, c, s, config.patch_size);
            dst.data[b * n * pd..(b + 1) * n * pd].copy_from_slice(&tokens.data);
        };
        for b in 0..batch {
            check(x_t[b], "x_t")?;
            copy_into(&mut x, b, x_t[b]);
            bundles[b].check_variant(config.variant)?;
            if let YInput::Latent(g) = &bundles[b].y {
                check(g, "y")?;
                copy_into(&mut y, b, g);
            }
            match &bundles[b].control {
                ControlInput::Latent(g) => {
                    check(g, "control")?;
                    copy_into(&mut control, b, g);
                    control_mask.push(true);
                }
                ControlInput::Absent => control_mask.push(false),
            }
        }
        let any_control = control_mask.iter().any(|&m| m);
        Ok(BatchInputs {
            batch,
            x,
            t: t.iter().map(|t| t.value()).collect(),
            y,
            control: any_control.then_some(control),
            control_mask,
        })
    }
}

struct ControlCache<T> {
    tokens: Mat<T>,
    streams: Vec<Mat<T>>,
    blocks: Vec<BlockCache<T>>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T> {
    tfeat: Mat<T>,
    t1: Mat<T>,
    t1a: Mat<T>,
    temb: Mat<T>,
    cond: Mat<T>,
    y_tokens: Mat<T>,
    blocks: Vec<BlockCache<T>>,
    control: Option<ControlCache<T>>,
    final_mods: Mat<T>,
    final_ln: NormCache<T>,
    final_in: Mat<T>,
}

/// Velocity network with its parameters.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Layers,
    positions: Mat<T>,
}

impl<T: Real> Backbone<T> {
    /// Fresh network; control output projections start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Layers::build(&config, &mut store, &mut rng);
        let positions = positional_table(config.latent_size / config.patch_size, config.hidden_dim);
        Ok(Backbone {
            config,
            params: store,
            layers,
            positions,
        })
    }

    /// Rebuilds a network from a parameter store, checking that names and
    /// shapes match what `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for id in net.params.ids() {
            let name = net.params.name(id);
            if params.name(id) != name || params.shape(id) != net.params.shape(id) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match stored {} {:?}",
                    net.params.shape(id),
                    params.name(id),
                    params.shape(id)
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            positions: self.positions.cast(),
        }
    }

    /// Shared linear projection of patches, without positions.
    pub fn patch_embed(&self, grid: &LatentGrid) -> Result<Mat<T>> {
        if grid.shape() != self.config.latent_shape() {
            return shape_err(format!(
                "latent {:?} does not match model {:?}",
                grid.shape(),
                self.config.latent_shape()
            ));
        }
        let patches: Mat<T> = patchify(
            &grid.data,
            self.config.latent_channels,
            self.config.latent_size,
            self.config.patch_size,
        );
        Ok(self.layers.patch_embed.forward(&self.params, &patches))
    }

    /// Timestep embedding vector of length `hidden_dim`.
    pub fn time_embed(&self, t: FlowTimestep) -> Vec<T> {
        let f = timestep_features::<T>(&[t.value()]);
        let h = silu_forward(&self.layers.time_fc1.forward(&self.params, &f));
        self.layers.time_fc2.forward(&self.params, &h).data
    }

    fn embed_tokens(&self, patches: &Mat<T>, batch: usize) -> Mat<T> {
        let mut tok = self.layers.patch_embed.forward(&self.params, patches);
        let n = self.config.tokens();
        let d = self.config.hidden_dim;
        for b in 0..batch {
            for i in 0..n {
                let row = &mut tok.data[(b * n + i) * d..(b * n + i + 1) * d];
                for (v, p) in row.iter_mut().zip(self.positions.row(i)) {
                    *v += *p;
                }
            }
        }
        tok
    }

    /// Full forward pass; output is `B*N x patch_dim`.
    pub fn forward_batch(&self, inputs: &BatchInputs<T>) -> (Mat<T>, ForwardCache<T>) {
        let p = &self.params;
        let l = &self.layers;
        let batch = inputs.batch;
        let n = self.config.tokens();

        let tfeat = timestep_features::<T>(&inputs.t);
        let t1 = l.time_fc1.forward(p, &tfeat);
        let t1a = silu_forward(&t1);
        let temb = l.time_fc2.forward(p, &t1a);
        let cond = silu_forward(&temb);

        let y_tokens = self.embed_tokens(&inputs.y, batch);
        let h0 = self.embed_tokens(&inputs.x, batch);

        let mut control = inputs.control.as_ref().map(|ctrl| {
            let tokens = self.embed_tokens(ctrl, batch);
            let mut c0 = l.control_in.forward(p, &tokens);
            c0.add_assign(&h0);
            ControlCache {
                tokens,
                streams: vec![c0],
                blocks: Vec::new(),
            }
        });

        let mut hidden = h0.clone();
        let mut caches = Vec::with_capacity(l.blocks.len());
        for (i, block) in l.blocks.iter().enumerate() {
            let (mut h, cache) = block.forward(p, &hidden, &cond, &y_tokens);
            if let (Some(cc), true) = (control.as_mut(), i < l.control_blocks.len()) {
                let (c_next, ccache) =
                    l.control_blocks[i].forward(p, cc.streams.last().unwrap(), &cond, &y_tokens);
                let mut injected = l.control_out[i].forward(p, &c_next);
                zero_masked_rows(&mut injected, &inputs.control_mask, n);
                h.add_assign(&injected);
                cc.streams.push(c_next);
                cc.blocks.push(ccache);
            }
            hidden = h;
            caches.push(cache);
        }

        let final_mods = l.final_modulation.forward(p, &cond);
        let final_ln = layer_norm_forward(&hidden);
        let final_in = modulate(&final_ln.normalized, &final_mods, 0, 1, n);
        let out = l.final_proj.forward(p, &final_in);
        (
            out,
            ForwardCache {
                tfeat,
                t1,
                t1a,
                temb,
                cond,
                y_tokens,
                blocks: caches,
                control,
                final_mods,
                final_ln,
                final_in,
            },
        )
    }

    /// Parameter gradients of a scalar loss given `dL/dout`.
    pub fn backward(&self, inputs: &BatchInputs<T>, cache: &ForwardCache<T>, dout: &Mat<T>) -> Grads<T> {
        let p = &self.params;
        let l = &self.layers;
        let n = self.config.tokens();
        let mut g = p.zero_grads();

        let dfinal_in = l.final_proj.backward(p, &mut g, &cache.final_in, dout);
        let mut dfinal_mods = Mat::zeros(cache.final_mods.rows, cache.final_mods.cols);
        let dln = add_modulated_grads(
            &cache.final_ln.normalized,
            &cache.final_mods,
            &dfinal_in,
            0,
            1,
            n,
            &mut dfinal_mods,
        );
        let mut dh = layer_norm_backward(&cache.final_ln, &dln);
        let mut dcond = l
            .final_modulation
            .backward(p, &mut g, &cache.cond, &dfinal_mods);
        let mut dy_tokens = Mat::zeros(cache.y_tokens.rows, cache.y_tokens.cols);
        // gradient w.r.t. the control stream entering the block being unwound
        let mut dc: Option<Mat<T>> = None;

        for i in (0..l.blocks.len()).rev() {
            if let (Some(cc), true) = (cache.control.as_ref(), i < l.control_blocks.len()) {
                let mut dinj = dh.clone();
                zero_masked_rows(&mut dinj, &inputs.control_mask, n);
                let mut dc_next = l.control_out[i].backward(p, &mut g, &cc.streams[i + 1], &dinj);
                if let Some(later) = dc.take() {
                    dc_next.add_assign(&later);
                }
                let bg = l.control_blocks[i].backward(
                    p,
                    &mut g,
                    &cc.blocks[i],
                    &cache.cond,
                    &cache.y_tokens,
                    &dc_next,
                );
                dcond.add_assign(&bg.dcond);
                dy_tokens.add_assign(&bg.dy_tokens);
                dc = Some(bg.dh);
            }
            let bg = l.blocks[i].backward(
                p,
                &mut g,
                &cache.blocks[i],
                &cache.cond,
                &cache.y_tokens,
                &dh,
            );
            dcond.add_assign(&bg.dcond);
            dy_tokens.add_assign(&bg.dy_tokens);
            dh = bg.dh;
        }

        if let (Some(cc), Some(dc0)) = (cache.control.as_ref(), dc) {
            // c0 = h0 + control_in(control_tokens)
            dh.add_assign(&dc0);
            let dtok = l.control_in.backward(p, &mut g, &cc.tokens, &dc0);
            l.patch_embed
                .backward_params(&mut g, inputs.control.as_ref().unwrap(), &dtok);
        }
        l.patch_embed.backward_params(&mut g, &inputs.x, &dh);
        l.patch_embed.backward_params(&mut g, &inputs.y, &dy_tokens);

        let dtemb = silu_backward(&cache.temb, &dcond);
        let dt1a = l.time_fc2.backward(p, &mut g, &cache.t1a, &dtemb);
        let dt1 = silu_backward(&cache.t1, &dt1a);
        l.time_fc1.backward_params(&mut g, &cache.tfeat, &dt1);
        g
    }

    /// Mean-squared error against targets in patch form and its gradients.
    pub fn loss_and_grads(&self, inputs: &BatchInputs<T>, targets: &Mat<T>) -> (f64, Grads<T>) {
        let (out, cache) = self.forward_batch(inputs);
        assert_eq!((out.rows, out.cols), (targets.rows, targets.cols));
        let count = out.data.len() as f64;
        let mut loss = 0.0;
        let mut dout = Mat::zeros(out.rows, out.cols);
        let scale = T::from_f64(2.0 / count);
        for ((d, &o), &t) in dout.data.iter_mut().zip(&out.data).zip(&targets.data) {
            let diff = o - t;
            loss += diff.to_f64() * diff.to_f64();
            *d = diff * scale;
        }
        let grads = self.backward(inputs, &cache, &dout);
        (loss / count, grads)
    }

    /// Patch-form targets for a batch of latents.
    pub fn patchify_batch(&self, grids: &[&LatentGrid]) -> Mat<T> {
        let n = self.config.tokens();
        let pd = self.config.patch_dim();
        let mut out = Mat::zeros(grids.len() * n, pd);
        for (b, g) in grids.iter().enumerate() {
            let tok: Mat<T> = patchify(
                &g.data,
                self.config.latent_channels,
                self.config.latent_size,
                self.config.patch_size,
            );
            out.data[b * n * pd..(b + 1) * n * pd].copy_from_slice(&tok.data);
        }
        out
    }

    /// Predicted velocities for a batch of latents.
    pub fn predict(
        &self,
        x_t: &[&LatentGrid],
        t: &[FlowTimestep],
        bundles: &[&ConditioningBundle],
    ) -> Result<Vec<LatentGrid>> {
        let inputs = BatchInputs::new(&self.config, x_t, t, bundles)?;
        let (out, _) = self.forward_batch(&inputs);
        let n = self.config.tokens();
        let (c, s, _) = self.config.latent_shape();
        (0..inputs.batch)
            .map(|b| {
                LatentGrid::new(c, s, s, unpatchify(&out, b * n, c, s, self.config.patch_size))
            })
            .collect()
    }

    /// Predicted velocity for one latent.
    pub fn forward(
        &self,
        x_t: &LatentGrid,
        t: FlowTimestep,
        bundle: &ConditioningBundle,
    ) -> Result<LatentGrid> {
        Ok(self.predict(&[x_t], &[t], &[bundle])?.remove(0))
    }
}

fn zero_masked_rows<T: Real>(m: &mut Mat<T>, mask: &[bool], tokens: usize) {
    let cols = m.cols;
    for (b, &keep) in mask.iter().enumerate() {
        if !keep {
            m.data[b * tokens * cols..(b + 1) * tokens * cols].fill(T::ZERO);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Variant, YInput};
    use crate::flow::gaussian_like;

    fn toy(variant: Variant) -> ModelConfig {
        ModelConfig {
            latent_channels: 1,
            latent_size: 4,
            patch_size: 2,
            hidden_dim: 8,
            depth: 2,
            heads: 2,
            control_depth: 1,
            variant,
            p_drop: 0.1,
        }
    }

    fn latent(seed: u64, cfg: &ModelConfig) -> LatentGrid {
        gaussian_like(cfg.latent_shape(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn output_shape_matches_input() {
        for cfg in [
            toy(Variant::Primary),
            ModelConfig {
                latent_channels: 2,
                latent_size: 8,
                patch_size: 4,
                hidden_dim: 16,
                depth: 3,
                heads: 4,
                control_depth: 3,
                variant: Variant::Bis,
                p_drop: 0.0,
            },
        ] {
            let net = Backbone::<f32>::new(cfg.clone(), 1).unwrap();
            let x = latent(2, &cfg);
            let out = net
                .forward(&x, FlowTimestep::new(0.4).unwrap(), &ConditioningBundle::from_source(&x))
                .unwrap();
            assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn patch_embed_token_count_and_oracle() {
        let cfg = ModelConfig {
            latent_size: 16,
            patch_size: 2,
            hidden_dim: 8,
            heads: 2,
            depth: 1,
            control_depth: 1,
            ..ModelConfig::default()
        };
        let net = Backbone::<f64>::new(cfg.clone(), 3).unwrap();
        let x = latent(4, &cfg);
        let tokens = net.patch_embed(&x).unwrap();
        assert_eq!(tokens.rows, 64);

        // brute force: flatten patch i, multiply by W, add b
        let w = net.params.get(net.params.find("patch_embed.weight").unwrap());
        let bias = net.params.get(net.params.find("patch_embed.bias").unwrap());
        for i in [0usize, 9, 63] {
            let (gy, gx) = (i / 8, i % 8);
            let mut flat = Vec::new();
            for py in 0..2 {
                for px in 0..2 {
                    flat.push(x.data[(gy * 2 + py) * 16 + gx * 2 + px] as f64);
                }
            }
            for o in 0..8 {
                let expect: f64 =
                    bias[o] + (0..4).map(|k| w[o * 4 + k] * flat[k]).sum::<f64>();
                assert!((tokens.row(i)[o] - expect).abs() < 1e-12);
            }
        }

        let zeros = LatentGrid::zeros(1, 16, 16);
        let z = net.patch_embed(&zeros).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(net.patch_embed(&LatentGrid::zeros(1, 8, 8)).is_err());
    }

    #[test]
    fn time_embed_deterministic_and_smooth() {
        let cfg = toy(Variant::Primary);
        let net = Backbone::<f64>::new(cfg.clone(), 5).unwrap();
        let a = net.time_embed(FlowTimestep::new(0.3).unwrap());
        let b = net.time_embed(FlowTimestep::new(0.3).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.hidden_dim);

        // Lipschitz estimate from a coarse finite-difference sweep, applied to
        // a step ten times smaller than the sweep spacing.
        let h = 1e-4;
        let mut lip = 0.0f64;
        for k in 0..100 {
            let t = 0.25 + k as f64 * h;
            let e0 = net.time_embed(FlowTimestep::new(t).unwrap());
            let e1 = net.time_embed(FlowTimestep::new(t + h).unwrap());
            let d = e0.iter().zip(&e1).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            lip = lip.max(d / h);
        }
        let c = net.time_embed(FlowTimestep::new(0.30001).unwrap());
        let diff = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
        assert!(diff <= 2.0 * lip * 1e-5, "diff {diff} lip {lip}");
    }

    #[test]
    fn fresh_control_branch_is_inert() {
        for variant in [Variant::Primary, Variant::Bis] {
            let cfg = toy(variant);
            let net = Backbone::<f32>::new(cfg.clone(), 6).unwrap();
            let x = latent(7, &cfg);
            let y = latent(8, &cfg);
            let t = FlowTimestep::new(0.6).unwrap();
            let with = |c: LatentGrid| ConditioningBundle {
                y: YInput::Latent(y.clone()),
                control: ControlInput::Latent(c),
            };
            let a = net.forward(&x, t, &with(latent(9, &cfg))).unwrap();
            let b = net.forward(&x, t, &with(latent(10, &cfg))).unwrap();
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn absent_control_skips_branch() {
        let cfg = toy(Variant::Bis);
        let mut net = Backbone::<f32>::new(cfg.clone(), 11).unwrap();
        let x = latent(12, &cfg);
        let t = FlowTimestep::new(0.5).unwrap();
        let absent = ConditioningBundle {
            y: YInput::Zero,
            control: ControlInput::Absent,
        };
        let zero_ctrl = ConditioningBundle {
            y: YInput::Zero,
            control: ControlInput::Latent(LatentGrid::zeros_like(&x)),
        };
        // at init both readings agree
        assert_eq!(
            net.forward(&x, t, &absent).unwrap(),
            net.forward(&x, t, &zero_ctrl).unwrap()
        );
        // once the branch is live they differ, and absent equals the branch
        // being removed entirely
        net.params
            .randomize(&mut ChaCha8Rng::seed_from_u64(13), 0.3);
        let out_absent = net.forward(&x, t, &absent).unwrap();
        assert_ne!(out_absent, net.forward(&x, t, &zero_ctrl).unwrap());
        let mut no_branch = net.clone();
        for i in 0..cfg.control_depth {
            let id = no_branch.layers.control_out[i].w;
            no_branch.params.get_mut(id).fill(0.0);
            let id = no_branch.layers.control_out[i].b.unwrap();
            no_branch.params.get_mut(id).fill(0.0);
        }
        assert_eq!(
            out_absent,
            no_branch.forward(&x, t, &zero_ctrl).unwrap()
        );
    }

    #[test]
    fn zero_y_is_zero_latent() {
        let cfg = toy(Variant::Primary);
        let mut net = Backbone::<f32>::new(cfg.clone(), 14).unwrap();
        net.params.randomize(&mut ChaCha8Rng::seed_from_u64(15), 0.3);
        let x = latent(16, &cfg);
        let c = latent(17, &cfg);
        let t = FlowTimestep::new(0.2).unwrap();
        let a = ConditioningBundle {
            y: YInput::Zero,
            control: ControlInput::Latent(c.clone()),
        };
        let b = ConditioningBundle {
            y: YInput::Latent(LatentGrid::zeros_like(&x)),
            control: ControlInput::Latent(c),
        };
        assert_eq!(net.forward(&x, t, &a).unwrap(), net.forward(&x, t, &b).unwrap());
    }

    #[test]
    fn primary_rejects_absent_control() {
        let cfg = toy(Variant::Primary);
        let net = Backbone::<f32>::new(cfg.clone(), 18).unwrap();
        let x = latent(19, &cfg);
        let b = ConditioningBundle {
            y: YInput::Zero,
            control: ControlInput::Absent,
        };
        assert!(matches!(
            net.forward(&x, FlowTimestep::new(0.5).unwrap(), &b),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            net.forward(
                &LatentGrid::zeros(1, 8, 8),
                FlowTimestep::new(0.5).unwrap(),
                &ConditioningBundle::from_source(&x)
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn shared_patch_projection() {
        let cfg = toy(Variant::Primary);
        let mut net = Backbone::<f64>::new(cfg.clone(), 20).unwrap();
        let g = latent(21, &cfg);
        let before = net.patch_embed(&g).unwrap();
        let w = net.params.find("patch_embed.weight").unwrap();
        net.params.get_mut(w)[0] += 0.5;
        let after = net.patch_embed(&g).unwrap();
        assert_ne!(before, after);
        // only one patch projection exists; x, y and control all read it
        let names: Vec<_> = net
            .params
            .ids()
            .map(|id| net.params.name(id).to_string())
            .filter(|n| n.contains("patch_embed"))
            .collect();
        assert_eq!(names, vec!["patch_embed.weight", "patch_embed.bias"]);

        // perturbing it moves the output through each input individually
        let x = latent(22, &cfg);
        let t = FlowTimestep::new(0.5).unwrap();
        net.params.randomize(&mut ChaCha8Rng::seed_from_u64(23), 0.3);
        let base = ConditioningBundle::from_source(&g);
        let out = |n: &Backbone<f64>, x: &LatentGrid, b: &ConditioningBundle| {
            n.cast::<f32>().forward(x, t, b).unwrap()
        };
        let mut perturbed = net.clone();
        perturbed.params.get_mut(w)[1] += 0.1;
        for bundle in [
            base.clone(),
            ConditioningBundle {
                y: YInput::Zero,
                control: base.control.clone(),
            },
        ] {
            assert_ne!(out(&net, &x, &bundle), out(&perturbed, &x, &bundle));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (variant, mask) in [
            (Variant::Primary, [true, true]),
            (Variant::Bis, [true, false]),
        ] {
            let cfg = toy(variant);
            let mut net = Backbone::<f64>::new(cfg.clone(), 30).unwrap();
            net.params.randomize(&mut ChaCha8Rng::seed_from_u64(31), 0.4);
            let xs = [latent(32, &cfg), latent(33, &cfg)];
            let ys = [latent(34, &cfg), latent(35, &cfg)];
            let bundles: Vec<_> = (0..2)
                .map(|b| ConditioningBundle {
                    y: if b == 0 { YInput::Latent(ys[b].clone()) } else { YInput::Zero },
                    control: if mask[b] {
                        ControlInput::Latent(ys[1 - b].clone())
                    } else {
                        ControlInput::Absent
                    },
                })
                .collect();
            let ts = [FlowTimestep::new(0.3).unwrap(), FlowTimestep::new(0.8).unwrap()];
            let inputs = BatchInputs::<f64>::new(
                &cfg,
                &[&xs[0], &xs[1]],
                &ts,
                &[&bundles[0], &bundles[1]],
            )
            .unwrap();
            let targets = net.patchify_batch(&[&ys[1], &ys[0]]);
            let (_, grads) = net.loss_and_grads(&inputs, &targets);

            let loss_at = |n: &Backbone<f64>| {
                let (out, _) = n.forward_batch(&inputs);
                out.data
                    .iter()
                    .zip(&targets.data)
                    .map(|(o, t)| (o - t) * (o - t))
                    .sum::<f64>()
                    / out.data.len() as f64
            };
            let h = 1e-6;
            let mut rng = ChaCha8Rng::seed_from_u64(36);
            for id in net.params.ids().collect::<Vec<_>>() {
                let len = net.params.get(id).len();
                for _ in 0..3 {
                    let k = rand::Rng::random_range(&mut rng, 0..len);
                    let mut plus = net.clone();
                    plus.params.get_mut(id)[k] += h;
                    let mut minus = net.clone();
                    minus.params.get_mut(id)[k] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let an = grads.get(id)[k];
                    let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-7);
                    assert!(
                        err < 1e-3 || (fd - an).abs() < 1e-7,
                        "{variant:?} {} [{k}]: fd {fd} analytic {an}",
                        net.params.name(id)
                    );
                }
            }
        }
    }
}
