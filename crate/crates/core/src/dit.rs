//! Diffusion transformer over joint latents, with LoRA adapters on a frozen,
//! randomly initialized base.
//!
//! The base network (input projection, timestep MLP, blocks, output layer)
//! is drawn from a seed and frozen; it stands in for a pretrained video
//! model's mechanism, not its knowledge. Training touches only the adapters,
//! the condition towers, the fusion projections, and the null context
//! vector that replaces text conditioning.
//!
//! By default the network output is read as a restoration of the condition
//! latent: `x0_hat = cond + gate * delta`, where `gate = 1 - mask` at latent
//! resolution, and the returned velocity is `(x_t - x0_hat) / t`. Regions
//! the mask marks as preserved are therefore copied from the condition
//! exactly, which is the behaviour the base image-to-video prior provides
//! for its conditioning frame.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condtowers::{CondTowers, Fusion, FusionCache, FusionInputs, TowerCache, TowerConfig};
use crate::error::{Error, Result};
use crate::latentcodec::{lossless_time_slot, CodecConfig, CodecMode, TEMPORAL_STRIDE};
use crate::nn::{
    check_finite, gelu, gelu_grad, join, layer_norm, layer_norm_backward, silu, Attention, AttentionCache, Float,
    LayerNormCache, Linear, LinearCache, Module, Param,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputParam {
    /// The head output is the velocity.
    Velocity,
    /// The head output is a gated correction of the condition latent.
    AnchoredRestoration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub time_freq_dim: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Adapter rank of the output head.
    pub head_lora_rank: usize,
    /// Std of the frozen output head weights.
    pub head_init_std: f64,
    pub output: OutputParam,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            depth: 6,
            width: 256,
            heads: 4,
            patch: 2,
            time_freq_dim: 256,
            mlp_ratio: 4,
            lora_rank: 8,
            lora_alpha: 8.0,
            head_lora_rank: 8,
            head_init_std: 1e-3,
            output: OutputParam::AnchoredRestoration,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch == 0 {
            return Err(Error::config("depth, width, heads and patch must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.time_freq_dim < 2 || self.time_freq_dim % 2 != 0 {
            return Err(Error::config("time_freq_dim must be even and at least 2"));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::config("lora_alpha must be positive"));
        }
        Ok(())
    }
}

/// Architecture of the whole conditioned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dit: DitConfig,
    pub towers: TowerConfig,
    pub codec: CodecConfig,
    /// Seed of the frozen base weights.
    pub base_seed: u64,
    /// Seed of the trainable initialization (adapter `A`, towers).
    pub adapter_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dit: DitConfig::default(),
            towers: TowerConfig::default(),
            codec: CodecConfig::default(),
            base_seed: 0,
            adapter_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        self.codec.validate()
    }

    pub fn latent_channels(&self) -> usize {
        self.codec.c_lat
    }
}

// ---------------------------------------------------------------------------
// Token plumbing

/// `C x T x h x w` grid to `(T * h/p * w/p) x (C * p * p)` tokens. Tokens run
/// over `(t, i, j)` row-major; features over `(c, py, px)`.
pub fn patchify<F: Float>(grid: ArrayView4<'_, F>, p: usize) -> Result<Array2<F>> {
    let (c, t, h, w) = grid.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("grid {h}x{w} not divisible by patch {p}")));
    }
    let (hp, wp) = (h / p, w / p);
    let mut out = Array2::zeros((t * hp * wp, c * p * p));
    for ti in 0..t {
        for i in 0..hp {
            for j in 0..wp {
                let n = (ti * hp + i) * wp + j;
                let mut row = out.row_mut(n);
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            row[(ci * p + py) * p + px] = grid[[ci, ti, i * p + py, j * p + px]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Float>(tokens: ArrayView2<'_, F>, c: usize, t: usize, h: usize, w: usize, p: usize) -> Result<Array4<F>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("grid {h}x{w} not divisible by patch {p}")));
    }
    let (hp, wp) = (h / p, w / p);
    if tokens.dim() != (t * hp * wp, c * p * p) {
        return Err(Error::shape(format!(
            "tokens {:?} do not match grid {c}x{t}x{h}x{w} with patch {p}",
            tokens.dim()
        )));
    }
    let mut out = Array4::zeros((c, t, h, w));
    for ti in 0..t {
        for i in 0..hp {
            for j in 0..wp {
                let row = tokens.row((ti * hp + i) * wp + j);
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            out[[ci, ti, i * p + py, j * p + px]] = row[(ci * p + py) * p + px];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sinusoidal features of `1000 t`: cosines then sines.
pub fn timestep_features<F: Float>(t: F, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let x = t.to_f64_lossy() * 1000.0;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = F::lit((x * freq).cos());
        out[half + i] = F::lit((x * freq).sin());
    }
    out
}

/// Fixed 3D sinusoidal position codes, one third of the width per axis.
pub fn positional_encoding<F: Float>(t: usize, h: usize, w: usize, width: usize) -> Array2<F> {
    let per_axis = (width / 3) / 2 * 2;
    let mut out = Array2::zeros((t * h * w, width));
    let code = |pos: usize, k: usize| {
        let pair = k / 2;
        let freq = (-(10_000f64.ln()) * (2 * pair) as f64 / per_axis.max(1) as f64).exp();
        let a = pos as f64 * freq;
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for ti in 0..t {
        for i in 0..h {
            for j in 0..w {
                let mut row = out.row_mut((ti * h + i) * w + j);
                for k in 0..per_axis {
                    row[k] = F::lit(code(ti, k));
                    row[per_axis + k] = F::lit(code(i, k));
                    row[2 * per_axis + k] = F::lit(code(j, k));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Blocks

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub modulation: Linear<F>,
    pub self_attn: Attention<F>,
    pub cross_attn: Attention<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    mods: Array2<F>,
    ln1: LayerNormCache<F>,
    sa: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    ca: AttentionCache<F>,
    ln3: LayerNormCache<F>,
    fc1: LinearCache<F>,
    pre_gelu: Array2<F>,
    fc2: LinearCache<F>,
}

fn modulate<F: Float>(xhat: &Array2<F>, shift: ArrayView2<'_, F>, scale: ArrayView2<'_, F>) -> Array2<F> {
    let one_plus = scale.mapv(|s| F::one() + s);
    xhat * &one_plus + &shift
}

impl<F: Float> Block<F> {
    fn random<R: rand::Rng + ?Sized>(cfg: &DitConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        let mut modulation = Linear::random(d, 6 * d, 0.02, true, false, rng);
        // Gates open, shifts and scales neutral.
        if let Some(b) = modulation.b.as_mut() {
            b.value.slice_mut(s![2 * d..3 * d]).fill(F::one());
            b.value.slice_mut(s![5 * d..6 * d]).fill(F::one());
        }
        let hidden = cfg.mlp_ratio * d;
        Block {
            modulation,
            self_attn: Attention::random(d, cfg.heads, 0, cfg.lora_alpha, rng),
            cross_attn: Attention::random(d, cfg.heads, 0, cfg.lora_alpha, rng),
            fc1: Linear::random(d, hidden, (1.0 / d as f64).sqrt(), true, false, rng),
            fc2: Linear::random(hidden, d, (1.0 / hidden as f64).sqrt(), true, false, rng),
        }
    }

    fn forward(&self, x: &Array2<F>, cond: &Array2<F>, ctx: &Array2<F>, adapters: bool) -> (Array2<F>, BlockCache<F>) {
        let d = x.ncols();
        let (mods, _) = self.modulation.forward(cond.view(), false);
        let m = |k: usize| mods.slice(s![.., k * d..(k + 1) * d]);

        let (xh1, ln1) = layer_norm(x.view());
        let h1 = modulate(&xh1, m(0), m(1));
        let (sa_out, sa) = self.self_attn.forward(h1.view(), None, adapters);
        let x1 = x + &(&sa_out * &m(2));

        let (h2, ln2) = layer_norm(x1.view());
        let (ca_out, ca) = self.cross_attn.forward(h2.view(), Some(ctx.view()), adapters);
        let x2 = x1 + &ca_out;

        let (xh3, ln3) = layer_norm(x2.view());
        let h3 = modulate(&xh3, m(3), m(4));
        let (pre_gelu, fc1) = self.fc1.forward(h3.view(), adapters);
        let act = pre_gelu.mapv(gelu);
        let (mlp_out, fc2) = self.fc2.forward(act.view(), adapters);
        let x3 = &x2 + &(&mlp_out * &m(5));
        (
            x3,
            BlockCache {
                mods,
                ln1,
                sa,
                ln2,
                ca,
                ln3,
                fc1,
                pre_gelu,
                fc2,
            },
        )
    }

    /// Returns `(grad_x, grad_context)`.
    fn backward(&mut self, cache: &BlockCache<F>, gy: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let d = gy.ncols();
        let m = |k: usize| cache.mods.slice(s![.., k * d..(k + 1) * d]);
        let one_plus = |k: usize| m(k).mapv(|v| F::one() + v);

        // MLP branch.
        let g_mlp = gy * &m(5);
        let g_act = self.fc2.backward(&cache.fc2, g_mlp.view());
        let g_pre = ndarray::Zip::from(&g_act)
            .and(&cache.pre_gelu)
            .map_collect(|&g, &p| g * gelu_grad(p));
        let g_h3 = self.fc1.backward(&cache.fc1, g_pre.view());
        let mut gx2 = gy.clone();
        gx2 += &layer_norm_backward(&cache.ln3, (g_h3 * &one_plus(4)).view());

        // Cross-attention branch.
        let (g_h2, g_ctx) = self.cross_attn.backward(&cache.ca, gx2.view());
        let mut gx1 = gx2;
        gx1 += &layer_norm_backward(&cache.ln2, g_h2.view());

        // Self-attention branch.
        let g_sa = &gx1 * &m(2);
        let (g_h1, _) = self.self_attn.backward(&cache.sa, g_sa.view());
        let mut gx = gx1;
        gx += &layer_norm_backward(&cache.ln1, (g_h1 * &one_plus(1)).view());
        (gx, g_ctx.expect("cross-attention yields a context gradient"))
    }
}

impl<F: Float> Module<F> for Block<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        self.modulation.visit(&join(prefix, "modulation"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.modulation.visit_mut(&join(prefix, "modulation"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Transformer trunk: timestep MLP, blocks, output layer, null context.
#[derive(Debug, Clone, PartialEq)]
pub struct Dit<F> {
    pub config: DitConfig,
    pub time_fc1: Linear<F>,
    pub time_fc2: Linear<F>,
    pub blocks: Vec<Block<F>>,
    pub final_modulation: Linear<F>,
    pub head: Linear<F>,
    pub null_context: Param<F>,
}

#[derive(Debug, Clone)]
pub struct DitCache<F> {
    blocks: Vec<BlockCache<F>>,
    final_mods: Array2<F>,
    ln_final: LayerNormCache<F>,
    head: LinearCache<F>,
}

impl<F: Float> Dit<F> {
    pub fn new<R: rand::Rng + ?Sized>(cfg: &DitConfig, out_dim: usize, rng: &mut R) -> Self {
        let d = cfg.width;
        let time_fc1 = Linear::random(cfg.time_freq_dim, d, (1.0 / cfg.time_freq_dim as f64).sqrt(), true, false, rng);
        let time_fc2 = Linear::random(d, d, (1.0 / d as f64).sqrt(), true, false, rng);
        let blocks = (0..cfg.depth).map(|_| Block::random(cfg, rng)).collect();
        let final_modulation = Linear::random(d, 2 * d, 0.02, true, false, rng);
        let head = Linear::random(d, out_dim, cfg.head_init_std, true, false, rng);
        let null_context = Param::randn(&[1, d], 1.0, false, rng);
        Dit {
            config: cfg.clone(),
            time_fc1,
            time_fc2,
            blocks,
            final_modulation,
            head,
            null_context,
        }
    }

    /// Attaches the adapters; `A` factors are drawn from `rng`.
    fn attach_adapters<R: rand::Rng + ?Sized>(&mut self, rng: &mut R) {
        let (r, a, hr) = (self.config.lora_rank, self.config.lora_alpha, self.config.head_lora_rank);
        let attach = |l: &mut Linear<F>, rank: usize, rng: &mut R| {
            let taken = std::mem::replace(l, Linear::zeros(0, 0, false, false));
            *l = taken.with_lora(rank, a, rng);
        };
        for b in self.blocks.iter_mut() {
            for attn in [&mut b.self_attn, &mut b.cross_attn] {
                for l in [&mut attn.q, &mut attn.k, &mut attn.v, &mut attn.o] {
                    attach(l, r, rng);
                }
            }
            attach(&mut b.fc1, r, rng);
            attach(&mut b.fc2, r, rng);
        }
        attach(&mut self.head, hr, rng);
        self.null_context.set_trainable(true);
    }

    /// Timestep conditioning vector, `1 x width`.
    pub fn timestep_embed(&self, t: F) -> Array2<F> {
        let feats = timestep_features(t, self.config.time_freq_dim).insert_axis(Axis(0));
        let (h, _) = self.time_fc1.forward(feats.view(), false);
        let (e, _) = self.time_fc2.forward(h.mapv(silu).view(), false);
        e
    }

    /// Runs the trunk on fused tokens (positional codes already added).
    pub fn forward_tokens(&self, x: Array2<F>, t: F, adapters: bool) -> Result<(Array2<F>, DitCache<F>)> {
        let cond = self.timestep_embed(t).mapv(silu);
        let ctx = self.null_context.v2().to_owned();
        let mut x = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&x, &cond, &ctx, adapters);
            x = y;
            caches.push(c);
        }
        check_finite("transformer activations", &x)?;
        let d = x.ncols();
        let (final_mods, _) = self.final_modulation.forward(cond.view(), false);
        let (xh, ln_final) = layer_norm(x.view());
        let hf = modulate(&xh, final_mods.slice(s![.., 0..d]), final_mods.slice(s![.., d..2 * d]));
        let (out, head) = self.head.forward(hf.view(), adapters);
        Ok((
            out,
            DitCache {
                blocks: caches,
                final_mods,
                ln_final,
                head,
            },
        ))
    }

    /// Accumulates gradients; returns the gradient of the input tokens.
    pub fn backward_tokens(&mut self, cache: &DitCache<F>, gout: &Array2<F>) -> Array2<F> {
        let d = self.config.width;
        let g_hf = self.head.backward(&cache.head, gout.view());
        let scale = cache.final_mods.slice(s![.., d..2 * d]).mapv(|v| F::one() + v);
        let mut gx = layer_norm_backward(&cache.ln_final, (g_hf * &scale).view());
        let mut g_ctx = Array2::<F>::zeros((1, d));
        for (blk, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            let (g, gc) = blk.backward(c, &gx);
            gx = g;
            g_ctx += &gc;
        }
        if self.null_context.trainable {
            self.null_context.g2().scaled_add(F::one(), &g_ctx);
        }
        gx
    }
}

impl<F: Float> Module<F> for Dit<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        self.time_fc1.visit(&join(prefix, "time_fc1"), f);
        self.time_fc2.visit(&join(prefix, "time_fc2"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_modulation.visit(&join(prefix, "final_modulation"), f);
        self.head.visit(&join(prefix, "head"), f);
        f(&join(prefix, "null_context"), &self.null_context);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.time_fc1.visit_mut(&join(prefix, "time_fc1"), f);
        self.time_fc2.visit_mut(&join(prefix, "time_fc2"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_modulation.visit_mut(&join(prefix, "final_modulation"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        f(&join(prefix, "null_context"), &mut self.null_context);
    }
}

// ---------------------------------------------------------------------------
// Full model

/// Frozen base plus the trainable set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub config: ModelConfig,
    pub fusion: Fusion<F>,
    pub dit: Dit<F>,
    pub towers: CondTowers<F>,
}

/// One sample's inputs in latent and pixel space.
pub struct ModelInput<'a, F> {
    /// `c_lat x T_lat x h x w`
    pub noisy: ArrayView4<'a, F>,
    pub cond: ArrayView4<'a, F>,
    /// `4 x T_lat x h x w`
    pub mask: ArrayView4<'a, F>,
    /// Joint-length pixel clips, `3 x T_joint x H x W`.
    pub mesh_video: ArrayView4<'a, F>,
    pub condition_video: ArrayView4<'a, F>,
    pub t: F,
}

/// How much of the model takes part in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Frozen base only: no adapters, no tower features.
    Base,
    /// Adapters and towers.
    Full,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    fusion: FusionCache<F>,
    dit: DitCache<F>,
    towers: Option<(TowerCache<F>, TowerCache<F>)>,
    gate: Array4<F>,
    t: F,
}

impl<F: Float> ModelState<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config.dit;
        let c_lat = config.latent_channels();
        let mut base_rng = ChaCha8Rng::seed_from_u64(config.base_seed);
        let fusion_base = Fusion::new(c_lat, config.towers.d_cond, cfg.width, cfg.patch, 0, cfg.lora_alpha, &mut base_rng);
        let mut dit = Dit::new(cfg, c_lat * cfg.patch * cfg.patch, &mut base_rng);

        let mut rng = ChaCha8Rng::seed_from_u64(config.adapter_seed);
        let mut fusion = fusion_base;
        let input = std::mem::replace(&mut fusion.input, Linear::zeros(0, 0, false, false));
        fusion.input = input.with_lora(cfg.lora_rank, cfg.lora_alpha, &mut rng);
        dit.attach_adapters(&mut rng);
        let towers = CondTowers::new(&config.towers, &mut rng);
        Ok(ModelState {
            config,
            fusion,
            dit,
            towers,
        })
    }

    /// Preservation gate at latent resolution: `1 - mask`, per latent channel.
    pub fn gate(&self, mask: ArrayView4<'_, F>) -> Array4<F> {
        let (_, t, h, w) = mask.dim();
        let c = self.config.latent_channels();
        match self.config.codec.mode {
            CodecMode::LosslessShuffle => Array4::from_shape_fn((c, t, h, w), |(ch, g, i, j)| {
                F::one() - mask[[lossless_time_slot(ch), g, i, j]]
            }),
            CodecMode::Trainable => {
                let mean = mask.mean_axis(Axis(0)).expect("four mask channels");
                Array4::from_shape_fn((c, t, h, w), |(_, g, i, j)| F::one() - mean[[g, i, j]])
            }
        }
    }

    fn check_input(&self, input: &ModelInput<'_, F>) -> Result<()> {
        let (c, t, h, w) = input.noisy.dim();
        if c != self.config.latent_channels() {
            return Err(Error::shape(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels()
            )));
        }
        if input.cond.dim() != input.noisy.dim() {
            return Err(Error::shape("condition latent shape differs from noisy latent"));
        }
        if input.mask.dim() != (TEMPORAL_STRIDE, t, h, w) {
            return Err(Error::shape(format!("mask latent {:?} vs grid {:?}", input.mask.dim(), (t, h, w))));
        }
        let p = self.config.dit.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!("latent {h}x{w} not divisible by patch {p}")));
        }
        let t_val = input.t.to_f64_lossy();
        if !(0.0..=1.0).contains(&t_val) {
            return Err(Error::Range(format!("time {t_val} outside [0, 1]")));
        }
        if self.config.dit.output == OutputParam::AnchoredRestoration && t_val <= 0.0 {
            return Err(Error::Range("anchored velocity is undefined at t = 0".into()));
        }
        check_finite("noisy latent", &input.noisy)?;
        Ok(())
    }

    /// Predicted velocity over the joint latent.
    pub fn forward(&self, input: &ModelInput<'_, F>, mode: ForwardMode) -> Result<(Array4<F>, ForwardCache<F>)> {
        self.check_input(input)?;
        let (c, t, h, w) = input.noisy.dim();
        let full = mode == ForwardMode::Full;
        let (mesh_feat, avatar_feat, towers) = if full {
            let (mf, mc) = self.towers.encode_mesh(input.mesh_video)?;
            let (af, ac) = self.towers.encode_avatar_bg(input.condition_video)?;
            (mf, af, Some((mc, ac)))
        } else {
            let z = Array4::zeros((self.config.towers.d_cond, t, h, w));
            (z.clone(), z, None)
        };
        let fin = FusionInputs {
            noisy: input.noisy,
            cond: input.cond,
            mask: input.mask,
            mesh_feat: mesh_feat.view(),
            avatar_feat: avatar_feat.view(),
        };
        let (mut x, fusion) = self.fusion.forward(&fin, full, full)?;
        let p = self.config.dit.patch;
        x += &positional_encoding::<F>(t, h / p, w / p, self.config.dit.width);
        let (out, dit) = self.dit.forward_tokens(x, input.t, full)?;
        let delta = unpatchify(out.view(), c, t, h, w, p)?;
        let gate = self.gate(input.mask);
        let v = match self.config.dit.output {
            OutputParam::Velocity => delta,
            OutputParam::AnchoredRestoration => {
                let x0 = &input.cond + &(&gate * &delta);
                (&input.noisy - &x0) / input.t
            }
        };
        check_finite("predicted velocity", &v)?;
        Ok((
            v,
            ForwardCache {
                fusion,
                dit,
                towers,
                gate,
                t: input.t,
            },
        ))
    }

    /// Accumulates gradients of a scalar loss given its gradient with
    /// respect to the predicted velocity.
    pub fn backward(&mut self, cache: &ForwardCache<F>, gv: &Array4<F>) -> Result<()> {
        let p = self.config.dit.patch;
        let g_delta = match self.config.dit.output {
            OutputParam::Velocity => gv.clone(),
            OutputParam::AnchoredRestoration => (gv * &cache.gate) / (-cache.t),
        };
        let g_out = patchify(g_delta.view(), p)?;
        let g_tokens = self.dit.backward_tokens(&cache.dit, &g_out);
        let feats = self.fusion.backward(&cache.fusion, &g_tokens)?;
        if let (Some((gm, ga)), Some((mc, ac))) = (feats, cache.towers.as_ref()) {
            self.towers.mesh.backward(mc, &gm);
            self.towers.avatar.backward(ac, &ga);
        }
        Ok(())
    }

    /// Copy with every adapter folded into its base weight.
    pub fn lora_merge(&self) -> Self {
        let mut merged = self.clone();
        merged.visit_linears_mut(&mut |l| *l = l.merged());
        merged
    }

    /// Every dense weight with its adapter delta folded in, by parameter name.
    pub fn merged_weights(&self) -> Vec<(String, Array2<F>)> {
        let mut out = Vec::new();
        self.visit_linears(&mut |name, l| {
            if l.lora.is_some() {
                out.push((name.to_string(), l.merged_weight()));
            }
        });
        out
    }

    fn visit_linears(&self, f: &mut dyn FnMut(&str, &Linear<F>)) {
        f("fusion.input", &self.fusion.input);
        for (i, b) in self.dit.blocks.iter().enumerate() {
            for (an, attn) in [("self_attn", &b.self_attn), ("cross_attn", &b.cross_attn)] {
                for (ln, l) in [("q", &attn.q), ("k", &attn.k), ("v", &attn.v), ("o", &attn.o)] {
                    f(&format!("dit.blocks.{i}.{an}.{ln}"), l);
                }
            }
            f(&format!("dit.blocks.{i}.fc1"), &b.fc1);
            f(&format!("dit.blocks.{i}.fc2"), &b.fc2);
        }
        f("dit.head", &self.dit.head);
    }

    fn visit_linears_mut(&mut self, f: &mut dyn FnMut(&mut Linear<F>)) {
        f(&mut self.fusion.input);
        for b in self.dit.blocks.iter_mut() {
            for attn in [&mut b.self_attn, &mut b.cross_attn] {
                for l in [&mut attn.q, &mut attn.k, &mut attn.v, &mut attn.o] {
                    f(l);
                }
            }
            f(&mut b.fc1);
            f(&mut b.fc2);
        }
        f(&mut self.dit.head);
    }

    /// FNV-1a hash over the bits of every frozen tensor, in traversal order.
    pub fn frozen_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        self.visit("", &mut |name, p| {
            if p.trainable {
                return;
            }
            for b in name.bytes() {
                hash = (hash ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.iter() {
                let bits = v.to_f64_lossy().to_bits();
                for k in 0..8 {
                    hash = (hash ^ ((bits >> (8 * k)) & 0xff)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        hash
    }

    /// Human-readable parameter report.
    pub fn parameter_report(&self) -> String {
        let (trainable, frozen) = self.param_count();
        let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
        self.visit("", &mut |name, p| {
            if p.trainable {
                let kind = if name.contains("lora_") {
                    "adapters"
                } else if name.starts_with("towers") {
                    "towers"
                } else if name.starts_with("fusion") {
                    "fusion projections"
                } else {
                    "null context"
                };
                *groups.entry(kind.to_string()).or_default() += p.len();
            }
        });
        let mut s = format!("frozen: {frozen}\ntrainable: {trainable}\n");
        for (k, v) in groups {
            s.push_str(&format!("  {k}: {v}\n"));
        }
        s
    }
}

impl<F: Float> Module<F> for ModelState<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.dit.visit(&join(prefix, "dit"), f);
        self.towers.visit(&join(prefix, "towers"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.dit.visit_mut(&join(prefix, "dit"), f);
        self.towers.visit_mut(&join(prefix, "towers"), f);
    }
}

/// Tiny configuration used by the gradient checks and fast tests.
pub fn tiny_config(c_lat: usize) -> ModelConfig {
    ModelConfig {
        dit: DitConfig {
            depth: 2,
            width: 32,
            heads: 2,
            patch: 2,
            time_freq_dim: 16,
            mlp_ratio: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            head_lora_rank: 2,
            head_init_std: 0.05,
            output: OutputParam::AnchoredRestoration,
        },
        towers: TowerConfig {
            hidden: [3, 4],
            d_cond: 4,
        },
        codec: CodecConfig::trainable(c_lat),
        base_seed: 3,
        adapter_seed: 4,
    }
}
