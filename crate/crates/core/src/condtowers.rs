//! 3D-convolutional condition towers and the token-level fusion step.
//!
//! Each tower maps a joint-length pixel clip (`3 x T_joint x H x W`) onto the
//! latent grid (`d_cond x T_lat x H/8 x W/8`). The clip is replicate-padded
//! in front by three frames, exactly like the codec, and three strided
//! convolutions bring time down 4x and space down 8x. The mesh tower and the
//! avatar-background tower share the architecture but never parameters.

use ndarray::{concatenate, s, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dit::{patchify, unpatchify};
use crate::error::{Error, Result};
use crate::latentcodec::TEMPORAL_STRIDE;
use crate::nn::{join, silu, silu_grad, Conv3d, Conv3dCache, Float, Linear, LinearCache, Module, Param};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerConfig {
    /// Hidden widths of the first two layers.
    pub hidden: [usize; 2],
    pub d_cond: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            hidden: [32, 64],
            d_cond: 64,
        }
    }
}

/// Copies frame 0 `n` times in front of the clip.
pub fn replicate_pad_front<F: Float>(video: ArrayView4<'_, F>, n: usize) -> Array4<F> {
    let first = video.slice(s![.., 0..1, .., ..]);
    let mut parts = vec![first; n];
    parts.push(video);
    concatenate(Axis(1), &parts).expect("frames share channels and size")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower<F> {
    pub layers: [Conv3d<F>; 3],
}

#[derive(Debug, Clone)]
pub struct TowerCache<F> {
    convs: Vec<Conv3dCache<F>>,
    /// Pre-activation outputs of the first two layers.
    pre: Vec<Array4<F>>,
}

impl<F: Float> Tower<F> {
    pub fn new<R: Rng + ?Sized>(config: &TowerConfig, rng: &mut R) -> Self {
        let [c1, c2] = config.hidden;
        Tower {
            layers: [
                Conv3d::random(3, c1, [2, 3, 3], [2, 2, 2], [1, 1], rng),
                Conv3d::random(c1, c2, [2, 3, 3], [2, 2, 2], [1, 1], rng),
                Conv3d::random(c2, config.d_cond, [1, 3, 3], [1, 2, 2], [1, 1], rng),
            ],
        }
    }

    pub fn d_cond(&self) -> usize {
        self.layers[2].out_channels()
    }

    pub fn forward(&self, video: ArrayView4<'_, F>) -> Result<(Array4<F>, TowerCache<F>)> {
        let (c, t, h, w) = video.dim();
        crate::latentcodec::latent_shape(t, h, w)?;
        if c != 3 {
            return Err(Error::shape(format!("tower input needs 3 channels, got {c}")));
        }
        let mut x = replicate_pad_front(video, TEMPORAL_STRIDE - 1);
        let mut convs = Vec::with_capacity(3);
        let mut pre = Vec::with_capacity(2);
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(x.view())?;
            convs.push(cache);
            if i < 2 {
                x = y.mapv(silu);
                pre.push(y);
            } else {
                x = y;
            }
        }
        Ok((x, TowerCache { convs, pre }))
    }

    /// Accumulates parameter gradients from the gradient of the features.
    pub fn backward(&mut self, cache: &TowerCache<F>, gfeat: &Array4<F>) {
        let mut g = gfeat.clone();
        for i in (0..3).rev() {
            let need_input = i > 0;
            let gin = self.layers[i].backward(&cache.convs[i], &g, need_input);
            if let Some(gin) = gin {
                let pre = &cache.pre[i - 1];
                g = ndarray::Zip::from(&gin).and(pre).map_collect(|&gv, &p| gv * silu_grad(p));
            }
        }
    }
}

impl<F: Float> Module<F> for Tower<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

/// The mesh tower and the avatar-background tower.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTowers<F> {
    pub mesh: Tower<F>,
    pub avatar: Tower<F>,
}

impl<F: Float> CondTowers<F> {
    pub fn new<R: Rng + ?Sized>(config: &TowerConfig, rng: &mut R) -> Self {
        CondTowers {
            mesh: Tower::new(config, rng),
            avatar: Tower::new(config, rng),
        }
    }

    pub fn encode_mesh(&self, mesh_joint: ArrayView4<'_, F>) -> Result<(Array4<F>, TowerCache<F>)> {
        self.mesh.forward(mesh_joint)
    }

    pub fn encode_avatar_bg(&self, condition_joint: ArrayView4<'_, F>) -> Result<(Array4<F>, TowerCache<F>)> {
        self.avatar.forward(condition_joint)
    }
}

impl<F: Float> Module<F> for CondTowers<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        self.mesh.visit(&join(prefix, "mesh"), f);
        self.avatar.visit(&join(prefix, "avatar"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.mesh.visit_mut(&join(prefix, "mesh"), f);
        self.avatar.visit_mut(&join(prefix, "avatar"), f);
    }
}

/// Token-level fusion: the base input projection of `[noisy, cond, mask]`
/// plus zero-initialized projections of the two tower features.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion<F> {
    pub input: Linear<F>,
    pub mesh: Linear<F>,
    pub avatar: Linear<F>,
    pub patch: usize,
}

#[derive(Debug, Clone)]
pub struct FusionCache<F> {
    input: LinearCache<F>,
    mesh: Option<LinearCache<F>>,
    avatar: Option<LinearCache<F>>,
    feat_grid: (usize, usize, usize, usize),
}

/// Latent grids entering the fusion step.
pub struct FusionInputs<'a, F> {
    pub noisy: ArrayView4<'a, F>,
    pub cond: ArrayView4<'a, F>,
    pub mask: ArrayView4<'a, F>,
    pub mesh_feat: ArrayView4<'a, F>,
    pub avatar_feat: ArrayView4<'a, F>,
}

impl<F: Float> Fusion<F> {
    pub fn new<R: Rng + ?Sized>(
        latent_channels: usize,
        d_cond: usize,
        width: usize,
        patch: usize,
        lora_rank: usize,
        lora_alpha: f64,
        rng: &mut R,
    ) -> Self {
        let inp = (2 * latent_channels + TEMPORAL_STRIDE) * patch * patch;
        let feat = d_cond * patch * patch;
        Fusion {
            input: Linear::random(inp, width, (1.0 / inp as f64).sqrt(), true, false, rng)
                .with_lora(lora_rank, lora_alpha, rng),
            mesh: Linear::zeros(feat, width, true, true),
            avatar: Linear::zeros(feat, width, true, true),
            patch,
        }
    }

    /// Returns `T_lat * (h/p) * (w/p)` tokens of model width. With
    /// `with_towers == false` only the base input projection is applied.
    pub fn forward(
        &self,
        inputs: &FusionInputs<'_, F>,
        adapters: bool,
        with_towers: bool,
    ) -> Result<(Array2<F>, FusionCache<F>)> {
        let grid = inputs.noisy.dim();
        let (_, t, h, w) = grid;
        for (name, g) in [
            ("cond", inputs.cond.dim()),
            ("mask", inputs.mask.dim()),
            ("mesh_feat", inputs.mesh_feat.dim()),
            ("avatar_feat", inputs.avatar_feat.dim()),
        ] {
            if (g.1, g.2, g.3) != (t, h, w) {
                return Err(Error::shape(format!("{name} grid {g:?} does not match latent grid {grid:?}")));
            }
        }
        if inputs.cond.dim().0 != grid.0 {
            return Err(Error::shape("condition latent channel count differs from noisy latent"));
        }
        let stacked = concatenate(Axis(0), &[inputs.noisy, inputs.cond, inputs.mask])
            .map_err(|e| Error::shape(e.to_string()))?;
        let tokens = patchify(stacked.view(), self.patch)?;
        if tokens.ncols() != self.input.in_dim() {
            return Err(Error::shape(format!(
                "fused token width {} does not match projection {}",
                tokens.ncols(),
                self.input.in_dim()
            )));
        }
        let (mut x, input_cache) = self.input.forward(tokens.view(), adapters);
        let (mut mesh_cache, mut avatar_cache) = (None, None);
        if with_towers {
            let mt = patchify(inputs.mesh_feat, self.patch)?;
            let (ym, cm) = self.mesh.forward(mt.view(), adapters);
            let at = patchify(inputs.avatar_feat, self.patch)?;
            let (ya, ca) = self.avatar.forward(at.view(), adapters);
            x += &ym;
            x += &ya;
            mesh_cache = Some(cm);
            avatar_cache = Some(ca);
        }
        Ok((
            x,
            FusionCache {
                input: input_cache,
                mesh: mesh_cache,
                avatar: avatar_cache,
                feat_grid: inputs.mesh_feat.dim(),
            },
        ))
    }

    /// Accumulates projection gradients; returns the gradients of the mesh
    /// and avatar feature grids when the towers took part.
    pub fn backward(&mut self, cache: &FusionCache<F>, gx: &Array2<F>) -> Result<Option<(Array4<F>, Array4<F>)>> {
        self.input.backward_params(&cache.input, gx.view());
        let (Some(mc), Some(ac)) = (cache.mesh.as_ref(), cache.avatar.as_ref()) else {
            return Ok(None);
        };
        let (c, t, h, w) = cache.feat_grid;
        let gm = self.mesh.backward(mc, gx.view());
        let ga = self.avatar.backward(ac, gx.view());
        Ok(Some((
            unpatchify(gm.view(), c, t, h, w, self.patch)?,
            unpatchify(ga.view(), c, t, h, w, self.patch)?,
        )))
    }
}

impl<F: Float> Module<F> for Fusion<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        self.input.visit(&join(prefix, "input"), f);
        self.mesh.visit(&join(prefix, "mesh"), f);
        self.avatar.visit(&join(prefix, "avatar"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        self.mesh.visit_mut(&join(prefix, "mesh"), f);
        self.avatar.visit_mut(&join(prefix, "avatar"), f);
    }
}
