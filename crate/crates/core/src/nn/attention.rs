use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{join, softmax_rows, Float, Linear, LinearCache, Module, Param};

/// Multi-head attention with adapter-capable q/k/v/o projections. Queries
/// come from `x`; keys and values from `context` (cross) or `x` (self).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    q: LinearCache<F>,
    k: LinearCache<F>,
    v: LinearCache<F>,
    o: LinearCache<F>,
    qm: Array2<F>,
    km: Array2<F>,
    vm: Array2<F>,
    probs: Vec<Array2<F>>,
    is_self: bool,
}

impl<F: Float> Attention<F> {
    pub fn random<R: Rng + ?Sized>(width: usize, heads: usize, lora_rank: usize, lora_alpha: f64, rng: &mut R) -> Self {
        assert!(width % heads == 0, "width must be divisible by heads");
        let std = (1.0 / width as f64).sqrt();
        let mut proj = || Linear::random(width, width, std, true, false, rng).with_lora(lora_rank, lora_alpha, rng);
        Attention {
            q: proj(),
            k: proj(),
            v: proj(),
            o: proj(),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.q.out_dim() / self.heads
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, F>,
        context: Option<ArrayView2<'_, F>>,
        adapters: bool,
    ) -> (Array2<F>, AttentionCache<F>) {
        let kv_src = context.unwrap_or(x);
        let (qm, qc) = self.q.forward(x, adapters);
        let (km, kc) = self.k.forward(kv_src, adapters);
        let (vm, vc) = self.v.forward(kv_src, adapters);
        let dh = self.head_dim();
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut merged = Array2::zeros((x.nrows(), self.q.out_dim()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qm.slice(cols).dot(&km.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            merged.slice_mut(cols).assign(&scores.dot(&vm.slice(cols)));
            probs.push(scores);
        }
        let (out, oc) = self.o.forward(merged.view(), adapters);
        (
            out,
            AttentionCache {
                q: qc,
                k: kc,
                v: vc,
                o: oc,
                qm,
                km,
                vm,
                probs,
                is_self: context.is_none(),
            },
        )
    }

    /// Returns `(grad_x, grad_context)`; the context gradient is `None` for
    /// self-attention, where it is folded into `grad_x`.
    pub fn backward(&mut self, cache: &AttentionCache<F>, gy: ArrayView2<'_, F>) -> (Array2<F>, Option<Array2<F>>) {
        let gmerged = self.o.backward(&cache.o, gy);
        let dh = self.head_dim();
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut gq = Array2::zeros(cache.qm.raw_dim());
        let mut gk = Array2::zeros(cache.km.raw_dim());
        let mut gv = Array2::zeros(cache.vm.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let go = gmerged.slice(cols);
            let gp = go.dot(&cache.vm.slice(cols).t());
            gv.slice_mut(cols).assign(&p.t().dot(&go));
            let row_dot = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let gs = (gp - &row_dot) * p * scale;
            gq.slice_mut(cols).assign(&gs.dot(&cache.km.slice(cols)));
            gk.slice_mut(cols).assign(&gs.t().dot(&cache.qm.slice(cols)));
        }
        let mut gx = self.q.backward(&cache.q, gq.view());
        let mut gkv = self.k.backward(&cache.k, gk.view());
        gkv += &self.v.backward(&cache.v, gv.view());
        if cache.is_self {
            gx += &gkv;
            (gx, None)
        } else {
            (gx, Some(gkv))
        }
    }
}

impl<F: Float> Module<F> for Attention<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}
