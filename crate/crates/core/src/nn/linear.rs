use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{join, Float, Module, Param};

/// Low-rank adapter `scale * B A` added to a frozen weight. `A` is
/// `rank x in` (random), `B` is `out x rank` (zero at creation).
#[derive(Debug, Clone, PartialEq)]
pub struct Lora<F> {
    pub a: Param<F>,
    pub b: Param<F>,
    pub scale: F,
}

impl<F: Float> Lora<F> {
    pub fn rank(&self) -> usize {
        self.a.value.shape()[0]
    }

    /// `scale * B A`, shaped like the adapted weight.
    pub fn delta(&self) -> Array2<F> {
        self.b.v2().dot(&self.a.v2()) * self.scale
    }
}

/// `y = x W^T + b`, optionally plus a LoRA term. `x` is `rows x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `out x in`
    pub w: Param<F>,
    pub b: Option<Param<F>>,
    pub lora: Option<Lora<F>>,
}

#[derive(Debug, Clone)]
pub struct LinearCache<F> {
    x: Array2<F>,
    /// `x A^T` when the adapter took part in the forward pass.
    xa: Option<Array2<F>>,
}

impl<F: Float> Linear<F> {
    pub fn random<R: Rng + ?Sized>(inp: usize, out: usize, std: f64, bias: bool, trainable: bool, rng: &mut R) -> Self {
        Linear {
            w: Param::randn(&[out, inp], std, trainable, rng),
            b: bias.then(|| Param::zeros(&[out], trainable)),
            lora: None,
        }
    }

    pub fn zeros(inp: usize, out: usize, bias: bool, trainable: bool) -> Self {
        Linear {
            w: Param::zeros(&[out, inp], trainable),
            b: bias.then(|| Param::zeros(&[out], trainable)),
            lora: None,
        }
    }

    /// Attaches a trainable adapter: `A ~ N(0, 1/in)`, `B = 0`, scale `alpha / rank`.
    pub fn with_lora<R: Rng + ?Sized>(mut self, rank: usize, alpha: f64, rng: &mut R) -> Self {
        if rank == 0 {
            return self;
        }
        let inp = self.in_dim();
        let out = self.out_dim();
        self.lora = Some(Lora {
            a: Param::randn(&[rank, inp], (1.0 / inp as f64).sqrt(), true, rng),
            b: Param::zeros(&[out, rank], true),
            scale: F::lit(alpha / rank as f64),
        });
        self
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&self, x: ArrayView2<'_, F>, adapters: bool) -> (Array2<F>, LinearCache<F>) {
        let mut y = x.dot(&self.w.v2().t());
        if let Some(b) = &self.b {
            y += &b.v1();
        }
        let mut xa = None;
        if adapters {
            if let Some(l) = &self.lora {
                let h = x.dot(&l.a.v2().t());
                y += &(h.dot(&l.b.v2().t()) * l.scale);
                xa = Some(h);
            }
        }
        (
            y,
            LinearCache {
                x: x.to_owned(),
                xa,
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &LinearCache<F>, gy: ArrayView2<'_, F>) -> Array2<F> {
        let gxa = self.accumulate(cache, gy);
        let mut gx = gy.dot(&self.w.v2());
        if let (Some(l), Some(gxa)) = (self.lora.as_ref(), gxa) {
            gx += &gxa.dot(&l.a.v2());
        }
        gx
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&mut self, cache: &LinearCache<F>, gy: ArrayView2<'_, F>) {
        self.accumulate(cache, gy);
    }

    /// Returns the gradient with respect to `x A^T` when the adapter was used.
    fn accumulate(&mut self, cache: &LinearCache<F>, gy: ArrayView2<'_, F>) -> Option<Array2<F>> {
        if self.w.trainable {
            let gw = gy.t().dot(&cache.x);
            self.w.g2().scaled_add(F::one(), &gw);
        }
        if let Some(b) = self.b.as_mut() {
            if b.trainable {
                let gb = gy.sum_axis(Axis(0));
                b.g1().scaled_add(F::one(), &gb);
            }
        }
        let (l, xa) = (self.lora.as_mut()?, cache.xa.as_ref()?);
        let scale = l.scale;
        if l.b.trainable {
            let gb = gy.t().dot(xa) * scale;
            l.b.g2().scaled_add(F::one(), &gb);
        }
        let gxa = gy.dot(&l.b.v2()) * scale;
        if l.a.trainable {
            let ga = gxa.t().dot(&cache.x);
            l.a.g2().scaled_add(F::one(), &ga);
        }
        Some(gxa)
    }

    /// Dense weight with the adapter folded in.
    pub fn merged_weight(&self) -> Array2<F> {
        let mut w = self.w.v2().to_owned();
        if let Some(l) = &self.lora {
            w += &l.delta();
        }
        w
    }

    /// Copy whose weight is the merged weight and that carries no adapter.
    pub fn merged(&self) -> Self {
        Linear {
            w: Param::new(self.merged_weight().into_dyn(), false),
            b: self.b.clone(),
            lora: None,
        }
    }
}

impl<F: Float> Module<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        f(&join(prefix, "w"), &self.w);
        if let Some(b) = &self.b {
            f(&join(prefix, "b"), b);
        }
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora_a"), &l.a);
            f(&join(prefix, "lora_b"), &l.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = self.b.as_mut() {
            f(&join(prefix, "b"), b);
        }
        if let Some(l) = self.lora.as_mut() {
            f(&join(prefix, "lora_a"), &mut l.a);
            f(&join(prefix, "lora_b"), &mut l.b);
        }
    }
}
