//! Minimal layers with hand-written backward passes.
//!
//! Everything is generic over [`Float`] so the same code trains in `f32` and
//! runs gradient checks in `f64`. Layers keep their parameters in [`Param`]s
//! and expose them through [`Module`] for optimizers, checksums and
//! checkpoints.

mod attention;
mod conv;
mod linear;
mod norm;
mod optim;

pub use attention::{Attention, AttentionCache};
pub use conv::{Conv3d, Conv3dCache};
pub use linear::{Linear, LinearCache, Lora};
pub use norm::{layer_norm, layer_norm_backward, LayerNormCache};
pub use optim::{clip_grad_norm, AdamW};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn, ScalarOperand};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// A parameter tensor, its accumulated gradient, and whether training may
/// touch it. Frozen parameters carry an empty gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub trainable: bool,
}

impl<F: Float> Param<F> {
    pub fn new(value: ArrayD<F>, trainable: bool) -> Self {
        let grad = if trainable {
            ArrayD::zeros(value.raw_dim())
        } else {
            ArrayD::zeros(IxDyn(&[0]))
        };
        Param {
            value,
            grad,
            trainable,
        }
    }

    pub fn zeros(shape: &[usize], trainable: bool) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)), trainable)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, trainable: bool, rng: &mut R) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z * std)
        });
        Self::new(value, trainable)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if trainable && !self.trainable {
            self.grad = ArrayD::zeros(self.value.raw_dim());
        } else if !trainable {
            self.grad = ArrayD::zeros(IxDyn(&[0]));
        }
        self.trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            self.grad.fill(F::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn v1(&self) -> ArrayView1<'_, F> {
        self.value.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn v2(&self) -> ArrayView2<'_, F> {
        self.value.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn g1(&mut self) -> ArrayViewMut1<'_, F> {
        self.grad.view_mut().into_dimensionality::<Ix1>().expect("rank-1 gradient")
    }

    pub fn g2(&mut self) -> ArrayViewMut2<'_, F> {
        self.grad.view_mut().into_dimensionality::<Ix2>().expect("rank-2 gradient")
    }
}

/// Named traversal over parameters. Names are dotted paths.
pub trait Module<F: Float> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> (usize, usize) {
        let (mut trainable, mut frozen) = (0, 0);
        self.visit("", &mut |_, p| {
            if p.trainable {
                trainable += p.len();
            } else {
                frozen += p.len();
            }
        });
        (trainable, frozen)
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn silu<F: Float>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

pub fn silu_grad<F: Float>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu<F: Float>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(0.044_715);
    F::lit(0.5) * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(0.044_715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (F::one() + F::lit(3.0) * k * x * x);
    F::lit(0.5) * (F::one() + th) + F::lit(0.5) * x * (F::one() - th * th) * du
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Float>(s: &mut Array2<F>) {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Fails if any value is NaN or infinite.
pub fn check_finite<F: Float, D: ndarray::Dimension>(
    what: &str,
    a: &ndarray::ArrayBase<impl ndarray::Data<Elem = F>, D>,
) -> crate::Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((silu_grad(x) - central(silu, x)).abs() < 1e-8);
            assert!((gelu_grad(x) - central(gelu, x)).abs() < 1e-8);
        }
        assert_eq!(silu(0.0f32), 0.0);
        assert_eq!(gelu(0.0f32), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = ndarray::array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -5.0]];
        softmax_rows(&mut s);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((s[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn param_trainability() {
        let mut p = Param::<f32>::zeros(&[2, 3], false);
        assert_eq!(p.grad.len(), 0);
        p.set_trainable(true);
        assert_eq!(p.grad.shape(), &[2, 3]);
    }
}
