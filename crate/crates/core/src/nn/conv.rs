use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand::Rng;

use super::{join, Float, Module, Param};

/// 3D convolution over a single `C x T x H x W` clip, computed as an
/// im2col matrix product. Padding is zero and applies to the spatial axes
/// only; temporal padding is the caller's job.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<F> {
    /// `out x (in * kt * kh * kw)`
    pub w: Param<F>,
    pub b: Param<F>,
    pub in_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct Conv3dCache<F> {
    cols: Array2<F>,
    in_dim: (usize, usize, usize, usize),
    out_dim: (usize, usize, usize),
}

impl<F: Float> Conv3d<F> {
    pub fn random<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 2],
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        Conv3d {
            w: Param::randn(&[out_channels, fan_in], (2.0 / fan_in as f64).sqrt(), true, rng),
            b: Param::zeros(&[out_channels], true),
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn output_dims(&self, t: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let (hp, wp) = (h + 2 * self.padding[0], w + 2 * self.padding[1]);
        if t < kt || hp < kh || wp < kw {
            return None;
        }
        Some(((t - kt) / st + 1, (hp - kh) / sh + 1, (wp - kw) / sw + 1))
    }

    fn im2col(&self, x: ArrayView4<'_, F>, out: (usize, usize, usize)) -> Array2<F> {
        let (c, _, h, w) = x.dim();
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [ph, pw] = self.padding;
        let (to, ho, wo) = out;
        let k = c * kt * kh * kw;
        let mut cols = Array2::zeros((to * ho * wo, k));
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row_idx = (ot * ho + oy) * wo + ox;
                    let mut row = cols.row_mut(row_idx);
                    let row = row.as_slice_mut().expect("contiguous row");
                    for ci in 0..c {
                        for dt in 0..kt {
                            let ti = ot * st + dt;
                            for dy in 0..kh {
                                let yy = (oy * sh + dy) as isize - ph as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                let base = ((ci * kt + dt) * kh + dy) * kw;
                                for dx in 0..kw {
                                    let xx = (ox * sw + dx) as isize - pw as isize;
                                    if xx >= 0 && xx < w as isize {
                                        row[base + dx] = x[[ci, ti, yy as usize, xx as usize]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, gcols: &Array2<F>, in_dim: (usize, usize, usize, usize), out: (usize, usize, usize)) -> Array4<F> {
        let (c, t, h, w) = in_dim;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [ph, pw] = self.padding;
        let (to, ho, wo) = out;
        let mut gx = Array4::zeros((c, t, h, w));
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = gcols.row((ot * ho + oy) * wo + ox);
                    for ci in 0..c {
                        for dt in 0..kt {
                            let ti = ot * st + dt;
                            for dy in 0..kh {
                                let yy = (oy * sh + dy) as isize - ph as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                let base = ((ci * kt + dt) * kh + dy) * kw;
                                for dx in 0..kw {
                                    let xx = (ox * sw + dx) as isize - pw as isize;
                                    if xx >= 0 && xx < w as isize {
                                        gx[[ci, ti, yy as usize, xx as usize]] += row[base + dx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: ArrayView4<'_, F>) -> crate::Result<(Array4<F>, Conv3dCache<F>)> {
        let (c, t, h, w) = x.dim();
        if c != self.in_channels {
            return Err(crate::Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let out = self
            .output_dims(t, h, w)
            .ok_or_else(|| crate::Error::shape(format!("conv input {t}x{h}x{w} smaller than kernel")))?;
        let cols = self.im2col(x, out);
        let rows = cols.dot(&self.w.v2().t()) + &self.b.v1();
        let co = self.out_channels();
        let y = rows
            .reversed_axes()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, out.0, out.1, out.2))
            .expect("output size");
        Ok((
            y,
            Conv3dCache {
                cols,
                in_dim: (c, t, h, w),
                out_dim: out,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &Conv3dCache<F>, gy: &Array4<F>, need_input_grad: bool) -> Option<Array4<F>> {
        let co = self.out_channels();
        let n = cache.out_dim.0 * cache.out_dim.1 * cache.out_dim.2;
        let gys = gy.as_standard_layout();
        let g = gys
            .view()
            .into_shape_with_order((co, n))
            .expect("gradient matches output")
            .reversed_axes();
        if self.w.trainable {
            let gw = g.t().dot(&cache.cols);
            self.w.g2().scaled_add(F::one(), &gw);
        }
        if self.b.trainable {
            let gb = g.sum_axis(Axis(0));
            self.b.g1().scaled_add(F::one(), &gb);
        }
        need_input_grad.then(|| {
            let gcols = g.dot(&self.w.v2());
            self.col2im(&gcols, cache.in_dim, cache.out_dim)
        })
    }
}

impl<F: Float> Module<F> for Conv3d<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<F>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}
