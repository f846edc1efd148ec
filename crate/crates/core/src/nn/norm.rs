use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::Float;

const EPS: f64 = 1e-6;

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Float> LayerNormCache<F> {
    pub fn normalized(&self) -> &Array2<F> {
        &self.xhat
    }
}

/// Row-wise layer norm without affine parameters.
pub fn layer_norm<F: Float>(x: ArrayView2<'_, F>) -> (Array2<F>, LayerNormCache<F>) {
    let d = F::lit(x.ncols() as f64);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<F>() / d;
        *is = F::one() / (var + F::lit(EPS)).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    (xhat.clone(), LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<F: Float>(cache: &LayerNormCache<F>, gy: ArrayView2<'_, F>) -> Array2<F> {
    let d = F::lit(gy.ncols() as f64);
    let mean_g = gy.sum_axis(Axis(1)) / d;
    let mean_gx = (&gy * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut gx = gy.to_owned();
    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
        let xh = cache.xhat.row(r);
        let (mg, mgx, is) = (mean_g[r], mean_gx[r], cache.inv_std[r]);
        for (g, &h) in row.iter_mut().zip(xh.iter()) {
            *g = is * (*g - mg - h * mgx);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_rows_and_backward_matches_fd() {
        let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 7 + j * 3) as f64).sin() * 2.0 + i as f64);
        let (y, cache) = layer_norm(x.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-9);
        }
        let gy = Array2::from_shape_fn((3, 6), |(i, j)| ((i + j) as f64).cos());
        let gx = layer_norm_backward(&cache, gy.view());
        let h = 1e-6;
        for idx in [(0usize, 0usize), (1, 4), (2, 5)] {
            let f = |d: f64| {
                let mut xp = x.clone();
                xp[idx] += d;
                (layer_norm(xp.view()).0 * &gy).sum()
            };
            let num = (f(h) - f(-h)) / (2.0 * h);
            assert!((num - gx[idx]).abs() < 1e-6);
        }
    }
}
