//! Minimal CNN layer engine: conv / relu / global-average-pool / linear with
//! hand-written backward passes and plain SGD. Convolutions lower to a
//! single im2col GEMM per layer (ndarray's matmul), which keeps the desk
//! benchmark inside its CPU budget while staying single-threaded and
//! bit-deterministic under a fixed seed.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use crate::scalar::Scalar;

/// He-uniform bound for a ReLU fan-in.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// (c_out, c_in * k * k)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub wgrad: Array2<F>,
    pub bgrad: Array1<F>,
    pub wvel: Array2<F>,
    pub bvel: Array1<F>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let bound = he_bound(fan_in);
        let weight =
            Array2::from_shape_fn((c_out, fan_in), |_| F::real(rng.random_range(-bound..bound)));
        Self {
            weight,
            bias: Array1::zeros(c_out),
            wgrad: Array2::zeros((c_out, fan_in)),
            bgrad: Array1::zeros(c_out),
            wvel: Array2::zeros((c_out, fan_in)),
            bvel: Array1::zeros(c_out),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let k = self.k;
        let mut cols = Array2::zeros((b * oh * ow, c * k * k));
        {
            let xs = x.as_slice().expect("input contiguous");
            let cs = cols.as_slice_mut().expect("cols contiguous");
            let row_len = c * k * k;
            for bi in 0..b {
                for oi in 0..oh {
                    let base_i = (oi * self.stride) as isize - self.pad as isize;
                    for oj in 0..ow {
                        let base_j = (oj * self.stride) as isize - self.pad as isize;
                        let row = ((bi * oh + oi) * ow + oj) * row_len;
                        for ci in 0..c {
                            let x_chan = (bi * c + ci) * h * w;
                            for ki in 0..k {
                                let ii = base_i + ki as isize;
                                let dst = row + (ci * k + ki) * k;
                                if ii < 0 || ii >= h as isize {
                                    continue; // zero padding
                                }
                                let x_row = x_chan + ii as usize * w;
                                for kj in 0..k {
                                    let jj = base_j + kj as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    cs[dst + kj] = xs[x_row + jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, x_dim: (usize, usize, usize, usize)) -> Array4<F> {
        let (b, c, h, w) = x_dim;
        let (oh, ow) = self.out_spatial(h, w);
        let k = self.k;
        let mut dx = Array4::zeros((b, c, h, w));
        {
            let ds = dcols.as_slice().expect("dcols contiguous");
            let xs = dx.as_slice_mut().expect("dx contiguous");
            let row_len = c * k * k;
            for bi in 0..b {
                for oi in 0..oh {
                    let base_i = (oi * self.stride) as isize - self.pad as isize;
                    for oj in 0..ow {
                        let base_j = (oj * self.stride) as isize - self.pad as isize;
                        let row = ((bi * oh + oi) * ow + oj) * row_len;
                        for ci in 0..c {
                            let x_chan = (bi * c + ci) * h * w;
                            for ki in 0..k {
                                let ii = base_i + ki as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                let src = row + (ci * k + ki) * k;
                                let x_row = x_chan + ii as usize * w;
                                for kj in 0..k {
                                    let jj = base_j + kj as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    xs[x_row + jj as usize] += ds[src + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let cols = self.im2col(x);
        // (b*oh*ow, fan_in) x (fan_in, c_out)
        let mut out_mat = cols.dot(&self.weight.t());
        out_mat += &self.bias.view().insert_axis(Axis(0));
        // (b, oh, ow, c_out) -> (b, c_out, oh, ow)
        let out = out_mat
            .into_shape_with_order((b, oh, ow, self.c_out))
            .expect("conv output reshape");
        let mut transposed = Array4::zeros((b, self.c_out, oh, ow));
        transposed.assign(&out.permuted_axes([0, 3, 1, 2]));
        transposed
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, _, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        // (b, c_out, oh, ow) -> (b*oh*ow, c_out)
        let mut dy_mat = Array2::zeros((b * oh * ow, self.c_out));
        dy_mat.assign(
            &dy.view()
                .permuted_axes([0, 2, 3, 1])
                .to_shape((b * oh * ow, self.c_out))
                .expect("dy reshape"),
        );

        let cols = self.im2col(x);
        self.wgrad += &dy_mat.t().dot(&cols);
        self.bgrad += &dy_mat.sum_axis(Axis(0));
        let dcols = dy_mat.dot(&self.weight);
        self.col2im(&dcols, x.dim())
    }
}

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    /// (n_out, n_in)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub wgrad: Array2<F>,
    pub bgrad: Array1<F>,
    pub wvel: Array2<F>,
    pub bvel: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / n_in as f64).sqrt();
        let weight =
            Array2::from_shape_fn((n_out, n_in), |_| F::real(rng.random_range(-bound..bound)));
        Self {
            weight,
            bias: Array1::zeros(n_out),
            wgrad: Array2::zeros((n_out, n_in)),
            bgrad: Array1::zeros(n_out),
            wvel: Array2::zeros((n_out, n_in)),
            bvel: Array1::zeros(n_out),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias.view().insert_axis(Axis(0));
        y
    }

    pub fn backward(&mut self, x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
        self.wgrad += &dy.t().dot(&x);
        self.bgrad += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

pub fn relu<F: Scalar>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| v.max(F::zero()));
}

/// dx = dy where the forward output was positive.
pub fn relu_backward<F: Scalar>(y: &Array4<F>, dy: &mut Array4<F>) {
    azip_relu(y, dy);
}

fn azip_relu<F: Scalar>(y: &Array4<F>, dy: &mut Array4<F>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
}

/// (b, c, h, w) -> (b, c) spatial mean.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let scale = F::one() / F::from_count(h * w);
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = F::zero();
            for v in x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                acc += *v;
            }
            out[[bi, ci]] = acc * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(
    dy: ArrayView2<F>,
    spatial: (usize, usize),
) -> Array4<F> {
    let (b, c) = dy.dim();
    let (h, w) = spatial;
    let scale = F::one() / F::from_count(h * w);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] * scale;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// v = momentum * v - lr * g; w += v. Plain SGD when momentum is zero.
pub fn sgd_update<F: Scalar>(
    value: &mut [F],
    grad: &mut [F],
    vel: &mut [F],
    lr: F,
    momentum: F,
    clip: Option<F>,
) {
    if let Some(limit) = clip {
        for g in grad.iter_mut() {
            *g = g.max(-limit).min(limit);
        }
    }
    if momentum == F::zero() {
        for (w, g) in value.iter_mut().zip(grad.iter()) {
            *w -= lr * *g;
        }
    } else {
        for ((w, g), v) in value.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
            *v = momentum * *v - lr * *g;
            *w += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn finite_diff_conv(
        conv: &Conv2d<f64>,
        x: &Array4<f64>,
        flat_index: usize,
        h: f64,
        on_weight: bool,
    ) -> f64 {
        let mut plus = conv.clone();
        let mut minus = conv.clone();
        if on_weight {
            plus.weight.as_slice_mut().unwrap()[flat_index] += h;
            minus.weight.as_slice_mut().unwrap()[flat_index] -= h;
        } else {
            plus.bias[flat_index] += h;
            minus.bias[flat_index] -= h;
        }
        let loss = |c: &Conv2d<f64>| -> f64 { c.forward(x).iter().map(|v| v * v).sum::<f64>() };
        (loss(&plus) - loss(&minus)) / (2.0 * h)
    }

    #[test]
    fn conv_output_shape_and_stride() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(3, 8, 3, 1, 1, &mut rng);
        let x = Array4::zeros((2, 3, 16, 16));
        assert_eq!(conv.forward(&x).dim(), (2, 8, 16, 16));
        let strided = Conv2d::<f64>::new(3, 8, 3, 2, 1, &mut rng);
        assert_eq!(strided.forward(&x).dim(), (2, 8, 8, 8));
        let one = Conv2d::<f64>::new(3, 8, 1, 2, 0, &mut rng);
        assert_eq!(one.forward(&x).dim(), (2, 8, 8, 8));
    }

    #[test]
    fn conv_matches_direct_computation() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::new(2, 3, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.random_range(-1.0..1.0));
        let y = conv.forward(&x);
        // Direct evaluation at a few positions.
        for (oc, oi, oj) in [(0usize, 0usize, 0usize), (1, 2, 3), (2, 4, 4)] {
            let mut acc = conv.bias[oc];
            for ci in 0..2 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let ii = oi as isize + ki as isize - 1;
                        let jj = oj as isize + kj as isize - 1;
                        if ii < 0 || jj < 0 || ii >= 5 || jj >= 5 {
                            continue;
                        }
                        acc += conv.weight[[oc, (ci * 3 + ki) * 3 + kj]]
                            * x[[0, ci, ii as usize, jj as usize]];
                    }
                }
            }
            assert!((acc - y[[0, oc, oi, oj]]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(2, 4, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.random_range(-1.0..1.0));
        let y = conv.forward(&x);
        let dy = y.mapv(|v| 2.0 * v); // loss = sum of squares
        let dx = conv.backward(&x, &dy);

        for idx in [0usize, 7, 23, 51, 71] {
            let analytic = conv.wgrad.as_slice().unwrap()[idx];
            let numeric = finite_diff_conv(&conv, &x, idx, 1e-5, true);
            assert!(
                (analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0),
                "weight {idx}: {analytic} vs {numeric}"
            );
        }
        for idx in 0..4 {
            let analytic = conv.bgrad[idx];
            let numeric = finite_diff_conv(&conv, &x, idx, 1e-5, false);
            assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
        }
        // Input gradient via finite differences on a few positions.
        for (b, c, i, j) in [(0usize, 0usize, 0usize, 0usize), (1, 1, 3, 2), (0, 1, 5, 5)] {
            let mut xp = x.clone();
            xp[[b, c, i, j]] += 1e-5;
            let mut xm = x.clone();
            xm[[b, c, i, j]] -= 1e-5;
            let lp: f64 = conv.forward(&xp).iter().map(|v| v * v).sum();
            let lm: f64 = conv.forward(&xm).iter().map(|v| v * v).sum();
            let numeric = (lp - lm) / 2e-5;
            assert!((dx[[b, c, i, j]] - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut lin = Linear::<f64>::new(6, 4, &mut rng);
        let x = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let y = lin.forward(x.view());
        let dy = y.mapv(|v| 2.0 * v);
        let dx = lin.backward(x.view(), dy.view());

        for idx in [0usize, 5, 13, 23] {
            let mut plus = lin.clone();
            plus.weight.as_slice_mut().unwrap()[idx] += 1e-6;
            let mut minus = lin.clone();
            minus.weight.as_slice_mut().unwrap()[idx] -= 1e-6;
            let lp: f64 = plus.forward(x.view()).iter().map(|v| v * v).sum();
            let lm: f64 = minus.forward(x.view()).iter().map(|v| v * v).sum();
            let numeric = (lp - lm) / 2e-6;
            let analytic = lin.wgrad.as_slice().unwrap()[idx];
            assert!((analytic - numeric).abs() < 1e-5 * numeric.abs().max(1.0));
        }
        let mut xp = x.clone();
        xp[[1, 2]] += 1e-6;
        let mut xm = x.clone();
        xm[[1, 2]] -= 1e-6;
        let lp: f64 = lin.forward(xp.view()).iter().map(|v| v * v).sum();
        let lm: f64 = lin.forward(xm.view()).iter().map(|v| v * v).sum();
        assert!((dx[[1, 2]] - (lp - lm) / 2e-6).abs() < 1e-5);
    }

    #[test]
    fn pool_and_relu_backward() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-1.0f64..1.0));
        let pooled = global_avg_pool(&x);
        for bi in 0..2 {
            for ci in 0..3 {
                let mean = x
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ci)
                    .mean()
                    .unwrap();
                assert!((pooled[[bi, ci]] - mean).abs() < 1e-12);
            }
        }
        let dy = Array2::from_elem((2, 3), 16.0f64);
        let dx = global_avg_pool_backward(dy.view(), (4, 4));
        assert!(dx.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let mut act = x.clone();
        relu(&mut act);
        assert!(act.iter().all(|&v| v >= 0.0));
        let mut grad = Array4::from_elem((2, 3, 4, 4), 1.0f64);
        relu_backward(&act, &mut grad);
        for (g, v) in grad.iter().zip(act.iter()) {
            assert_eq!(*g, if *v > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn sgd_with_and_without_momentum() {
        let mut w = [1.0f64, 2.0];
        let mut g = [0.5, -0.5];
        let mut v = [0.0, 0.0];
        sgd_update(&mut w, &mut g, &mut v, 0.1, 0.0, None);
        assert!((w[0] - 0.95).abs() < 1e-12);
        assert!((w[1] - 2.05).abs() < 1e-12);

        let mut g2 = [0.5, -0.5];
        sgd_update(&mut w, &mut g2, &mut v, 0.1, 0.9, None);
        assert!((v[0] + 0.05).abs() < 1e-12);
        let w0 = w[0];
        let mut g3 = [0.0, 0.0];
        sgd_update(&mut w, &mut g3, &mut v, 0.1, 0.9, None);
        // Momentum keeps moving with zero gradient.
        assert!(w[0] < w0);

        let mut w = [0.0f64];
        let mut g = [100.0];
        let mut v = [0.0];
        sgd_update(&mut w, &mut g, &mut v, 1.0, 0.0, Some(1.0));
        assert!((w[0] + 1.0).abs() < 1e-12, "clip bounds the step");
    }
}
