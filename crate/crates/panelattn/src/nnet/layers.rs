//! Dense layer primitives with hand-written backward passes.
//!
//! Everything operates on row-major token matrices (`rows = tokens` or
//! `rows = samples`). Backward functions return gradients matching the
//! forward inputs; weight gradients are computed by the caller only for
//! trainable parameters.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::real::Real;

/// `y = x·w + b`.
pub fn linear<F: Real>(
    x: &ArrayView2<F>,
    w: &ArrayView2<F>,
    b: Option<&ArrayView1<F>>,
) -> Array2<F> {
    let mut y = x.dot(w);
    if let Some(b) = b {
        y += b;
    }
    y
}

/// Gradient w.r.t. the input of a linear layer.
pub fn linear_grad_input<F: Real>(g_y: &ArrayView2<F>, w: &ArrayView2<F>) -> Array2<F> {
    g_y.dot(&w.t())
}

/// Gradient w.r.t. the weight of a linear layer.
pub fn linear_grad_weight<F: Real>(x: &ArrayView2<F>, g_y: &ArrayView2<F>) -> Array2<F> {
    x.t().dot(g_y)
}

/// Gradient w.r.t. a broadcast bias (column sums).
pub fn bias_grad<F: Real>(g_y: &ArrayView2<F>) -> Array1<F> {
    g_y.sum_axis(Axis(0))
}

const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub x_hat: Array2<F>,
    pub inv_std: Array1<F>,
}

/// Row-wise layer normalization with learnable gain and bias.
pub fn layer_norm<F: Real>(
    x: &ArrayView2<F>,
    gain: &ArrayView1<F>,
    bias: &ArrayView1<F>,
) -> (Array2<F>, LnCache<F>) {
    let (rows, cols) = x.dim();
    let mut x_hat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    let colf = F::of(cols as f64);
    let eps = F::of(LN_EPS);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / colf;
        let mut var = F::zero();
        for v in row.iter() {
            let d = *v - mean;
            var += d * d;
        }
        var /= colf;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            x_hat[[r, c]] = (row[c] - mean) * istd;
        }
    }
    let mut y = x_hat.clone();
    for mut row in y.rows_mut() {
        for c in 0..cols {
            row[c] = row[c] * gain[c] + bias[c];
        }
    }
    (y, LnCache { x_hat, inv_std })
}

/// Backward of layer norm. Returns (g_x, g_gain, g_bias).
pub fn layer_norm_backward<F: Real>(
    g_y: &ArrayView2<F>,
    cache: &LnCache<F>,
    gain: &ArrayView1<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (rows, cols) = g_y.dim();
    let colf = F::of(cols as f64);
    let mut g_x = Array2::zeros((rows, cols));
    let mut g_gain = Array1::zeros(cols);
    let mut g_bias = Array1::zeros(cols);
    for r in 0..rows {
        let gy = g_y.row(r);
        let xh = cache.x_hat.row(r);
        let istd = cache.inv_std[r];
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for c in 0..cols {
            let gh = gy[c] * gain[c];
            sum_g += gh;
            sum_gx += gh * xh[c];
            g_gain[c] += gy[c] * xh[c];
            g_bias[c] += gy[c];
        }
        let mean_g = sum_g / colf;
        let mean_gx = sum_gx / colf;
        for c in 0..cols {
            let gh = gy[c] * gain[c];
            g_x[[r, c]] = istd * (gh - mean_g - xh[c] * mean_gx);
        }
    }
    (g_x, g_gain, g_bias)
}

const GELU_COEF: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu<F: Real>(x: &ArrayView2<F>) -> Array2<F> {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    let c = F::of(GELU_COEF);
    let half = F::of(0.5);
    x.mapv(|v| {
        let t = (k * (v + c * v * v * v)).tanh();
        half * v * (F::one() + t)
    })
}

/// GELU backward from the pre-activation input.
pub fn gelu_backward<F: Real>(g_y: &ArrayView2<F>, x: &ArrayView2<F>) -> Array2<F> {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    let c = F::of(GELU_COEF);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let mut out = g_y.to_owned();
    for (g, v) in out.iter_mut().zip(x.iter()) {
        let v = *v;
        let inner = k * (v + c * v * v * v);
        let t = inner.tanh();
        let sech2 = F::one() - t * t;
        let d = half * (F::one() + t) + half * v * sech2 * k * (F::one() + three * c * v * v);
        *g = *g * d;
    }
    out
}

/// Row-wise softmax, numerically stabilized, in place.
pub fn softmax_rows<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let mut max = row[0];
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
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

/// Backward of row-wise softmax given probabilities `p`.
pub fn softmax_backward_rows<F: Real>(g_p: &ArrayView2<F>, p: &ArrayView2<F>) -> Array2<F> {
    let (rows, cols) = p.dim();
    let mut g = Array2::zeros((rows, cols));
    for r in 0..rows {
        let gp = g_p.row(r);
        let pr = p.row(r);
        let dot = gp.dot(&pr);
        for c in 0..cols {
            g[[r, c]] = pr[c] * (gp[c] - dot);
        }
    }
    g
}

/// Mean cross-entropy pieces over one chunk: returns the summed loss, the
/// gradient w.r.t. logits scaled by `1/total` (the full-batch size), and the
/// number of correct top-1 predictions.
pub fn cross_entropy_chunk<F: Real>(
    logits: &ArrayView2<F>,
    labels: &[u8],
    total: usize,
) -> (f64, Array2<F>, usize) {
    let (rows, classes) = logits.dim();
    debug_assert_eq!(rows, labels.len());
    let mut probs = logits.to_owned();
    softmax_rows(&mut probs);
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let inv_total = F::of(1.0 / total as f64);
    let mut grad = probs.clone();
    for r in 0..rows {
        let y = labels[r] as usize;
        let p = probs[[r, y]].to64().max(1e-300);
        loss_sum -= p.ln();
        grad[[r, y]] -= F::one();
        let mut best = 0usize;
        for c in 1..classes {
            if logits[[r, c]] > logits[[r, best]] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    grad.mapv_inplace(|v| v * inv_total);
    (loss_sum, grad, correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand2(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut x = rand2(&mut rng, 7, 11);
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let logits: Array2<f64> = Array2::zeros((4, 8));
        let labels = [0u8, 3, 5, 7];
        let (loss_sum, _, _) = cross_entropy_chunk(&logits.view(), &labels, 4);
        let mean = loss_sum / 4.0;
        assert!((mean - (8.0f64).ln()).abs() < 1e-12);
        assert!((mean - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = rand2(&mut rng, 3, 5);
        let gain = Array1::from_shape_fn(5, |_| rng.gen::<f64>() + 0.5);
        let bias = Array1::from_shape_fn(5, |_| rng.gen::<f64>() - 0.5);
        let g_y = rand2(&mut rng, 3, 5);

        let (_, cache) = layer_norm(&x.view(), &gain.view(), &bias.view());
        let (g_x, g_gain, g_bias) = layer_norm_backward(&g_y.view(), &cache, &gain.view());

        let loss = |x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>| -> f64 {
            let (y, _) = layer_norm(&x.view(), &gain.view(), &bias.view());
            (&y * &g_y).sum()
        };
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut plus = x.clone();
                plus[[i, j]] += eps;
                let mut minus = x.clone();
                minus[[i, j]] -= eps;
                let fd = (loss(&plus, &gain, &bias) - loss(&minus, &gain, &bias)) / (2.0 * eps);
                assert!((fd - g_x[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
        for j in 0..5 {
            let mut plus = gain.clone();
            plus[j] += eps;
            let mut minus = gain.clone();
            minus[j] -= eps;
            let fd = (loss(&x, &plus, &bias) - loss(&x, &minus, &bias)) / (2.0 * eps);
            assert!((fd - g_gain[j]).abs() <= 1e-6 * (1.0 + fd.abs()));
            let mut plus = bias.clone();
            plus[j] += eps;
            let mut minus = bias.clone();
            minus[j] -= eps;
            let fd = (loss(&x, &gain, &plus) - loss(&x, &gain, &minus)) / (2.0 * eps);
            assert!((fd - g_bias[j]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand2(&mut rng, 4, 6);
        let g_y = rand2(&mut rng, 4, 6);
        let g_x = gelu_backward(&g_y.view(), &x.view());
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..6 {
                let mut plus = x.clone();
                plus[[i, j]] += eps;
                let mut minus = x.clone();
                minus[[i, j]] -= eps;
                let fd = ((&gelu(&plus.view()) * &g_y).sum() - (&gelu(&minus.view()) * &g_y).sum())
                    / (2.0 * eps);
                assert!((fd - g_x[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = rand2(&mut rng, 3, 5);
        let g_p = rand2(&mut rng, 3, 5);
        let mut p = x.clone();
        softmax_rows(&mut p);
        let g_x = softmax_backward_rows(&g_p.view(), &p.view());
        let eps = 1e-6;
        let loss = |x: &Array2<f64>| -> f64 {
            let mut p = x.clone();
            softmax_rows(&mut p);
            (&p * &g_p).sum()
        };
        for i in 0..3 {
            for j in 0..5 {
                let mut plus = x.clone();
                plus[[i, j]] += eps;
                let mut minus = x.clone();
                minus[[i, j]] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                assert!((fd - g_x[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let logits = rand2(&mut rng, 4, 8);
        let labels = [1u8, 0, 7, 4];
        let (_, grad, _) = cross_entropy_chunk(&logits.view(), &labels, 4);
        let eps = 1e-6;
        let loss = |l: &Array2<f64>| -> f64 {
            let (s, _, _) = cross_entropy_chunk(&l.view(), &labels, 4);
            s / 4.0
        };
        for i in 0..4 {
            for j in 0..8 {
                let mut plus = logits.clone();
                plus[[i, j]] += eps;
                let mut minus = logits.clone();
                minus[[i, j]] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                assert!((fd - grad[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn perfect_and_shuffled_accuracy() {
        let logits = array![[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
        let (_, _, correct) = cross_entropy_chunk(&logits.view(), &[0, 1, 2], 3);
        assert_eq!(correct, 3);
        let (_, _, wrong) = cross_entropy_chunk(&logits.view(), &[1, 2, 0], 3);
        assert_eq!(wrong, 0);
    }
}
