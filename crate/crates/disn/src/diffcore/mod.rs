//! Minimal dense differentiable-layer toolkit.
//!
//! Fully-connected, batch normalization, ELU and L1 row normalization, each
//! with a forward pass returning a cache and a backward pass consuming it.
//! Backward passes accumulate parameter gradients additively and return the
//! gradient with respect to the forward input. Every gradient here is
//! verified against central finite differences (see [`gradcheck`]).
//!
//! No operation mutates its input tensor. Layers are mutable during a
//! training step (gradient accumulation, batch-norm running statistics);
//! eval-mode forwards take `&self` and are safe to share across threads.

pub mod gradcheck;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass mode: train uses batch statistics and updates running
/// statistics; eval uses running statistics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient and Adam moment slots.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub m1: Tensor<S>,
    pub m2: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros_like(&value);
        let m1 = Tensor::zeros_like(&value);
        let m2 = Tensor::zeros_like(&value);
        Param { value, grad, m1, m2 }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }
}

// ---------------------------------------------------------------------------
// Fully-connected layer
// ---------------------------------------------------------------------------

/// Affine layer `y = x W + b` with `W: in_dim x out_dim`.
#[derive(Debug, Clone)]
pub struct FcLayer<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

pub struct FcCache<S> {
    x: Tensor<S>,
}

impl<S: Scalar> FcLayer<S> {
    /// Uniform init in `±1/sqrt(in_dim)`, bias zero.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Tensor::zeros(in_dim, out_dim);
        for v in weight.data_mut() {
            *v = S::of_f64(rng::uniform_f64(rng, limit));
        }
        FcLayer {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(1, out_dim)),
        }
    }

    pub fn from_parts(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::shape(
                "fc construction",
                format!("bias 1x{}", weight.cols()),
                format!("{}x{}", bias.rows(), bias.cols()),
            ));
        }
        Ok(FcLayer {
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, FcCache<S>)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "fc forward",
                format!("{} input columns", self.in_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut y = x.matmul(&self.weight.value)?;
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for (v, &b) in row.iter_mut().zip(self.bias.value.row(0)) {
                *v += b;
            }
        }
        Ok((y, FcCache { x: x.clone() }))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &FcCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        if grad_out.rows() != cache.x.rows() || grad_out.cols() != self.out_dim() {
            return Err(Error::shape(
                "fc backward",
                format!("{}x{}", cache.x.rows(), self.out_dim()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let dw = cache.x.matmul_at_b(grad_out)?;
        self.weight.grad.add_scaled(&dw, S::one())?;
        for r in 0..grad_out.rows() {
            let row = grad_out.row(r);
            let bias_grad = self.bias.grad.row_mut(0);
            for (g, &v) in bias_grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        grad_out.matmul_a_bt(&self.weight.value)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-column batch normalization with learned scale/shift and running
/// statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BnLayer<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    mode: Mode,
}

pub const BN_MOMENTUM_DEFAULT: f64 = 0.1;
pub const BN_EPS_DEFAULT: f64 = 1e-5;

impl<S: Scalar> BnLayer<S> {
    pub fn new(dim: usize) -> Self {
        BnLayer::with_settings(dim, BN_MOMENTUM_DEFAULT, BN_EPS_DEFAULT)
    }

    pub fn with_settings(dim: usize, momentum: f64, eps: f64) -> Self {
        assert!(momentum > 0.0 && momentum < 1.0, "bn momentum must be in (0,1)");
        assert!(eps > 0.0, "bn eps must be positive");
        BnLayer {
            gamma: Param::new(Tensor::filled(1, dim, S::one())),
            beta: Param::new(Tensor::zeros(1, dim)),
            running_mean: Tensor::zeros(1, dim),
            running_var: Tensor::filled(1, dim, S::one()),
            momentum,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.cols()
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape(
                "bn forward",
                format!("{} columns", self.dim()),
                format!("{}", x.cols()),
            ));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, BnCache<S>)> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Train mode: normalize by batch statistics (biased variance) and update
    /// running statistics; the running variance uses the unbiased estimate.
    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<(Tensor<S>, BnCache<S>)> {
        self.check_input(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let dim = self.dim();
        let n_s = S::of_usize(n);
        let eps = S::of_f64(self.eps);
        let mom = S::of_f64(self.momentum);

        let mut xhat = Tensor::zeros_like(x);
        let mut inv_std = vec![S::zero(); dim];
        for c in 0..dim {
            let mut mean = S::zero();
            for r in 0..n {
                mean += x.get(r, c);
            }
            mean /= n_s;
            let mut var = S::zero();
            for r in 0..n {
                let d = x.get(r, c) - mean;
                var = d.mul_add(d, var);
            }
            var /= n_s;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[c] = istd;
            for r in 0..n {
                xhat.set(r, c, (x.get(r, c) - mean) * istd);
            }
            // Running stats: unbiased variance, PyTorch-style momentum.
            let unbiased = var * n_s / S::of_usize(n - 1);
            let rm = self.running_mean.get(0, c);
            let rv = self.running_var.get(0, c);
            self.running_mean.set(0, c, (S::one() - mom) * rm + mom * mean);
            self.running_var.set(0, c, (S::one() - mom) * rv + mom * unbiased);
        }
        let y = self.scale_shift(&xhat);
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mode: Mode::Train,
            },
        ))
    }

    /// Eval mode: a deterministic affine map from running statistics.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<(Tensor<S>, BnCache<S>)> {
        self.check_input(x)?;
        let dim = self.dim();
        let eps = S::of_f64(self.eps);
        let mut xhat = Tensor::zeros_like(x);
        let mut inv_std = vec![S::zero(); dim];
        for c in 0..dim {
            let mean = self.running_mean.get(0, c);
            let istd = S::one() / (self.running_var.get(0, c) + eps).sqrt();
            inv_std[c] = istd;
            for r in 0..x.rows() {
                xhat.set(r, c, (x.get(r, c) - mean) * istd);
            }
        }
        let y = self.scale_shift(&xhat);
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mode: Mode::Eval,
            },
        ))
    }

    fn scale_shift(&self, xhat: &Tensor<S>) -> Tensor<S> {
        let mut y = Tensor::zeros_like(xhat);
        for r in 0..xhat.rows() {
            let yr = y.row_mut(r);
            let xr = xhat.row(r);
            for c in 0..xr.len() {
                yr[c] = self.gamma.value.get(0, c).mul_add(xr[c], self.beta.value.get(0, c));
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        if !grad_out.same_shape(&cache.xhat) {
            return Err(Error::shape(
                "bn backward",
                format!("{}x{}", cache.xhat.rows(), cache.xhat.cols()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let n = grad_out.rows();
        let dim = self.dim();
        let n_s = S::of_usize(n);
        let mut grad_in = Tensor::zeros_like(grad_out);
        for c in 0..dim {
            let gamma = self.gamma.value.get(0, c);
            let istd = cache.inv_std[c];
            let mut dgamma = S::zero();
            let mut dbeta = S::zero();
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for r in 0..n {
                let dy = grad_out.get(r, c);
                let xh = cache.xhat.get(r, c);
                dgamma = dy.mul_add(xh, dgamma);
                dbeta += dy;
                let dxhat = dy * gamma;
                sum_dxhat += dxhat;
                sum_dxhat_xhat = dxhat.mul_add(xh, sum_dxhat_xhat);
            }
            self.gamma.grad.set(0, c, self.gamma.grad.get(0, c) + dgamma);
            self.beta.grad.set(0, c, self.beta.grad.get(0, c) + dbeta);
            match cache.mode {
                Mode::Train => {
                    // Batch statistics depend on x, so the backward pass
                    // distributes the mean/variance terms over the batch.
                    for r in 0..n {
                        let dxhat = grad_out.get(r, c) * gamma;
                        let xh = cache.xhat.get(r, c);
                        let dx =
                            istd / n_s * (n_s * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
                        grad_in.set(r, c, dx);
                    }
                }
                Mode::Eval => {
                    for r in 0..n {
                        grad_in.set(r, c, grad_out.get(r, c) * gamma * istd);
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// ELU
// ---------------------------------------------------------------------------

pub struct EluCache<S> {
    y: Tensor<S>,
}

/// Elementwise ELU with alpha = 1: `y = x` for `x > 0`, else `exp(x) - 1`.
pub fn elu_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, EluCache<S>) {
    let y = x.map(|v| if v > S::zero() { v } else { v.exp() - S::one() });
    let cache = EluCache { y: y.clone() };
    (y, cache)
}

pub fn elu_backward<S: Scalar>(cache: &EluCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    if !grad_out.same_shape(&cache.y) {
        return Err(Error::shape(
            "elu backward",
            format!("{}x{}", cache.y.rows(), cache.y.cols()),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let mut grad_in = Tensor::zeros_like(grad_out);
    for i in 0..grad_out.data().len() {
        let y = cache.y.data()[i];
        // For x <= 0, dy/dx = exp(x) = y + 1; both branches give 1 at x = 0.
        let slope = if y > S::zero() { S::one() } else { y + S::one() };
        grad_in.data_mut()[i] = grad_out.data()[i] * slope;
    }
    Ok(grad_in)
}

// ---------------------------------------------------------------------------
// L1 row normalization
// ---------------------------------------------------------------------------

/// Zero-row guard for L1 normalization; small enough to leave nonzero rows
/// unchanged at working precision.
pub const L1_NORM_EPS: f64 = 1e-12;

pub struct L1NormCache<S> {
    x: Tensor<S>,
    denom: Vec<S>,
}

/// Per-row `y = x / (||x||_1 + eps)`.
pub fn l1_normalize_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, L1NormCache<S>) {
    let eps = S::of_f64(L1_NORM_EPS);
    let mut y = Tensor::zeros_like(x);
    let mut denom = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let norm = x.row(r).iter().fold(S::zero(), |acc, &v| acc + v.abs());
        let d = norm + eps;
        denom.push(d);
        for (out, &v) in y.row_mut(r).iter_mut().zip(x.row(r)) {
            *out = v / d;
        }
    }
    (y, L1NormCache { x: x.clone(), denom })
}

pub fn l1_normalize_backward<S: Scalar>(cache: &L1NormCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    if !grad_out.same_shape(&cache.x) {
        return Err(Error::shape(
            "l1 normalize backward",
            format!("{}x{}", cache.x.rows(), cache.x.cols()),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let mut grad_in = Tensor::zeros_like(grad_out);
    for r in 0..cache.x.rows() {
        let d = cache.denom[r];
        // dot = sum_j g_j x_j; dL/dx_k = g_k/d - sign(x_k) * dot / d^2
        let mut dot = S::zero();
        for (&g, &xv) in grad_out.row(r).iter().zip(cache.x.row(r)) {
            dot = g.mul_add(xv, dot);
        }
        let dot_over_d2 = dot / (d * d);
        for c in 0..cache.x.cols() {
            let xv = cache.x.get(r, c);
            let sign = if xv > S::zero() {
                S::one()
            } else if xv < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            grad_in.set(r, c, grad_out.get(r, c) / d - sign * dot_over_d2);
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fc_identity_passes_input_through() {
        let layer = FcLayer::from_parts(Tensor::<f64>::identity(2), Tensor::zeros(1, 2)).unwrap();
        let x = Tensor::from_vec(1, 2, vec![3.0, -1.0]).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn fc_hand_sum() {
        let layer = FcLayer::from_parts(
            Tensor::<f64>::from_vec(2, 1, vec![1.0, 1.0]).unwrap(),
            Tensor::from_vec(1, 1, vec![0.5]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(1, 2, vec![2.0, 3.0]).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.5]);
    }

    #[test]
    fn fc_rejects_dimension_mismatch() {
        let layer = FcLayer::<f64>::new(3, 2, &mut rng(0));
        let x = Tensor::<f64>::zeros(1, 4);
        assert!(matches!(layer.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn fc_backward_identity_weight_passes_grad_through() {
        let mut layer = FcLayer::from_parts(Tensor::<f64>::identity(3), Tensor::zeros(1, 3)).unwrap();
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, cache) = layer.forward(&x).unwrap();
        let g = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let gi = layer.backward(&cache, &g).unwrap();
        assert_eq!(gi.data(), g.data());
    }

    #[test]
    fn bn_eval_identity_configuration() {
        let mut layer = BnLayer::<f64>::with_settings(3, 0.1, 1e-12);
        let x = Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn bn_train_normalizes_symmetric_column() {
        let mut layer = BnLayer::<f64>::with_settings(1, 0.1, 1e-12);
        let x = Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Train).unwrap();
        assert_relative_eq!(y.get(0, 0), -1.0, max_relative = 1e-9);
        assert_relative_eq!(y.get(1, 0), 1.0, max_relative = 1e-9);
    }

    #[test]
    fn bn_train_single_row_is_degenerate() {
        let mut layer = BnLayer::<f64>::new(2);
        let x = Tensor::<f64>::zeros(1, 2);
        assert!(matches!(layer.forward(&x, Mode::Train), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn bn_eval_is_bit_deterministic() {
        let mut layer = BnLayer::<f64>::new(4);
        let mut r = rng(3);
        let x = rng::normal_tensor::<f64>(&mut r, 5, 4, 1.0);
        let (y1, _) = layer.forward(&x, Mode::Eval).unwrap();
        let (y2, _) = layer.forward(&x, Mode::Eval).unwrap();
        assert!(y1.bits_eq(&y2));
    }

    #[test]
    fn bn_eval_ignores_batch_composition() {
        // a row's eval output may depend only on running statistics
        let mut layer = BnLayer::<f64>::new(3);
        let mut r = rng(4);
        layer.running_mean = rng::normal_tensor::<f64>(&mut r, 1, 3, 1.0);
        layer.running_var = rng::normal_tensor::<f64>(&mut r, 1, 3, 0.5).map(|v| v.abs() + 0.3);
        let a = rng::normal_tensor::<f64>(&mut r, 1, 3, 1.0);
        let b = rng::normal_tensor::<f64>(&mut r, 1, 3, 1.0);
        let c = rng::normal_tensor::<f64>(&mut r, 1, 3, 1.0);
        let ab = Tensor::from_rows(&[a.row(0).to_vec(), b.row(0).to_vec()]).unwrap();
        let ac = Tensor::from_rows(&[a.row(0).to_vec(), c.row(0).to_vec()]).unwrap();
        let (y1, _) = layer.forward(&ab, Mode::Eval).unwrap();
        let (y2, _) = layer.forward(&ac, Mode::Eval).unwrap();
        assert_eq!(y1.row(0), y2.row(0));
    }

    #[test]
    fn bn_train_updates_running_stats() {
        let mut layer = BnLayer::<f64>::with_settings(1, 0.1, 1e-5);
        let x = Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        layer.forward(&x, Mode::Train).unwrap();
        // mean 2, unbiased var 2: running = 0.9*prev + 0.1*batch
        assert_relative_eq!(layer.running_mean.get(0, 0), 0.2, max_relative = 1e-12);
        assert_relative_eq!(layer.running_var.get(0, 0), 0.9 + 0.2, max_relative = 1e-12);
    }

    #[test]
    fn elu_values() {
        let x = Tensor::from_vec(1, 3, vec![2.0, -1.0, 0.0]).unwrap();
        let (y, _) = elu_forward(&x);
        assert_eq!(y.get(0, 0), 2.0);
        assert_relative_eq!(y.get(0, 1), (-1.0_f64).exp() - 1.0, max_relative = 1e-12);
        assert_eq!(y.get(0, 2), 0.0);
    }

    #[test]
    fn elu_backward_slope_one_on_positive_branch() {
        let x = Tensor::from_vec(1, 1, vec![2.0]).unwrap();
        let (_, cache) = elu_forward(&x);
        let g = Tensor::from_vec(1, 1, vec![0.7]).unwrap();
        let gi = elu_backward(&cache, &g).unwrap();
        assert_eq!(gi.get(0, 0), 0.7);
    }

    #[test]
    fn l1_normalize_hand_cases() {
        let x = Tensor::from_vec(2, 2, vec![2.0, -2.0, 0.0, 0.0]).unwrap();
        let (y, _) = l1_normalize_forward(&x);
        assert_relative_eq!(y.get(0, 0), 0.5, max_relative = 1e-9);
        assert_relative_eq!(y.get(0, 1), -0.5, max_relative = 1e-9);
        assert_eq!(y.get(1, 0), 0.0);
        assert_eq!(y.get(1, 1), 0.0);
    }

    #[test]
    fn l1_normalize_does_not_mutate_input() {
        let x = Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let before = x.clone();
        let _ = l1_normalize_forward(&x);
        assert!(x.bits_eq(&before));
    }
}
