//! Finite-difference verification of every analytic gradient.
//!
//! Each component check rebuilds its computation from a flat parameter
//! vector, evaluates the scalar loss at `theta ± h` per coordinate, and
//! compares the central difference against the analytic gradient computed by
//! the backward passes. Checks run at f64; central differences are not
//! trustworthy at f32.
//!
//! The composite-step check verifies the true gradient of the weighted
//! total objective (adversarial term routed as a plain weighted loss, batch
//! normalization frozen to running statistics); the sign-flipping reversal
//! routing is a separate bit-exactness concern covered by the trainer tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    elu_backward, elu_forward, l1_normalize_backward, l1_normalize_forward, BnLayer, FcLayer, Mode,
};
use crate::discriminators::{
    env_triplet_loss, env_triplet_loss_backward, mapc_loss, mapc_loss_backward, speaker_loss,
    speaker_loss_backward, EnvDisc, LossWeights, SpeakerDisc,
};
use crate::disentangler::{recons_loss, recons_loss_backward, split_codes, split_codes_backward};
use crate::error::{Error, Result};
use crate::model::{DisenModel, ModelConfig};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;
use crate::trainer::{compute_step_gradients, step_losses, Routing, StepOptions};

/// Central-difference step.
pub const FD_H: f64 = 1e-5;
/// Relative-error denominator guard; gradients this small are compared
/// absolutely.
const REL_GUARD: f64 = 1e-3;

/// Every checkable subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Fc,
    BnTrain,
    BnEval,
    Elu,
    L1Normalize,
    EncoderChain,
    ReconsLoss,
    SpeakerLoss,
    EnvTripletLoss,
    MapcLoss,
    FullStep,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Fc => "fc",
            Component::BnTrain => "bn_train",
            Component::BnEval => "bn_eval",
            Component::Elu => "elu",
            Component::L1Normalize => "l1_normalize",
            Component::EncoderChain => "encoder_chain",
            Component::ReconsLoss => "recons_loss",
            Component::SpeakerLoss => "speaker_loss",
            Component::EnvTripletLoss => "env_triplet_loss",
            Component::MapcLoss => "mapc_loss",
            Component::FullStep => "full_step",
        }
    }

    /// Acceptance threshold on the worst relative error.
    pub fn threshold(self) -> f64 {
        match self {
            Component::Fc
            | Component::BnTrain
            | Component::BnEval
            | Component::Elu
            | Component::L1Normalize
            | Component::EncoderChain => 1e-5,
            Component::ReconsLoss
            | Component::SpeakerLoss
            | Component::EnvTripletLoss
            | Component::MapcLoss
            | Component::FullStep => 1e-4,
        }
    }

    pub fn all() -> &'static [Component] {
        &[
            Component::Fc,
            Component::BnTrain,
            Component::BnEval,
            Component::Elu,
            Component::L1Normalize,
            Component::EncoderChain,
            Component::ReconsLoss,
            Component::SpeakerLoss,
            Component::EnvTripletLoss,
            Component::MapcLoss,
            Component::FullStep,
        ]
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_GUARD);
    (analytic - numeric).abs() / denom
}

/// Sweeps every coordinate with central differences against `analytic`.
fn central_diff_max_rel(
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
    theta0: &[f64],
    analytic: &[f64],
) -> Result<f64> {
    assert_eq!(theta0.len(), analytic.len(), "analytic gradient length mismatch");
    let mut theta = theta0.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + FD_H;
        let fp = eval(&theta)?;
        theta[i] = orig - FD_H;
        let fm = eval(&theta)?;
        theta[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at perturbed coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * FD_H);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

struct Cursor<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [f64]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Tensor<f64> {
        let n = rows * cols;
        let t = Tensor::from_vec(rows, cols, self.data[self.pos..self.pos + n].to_vec())
            .expect("finite perturbed parameters");
        self.pos += n;
        t
    }
}

fn push(t: &Tensor<f64>, out: &mut Vec<f64>) {
    out.extend_from_slice(t.data());
}

/// Scalar readout `sum(r .* y)` turning a tensor-valued op into a checkable
/// scalar; `r` is a fixed random functional so every output entry matters.
fn readout(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

// ---------------------------------------------------------------------------
// Per-component checks
// ---------------------------------------------------------------------------

fn check_fc(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(2..6);
    let in_dim = rng.random_range(2..7);
    let out_dim = rng.random_range(2..7);
    let w = normal_tensor::<f64>(&mut rng, in_dim, out_dim, 1.0);
    let b = normal_tensor::<f64>(&mut rng, 1, out_dim, 1.0);
    let x = normal_tensor::<f64>(&mut rng, rows, in_dim, 1.0);
    let r = normal_tensor::<f64>(&mut rng, rows, out_dim, 1.0);

    let mut theta0 = Vec::new();
    push(&w, &mut theta0);
    push(&b, &mut theta0);
    push(&x, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let layer = FcLayer::from_parts(c.tensor(in_dim, out_dim), c.tensor(1, out_dim))?;
        let xs = c.tensor(rows, in_dim);
        let (y, _) = layer.forward(&xs)?;
        Ok(readout(&y, &r))
    };

    let mut layer = FcLayer::from_parts(w, b)?;
    let (_, cache) = layer.forward(&x)?;
    let grad_x = layer.backward(&cache, &r)?;
    let mut analytic = Vec::new();
    push(&layer.weight.grad, &mut analytic);
    push(&layer.bias.grad, &mut analytic);
    push(&grad_x, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

/// Used by the checker self-test and the CLI bug-injection fixture: runs the
/// fully-connected check with the largest analytic gradient sign-flipped,
/// which a sound checker must flag.
pub fn check_fc_with_flipped_gradient(seed: u64) -> Result<f64> {
    let (rows, in_dim, out_dim) = (3, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normal_tensor::<f64>(&mut rng, in_dim, out_dim, 1.0);
    let b = normal_tensor::<f64>(&mut rng, 1, out_dim, 1.0);
    let x = normal_tensor::<f64>(&mut rng, rows, in_dim, 1.0);
    let r = normal_tensor::<f64>(&mut rng, rows, out_dim, 1.0);

    let mut theta0 = Vec::new();
    push(&w, &mut theta0);
    push(&b, &mut theta0);
    push(&x, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let layer = FcLayer::from_parts(c.tensor(in_dim, out_dim), c.tensor(1, out_dim))?;
        let xs = c.tensor(rows, in_dim);
        let (y, _) = layer.forward(&xs)?;
        Ok(readout(&y, &r))
    };

    let mut layer = FcLayer::from_parts(w, b)?;
    let (_, cache) = layer.forward(&x)?;
    let grad_x = layer.backward(&cache, &r)?;
    let mut analytic = Vec::new();
    push(&layer.weight.grad, &mut analytic);
    push(&layer.bias.grad, &mut analytic);
    push(&grad_x, &mut analytic);
    let (idx, _) = analytic
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("nonempty gradient");
    analytic[idx] = -analytic[idx];

    central_diff_max_rel(eval, &theta0, &analytic)
}

fn check_bn(seed: u64, mode: Mode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(3..8);
    let dim = rng.random_range(2..6);
    let gamma = normal_tensor::<f64>(&mut rng, 1, dim, 1.0).map(|v| v + 1.5);
    let beta = normal_tensor::<f64>(&mut rng, 1, dim, 1.0);
    let x = normal_tensor::<f64>(&mut rng, rows, dim, 1.0);
    let r = normal_tensor::<f64>(&mut rng, rows, dim, 1.0);
    let run_mean = normal_tensor::<f64>(&mut rng, 1, dim, 0.5);
    let run_var = normal_tensor::<f64>(&mut rng, 1, dim, 0.25).map(|v| v.abs() + 0.5);

    let build = |gamma: Tensor<f64>, beta: Tensor<f64>| {
        let mut layer = BnLayer::<f64>::new(dim);
        layer.gamma.value = gamma;
        layer.beta.value = beta;
        layer.running_mean = run_mean.clone();
        layer.running_var = run_var.clone();
        layer
    };

    let mut theta0 = Vec::new();
    push(&gamma, &mut theta0);
    push(&beta, &mut theta0);
    push(&x, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let mut layer = build(c.tensor(1, dim), c.tensor(1, dim));
        let xs = c.tensor(rows, dim);
        let (y, _) = layer.forward(&xs, mode)?;
        Ok(readout(&y, &r))
    };

    let mut layer = build(gamma, beta);
    let (_, cache) = layer.forward(&x, mode)?;
    let grad_x = layer.backward(&cache, &r)?;
    let mut analytic = Vec::new();
    push(&layer.gamma.grad, &mut analytic);
    push(&layer.beta.grad, &mut analytic);
    push(&grad_x, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

fn check_elu(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(2..6);
    let cols = rng.random_range(2..7);
    let x = normal_tensor::<f64>(&mut rng, rows, cols, 1.0);
    let r = normal_tensor::<f64>(&mut rng, rows, cols, 1.0);

    let mut theta0 = Vec::new();
    push(&x, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let xs = c.tensor(rows, cols);
        let (y, _) = elu_forward(&xs);
        Ok(readout(&y, &r))
    };

    let (_, cache) = elu_forward(&x);
    let grad_x = elu_backward(&cache, &r)?;
    let mut analytic = Vec::new();
    push(&grad_x, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

/// Full-Jacobian check: every output of the row normalization against every
/// input, not just a random functional.
fn check_l1_normalize(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(2..5);
    let cols = rng.random_range(2..6);
    // keep entries away from the sign kink at 0 relative to the FD step
    let x = normal_tensor::<f64>(&mut rng, rows, cols, 1.0).map(|v| {
        if v.abs() < 0.05 {
            0.05 * v.signum() + v
        } else {
            v
        }
    });

    let (_, cache) = l1_normalize_forward(&x);
    let mut worst = 0.0_f64;
    for out_r in 0..rows {
        for out_c in 0..cols {
            let mut onehot = Tensor::<f64>::zeros(rows, cols);
            onehot.set(out_r, out_c, 1.0);
            let analytic_row = l1_normalize_backward(&cache, &onehot)?;
            for in_r in 0..rows {
                for in_c in 0..cols {
                    let mut xp = x.clone();
                    xp.set(in_r, in_c, x.get(in_r, in_c) + FD_H);
                    let (yp, _) = l1_normalize_forward(&xp);
                    let mut xm = x.clone();
                    xm.set(in_r, in_c, x.get(in_r, in_c) - FD_H);
                    let (ym, _) = l1_normalize_forward(&xm);
                    let numeric = (yp.get(out_r, out_c) - ym.get(out_r, out_c)) / (2.0 * FD_H);
                    worst = worst.max(rel_err(analytic_row.get(in_r, in_c), numeric));
                }
            }
        }
    }
    Ok(worst)
}

/// Composed encoder chain: batch norm (train), fully-connected, split with
/// independent L1 normalization, then a smooth readout of both code halves.
fn check_encoder_chain(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 3 * rng.random_range(1..4);
    let d = rng.random_range(3..8);
    let z = 2 * rng.random_range(1..4);
    let gamma = normal_tensor::<f64>(&mut rng, 1, d, 0.5).map(|v| v + 1.0);
    let beta = normal_tensor::<f64>(&mut rng, 1, d, 0.5);
    let w = normal_tensor::<f64>(&mut rng, d, z, 1.0);
    let b = normal_tensor::<f64>(&mut rng, 1, z, 0.5);
    let x = normal_tensor::<f64>(&mut rng, rows, d, 1.0);
    let r_spk = normal_tensor::<f64>(&mut rng, rows, z / 2, 1.0);
    let r_env = normal_tensor::<f64>(&mut rng, rows, z / 2, 1.0);

    let mut theta0 = Vec::new();
    push(&gamma, &mut theta0);
    push(&beta, &mut theta0);
    push(&w, &mut theta0);
    push(&b, &mut theta0);
    push(&x, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let mut bn = BnLayer::<f64>::new(d);
        bn.gamma.value = c.tensor(1, d);
        bn.beta.value = c.tensor(1, d);
        let fc = FcLayer::from_parts(c.tensor(d, z), c.tensor(1, z))?;
        let xs = c.tensor(rows, d);
        let (h, _) = bn.forward(&xs, Mode::Train)?;
        let (zz, _) = fc.forward(&h)?;
        let (codes, _) = split_codes(&zz)?;
        Ok(readout(&codes.spk, &r_spk) + readout(&codes.env, &r_env))
    };

    let mut bn = BnLayer::<f64>::new(d);
    bn.gamma.value = gamma;
    bn.beta.value = beta;
    let mut fc = FcLayer::from_parts(w, b)?;
    let (h, bn_cache) = bn.forward(&x, Mode::Train)?;
    let (zz, fc_cache) = fc.forward(&h)?;
    let (_, split_cache) = split_codes(&zz)?;
    let grad_z = split_codes_backward(&split_cache, &r_spk, &r_env)?;
    let grad_h = fc.backward(&fc_cache, &grad_z)?;
    let grad_x = bn.backward(&bn_cache, &grad_h)?;
    let mut analytic = Vec::new();
    push(&bn.gamma.grad, &mut analytic);
    push(&bn.beta.grad, &mut analytic);
    push(&fc.weight.grad, &mut analytic);
    push(&fc.bias.grad, &mut analytic);
    push(&grad_x, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

fn check_recons_loss(seed: u64) -> Result<f64> {
    let (rows, cols) = (6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = normal_tensor::<f64>(&mut rng, rows, cols, 1.0);
    // keep |e - ê| well away from the absolute-value kink
    let offset = normal_tensor::<f64>(&mut rng, rows, cols, 1.0).map(|v| v.signum() * (v.abs() + 0.2));
    let e_hat = e.add(&offset)?;

    let mut theta0 = Vec::new();
    push(&e_hat, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let eh = c.tensor(rows, cols);
        recons_loss(&e, &eh)
    };

    let analytic_t = recons_loss_backward(&e, &e_hat, 1.0)?;
    let mut analytic = Vec::new();
    push(&analytic_t, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

fn check_speaker_loss(seed: u64) -> Result<f64> {
    let (triplets, dim, classes) = (2, 3, 4);
    let rows = 3 * triplets;
    let labels = [0usize, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fw = normal_tensor::<f64>(&mut rng, dim, classes, 1.0);
    let fb = normal_tensor::<f64>(&mut rng, 1, classes, 0.5);
    let w = Tensor::filled(1, 1, 10.0);
    let b = Tensor::filled(1, 1, -5.0);
    let spk = normal_tensor::<f64>(&mut rng, rows, dim, 1.0);

    let mut theta0 = Vec::new();
    push(&fw, &mut theta0);
    push(&fb, &mut theta0);
    push(&w, &mut theta0);
    push(&b, &mut theta0);
    push(&spk, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let disc = SpeakerDisc::<f64> {
            classifier: FcLayer::from_parts(c.tensor(dim, classes), c.tensor(1, classes))?,
            ap_scale: crate::diffcore::Param::new(c.tensor(1, 1)),
            ap_offset: crate::diffcore::Param::new(c.tensor(1, 1)),
        };
        let x = c.tensor(rows, dim);
        let (loss, _) = speaker_loss(&disc, &x, &labels)?;
        Ok(loss)
    };

    let mut disc = SpeakerDisc::<f64> {
        classifier: FcLayer::from_parts(fw, fb)?,
        ap_scale: crate::diffcore::Param::new(w),
        ap_offset: crate::diffcore::Param::new(b),
    };
    let (_, cache) = speaker_loss(&disc, &spk, &labels)?;
    let grad_spk = speaker_loss_backward(&mut disc, &cache, 1.0)?;
    let mut analytic = Vec::new();
    push(&disc.classifier.weight.grad, &mut analytic);
    push(&disc.classifier.bias.grad, &mut analytic);
    push(&disc.ap_scale.grad, &mut analytic);
    push(&disc.ap_offset.grad, &mut analytic);
    push(&grad_spk, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

fn check_env_triplet_loss(seed: u64) -> Result<f64> {
    let (triplets, in_dim, hidden, out_dim) = (3, 4, 5, 4);
    let rows = 3 * triplets;
    let margin = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes: [(usize, usize); 8] = [
        (1, in_dim),      // bn1 gamma
        (1, in_dim),      // bn1 beta
        (in_dim, hidden), // fc1 w
        (1, hidden),      // fc1 b
        (1, hidden),      // bn2 gamma
        (1, hidden),      // bn2 beta
        (hidden, out_dim),
        (1, out_dim),
    ];
    let mut tensors: Vec<Tensor<f64>> = Vec::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        let mut t = normal_tensor::<f64>(&mut rng, r, c, 1.0);
        // keep batch-norm scales away from zero
        if i == 0 || i == 4 {
            t = t.map(|v| v * 0.3 + 1.0);
        }
        tensors.push(t);
    }
    let x = normal_tensor::<f64>(&mut rng, rows, in_dim, 1.0);

    let mut theta0 = Vec::new();
    for t in &tensors {
        push(t, &mut theta0);
    }
    push(&x, &mut theta0);

    let build = |c: &mut Cursor| -> Result<EnvDisc<f64>> {
        let mut rng0 = ChaCha8Rng::seed_from_u64(0);
        let mut disc = EnvDisc::<f64>::new(in_dim, hidden, out_dim, &mut rng0);
        disc.block1.bn.gamma.value = c.tensor(1, in_dim);
        disc.block1.bn.beta.value = c.tensor(1, in_dim);
        disc.block1.fc = FcLayer::from_parts(c.tensor(in_dim, hidden), c.tensor(1, hidden))?;
        disc.block2.bn.gamma.value = c.tensor(1, hidden);
        disc.block2.bn.beta.value = c.tensor(1, hidden);
        disc.block2.fc = FcLayer::from_parts(c.tensor(hidden, out_dim), c.tensor(1, out_dim))?;
        Ok(disc)
    };

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let mut disc = build(&mut c)?;
        let xs = c.tensor(rows, in_dim);
        let (loss, _) = env_triplet_loss(&mut disc, &xs, margin, Mode::Train)?;
        Ok(loss)
    };

    let mut c = Cursor::new(&theta0);
    let mut disc = build(&mut c)?;
    let (_, cache) = env_triplet_loss(&mut disc, &x, margin, Mode::Train)?;
    let grad_x = env_triplet_loss_backward(&mut disc, &cache, 1.0)?;
    let mut analytic = Vec::new();
    push(&disc.block1.bn.gamma.grad, &mut analytic);
    push(&disc.block1.bn.beta.grad, &mut analytic);
    push(&disc.block1.fc.weight.grad, &mut analytic);
    push(&disc.block1.fc.bias.grad, &mut analytic);
    push(&disc.block2.bn.gamma.grad, &mut analytic);
    push(&disc.block2.bn.beta.grad, &mut analytic);
    push(&disc.block2.fc.weight.grad, &mut analytic);
    push(&disc.block2.fc.bias.grad, &mut analytic);
    push(&grad_x, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

fn check_mapc_loss(seed: u64) -> Result<f64> {
    let (rows, d, q) = (8, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spk = normal_tensor::<f64>(&mut rng, rows, d, 1.0);
    let env = normal_tensor::<f64>(&mut rng, rows, q, 1.0);

    let mut theta0 = Vec::new();
    push(&spk, &mut theta0);
    push(&env, &mut theta0);

    let eval = |theta: &[f64]| -> Result<f64> {
        let mut c = Cursor::new(theta);
        let a = c.tensor(rows, d);
        let b = c.tensor(rows, q);
        let (loss, _) = mapc_loss(&a, &b)?;
        Ok(loss)
    };

    let (_, cache) = mapc_loss(&spk, &env)?;
    let (ga, gb) = mapc_loss_backward(&cache, 1.0);
    let mut analytic = Vec::new();
    push(&ga, &mut analytic);
    push(&gb, &mut analytic);

    central_diff_max_rel(eval, &theta0, &analytic)
}

fn full_step_config() -> ModelConfig {
    ModelConfig {
        input_dim: 10,
        code_dim: 6,
        n_speakers: 4,
        env_hidden_dim: 5,
        env_out_dim: 4,
    }
}

fn gather_param_values(model: &mut DisenModel<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params(|_, _, p| out.extend_from_slice(p.value.data()));
    out
}

fn scatter_param_values(model: &mut DisenModel<f64>, theta: &[f64]) {
    let mut pos = 0;
    model.visit_params(|_, _, p| {
        let n = p.value.data().len();
        p.value.data_mut().copy_from_slice(&theta[pos..pos + n]);
        pos += n;
    });
    assert_eq!(pos, theta.len(), "flat parameter length mismatch");
}

fn gather_param_grads(model: &mut DisenModel<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params(|_, _, p| out.extend_from_slice(p.grad.data()));
    out
}

/// Verifies the composite objective end to end: every parameter of the
/// auto-encoder and all three discriminators against finite differences of
/// the weighted total loss, on a two-triplet batch with batch normalization
/// frozen to running statistics.
fn check_full_step(seed: u64) -> Result<f64> {
    let cfg = full_step_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DisenModel::<f64>::new(cfg, &mut rng)?;
    let batch = normal_tensor::<f64>(&mut rng, 6, cfg.input_dim, 1.0);
    let labels = [0usize, 1];
    let weights = LossWeights::default();
    let opts = StepOptions {
        bn_mode: Mode::Eval,
        routing: Routing::PlainComposite,
        swap_codes: true,
    };

    let theta0 = gather_param_values(&mut model);
    let (_, _) = compute_step_gradients(&mut model, &batch, &labels, &weights, opts)?;
    let analytic = gather_param_grads(&mut model);

    let base = model.clone();
    let eval = |theta: &[f64]| -> Result<f64> {
        let mut m = base.clone();
        scatter_param_values(&mut m, theta);
        let report = step_losses(&mut m, &batch, &labels, &weights, opts)?;
        Ok(report.l_total)
    };
    central_diff_max_rel(eval, &theta0, &analytic)
}

/// Runs one component check and returns the worst relative error.
pub fn gradcheck(component: Component, seed: u64) -> Result<f64> {
    match component {
        Component::Fc => check_fc(seed),
        Component::BnTrain => check_bn(seed, Mode::Train),
        Component::BnEval => check_bn(seed, Mode::Eval),
        Component::Elu => check_elu(seed),
        Component::L1Normalize => check_l1_normalize(seed),
        Component::EncoderChain => check_encoder_chain(seed),
        Component::ReconsLoss => check_recons_loss(seed),
        Component::SpeakerLoss => check_speaker_loss(seed),
        Component::EnvTripletLoss => check_env_triplet_loss(seed),
        Component::MapcLoss => check_mapc_loss(seed),
        Component::FullStep => check_full_step(seed),
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Runs every component plus the checker self-test (a deliberately corrupted
/// gradient that the checker must flag). With `inject_bug` the corrupted
/// gradient is reported as if it were the real fully-connected check, so the
/// suite fails; this exists to prove a broken gradient cannot slip through.
pub fn run_suite(seed: u64, inject_bug: bool) -> Result<Vec<SuiteResult>> {
    let mut results = Vec::new();
    for &component in Component::all() {
        let err = if inject_bug && component == Component::Fc {
            check_fc_with_flipped_gradient(seed)?
        } else {
            gradcheck(component, seed)?
        };
        let threshold = component.threshold();
        results.push(SuiteResult {
            name: component.name(),
            max_rel_err: err,
            threshold,
            pass: err < threshold,
        });
    }
    // self-test: a sign-flipped gradient must produce a large error
    let err = check_fc_with_flipped_gradient(seed)?;
    results.push(SuiteResult {
        name: "checker_selftest",
        max_rel_err: err,
        threshold: 0.1,
        pass: err > 0.1,
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_gradients_match_finite_differences_tightly() {
        for seed in [0, 1, 2] {
            let err = gradcheck(Component::Fc, seed).unwrap();
            assert!(err < 1e-6, "seed {seed}: fc error {err}");
        }
    }

    #[test]
    fn bn_gradients_match_finite_differences_tightly() {
        for seed in [0, 1, 2] {
            let err = gradcheck(Component::BnTrain, seed).unwrap();
            assert!(err < 1e-6, "seed {seed}: bn train error {err}");
            let err = gradcheck(Component::BnEval, seed).unwrap();
            assert!(err < 1e-6, "seed {seed}: bn eval error {err}");
        }
    }

    #[test]
    fn elu_gradient_matches_finite_differences() {
        let err = gradcheck(Component::Elu, 0).unwrap();
        assert!(err < 1e-6, "elu error {err}");
    }

    #[test]
    fn l1_normalize_full_jacobian_matches() {
        for seed in [0, 5, 9] {
            let err = gradcheck(Component::L1Normalize, seed).unwrap();
            assert!(err < 1e-6, "seed {seed}: l1 error {err}");
        }
    }

    #[test]
    fn encoder_chain_matches_finite_differences() {
        let err = gradcheck(Component::EncoderChain, 3).unwrap();
        assert!(err < 1e-5, "encoder chain error {err}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let err = gradcheck(Component::ReconsLoss, 1).unwrap();
        assert!(err < 1e-5, "recons error {err}");
        let err = gradcheck(Component::SpeakerLoss, 1).unwrap();
        assert!(err < 1e-4, "speaker loss error {err}");
        let err = gradcheck(Component::EnvTripletLoss, 1).unwrap();
        assert!(err < 1e-4, "env triplet error {err}");
        let err = gradcheck(Component::MapcLoss, 1).unwrap();
        assert!(err < 1e-4, "mapc error {err}");
    }

    #[test]
    fn full_step_matches_finite_differences() {
        let err = gradcheck(Component::FullStep, 0).unwrap();
        assert!(err < 1e-4, "full step error {err}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let err = check_fc_with_flipped_gradient(0).unwrap();
        assert!(err > 0.1, "sign flip not detected: {err}");
    }

    #[test]
    fn layer_gradients_hold_across_100_random_configurations() {
        for seed in 0..100 {
            for component in [
                Component::Fc,
                Component::BnTrain,
                Component::BnEval,
                Component::Elu,
                Component::L1Normalize,
            ] {
                let err = gradcheck(component, seed).unwrap();
                assert!(
                    err < 1e-5,
                    "{} at seed {seed}: worst rel err {err}",
                    component.name()
                );
            }
        }
    }
}
