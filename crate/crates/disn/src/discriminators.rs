//! Discriminators and their losses.
//!
//! Three discriminators sit on the bottleneck codes:
//!
//! * a speaker discriminator `S`: one fully-connected layer for a softmax
//!   cross-entropy term plus an angular prototypical term with a learned
//!   scale/offset, both computed on the speaker codes;
//! * an environment discriminator `E^E` scoring environment codes with a
//!   squared-distance triplet hinge;
//! * an adversarial environment discriminator `E^S` with the same
//!   architecture (never shared parameters) applied to the speaker codes.
//!
//! The correlation penalty is the mean absolute Pearson correlation over all
//! (speaker-dimension, environment-dimension) pairs across the batch.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{elu_backward, elu_forward, BnCache, BnLayer, EluCache, FcCache, FcLayer, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss weights of the composite objective plus the triplet-hinge margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub lambda_e: f64,
    pub lambda_adv: f64,
    pub lambda_c: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_r: 1.0,
            lambda_e: 1.0,
            lambda_adv: 0.5,
            lambda_c: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
            ("lambda_e", self.lambda_e),
            ("lambda_adv", self.lambda_adv),
            ("lambda_c", self.lambda_c),
            ("margin", self.margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative finite value, got {v}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Speaker discriminator
// ---------------------------------------------------------------------------

/// Clamp floor keeping the angular-prototypical scale positive.
pub const AP_SCALE_MIN: f64 = 1e-6;
pub const AP_SCALE_INIT: f64 = 10.0;
pub const AP_OFFSET_INIT: f64 = -5.0;

/// Cosine-denominator guard; random data never reaches it.
const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SpeakerDisc<S> {
    /// One fully-connected layer mapping speaker codes to class logits.
    pub classifier: FcLayer<S>,
    /// Angular prototypical scale `w`, kept `>= AP_SCALE_MIN` after updates.
    pub ap_scale: Param<S>,
    /// Angular prototypical offset `b`.
    pub ap_offset: Param<S>,
}

impl<S: Scalar> SpeakerDisc<S> {
    pub fn new(code_dim: usize, n_speakers: usize, rng: &mut ChaCha8Rng) -> Self {
        SpeakerDisc {
            classifier: FcLayer::new(code_dim, n_speakers, rng),
            ap_scale: Param::new(Tensor::filled(1, 1, S::of_f64(AP_SCALE_INIT))),
            ap_offset: Param::new(Tensor::filled(1, 1, S::of_f64(AP_OFFSET_INIT))),
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn clamp_scale(&mut self) {
        let floor = S::of_f64(AP_SCALE_MIN);
        if self.ap_scale.value.get(0, 0) < floor {
            self.ap_scale.value.set(0, 0, floor);
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy (shared by the speaker loss and linear probes)
// ---------------------------------------------------------------------------

/// Row-wise softmax cross-entropy against integer labels, averaged over
/// rows. Returns the loss and the softmax probabilities for backward.
pub fn softmax_ce<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "softmax_ce",
            format!("{} labels", logits.rows()),
            format!("{}", labels.len()),
        ));
    }
    let mut probs = Tensor::zeros_like(logits);
    let mut loss = S::zero();
    for r in 0..logits.rows() {
        let label = labels[r];
        if label >= logits.cols() {
            return Err(Error::Config(format!(
                "label {label} out of range for {} classes",
                logits.cols()
            )));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        for c in 0..row.len() {
            probs.set(r, c, (row[c] - log_denom).exp());
        }
    }
    Ok((loss / S::of_usize(logits.rows()), probs))
}

/// Gradient of [`softmax_ce`] with respect to the logits.
pub fn softmax_ce_backward<S: Scalar>(probs: &Tensor<S>, labels: &[usize], upstream: S) -> Tensor<S> {
    let scale = upstream / S::of_usize(probs.rows());
    let mut grad = probs.scale(scale);
    for (r, &label) in labels.iter().enumerate() {
        let v = grad.get(r, label);
        grad.set(r, label, v - scale);
    }
    grad
}

// ---------------------------------------------------------------------------
// Speaker loss: softmax CE over all rows + angular prototypical over triplets
// ---------------------------------------------------------------------------

pub struct SpeakerLossCache<S> {
    spk: Tensor<S>,
    labels_per_row: Vec<usize>,
    ce_probs: Tensor<S>,
    ce_fc: FcCache<S>,
    queries: Tensor<S>,
    prototypes: Tensor<S>,
    q_norms: Vec<S>,
    c_norms: Vec<S>,
    cosines: Tensor<S>,
    ap_probs: Tensor<S>,
}

/// Combined speaker loss on triplet-structured speaker codes.
///
/// The softmax term classifies every row; the angular prototypical term
/// takes each triplet's first member as the query and the mean of the other
/// two as its prototype, scoring `w * cos(query_i, prototype_k) + b` over
/// all prototypes in the batch with the matching triplet as the target.
/// `labels` holds one speaker class per triplet.
pub fn speaker_loss<S: Scalar>(
    disc: &SpeakerDisc<S>,
    spk: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, SpeakerLossCache<S>)> {
    if spk.rows() % 3 != 0 {
        return Err(Error::BatchStructure(format!(
            "speaker_loss requires triplet-structured rows, got {}",
            spk.rows()
        )));
    }
    let triplets = spk.rows() / 3;
    if labels.len() != triplets {
        return Err(Error::shape(
            "speaker_loss",
            format!("{triplets} labels (one per triplet)"),
            format!("{}", labels.len()),
        ));
    }
    if triplets < 2 {
        return Err(Error::BatchStructure(
            "the angular prototypical term needs at least 2 triplets (negatives)".into(),
        ));
    }

    // Softmax cross-entropy over all rows.
    let labels_per_row: Vec<usize> = labels.iter().flat_map(|&l| [l, l, l]).collect();
    let (logits, ce_fc) = disc.classifier.forward(spk)?;
    let (ce_loss, ce_probs) = softmax_ce(&logits, &labels_per_row)?;

    // Angular prototypical term.
    let half = S::of_f64(0.5);
    let mut queries = Tensor::zeros(triplets, spk.cols());
    let mut prototypes = Tensor::zeros(triplets, spk.cols());
    for t in 0..triplets {
        queries.row_mut(t).copy_from_slice(spk.row(3 * t));
        for c in 0..spk.cols() {
            prototypes.set(t, c, (spk.get(3 * t + 1, c) + spk.get(3 * t + 2, c)) * half);
        }
    }
    let eps = S::of_f64(COS_EPS);
    let l2 = |row: &[S]| row.iter().fold(S::zero(), |acc, &v| v.mul_add(v, acc)).sqrt();
    let q_norms: Vec<S> = (0..triplets).map(|t| l2(queries.row(t))).collect();
    let c_norms: Vec<S> = (0..triplets).map(|t| l2(prototypes.row(t))).collect();
    let w = disc.ap_scale.value.get(0, 0);
    let b = disc.ap_offset.value.get(0, 0);
    let mut cosines = Tensor::zeros(triplets, triplets);
    let mut ap_logits = Tensor::zeros(triplets, triplets);
    for i in 0..triplets {
        for k in 0..triplets {
            let mut dot = S::zero();
            for c in 0..spk.cols() {
                dot = queries.get(i, c).mul_add(prototypes.get(k, c), dot);
            }
            let denom = (q_norms[i] * c_norms[k]).max(eps);
            let cos = dot / denom;
            cosines.set(i, k, cos);
            ap_logits.set(i, k, w.mul_add(cos, b));
        }
    }
    let ap_targets: Vec<usize> = (0..triplets).collect();
    let (ap_loss, ap_probs) = softmax_ce(&ap_logits, &ap_targets)?;

    Ok((
        ce_loss + ap_loss,
        SpeakerLossCache {
            spk: spk.clone(),
            labels_per_row,
            ce_probs,
            ce_fc,
            queries,
            prototypes,
            q_norms,
            c_norms,
            cosines,
            ap_probs,
        },
    ))
}

/// Backward through [`speaker_loss`]: accumulates classifier and scale/offset
/// gradients, returns the gradient with respect to the speaker codes.
pub fn speaker_loss_backward<S: Scalar>(
    disc: &mut SpeakerDisc<S>,
    cache: &SpeakerLossCache<S>,
    upstream: S,
) -> Result<Tensor<S>> {
    let triplets = cache.queries.rows();
    let dim = cache.spk.cols();

    // Softmax CE path through the classifier.
    let dlogits = softmax_ce_backward(&cache.ce_probs, &cache.labels_per_row, upstream);
    let mut grad_spk = disc.classifier.backward(&cache.ce_fc, &dlogits)?;

    // Angular prototypical path.
    let ap_targets: Vec<usize> = (0..triplets).collect();
    let dap = softmax_ce_backward(&cache.ap_probs, &ap_targets, upstream);
    let w = disc.ap_scale.value.get(0, 0);
    let mut dw = S::zero();
    let mut db = S::zero();
    let eps = S::of_f64(COS_EPS);
    for i in 0..triplets {
        for k in 0..triplets {
            let g = dap.get(i, k);
            dw = g.mul_add(cache.cosines.get(i, k), dw);
            db += g;
            let dcos = g * w;
            let qn = cache.q_norms[i];
            let cn = cache.c_norms[k];
            let denom = (qn * cn).max(eps);
            let cos = cache.cosines.get(i, k);
            for c in 0..dim {
                let q = cache.queries.get(i, c);
                let p = cache.prototypes.get(k, c);
                // d cos / d q = p/denom - cos * q / |q|^2
                let dq = dcos * (p / denom - cos * q / (qn * qn));
                let dp = dcos * (q / denom - cos * p / (cn * cn));
                let qi = grad_spk.get(3 * i, c);
                grad_spk.set(3 * i, c, qi + dq);
                let half_dp = dp * S::of_f64(0.5);
                let b1 = grad_spk.get(3 * k + 1, c);
                grad_spk.set(3 * k + 1, c, b1 + half_dp);
                let b2 = grad_spk.get(3 * k + 2, c);
                grad_spk.set(3 * k + 2, c, b2 + half_dp);
            }
        }
    }
    let wg = disc.ap_scale.grad.get(0, 0);
    disc.ap_scale.grad.set(0, 0, wg + dw);
    let bg = disc.ap_offset.grad.get(0, 0);
    disc.ap_offset.grad.set(0, 0, bg + db);
    Ok(grad_spk)
}

// ---------------------------------------------------------------------------
// Environment discriminator
// ---------------------------------------------------------------------------

/// One MLP block: batch normalization, ELU, then a fully-connected layer.
#[derive(Debug, Clone)]
pub struct MlpBlock<S> {
    pub bn: BnLayer<S>,
    pub fc: FcLayer<S>,
}

pub struct MlpBlockCache<S> {
    bn: BnCache<S>,
    elu: EluCache<S>,
    fc: FcCache<S>,
}

impl<S: Scalar> MlpBlock<S> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpBlock {
            bn: BnLayer::new(in_dim),
            fc: FcLayer::new(in_dim, out_dim, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, MlpBlockCache<S>)> {
        let (h, bn) = self.bn.forward(x, mode)?;
        let (a, elu) = elu_forward(&h);
        let (y, fc) = self.fc.forward(&a)?;
        Ok((y, MlpBlockCache { bn, elu, fc }))
    }

    pub fn backward(&mut self, cache: &MlpBlockCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let ga = self.fc.backward(&cache.fc, grad_out)?;
        let gh = elu_backward(&cache.elu, &ga)?;
        self.bn.backward(&cache.bn, &gh)
    }
}

/// Environment classifier `g`: two MLP blocks. `E^E` and `E^S` are two
/// instances of this type and never share parameters.
#[derive(Debug, Clone)]
pub struct EnvDisc<S> {
    pub block1: MlpBlock<S>,
    pub block2: MlpBlock<S>,
}

pub struct EnvDiscCache<S> {
    b1: MlpBlockCache<S>,
    b2: MlpBlockCache<S>,
}

impl<S: Scalar> EnvDisc<S> {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EnvDisc {
            block1: MlpBlock::new(in_dim, hidden_dim, rng),
            block2: MlpBlock::new(hidden_dim, out_dim, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, EnvDiscCache<S>)> {
        let (h, b1) = self.block1.forward(x, mode)?;
        let (y, b2) = self.block2.forward(&h, mode)?;
        Ok((y, EnvDiscCache { b1, b2 }))
    }

    pub fn backward(&mut self, cache: &EnvDiscCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let gh = self.block2.backward(&cache.b2, grad_out)?;
        self.block1.backward(&cache.b1, &gh)
    }
}

// ---------------------------------------------------------------------------
// Environment triplet loss
// ---------------------------------------------------------------------------

pub struct TripletHingeCache<S> {
    outputs: Tensor<S>,
    active: Vec<bool>,
}

/// Triplet hinge on discriminator outputs: per triplet,
/// `max(0, margin + ||g1 - g2||^2 - ||g1 - g3||^2)`, batch-averaged.
pub fn triplet_hinge_loss<S: Scalar>(outputs: &Tensor<S>, margin: S) -> Result<(S, TripletHingeCache<S>)> {
    if outputs.rows() % 3 != 0 {
        return Err(Error::BatchStructure(format!(
            "triplet hinge requires triplet-structured rows, got {}",
            outputs.rows()
        )));
    }
    let triplets = outputs.rows() / 3;
    let mut loss = S::zero();
    let mut active = vec![false; triplets];
    for t in 0..triplets {
        let (a, b, c) = (3 * t, 3 * t + 1, 3 * t + 2);
        let mut pos = S::zero();
        let mut neg = S::zero();
        for col in 0..outputs.cols() {
            let dp = outputs.get(a, col) - outputs.get(b, col);
            pos = dp.mul_add(dp, pos);
            let dn = outputs.get(a, col) - outputs.get(c, col);
            neg = dn.mul_add(dn, neg);
        }
        let u = margin + pos - neg;
        if u > S::zero() {
            loss += u;
            active[t] = true;
        }
    }
    Ok((
        loss / S::of_usize(triplets),
        TripletHingeCache {
            outputs: outputs.clone(),
            active,
        },
    ))
}

/// Gradient of [`triplet_hinge_loss`] with respect to the outputs.
pub fn triplet_hinge_backward<S: Scalar>(cache: &TripletHingeCache<S>, upstream: S) -> Tensor<S> {
    let triplets = cache.active.len();
    let scale = upstream / S::of_usize(triplets) * S::of_f64(2.0);
    let mut grad = Tensor::zeros_like(&cache.outputs);
    for t in 0..triplets {
        if !cache.active[t] {
            continue;
        }
        let (a, b, c) = (3 * t, 3 * t + 1, 3 * t + 2);
        for col in 0..cache.outputs.cols() {
            let dp = cache.outputs.get(a, col) - cache.outputs.get(b, col);
            let dn = cache.outputs.get(a, col) - cache.outputs.get(c, col);
            grad.set(a, col, grad.get(a, col) + scale * (dp - dn));
            grad.set(b, col, grad.get(b, col) - scale * dp);
            grad.set(c, col, grad.get(c, col) + scale * dn);
        }
    }
    grad
}

pub struct EnvTripletCache<S> {
    disc: EnvDiscCache<S>,
    hinge: TripletHingeCache<S>,
}

/// Environment triplet loss: run the discriminator on triplet-structured
/// inputs (environment codes for `E^E`, speaker codes for `E^S`) and apply
/// the hinge.
pub fn env_triplet_loss<S: Scalar>(
    disc: &mut EnvDisc<S>,
    inputs: &Tensor<S>,
    margin: S,
    mode: Mode,
) -> Result<(S, EnvTripletCache<S>)> {
    if inputs.rows() % 3 != 0 {
        return Err(Error::BatchStructure(format!(
            "env_triplet_loss requires triplet-structured rows, got {}",
            inputs.rows()
        )));
    }
    let (outputs, disc_cache) = disc.forward(inputs, mode)?;
    let (loss, hinge) = triplet_hinge_loss(&outputs, margin)?;
    Ok((
        loss,
        EnvTripletCache {
            disc: disc_cache,
            hinge,
        },
    ))
}

/// Backward through [`env_triplet_loss`]: accumulates discriminator
/// gradients and returns the gradient with respect to the inputs.
pub fn env_triplet_loss_backward<S: Scalar>(
    disc: &mut EnvDisc<S>,
    cache: &EnvTripletCache<S>,
    upstream: S,
) -> Result<Tensor<S>> {
    let grad_outputs = triplet_hinge_backward(&cache.hinge, upstream);
    disc.backward(&cache.disc, &grad_outputs)
}

// ---------------------------------------------------------------------------
// Mean absolute Pearson correlation
// ---------------------------------------------------------------------------

/// Variance floor below which a column is treated as constant; such columns
/// contribute zero correlation and zero gradient.
const MAPC_VAR_EPS: f64 = 1e-24;

pub struct MapcCache<S> {
    a_centered: Tensor<S>,
    b_centered: Tensor<S>,
    saa: Vec<S>,
    sbb: Vec<S>,
    sab: Tensor<S>,
}

/// Mean absolute Pearson correlation between every speaker-code dimension
/// and every environment-code dimension, across the batch.
pub fn mapc_loss<S: Scalar>(spk: &Tensor<S>, env: &Tensor<S>) -> Result<(S, MapcCache<S>)> {
    if spk.rows() != env.rows() {
        return Err(Error::shape(
            "mapc_loss",
            format!("{} rows", spk.rows()),
            format!("{} rows", env.rows()),
        ));
    }
    if spk.rows() < 2 {
        return Err(Error::BatchStructure(format!(
            "mapc_loss needs at least 2 rows, got {}",
            spk.rows()
        )));
    }
    let center = |x: &Tensor<S>| -> (Tensor<S>, Vec<S>) {
        let n = S::of_usize(x.rows());
        let mut centered = Tensor::zeros_like(x);
        let mut sq = vec![S::zero(); x.cols()];
        for c in 0..x.cols() {
            let mut mean = S::zero();
            for r in 0..x.rows() {
                mean += x.get(r, c);
            }
            mean /= n;
            let mut s = S::zero();
            for r in 0..x.rows() {
                let d = x.get(r, c) - mean;
                centered.set(r, c, d);
                s = d.mul_add(d, s);
            }
            sq[c] = s;
        }
        (centered, sq)
    };
    let (a_centered, saa) = center(spk);
    let (b_centered, sbb) = center(env);
    let sab = a_centered.matmul_at_b(&b_centered)?;

    let var_eps = S::of_f64(MAPC_VAR_EPS);
    let pairs = S::of_usize(spk.cols() * env.cols());
    let mut total = S::zero();
    for p in 0..spk.cols() {
        for q in 0..env.cols() {
            if saa[p] <= var_eps || sbb[q] <= var_eps {
                continue;
            }
            let r = sab.get(p, q) / (saa[p] * sbb[q]).sqrt();
            total += r.abs();
        }
    }
    Ok((
        total / pairs,
        MapcCache {
            a_centered,
            b_centered,
            saa,
            sbb,
            sab,
        },
    ))
}

/// Gradients of [`mapc_loss`] with respect to both inputs.
pub fn mapc_loss_backward<S: Scalar>(cache: &MapcCache<S>, upstream: S) -> (Tensor<S>, Tensor<S>) {
    let n = cache.a_centered.rows();
    let d = cache.a_centered.cols();
    let q_dim = cache.b_centered.cols();
    let var_eps = S::of_f64(MAPC_VAR_EPS);
    let scale = upstream / S::of_usize(d * q_dim);
    let mut grad_a = Tensor::zeros(n, d);
    let mut grad_b = Tensor::zeros(n, q_dim);
    for p in 0..d {
        for q in 0..q_dim {
            let saa = cache.saa[p];
            let sbb = cache.sbb[q];
            if saa <= var_eps || sbb <= var_eps {
                continue;
            }
            let denom = (saa * sbb).sqrt();
            let sab = cache.sab.get(p, q);
            let r = sab / denom;
            let sign = if r > S::zero() {
                S::one()
            } else if r < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            let coeff = scale * sign / denom;
            let ratio_a = sab / saa;
            let ratio_b = sab / sbb;
            for row in 0..n {
                let ac = cache.a_centered.get(row, p);
                let bc = cache.b_centered.get(row, q);
                let ga = grad_a.get(row, p);
                grad_a.set(row, p, ga + coeff * (bc - ratio_a * ac));
                let gb = grad_b.get(row, q);
                grad_b.set(row, q, gb + coeff * (ac - ratio_b * bc));
            }
        }
    }
    (grad_a, grad_b)
}
