//! Optimization loop.
//!
//! One training step runs a single shared forward pass (encode, split,
//! losses on the codes, swap, decode, reconstruction) and routes gradients
//! into two disjoint parameter sets updated from the same mini-batch:
//!
//! * the main set (auto-encoder, speaker discriminator, `E^E`) receives the
//!   weighted composite gradient, where the adversarial term reaches the
//!   encoder through a gradient reversal: the loss gradient with respect to
//!   the speaker codes is negated and scaled by `lambda_adv`, and `E^S`
//!   parameters receive nothing from this path;
//! * the adversarial discriminator `E^S` receives the unweighted gradient of
//!   its own triplet loss with the speaker codes treated as constants.
//!
//! Gradients accumulate into the code tensors in a fixed order
//! (reconstruction, speaker, environment, adversarial, correlation); a loss
//! whose weight is zero contributes no accumulation at all, so ablations are
//! bit-exact. Each optimizer is a separate Adam instance.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mode, Param};
use crate::discriminators::{
    env_triplet_loss, env_triplet_loss_backward, mapc_loss, mapc_loss_backward, speaker_loss,
    speaker_loss_backward, LossWeights,
};
use crate::disentangler::{
    recons_loss, recons_loss_backward, split_codes, split_codes_backward, swap_speaker_codes,
    swap_speaker_grads,
};
use crate::error::{Error, Result};
use crate::model::{DisenModel, ModelConfig, ParamSet};
use crate::rng::{stream_rng, Stream};
use crate::sampler::{build_triplets, Dataset, TripletIndex};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Optimizer bookkeeping shared by all parameters of one update set; the
/// per-parameter moments live in [`Param`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction, using `param.grad` and the global
/// step count in `state` (already incremented for this step).
pub fn adam_update<S: Scalar>(param: &mut Param<S>, state: &AdamState, lr: S) {
    debug_assert!(state.t >= 1, "AdamState.t must be incremented before updates");
    let b1 = S::of_f64(state.beta1);
    let b2 = S::of_f64(state.beta2);
    let eps = S::of_f64(state.eps);
    let corr1 = S::of_f64(1.0 - state.beta1.powi(state.t as i32));
    let corr2 = S::of_f64(1.0 - state.beta2.powi(state.t as i32));
    let one = S::one();
    for i in 0..param.value.data().len() {
        let g = param.grad.data()[i];
        let m1 = b1 * param.m1.data()[i] + (one - b1) * g;
        let m2 = b2 * param.m2.data()[i] + (one - b2) * g * g;
        param.m1.data_mut()[i] = m1;
        param.m2.data_mut()[i] = m2;
        let mhat = m1 / corr1;
        let vhat = m2 / corr2;
        param.value.data_mut()[i] = param.value.data()[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// How the adversarial loss routes gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Training behavior: gradient reversal toward the encoder, unweighted
    /// stop-gradient toward `E^S`.
    Adversarial,
    /// The true gradient of the weighted scalar objective, used by the
    /// finite-difference verification of the composite step.
    PlainComposite,
}

/// The five component losses plus their weighted total, as reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_spk: f64,
    pub l_recons: f64,
    pub l_env_env: f64,
    pub l_env_spk: f64,
    pub l_corr: f64,
    pub l_total: f64,
}

impl LossReport {
    fn from_components(weights: &LossWeights, l_spk: f64, l_recons: f64, l_env_env: f64, l_env_spk: f64, l_corr: f64) -> Self {
        LossReport {
            l_spk,
            l_recons,
            l_env_env,
            l_env_spk,
            l_corr,
            l_total: weighted_total(weights, l_spk, l_recons, l_env_env, l_env_spk, l_corr),
        }
    }
}

/// The reported total is exactly this weighted sum of the reported
/// components, evaluated at f64 in this term order.
pub fn weighted_total(
    weights: &LossWeights,
    l_spk: f64,
    l_recons: f64,
    l_env_env: f64,
    l_env_spk: f64,
    l_corr: f64,
) -> f64 {
    weights.lambda_s * l_spk
        + weights.lambda_r * l_recons
        + weights.lambda_e * l_env_env
        + weights.lambda_adv * l_env_spk
        + weights.lambda_c * l_corr
}

/// Code-level gradients after a backward pass, exposed for routing tests.
#[derive(Debug, Clone)]
pub struct StepGrads<S> {
    pub code_spk: Tensor<S>,
    pub code_env: Tensor<S>,
}

/// Options controlling a gradient computation.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub bn_mode: Mode,
    pub routing: Routing,
    pub swap_codes: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            bn_mode: Mode::Train,
            routing: Routing::Adversarial,
            swap_codes: true,
        }
    }
}

/// Forward-only evaluation of the five losses; used by finite differences.
pub fn step_losses<S: Scalar>(
    model: &mut DisenModel<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    weights: &LossWeights,
    opts: StepOptions,
) -> Result<LossReport> {
    let (report, _, _) = step_forward(model, batch, labels, weights, opts)?;
    Ok(report)
}

struct StepCaches<S> {
    encode: crate::disentangler::EncodeCache<S>,
    split: crate::disentangler::SplitCache<S>,
    codes: crate::disentangler::CodeBatch<S>,
    spk_loss: crate::discriminators::SpeakerLossCache<S>,
    env_env: crate::discriminators::EnvTripletCache<S>,
    env_spk: crate::discriminators::EnvTripletCache<S>,
    mapc: crate::discriminators::MapcCache<S>,
    decode: crate::disentangler::DecodeCache<S>,
    recons_out: Tensor<S>,
}

fn step_forward<S: Scalar>(
    model: &mut DisenModel<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    weights: &LossWeights,
    opts: StepOptions,
) -> Result<(LossReport, StepCaches<S>, Tensor<S>)> {
    weights.validate()?;
    if batch.rows() % 3 != 0 {
        return Err(Error::BatchStructure(format!(
            "training batches are triplet-structured; got {} rows",
            batch.rows()
        )));
    }
    let margin = S::of_f64(weights.margin);

    let (z, encode) = model.autoencoder.encode(batch, opts.bn_mode)?;
    let (codes, split) = split_codes(&z)?;

    let (l_spk, spk_loss) = speaker_loss(&model.speaker_disc, &codes.spk, labels)?;
    let (l_env_env, env_env) = env_triplet_loss(&mut model.env_disc_env, &codes.env, margin, opts.bn_mode)?;
    let (l_env_spk, env_spk) = env_triplet_loss(&mut model.env_disc_spk, &codes.spk, margin, opts.bn_mode)?;
    let (l_corr, mapc) = mapc_loss(&codes.spk, &codes.env)?;

    let decode_input = if opts.swap_codes {
        swap_speaker_codes(&codes)?
    } else {
        codes.clone()
    };
    let (recons_out, decode) = model.autoencoder.decode(&decode_input, opts.bn_mode)?;
    let l_recons = recons_loss(batch, &recons_out)?;

    for (name, value) in [
        ("L_spk", l_spk),
        ("L_recons", l_recons),
        ("L_env_env", l_env_env),
        ("L_env_spk", l_env_spk),
        ("L_corr", l_corr),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let report = LossReport::from_components(
        weights,
        l_spk.as_f64(),
        l_recons.as_f64(),
        l_env_env.as_f64(),
        l_env_spk.as_f64(),
        l_corr.as_f64(),
    );
    let caches = StepCaches {
        encode,
        split,
        codes,
        spk_loss,
        env_env,
        env_spk,
        mapc,
        decode,
        recons_out,
    };
    Ok((report, caches, z))
}

/// Computes the full set of parameter gradients for one batch without
/// applying any update. Gradients are zeroed first. Returns the loss report
/// and the accumulated code-level gradients.
pub fn compute_step_gradients<S: Scalar>(
    model: &mut DisenModel<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    weights: &LossWeights,
    opts: StepOptions,
) -> Result<(LossReport, StepGrads<S>)> {
    model.zero_grads();
    let (report, caches, _) = step_forward(model, batch, labels, weights, opts)?;

    let spk_dim = caches.codes.spk.cols();
    let env_dim = caches.codes.env.cols();
    let rows = caches.codes.rows();
    let mut grad_spk = Tensor::zeros(rows, spk_dim);
    let mut grad_env = Tensor::zeros(rows, env_dim);

    // 1) reconstruction
    if weights.lambda_r != 0.0 {
        let g_out = recons_loss_backward(batch, &caches.recons_out, S::of_f64(weights.lambda_r))?;
        let (g_spk_dec, g_env_dec) = model.autoencoder.decode_backward(&caches.decode, &g_out)?;
        let g_spk_dec = if opts.swap_codes {
            swap_speaker_grads(&g_spk_dec)?
        } else {
            g_spk_dec
        };
        grad_spk.add_scaled(&g_spk_dec, S::one())?;
        grad_env.add_scaled(&g_env_dec, S::one())?;
    }

    // 2) speaker loss
    if weights.lambda_s != 0.0 {
        let g = speaker_loss_backward(&mut model.speaker_disc, &caches.spk_loss, S::of_f64(weights.lambda_s))?;
        grad_spk.add_scaled(&g, S::one())?;
    }

    // 3) environment triplet loss on environment codes
    if weights.lambda_e != 0.0 {
        let g = env_triplet_loss_backward(&mut model.env_disc_env, &caches.env_env, S::of_f64(weights.lambda_e))?;
        grad_env.add_scaled(&g, S::one())?;
    }

    // 4) adversarial loss through E^S
    match opts.routing {
        Routing::Adversarial => {
            // E^S trains on its own loss unweighted; the encoder sees the
            // reversed gradient scaled by lambda_adv.
            let g_in = env_triplet_loss_backward(&mut model.env_disc_spk, &caches.env_spk, S::one())?;
            if weights.lambda_adv != 0.0 {
                grad_spk.add_scaled(&g_in, S::of_f64(-weights.lambda_adv))?;
            }
        }
        Routing::PlainComposite => {
            if weights.lambda_adv != 0.0 {
                let g_in =
                    env_triplet_loss_backward(&mut model.env_disc_spk, &caches.env_spk, S::of_f64(weights.lambda_adv))?;
                grad_spk.add_scaled(&g_in, S::one())?;
            }
        }
    }

    // 5) correlation penalty
    if weights.lambda_c != 0.0 {
        let (ga, gb) = mapc_loss_backward(&caches.mapc, S::of_f64(weights.lambda_c));
        grad_spk.add_scaled(&ga, S::one())?;
        grad_env.add_scaled(&gb, S::one())?;
    }

    let grad_z = split_codes_backward(&caches.split, &grad_spk, &grad_env)?;
    model.autoencoder.encode_backward(&caches.encode, &grad_z)?;

    Ok((
        report,
        StepGrads {
            code_spk: grad_spk,
            code_env: grad_env,
        },
    ))
}

/// Applies the composite-objective update to every parameter outside `E^S`
/// and clamps the angular prototypical scale positive.
pub fn apply_main_update<S: Scalar>(model: &mut DisenModel<S>, adam: &mut AdamState, lr: f64) {
    adam.t += 1;
    let lr = S::of_f64(lr);
    let state = adam.clone();
    model.visit_params(|_, set, p| {
        if set == ParamSet::Main {
            adam_update(p, &state, lr);
        }
    });
    model.speaker_disc.clamp_scale();
}

/// Applies the adversarial discriminator's own update to `E^S` only.
pub fn apply_es_update<S: Scalar>(model: &mut DisenModel<S>, adam: &mut AdamState, lr: f64) {
    adam.t += 1;
    let lr = S::of_f64(lr);
    let state = adam.clone();
    model.visit_params(|_, set, p| {
        if set == ParamSet::EnvSpk {
            adam_update(p, &state, lr);
        }
    });
}

/// One full training step: gradients, then both parameter-set updates from
/// the same mini-batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    model: &mut DisenModel<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    weights: &LossWeights,
    adam_main: &mut AdamState,
    adam_es: &mut AdamState,
    lr: f64,
    swap_codes: bool,
) -> Result<LossReport> {
    let opts = StepOptions {
        bn_mode: Mode::Train,
        routing: Routing::Adversarial,
        swap_codes,
    };
    let (report, _) = compute_step_gradients(model, batch, labels, weights, opts)?;
    apply_main_update(model, adam_main, lr);
    apply_es_update(model, adam_es, lr);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Schedule and configuration
// ---------------------------------------------------------------------------

/// Step-decay learning rate: `lr0 * decay_factor^(epoch / decay_every)`.
pub fn lr_at(epoch: usize, lr0: f64, decay_factor: f64, decay_every: usize) -> f64 {
    lr0 * decay_factor.powi((epoch / decay_every) as i32)
}

/// Scalar precision a training run uses. Gradient verification always runs
/// at 64-bit regardless; checkpoints always store 32-bit tensors, so a
/// 64-bit run quantizes at every checkpoint write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Triplets per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// Fraction of the learning rate retained at each decay.
    pub decay_factor: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub swap_codes: bool,
    pub resume: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 30,
            lr0: 0.001,
            decay_factor: 0.75,
            decay_every: 16,
            checkpoint_every: 10,
            weights: LossWeights::default(),
            swap_codes: true,
            resume: false,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2 triplets".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("train.lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "train.decay_factor must be in (0, 1), got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("train.decay_every must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr0, self.decay_factor, self.decay_every)
    }
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

/// Per-epoch loss means plus the learning rate in effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_spk: f64,
    pub l_recons: f64,
    pub l_env_env: f64,
    pub l_env_spk: f64,
    pub l_corr: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Everything needed to continue training deterministically.
#[derive(Debug, Clone)]
pub struct TrainerState<S> {
    pub model: DisenModel<S>,
    pub adam_main: AdamState,
    pub adam_es: AdamState,
    pub epoch: usize,
    pub seed: u64,
    pub sampler_word_pos: u128,
}

impl<S: Scalar> TrainerState<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut init_rng = stream_rng(seed, Stream::Init);
        let model = DisenModel::new(cfg, &mut init_rng)?;
        let sampler_word_pos = stream_rng(seed, Stream::Sampler).get_word_pos();
        Ok(TrainerState {
            model,
            adam_main: AdamState::default(),
            adam_es: AdamState::default(),
            epoch: 0,
            seed,
            sampler_word_pos,
        })
    }
}

/// Assembles the (3B x D) batch tensor and per-triplet speaker labels, given
/// an utterance-id to speaker-class map.
fn assemble_batch<S: Scalar>(
    dataset: &Dataset,
    triplets: &[TripletIndex],
    utt_speaker_class: &std::collections::BTreeMap<&str, usize>,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let d = dataset.dim();
    let mut batch = Tensor::zeros(triplets.len() * 3, d);
    let mut labels = Vec::with_capacity(triplets.len());
    for (t, trip) in triplets.iter().enumerate() {
        for (j, utt) in [&trip.u1, &trip.u2, &trip.u3].into_iter().enumerate() {
            let emb = dataset.embedding(utt)?;
            let row = batch.row_mut(3 * t + j);
            for (dst, &v) in row.iter_mut().zip(emb) {
                *dst = S::of_f64(v as f64);
            }
        }
        let label = *utt_speaker_class
            .get(trip.u1.as_str())
            .ok_or_else(|| Error::Protocol(format!("utterance {} missing metadata", trip.u1)))?;
        labels.push(label);
    }
    Ok((batch, labels))
}

/// Runs training from `state.epoch` to `cfg.epochs`, appending per-epoch
/// loss means to the returned history. A checkpoint is written every
/// `checkpoint_every` epochs and at the end when a path is given; writes are
/// atomic, so an interrupted run keeps its last checkpoint intact.
pub fn fit<S: Scalar>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainerState<S>,
    checkpoint_path: Option<&Path>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.metadata.is_empty() {
        return Err(Error::EmptyDataset("dataset has no utterances".into()));
    }
    if dataset.dim() != state.model.cfg.input_dim {
        return Err(Error::Config(format!(
            "dataset dimension {} does not match model input_dim {}",
            dataset.dim(),
            state.model.cfg.input_dim
        )));
    }
    let speakers = dataset.speakers();
    if speakers.len() != state.model.cfg.n_speakers {
        return Err(Error::Config(format!(
            "dataset has {} speakers but the model was built for {}",
            speakers.len(),
            state.model.cfg.n_speakers
        )));
    }
    let speaker_index: std::collections::BTreeMap<&str, usize> =
        speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let utt_speaker_class: std::collections::BTreeMap<&str, usize> = dataset
        .metadata
        .iter()
        .map(|m| (m.utt_id.as_str(), speaker_index[m.speaker_id.as_str()]))
        .collect();

    let mut sampler_rng = stream_rng(state.seed, Stream::Sampler);
    sampler_rng.set_word_pos(state.sampler_word_pos);

    let mut history = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut triplets, skips) = build_triplets(&dataset.metadata, &mut sampler_rng)?;
        if epoch == state.epoch && !skips.is_empty() {
            log::info!(
                "{} speaker/session entries skipped during triplet construction",
                skips.entries.len()
            );
        }
        triplets.shuffle(&mut sampler_rng);

        let mut sums = [0.0_f64; 6];
        let mut n_batches = 0usize;
        for chunk in triplets.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // a single trailing triplet cannot form prototypical negatives
                continue;
            }
            let (batch, labels) = assemble_batch::<S>(dataset, chunk, &utt_speaker_class)?;
            let report = train_step(
                &mut state.model,
                &batch,
                &labels,
                &cfg.weights,
                &mut state.adam_main,
                &mut state.adam_es,
                lr,
                cfg.swap_codes,
            )?;
            sums[0] += report.l_spk;
            sums[1] += report.l_recons;
            sums[2] += report.l_env_env;
            sums[3] += report.l_env_spk;
            sums[4] += report.l_corr;
            sums[5] += report.l_total;
            n_batches += 1;
        }
        if n_batches == 0 {
            return Err(Error::EmptyDataset(
                "no batch had the minimum of 2 triplets".into(),
            ));
        }
        let inv = 1.0 / n_batches as f64;
        history.push(EpochStats {
            epoch,
            l_spk: sums[0] * inv,
            l_recons: sums[1] * inv,
            l_env_env: sums[2] * inv,
            l_env_spk: sums[3] * inv,
            l_corr: sums[4] * inv,
            l_total: sums[5] * inv,
            lr,
        });
        state.epoch = epoch + 1;
        state.sampler_word_pos = sampler_rng.get_word_pos();
        if let Some(path) = checkpoint_path {
            if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
                save_checkpoint(state, path)?;
            }
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Loss-history CSV
// ---------------------------------------------------------------------------

pub const LOSS_CSV_HEADER: &str = "epoch,L_spk,L_recons,L_env_env,L_env_spk,L_corr,L_total,lr";

pub fn write_loss_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            h.epoch, h.l_spk, h.l_recons, h.l_env_env, h.l_env_spk, h.l_corr, h.l_total, h.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochStats>> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LOSS_CSV_HEADER => {}
        other => {
            return Err(Error::format(
                &pstr,
                format!("unexpected header {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::format(&pstr, format!("line {}: expected 8 fields", i + 2)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::format(&pstr, format!("line {}: bad number {s}", i + 2)))
        };
        out.push(EpochStats {
            epoch: fields[0]
                .parse::<usize>()
                .map_err(|_| Error::format(&pstr, format!("line {}: bad epoch {}", i + 2, fields[0])))?,
            l_spk: parse(fields[1])?,
            l_recons: parse(fields[2])?,
            l_env_env: parse(fields[3])?,
            l_env_spk: parse(fields[4])?,
            l_corr: parse(fields[5])?,
            l_total: parse(fields[6])?,
            lr: parse(fields[7])?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"DISN";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: u32,
    cols: u32,
    /// Byte offset into the tensor payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    epoch: usize,
    adam_main: AdamState,
    adam_es: AdamState,
    seed: u64,
    sampler_word_pos: u128,
    manifest: Vec<TensorEntry>,
}

/// Collects every persisted tensor in manifest order: for each parameter its
/// value and both Adam moments, then the batch-norm running statistics.
fn checkpoint_tensors<S: Scalar>(model: &mut DisenModel<S>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    model.visit_params(|name, _, p| {
        out.push((name.to_string(), p.value.to_f32()));
        out.push((format!("{name}.m1"), p.m1.to_f32()));
        out.push((format!("{name}.m2"), p.m2.to_f32()));
    });
    model.visit_state(|name, t| {
        out.push((name.to_string(), t.to_f32()));
    });
    out
}

/// Serializes the trainer state. Tensors are stored as little-endian f32;
/// a state already at f32 round-trips bit-exactly.
pub fn save_checkpoint<S: Scalar>(state: &mut TrainerState<S>, path: &Path) -> Result<()> {
    let tensors = checkpoint_tensors(&mut state.model);
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in &tensors {
        manifest.push(TensorEntry {
            name: name.clone(),
            rows: t.rows() as u32,
            cols: t.cols() as u32,
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        model: state.model.cfg,
        epoch: state.epoch,
        adam_main: state.adam_main.clone(),
        adam_es: state.adam_es.clone(),
        seed: state.seed,
        sampler_word_pos: state.sampler_word_pos,
        manifest,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);

    // atomic write: temp file in the same directory, then rename
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`], rebuilding the model at
/// f32 (the stored precision).
pub fn load_checkpoint(path: &Path) -> Result<TrainerState<f32>> {
    let pstr = path.display().to_string();
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::format(&pstr, "file shorter than the 16-byte preamble"));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(Error::format(&pstr, "bad magic bytes (expected DISN)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::format(
            &pstr,
            format!("unsupported checkpoint version {version} (expected {CKPT_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::format(&pstr, "header length exceeds file size"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::format(&pstr, format!("header: {e}")))?;
    header.model.validate()?;
    let payload = &bytes[16 + header_len..];

    let mut by_name: std::collections::BTreeMap<&str, (&TensorEntry, Tensor<f32>)> = std::collections::BTreeMap::new();
    for entry in &header.manifest {
        let n = entry.rows as usize * entry.cols as usize;
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(Error::format(
                &pstr,
                format!("corrupt tensor block {}: payload ends early", entry.name),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = start + 4 * i;
            data.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
        }
        let t = Tensor::from_vec(entry.rows as usize, entry.cols as usize, data)
            .map_err(|e| Error::format(&pstr, format!("tensor {}: {e}", entry.name)))?;
        by_name.insert(&entry.name, (entry, t));
    }

    let mut init_rng = stream_rng(header.seed, Stream::Init);
    let mut model = DisenModel::<f32>::new(header.model, &mut init_rng)?;
    let mut missing: Vec<String> = Vec::new();
    let take = |name: &str, shape: (usize, usize), missing: &mut Vec<String>| -> Option<Tensor<f32>> {
        match by_name.get(name) {
            None => {
                missing.push(name.to_string());
                None
            }
            Some((entry, t)) => {
                if (entry.rows as usize, entry.cols as usize) != shape {
                    missing.push(format!(
                        "{name} has shape {}x{} (expected {}x{})",
                        entry.rows, entry.cols, shape.0, shape.1
                    ));
                    None
                } else {
                    Some(t.clone())
                }
            }
        }
    };
    model.visit_params(|name, _, p| {
        let shape = (p.value.rows(), p.value.cols());
        if let Some(t) = take(name, shape, &mut missing) {
            p.value = t;
        }
        if let Some(t) = take(&format!("{name}.m1"), shape, &mut missing) {
            p.m1 = t;
        }
        if let Some(t) = take(&format!("{name}.m2"), shape, &mut missing) {
            p.m2 = t;
        }
        p.zero_grad();
    });
    model.visit_state(|name, dst| {
        let shape = (dst.rows(), dst.cols());
        if let Some(t) = take(name, shape, &mut missing) {
            *dst = t;
        }
    });
    if !missing.is_empty() {
        return Err(Error::format(
            &pstr,
            format!("missing or malformed tensors: {}", missing.join(", ")),
        ));
    }
    Ok(TrainerState {
        model,
        adam_main: header.adam_main,
        adam_es: header.adam_es,
        epoch: header.epoch,
        seed: header.seed,
        sampler_word_pos: header.sampler_word_pos,
    })
}

/// Rejects a checkpoint whose architecture differs from the expected config.
pub fn expect_model_config(state: &TrainerState<f32>, expected: &ModelConfig) -> Result<()> {
    if state.model.cfg != *expected {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match configured {:?}",
            state.model.cfg, expected
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_zero_gradient_leaves_param_unchanged() {
        let mut p = Param::new(Tensor::<f64>::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let mut state = AdamState::default();
        let before = p.value.clone();
        for _ in 0..10 {
            state.t += 1;
            adam_update(&mut p, &state, 0.01);
        }
        assert!(p.value.bits_eq(&before));
    }

    #[test]
    fn adam_first_step_magnitude_is_roughly_lr() {
        let mut p = Param::new(Tensor::<f64>::from_vec(1, 1, vec![0.0]).unwrap());
        p.grad.set(0, 0, 3.7);
        let state = AdamState {
            t: 1,
            ..AdamState::default()
        };
        adam_update(&mut p, &state, 0.01);
        // bias-corrected first step: lr * g / (|g| + eps') ~ lr
        assert_relative_eq!(p.value.get(0, 0).abs(), 0.01, max_relative = 1e-4);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = (x - 3)^2, grad 2(x - 3)
        let mut p = Param::new(Tensor::<f64>::from_vec(1, 1, vec![0.0]).unwrap());
        let mut state = AdamState::default();
        let mut converged_at = None;
        for step in 0..5000 {
            let x = p.value.get(0, 0);
            p.grad.set(0, 0, 2.0 * (x - 3.0));
            state.t += 1;
            adam_update(&mut p, &state, 0.01);
            if (p.value.get(0, 0) - 3.0).abs() < 1e-6 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "did not reach the minimum within 5000 steps");
    }

    #[test]
    fn lr_schedule_published_values() {
        assert_eq!(lr_at(0, 0.001, 0.75, 16), 0.001);
        assert_relative_eq!(lr_at(16, 0.001, 0.75, 16), 0.00075, max_relative = 1e-12);
        assert_relative_eq!(lr_at(47, 0.001, 0.75, 16), 0.0005625, max_relative = 1e-12);
    }

    #[test]
    fn loss_csv_round_trip() {
        let history = vec![
            EpochStats {
                epoch: 0,
                l_spk: 1.5,
                l_recons: 2.25,
                l_env_env: 0.125,
                l_env_spk: 0.5,
                l_corr: 0.03125,
                l_total: 4.40625,
                lr: 0.001,
            },
            EpochStats {
                epoch: 1,
                l_spk: 1.25,
                l_recons: 2.0,
                l_env_env: 0.25,
                l_env_spk: 0.75,
                l_corr: 0.0625,
                l_total: 4.3125,
                lr: 0.001,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(LOSS_CSV_HEADER));
        assert_eq!(text.lines().count(), 3);
        let back = read_loss_csv(&path).unwrap();
        assert_eq!(history, back);
    }
}
