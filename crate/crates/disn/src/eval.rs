//! Verification metrics and disentanglement probes.
//!
//! Trial scoring is mean cosine similarity over all cross pairs of the two
//! utterances' embedding lists. EER sweeps thresholds at score midpoints and
//! interpolates linearly between adjacent operating points when the miss and
//! false-alarm rates never tie exactly; minDCF takes the minimum cost over
//! the same threshold set, normalized by the better trivial system
//! (accept-all or reject-all).
//!
//! Linear probes quantify disentanglement on labeled data: four softmax
//! regressions (speaker/session from speaker/environment codes) trained with
//! Adam on a held-out split, reported together with the residual correlation
//! between the code halves.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::FcLayer;
use crate::discriminators::{mapc_loss, softmax_ce, softmax_ce_backward};
use crate::disentangler::CodeBatch;
use crate::error::{Error, Result};
use crate::sampler::UtteranceMeta;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{adam_update, AdamState};

// ---------------------------------------------------------------------------
// Trials and scores
// ---------------------------------------------------------------------------

/// One verification trial: an enrollment utterance, a test utterance, and
/// whether they share a speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Parallel score/label lists.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::Protocol(format!(
                "score set needs equal nonempty score/label lists, got {}/{}",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("trial scores".into()));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.len() - self.n_target()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }
}

/// Verification metrics at the two standard operating points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// Cosine similarity; a zero-norm vector has no defined angle and is an
/// error rather than a silent zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine",
            format!("{} dims", a.len()),
            format!("{} dims", b.len()),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Protocol("cosine of a zero-norm vector is undefined".into()));
    }
    Ok(dot / (na * nb))
}

/// Mean cosine similarity over all cross pairs of the two embedding lists
/// (multi-segment scoring; single embeddings are lists of one).
pub fn score_trial(enroll: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64> {
    if enroll.is_empty() || test.is_empty() {
        return Err(Error::Protocol("score_trial needs nonempty embedding lists".into()));
    }
    let mut sum = 0.0;
    for (i, a) in enroll.iter().enumerate() {
        for (j, b) in test.iter().enumerate() {
            sum += cosine(a, b).map_err(|e| match e {
                Error::Protocol(_) => {
                    Error::Protocol(format!("zero-norm embedding in trial (enroll[{i}] x test[{j}])"))
                }
                other => other,
            })?;
        }
    }
    Ok(sum / (enroll.len() * test.len()) as f64)
}

/// Utterance-id lookup used for trial scoring.
pub type EmbeddingLookup = BTreeMap<String, Vec<f64>>;

pub fn lookup_from_store(store: &crate::sampler::EmbeddingStore) -> EmbeddingLookup {
    store
        .iter()
        .map(|(id, emb)| (id.clone(), emb.iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Builds a lookup from per-row code vectors aligned with `metadata`.
pub fn lookup_from_rows<S: Scalar>(metadata: &[UtteranceMeta], rows: &Tensor<S>) -> Result<EmbeddingLookup> {
    if rows.rows() != metadata.len() {
        return Err(Error::shape(
            "code lookup",
            format!("{} rows", metadata.len()),
            format!("{}", rows.rows()),
        ));
    }
    Ok(metadata
        .iter()
        .enumerate()
        .map(|(i, m)| (m.utt_id.clone(), rows.row(i).iter().map(|v| v.as_f64()).collect()))
        .collect())
}

/// Scores every trial against the lookup. Work is split over up to
/// `n_threads` threads; results are written by trial index, so the output is
/// identical for any thread count.
pub fn score_trials(lookup: &EmbeddingLookup, trials: &[Trial], n_threads: usize) -> Result<ScoreSet> {
    if trials.is_empty() {
        return Err(Error::Protocol("no trials to score".into()));
    }
    let score_one = |trial: &Trial| -> Result<f64> {
        let enroll = lookup
            .get(&trial.enroll)
            .ok_or_else(|| Error::Protocol(format!("utterance {} not found in embedding store", trial.enroll)))?;
        let test = lookup
            .get(&trial.test)
            .ok_or_else(|| Error::Protocol(format!("utterance {} not found in embedding store", trial.test)))?;
        cosine(enroll, test).map_err(|e| match e {
            Error::Protocol(_) => Error::Protocol(format!(
                "zero-norm embedding for utterance {} or {}",
                trial.enroll, trial.test
            )),
            other => other,
        })
    };

    let n_threads = n_threads.max(1).min(trials.len());
    let mut results: Vec<Option<Result<f64>>> = Vec::with_capacity(trials.len());
    results.resize_with(trials.len(), || None);
    if n_threads == 1 {
        for (slot, trial) in results.iter_mut().zip(trials) {
            *slot = Some(score_one(trial));
        }
    } else {
        let chunk = trials.len().div_ceil(n_threads);
        std::thread::scope(|scope| {
            for (trial_chunk, result_chunk) in trials.chunks(chunk).zip(results.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (slot, trial) in result_chunk.iter_mut().zip(trial_chunk) {
                        *slot = Some(score_one(trial));
                    }
                });
            }
        });
    }
    let mut scores = Vec::with_capacity(trials.len());
    for r in results {
        scores.push(r.expect("all slots filled")?);
    }
    let labels = trials.iter().map(|t| t.target).collect();
    ScoreSet::new(scores, labels)
}

// ---------------------------------------------------------------------------
// Operating points, EER, minDCF
// ---------------------------------------------------------------------------

/// One point of the detection-error tradeoff staircase. Acceptance rule:
/// a trial is accepted when its score is `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn require_both_classes(scores: &ScoreSet) -> Result<(usize, usize)> {
    let nt = scores.n_target();
    let nn = scores.n_nontarget();
    if nt == 0 || nn == 0 {
        return Err(Error::Protocol(format!(
            "metrics need at least one target and one nontarget trial (got {nt}/{nn})"
        )));
    }
    Ok((nt, nn))
}

/// Sweeps thresholds at score midpoints (plus one step below the minimum and
/// one above the maximum); tied scores collapse into a single step.
pub fn det_curve(scores: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (n_target, n_nontarget) = require_both_classes(scores)?;
    let mut pairs: Vec<(f64, bool)> = scores
        .scores
        .iter()
        .copied()
        .zip(scores.labels.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // distinct score values with per-value class counts
    let mut values: Vec<(f64, usize, usize)> = Vec::new();
    for (s, is_target) in pairs {
        match values.last_mut() {
            Some((v, t, n)) if *v == s => {
                if is_target {
                    *t += 1;
                } else {
                    *n += 1;
                }
            }
            _ => values.push((s, usize::from(is_target), usize::from(!is_target))),
        }
    }

    let mut points = Vec::with_capacity(values.len() + 1);
    let mut targets_below = 0usize;
    let mut nontargets_below = 0usize;
    for j in 0..=values.len() {
        let threshold = if j == 0 {
            values[0].0 - 1.0
        } else if j == values.len() {
            values[j - 1].0 + 1.0
        } else {
            (values[j - 1].0 + values[j].0) / 2.0
        };
        let frr = targets_below as f64 / n_target as f64;
        let far = (n_nontarget - nontargets_below) as f64 / n_nontarget as f64;
        points.push(OperatingPoint { threshold, far, frr });
        if j < values.len() {
            targets_below += values[j].1;
            nontargets_below += values[j].2;
        }
    }
    Ok(points)
}

/// Equal error rate: the operating point where the false-alarm and miss
/// rates cross, linearly interpolated between adjacent staircase points when
/// they never tie exactly. Returns `(eer, threshold)`.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let points = det_curve(scores)?;
    // far - frr walks monotonically from +1 to -1
    for j in 0..points.len() {
        let d = points[j].far - points[j].frr;
        if d == 0.0 {
            return Ok((points[j].far, points[j].threshold));
        }
        if d < 0.0 {
            let prev = &points[j - 1];
            let cur = &points[j];
            let d_prev = prev.far - prev.frr;
            let t = d_prev / (d_prev - d);
            let eer = prev.far + t * (cur.far - prev.far);
            let threshold = prev.threshold + t * (cur.threshold - prev.threshold);
            return Ok((eer, threshold));
        }
    }
    unreachable!("the staircase always ends at far 0, frr 1");
}

/// Minimum detection cost over the threshold sweep, normalized by the best
/// trivial system: `min_t (c_miss*frr*p + c_fa*far*(1-p)) / min(c_miss*p,
/// c_fa*(1-p))`. Returns `(min_dcf, threshold)`.
pub fn compute_min_dcf(scores: &ScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<(f64, f64)> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Config(format!("p_target must be in (0, 1), got {p_target}")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::Config("detection costs must be positive".into()));
    }
    let points = det_curve(scores)?;
    let mut best = f64::INFINITY;
    let mut best_threshold = points[0].threshold;
    for p in &points {
        let cost = c_miss * p.frr * p_target + c_fa * p.far * (1.0 - p_target);
        if cost < best {
            best = cost;
            best_threshold = p.threshold;
        }
    }
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    Ok((best / norm, best_threshold))
}

/// Default minDCF parameters.
pub const DCF_P_TARGET: f64 = 0.05;
pub const DCF_C_MISS: f64 = 1.0;
pub const DCF_C_FA: f64 = 1.0;

pub fn metrics_report(scores: &ScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<MetricsReport> {
    let (eer, eer_threshold) = compute_eer(scores)?;
    let (min_dcf, dcf_threshold) = compute_min_dcf(scores, p_target, c_miss, c_fa)?;
    Ok(MetricsReport {
        eer,
        eer_threshold,
        min_dcf,
        dcf_threshold,
        n_target: scores.n_target(),
        n_nontarget: scores.n_nontarget(),
    })
}

// ---------------------------------------------------------------------------
// Trial construction and trial files
// ---------------------------------------------------------------------------

/// Builds balanced environment-mismatch trials: target trials pair
/// same-speaker utterances from different sessions, nontarget trials pair
/// different speakers.
pub fn build_mismatch_trials(
    metadata: &[UtteranceMeta],
    n_trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trial>> {
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be positive".into()));
    }
    let mut by_speaker: BTreeMap<&str, BTreeMap<&str, Vec<&UtteranceMeta>>> = BTreeMap::new();
    for m in metadata {
        by_speaker
            .entry(&m.speaker_id)
            .or_default()
            .entry(&m.session_id)
            .or_default()
            .push(m);
    }
    let speakers: Vec<&str> = by_speaker.keys().copied().collect();
    let multi_session: Vec<&str> = by_speaker
        .iter()
        .filter(|(_, sessions)| sessions.len() >= 2)
        .map(|(&s, _)| s)
        .collect();
    if multi_session.is_empty() {
        return Err(Error::Protocol(
            "no speaker has utterances in two sessions; cross-session target trials are impossible".into(),
        ));
    }
    if speakers.len() < 2 {
        return Err(Error::Protocol(
            "nontarget trials need at least two speakers".into(),
        ));
    }

    let n_target = n_trials / 2;
    let n_nontarget = n_trials - n_target;
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_target {
        let speaker = multi_session[rng.random_range(0..multi_session.len())];
        let sessions: Vec<&str> = by_speaker[speaker].keys().copied().collect();
        let i = rng.random_range(0..sessions.len());
        let mut j = rng.random_range(0..sessions.len() - 1);
        if j >= i {
            j += 1;
        }
        let pick = |rng: &mut ChaCha8Rng, utts: &Vec<&UtteranceMeta>| -> String {
            utts[rng.random_range(0..utts.len())].utt_id.clone()
        };
        let enroll = pick(rng, &by_speaker[speaker][sessions[i]]);
        let test = pick(rng, &by_speaker[speaker][sessions[j]]);
        trials.push(Trial {
            target: true,
            enroll,
            test,
        });
    }
    for _ in 0..n_nontarget {
        let i = rng.random_range(0..speakers.len());
        let mut j = rng.random_range(0..speakers.len() - 1);
        if j >= i {
            j += 1;
        }
        let pick = |rng: &mut ChaCha8Rng, speaker: &str| -> String {
            let sessions: Vec<&str> = by_speaker[speaker].keys().copied().collect();
            let s = sessions[rng.random_range(0..sessions.len())];
            let utts = &by_speaker[speaker][s];
            utts[rng.random_range(0..utts.len())].utt_id.clone()
        };
        let enroll = pick(rng, speakers[i]);
        let test = pick(rng, speakers[j]);
        trials.push(Trial {
            target: false,
            enroll,
            test,
        });
    }
    Ok(trials)
}

/// Text trial list: one `label enroll test` line per trial, label 1 or 0.
pub fn save_trials(trials: &[Trial], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!(
            "{} {} {}\n",
            if t.target { 1 } else { 0 },
            t.enroll,
            t.test
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::format(
                &pstr,
                format!("line {}: expected 'label enroll test'", lineno + 1),
            ));
        }
        let target = match fields[0] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::format(
                    &pstr,
                    format!("line {}: label must be 1 or 0, got {other}", lineno + 1),
                ))
            }
        };
        trials.push(Trial {
            target,
            enroll: fields[1].to_string(),
            test: fields[2].to_string(),
        });
    }
    if trials.is_empty() {
        return Err(Error::format(&pstr, "trial list is empty"));
    }
    Ok(trials)
}

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 0.05 }
    }
}

/// Held-out accuracies of the four linear probes plus the residual
/// correlation between the code halves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub speaker_from_spk: f64,
    pub speaker_from_env: f64,
    pub session_from_spk: f64,
    pub session_from_env: f64,
    pub mapc: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Trains one softmax regression with Adam (full batch) and returns held-out
/// accuracy.
pub fn train_linear_probe<S: Scalar>(
    x_train: &Tensor<S>,
    y_train: &[usize],
    x_test: &Tensor<S>,
    y_test: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n_classes < 2 {
        return Err(Error::Protocol(format!(
            "a probe needs at least 2 classes, got {n_classes}"
        )));
    }
    if y_train.len() != x_train.rows() || y_test.len() != x_test.rows() {
        return Err(Error::shape(
            "linear probe",
            "one label per row",
            format!("{}/{} train, {}/{} test", y_train.len(), x_train.rows(), y_test.len(), x_test.rows()),
        ));
    }
    let mut fc = FcLayer::<S>::new(x_train.cols(), n_classes, rng);
    let mut adam = AdamState::default();
    let lr = S::of_f64(cfg.lr);
    for _ in 0..cfg.epochs {
        fc.weight.zero_grad();
        fc.bias.zero_grad();
        let (logits, cache) = fc.forward(x_train)?;
        let (_, probs) = softmax_ce(&logits, y_train)?;
        let dlogits = softmax_ce_backward(&probs, y_train, S::one());
        fc.backward(&cache, &dlogits)?;
        adam.t += 1;
        adam_update(&mut fc.weight, &adam, lr);
        adam_update(&mut fc.bias, &adam, lr);
    }
    let (logits, _) = fc.forward(x_test)?;
    let mut correct = 0usize;
    for (r, &label) in y_test.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / y_test.len().max(1) as f64)
}

fn class_index(values: impl Iterator<Item = String>) -> BTreeMap<String, usize> {
    let set: std::collections::BTreeSet<String> = values.collect();
    set.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
}

/// Trains the four probes on a session-stratified held-out split: one test
/// utterance per session with at least two utterances. Code rows must align
/// with `metadata`.
pub fn probe_disentanglement<S: Scalar>(
    codes: &CodeBatch<S>,
    metadata: &[UtteranceMeta],
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeReport> {
    if codes.rows() != metadata.len() {
        return Err(Error::shape(
            "probe_disentanglement",
            format!("{} code rows", metadata.len()),
            format!("{}", codes.rows()),
        ));
    }
    let speaker_classes = class_index(metadata.iter().map(|m| m.speaker_id.clone()));
    let session_classes = class_index(metadata.iter().map(|m| m.session_id.clone()));
    if speaker_classes.len() < 2 {
        return Err(Error::Protocol("speaker probe needs at least 2 speakers".into()));
    }
    if session_classes.len() < 2 {
        return Err(Error::Protocol("session probe needs at least 2 sessions".into()));
    }

    // one held-out utterance per session that can spare one
    let mut by_session: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in metadata.iter().enumerate() {
        by_session.entry(&m.session_id).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (_, idxs) in by_session {
        if idxs.len() >= 2 {
            let held = idxs[rng.random_range(0..idxs.len())];
            for i in idxs {
                if i == held {
                    test_idx.push(i);
                } else {
                    train_idx.push(i);
                }
            }
        } else {
            train_idx.extend(idxs);
        }
    }
    if test_idx.is_empty() {
        return Err(Error::Protocol(
            "no session has 2 utterances; cannot hold out probe data".into(),
        ));
    }

    let speaker_labels: Vec<usize> = metadata.iter().map(|m| speaker_classes[&m.speaker_id]).collect();
    let session_labels: Vec<usize> = metadata.iter().map(|m| session_classes[&m.session_id]).collect();
    let select_labels =
        |labels: &[usize], idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };

    let spk_train = codes.spk.select_rows(&train_idx);
    let spk_test = codes.spk.select_rows(&test_idx);
    let env_train = codes.env.select_rows(&train_idx);
    let env_test = codes.env.select_rows(&test_idx);

    let run = |x_train: &Tensor<S>, x_test: &Tensor<S>, labels: &[usize], n_classes: usize, rng: &mut ChaCha8Rng| {
        train_linear_probe(
            x_train,
            &select_labels(labels, &train_idx),
            x_test,
            &select_labels(labels, &test_idx),
            n_classes,
            cfg,
            rng,
        )
    };
    let speaker_from_spk = run(&spk_train, &spk_test, &speaker_labels, speaker_classes.len(), rng)?;
    let speaker_from_env = run(&env_train, &env_test, &speaker_labels, speaker_classes.len(), rng)?;
    let session_from_spk = run(&spk_train, &spk_test, &session_labels, session_classes.len(), rng)?;
    let session_from_env = run(&env_train, &env_test, &session_labels, session_classes.len(), rng)?;
    let (mapc, _) = mapc_loss(&codes.spk, &codes.env)?;

    Ok(ProbeReport {
        speaker_from_spk,
        speaker_from_env,
        session_from_spk,
        session_from_env,
        mapc: mapc.as_f64(),
        n_train: train_idx.len(),
        n_test: test_idx.len(),
    })
}

/// Encodes every utterance (metadata order) with the trained model in eval
/// mode and splits into code halves.
pub fn encode_dataset_codes<S: Scalar>(
    model: &crate::model::DisenModel<S>,
    dataset: &crate::sampler::Dataset,
) -> Result<CodeBatch<S>> {
    if dataset.metadata.is_empty() {
        return Err(Error::EmptyDataset("no utterances to encode".into()));
    }
    let d = dataset.dim();
    let mut batch = Tensor::zeros(dataset.metadata.len(), d);
    for (i, m) in dataset.metadata.iter().enumerate() {
        let emb = dataset.embedding(&m.utt_id)?;
        for (dst, &v) in batch.row_mut(i).iter_mut().zip(emb) {
            *dst = S::of_f64(v as f64);
        }
    }
    let z = model.autoencoder.encode_eval(&batch)?;
    let (codes, _) = crate::disentangler::split_codes(&z)?;
    Ok(codes)
}
