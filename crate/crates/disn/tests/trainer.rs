//! Training-step routing, determinism and persistence tests.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use disn::diffcore::Mode;
use disn::discriminators::{
    env_triplet_loss, env_triplet_loss_backward, mapc_loss, mapc_loss_backward, speaker_loss,
    speaker_loss_backward, LossWeights,
};
use disn::disentangler::{
    recons_loss_backward, split_codes, split_codes_backward, swap_speaker_codes, swap_speaker_grads,
};
use disn::error::Error;
use disn::model::{DisenModel, ModelConfig, ParamSet};
use disn::sampler::{build_triplets, synth_generate, Dataset, SynthWorld};
use disn::scalar::Scalar;
use disn::tensor::Tensor;
use disn::trainer::{
    apply_es_update, apply_main_update, compute_step_gradients, expect_model_config, fit,
    load_checkpoint, save_checkpoint, train_step, weighted_total, AdamState, Routing, StepOptions,
    TrainConfig, TrainerState,
};

fn small_model_config() -> ModelConfig {
    ModelConfig {
        input_dim: 12,
        code_dim: 8,
        n_speakers: 5,
        env_hidden_dim: 6,
        env_out_dim: 5,
    }
}

fn small_world(seed: u64) -> SynthWorld {
    SynthWorld {
        n_speakers: 5,
        sessions_per_speaker: 3,
        utterances_per_session: 4,
        speaker_factor_dim: 4,
        env_factor_dim: 4,
        embedding_dim: 12,
        ..SynthWorld::default()
    }
    .with_seed(seed)
}

/// Assembles one triplet batch straight from a dataset.
fn batch_from_dataset<S: Scalar>(dataset: &Dataset, n_triplets: usize, seed: u64) -> (Tensor<S>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (triplets, _) = build_triplets(&dataset.metadata, &mut rng).unwrap();
    assert!(triplets.len() >= n_triplets);
    let speakers = dataset.speakers();
    let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let d = dataset.dim();
    let mut batch = Tensor::zeros(n_triplets * 3, d);
    let mut labels = Vec::new();
    for (t, trip) in triplets.iter().take(n_triplets).enumerate() {
        for (j, utt) in [&trip.u1, &trip.u2, &trip.u3].into_iter().enumerate() {
            let emb = dataset.embedding(utt).unwrap();
            for (dst, &v) in batch.row_mut(3 * t + j).iter_mut().zip(emb) {
                *dst = S::of_f64(v as f64);
            }
        }
        let meta = dataset.metadata.iter().find(|m| m.utt_id == *trip.u1).unwrap();
        labels.push(index[meta.speaker_id.as_str()]);
    }
    (batch, labels)
}

fn snapshot<S: Scalar>(model: &mut DisenModel<S>) -> Vec<(String, ParamSet, Tensor<S>)> {
    model.param_snapshot()
}

#[test]
fn update_routing_keeps_parameter_sets_disjoint_over_random_steps() {
    let world = small_world(31);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let weights = LossWeights::default();
    let mut adam_main = AdamState::default();
    let mut adam_es = AdamState::default();

    // the adversarial hinge can be legitimately inactive on a given batch
    // (zero gradient), so discriminator movement is checked cumulatively
    let mut es_ever_moved = false;
    for step in 0..50 {
        let (batch, labels) = batch_from_dataset::<f64>(&dataset, 4, 1000 + step);
        compute_step_gradients(&mut model, &batch, &labels, &weights, StepOptions::default()).unwrap();

        let before = snapshot(&mut model);
        apply_main_update(&mut model, &mut adam_main, 1e-3);
        let mid = snapshot(&mut model);
        for ((name, set, b), (_, _, m)) in before.iter().zip(&mid) {
            match set {
                ParamSet::EnvSpk => assert!(b.bits_eq(m), "step {step}: main update touched {name}"),
                ParamSet::Main => {}
            }
        }
        apply_es_update(&mut model, &mut adam_es, 1e-3);
        let after = snapshot(&mut model);
        for ((name, set, m), (_, _, a)) in mid.iter().zip(&after) {
            match set {
                ParamSet::Main => assert!(m.bits_eq(a), "step {step}: adversarial update touched {name}"),
                ParamSet::EnvSpk => {}
            }
        }
        let moved_main = before
            .iter()
            .zip(&mid)
            .any(|((_, set, b), (_, _, m))| *set == ParamSet::Main && !b.bits_eq(m));
        assert!(moved_main, "step {step}: the main update was a no-op");
        es_ever_moved |= mid
            .iter()
            .zip(&after)
            .any(|((_, set, m), (_, _, a))| *set == ParamSet::EnvSpk && !m.bits_eq(a));
        assert!(
            model.speaker_disc.ap_scale.value.get(0, 0) >= 1e-6,
            "prototypical scale fell below its floor"
        );
    }
    assert!(es_ever_moved, "the adversarial discriminator never trained in 50 steps");
}

/// Reference gradient computation composing the public module operations in
/// the documented accumulation order (reconstruction, speaker, environment,
/// correlation) with the adversarial discriminator absent.
fn reference_encoder_grads_without_adversary(
    model: &mut DisenModel<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    weights: &LossWeights,
) -> Vec<Tensor<f64>> {
    model.zero_grads();
    let margin = weights.margin;
    let (z, encode_cache) = model.autoencoder.encode(batch, Mode::Train).unwrap();
    let (codes, split_cache) = split_codes(&z).unwrap();
    let (_, spk_cache) = speaker_loss(&model.speaker_disc, &codes.spk, labels).unwrap();
    let (_, ee_cache) = env_triplet_loss(&mut model.env_disc_env, &codes.env, margin, Mode::Train).unwrap();
    let (_, mapc_cache) = mapc_loss(&codes.spk, &codes.env).unwrap();
    let swapped = swap_speaker_codes(&codes).unwrap();
    let (out, decode_cache) = model.autoencoder.decode(&swapped, Mode::Train).unwrap();

    let mut grad_spk = Tensor::zeros(codes.spk.rows(), codes.spk.cols());
    let mut grad_env = Tensor::zeros(codes.env.rows(), codes.env.cols());
    let g_out = recons_loss_backward(batch, &out, weights.lambda_r).unwrap();
    let (g_spk_dec, g_env_dec) = model.autoencoder.decode_backward(&decode_cache, &g_out).unwrap();
    let g_spk_dec = swap_speaker_grads(&g_spk_dec).unwrap();
    grad_spk.add_scaled(&g_spk_dec, 1.0).unwrap();
    grad_env.add_scaled(&g_env_dec, 1.0).unwrap();
    let g = speaker_loss_backward(&mut model.speaker_disc, &spk_cache, weights.lambda_s).unwrap();
    grad_spk.add_scaled(&g, 1.0).unwrap();
    let g = env_triplet_loss_backward(&mut model.env_disc_env, &ee_cache, weights.lambda_e).unwrap();
    grad_env.add_scaled(&g, 1.0).unwrap();
    let (ga, gb) = mapc_loss_backward(&mapc_cache, weights.lambda_c);
    grad_spk.add_scaled(&ga, 1.0).unwrap();
    grad_env.add_scaled(&gb, 1.0).unwrap();
    let grad_z = split_codes_backward(&split_cache, &grad_spk, &grad_env).unwrap();
    model.autoencoder.encode_backward(&encode_cache, &grad_z).unwrap();

    let mut grads = Vec::new();
    model.visit_params(|name, _, p| {
        if name.starts_with("encoder.") {
            grads.push(p.grad.clone());
        }
    });
    grads
}

#[test]
fn zero_adversarial_weight_matches_adversary_free_reference_bitwise() {
    let world = small_world(32);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let mut reference = model.clone();

    let weights = LossWeights {
        lambda_adv: 0.0,
        ..LossWeights::default()
    };
    let (batch, labels) = batch_from_dataset::<f64>(&dataset, 4, 2);

    compute_step_gradients(&mut model, &batch, &labels, &weights, StepOptions::default()).unwrap();
    let mut got = Vec::new();
    model.visit_params(|name, _, p| {
        if name.starts_with("encoder.") {
            got.push((name.to_string(), p.grad.clone()));
        }
    });
    let want = reference_encoder_grads_without_adversary(&mut reference, &batch, &labels, &weights);
    assert_eq!(got.len(), want.len());
    for ((name, g), w) in got.iter().zip(&want) {
        assert!(g.bits_eq(w), "{name} differs from the adversary-free reference");
    }
}

#[test]
fn adversary_trains_on_its_own_loss_when_lambda_adv_is_zero() {
    let world = small_world(32);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let weights = LossWeights {
        lambda_adv: 0.0,
        ..LossWeights::default()
    };
    // the hinge is not active on every batch; some batch must feed E^S
    let mut any_nonzero = false;
    for seed in 0..8 {
        let (batch, labels) = batch_from_dataset::<f64>(&dataset, 4, 200 + seed);
        compute_step_gradients(&mut model, &batch, &labels, &weights, StepOptions::default()).unwrap();
        model.visit_params(|_, set, p| {
            if set == ParamSet::EnvSpk && p.grad.data().iter().any(|&v| v != 0.0) {
                any_nonzero = true;
            }
        });
        if any_nonzero {
            break;
        }
    }
    assert!(any_nonzero, "adversarial discriminator received no gradient on any batch");
}

#[test]
fn zeroing_adversarial_and_correlation_matches_three_term_reference() {
    // the encoder gradient must reduce to exactly the speaker,
    // reconstruction and environment terms
    let world = small_world(33);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let mut reference = model.clone();
    let weights = LossWeights {
        lambda_adv: 0.0,
        lambda_c: 0.0,
        ..LossWeights::default()
    };
    let (batch, labels) = batch_from_dataset::<f64>(&dataset, 4, 3);
    compute_step_gradients(&mut model, &batch, &labels, &weights, StepOptions::default()).unwrap();

    // reference: same composition with the correlation term skipped
    reference.zero_grads();
    let (z, encode_cache) = reference.autoencoder.encode(&batch, Mode::Train).unwrap();
    let (codes, split_cache) = split_codes(&z).unwrap();
    let (_, spk_cache) = speaker_loss(&reference.speaker_disc, &codes.spk, &labels).unwrap();
    let (_, ee_cache) =
        env_triplet_loss(&mut reference.env_disc_env, &codes.env, weights.margin, Mode::Train).unwrap();
    let swapped = swap_speaker_codes(&codes).unwrap();
    let (out, decode_cache) = reference.autoencoder.decode(&swapped, Mode::Train).unwrap();
    let mut grad_spk = Tensor::zeros(codes.spk.rows(), codes.spk.cols());
    let mut grad_env = Tensor::zeros(codes.env.rows(), codes.env.cols());
    let g_out = recons_loss_backward(&batch, &out, weights.lambda_r).unwrap();
    let (g_spk_dec, g_env_dec) = reference.autoencoder.decode_backward(&decode_cache, &g_out).unwrap();
    grad_spk.add_scaled(&swap_speaker_grads(&g_spk_dec).unwrap(), 1.0).unwrap();
    grad_env.add_scaled(&g_env_dec, 1.0).unwrap();
    let g = speaker_loss_backward(&mut reference.speaker_disc, &spk_cache, weights.lambda_s).unwrap();
    grad_spk.add_scaled(&g, 1.0).unwrap();
    let g = env_triplet_loss_backward(&mut reference.env_disc_env, &ee_cache, weights.lambda_e).unwrap();
    grad_env.add_scaled(&g, 1.0).unwrap();
    let grad_z = split_codes_backward(&split_cache, &grad_spk, &grad_env).unwrap();
    reference.autoencoder.encode_backward(&encode_cache, &grad_z).unwrap();

    let mut got = Vec::new();
    model.visit_params(|name, _, p| {
        if name.starts_with("encoder.") {
            got.push(p.grad.clone());
        }
    });
    let mut want = Vec::new();
    reference.visit_params(|name, _, p| {
        if name.starts_with("encoder.") {
            want.push(p.grad.clone());
        }
    });
    for (g, w) in got.iter().zip(&want) {
        assert!(g.bits_eq(w));
    }
}

#[test]
fn gradient_reversal_flips_the_adversarial_input_gradient() {
    // with only the adversarial weight active, the encoder-side code
    // gradient equals the standalone loss gradient scaled by -lambda_adv
    let world = small_world(34);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let mut oracle_disc = model.env_disc_spk.clone();
    let lambda_adv = 0.5;
    let weights = LossWeights {
        lambda_s: 0.0,
        lambda_r: 0.0,
        lambda_e: 0.0,
        lambda_c: 0.0,
        lambda_adv,
        ..LossWeights::default()
    };
    // find a batch where the adversarial hinge is active so the comparison
    // is about a genuinely nonzero gradient
    let (batch, labels) = (4..64)
        .map(|seed| batch_from_dataset::<f64>(&dataset, 4, seed))
        .find(|(batch, _)| {
            let mut probe_model = model.clone();
            let (z, _) = probe_model.autoencoder.encode(batch, Mode::Train).unwrap();
            let (codes, _) = split_codes(&z).unwrap();
            let mut probe_disc = oracle_disc.clone();
            let (loss, _) =
                env_triplet_loss(&mut probe_disc, &codes.spk, weights.margin, Mode::Train).unwrap();
            loss > 0.0
        })
        .expect("some batch activates the adversarial hinge");

    // duplicate forward: recompute the codes and the standalone loss gradient
    let mut dup = model.clone();
    let (z, _) = dup.autoencoder.encode(&batch, Mode::Train).unwrap();
    let (codes, _) = split_codes(&z).unwrap();
    let (_, cache) = env_triplet_loss(&mut oracle_disc, &codes.spk, weights.margin, Mode::Train).unwrap();
    let g_plain = env_triplet_loss_backward(&mut oracle_disc, &cache, 1.0).unwrap();
    assert!(g_plain.data().iter().any(|&v| v != 0.0));

    let (_, grads) =
        compute_step_gradients(&mut model, &batch, &labels, &weights, StepOptions::default()).unwrap();
    // accumulate the same way the step does, so signed zeros agree
    let mut expected = Tensor::zeros_like(&g_plain);
    expected.add_scaled(&g_plain, -lambda_adv).unwrap();
    assert!(
        grads.code_spk.bits_eq(&expected),
        "reversed gradient does not equal -lambda_adv times the plain gradient"
    );

    // and E^S parameter gradients are the plain (unweighted) ones
    let mut got_es = Vec::new();
    model.visit_params(|_, set, p| {
        if set == ParamSet::EnvSpk {
            got_es.push(p.grad.clone());
        }
    });
    let want_es = [
        oracle_disc.block1.bn.gamma.grad.clone(),
        oracle_disc.block1.bn.beta.grad.clone(),
        oracle_disc.block1.fc.weight.grad.clone(),
        oracle_disc.block1.fc.bias.grad.clone(),
        oracle_disc.block2.bn.gamma.grad.clone(),
        oracle_disc.block2.bn.beta.grad.clone(),
        oracle_disc.block2.fc.weight.grad.clone(),
        oracle_disc.block2.fc.bias.grad.clone(),
    ];
    for (g, w) in got_es.iter().zip(&want_es) {
        assert!(g.bits_eq(w), "adversarial parameter gradient is not the unweighted one");
    }
}

#[test]
fn plain_composite_routing_scales_adversary_gradients_by_lambda() {
    let world = small_world(36);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let weights = LossWeights::default();
    let (batch, labels) = batch_from_dataset::<f64>(&dataset, 4, 10);
    let opts = StepOptions {
        bn_mode: Mode::Eval,
        routing: Routing::PlainComposite,
        swap_codes: true,
    };
    compute_step_gradients(&mut model, &batch, &labels, &weights, opts).unwrap();
    let mut any_nonzero = false;
    model.visit_params(|_, set, p| {
        if set == ParamSet::EnvSpk && p.grad.data().iter().any(|&v| v != 0.0) {
            any_nonzero = true;
        }
    });
    assert!(any_nonzero, "plain composite routing should reach E^S parameters");
}

#[test]
fn reported_total_is_the_weighted_sum_identity() {
    let world = small_world(35);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let weights = LossWeights::default();
    let mut adam_main = AdamState::default();
    let mut adam_es = AdamState::default();
    for step in 0..10 {
        let (batch, labels) = batch_from_dataset::<f64>(&dataset, 4, 50 + step);
        let report = train_step(
            &mut model,
            &batch,
            &labels,
            &weights,
            &mut adam_main,
            &mut adam_es,
            1e-3,
            true,
        )
        .unwrap();
        let recomputed = weighted_total(
            &weights,
            report.l_spk,
            report.l_recons,
            report.l_env_env,
            report.l_env_spk,
            report.l_corr,
        );
        assert_eq!(report.l_total.to_bits(), recomputed.to_bits());
    }
}

#[test]
fn reconstruction_only_training_converges_on_a_fixed_batch() {
    let world = small_world(38);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    let weights = LossWeights {
        lambda_s: 0.0,
        lambda_e: 0.0,
        lambda_adv: 0.0,
        lambda_c: 0.0,
        ..LossWeights::default()
    };
    let (batch, labels) = batch_from_dataset::<f64>(&dataset, 6, 12);
    let mut adam_main = AdamState::default();
    let mut adam_es = AdamState::default();
    let mut losses = Vec::new();
    for _ in 0..100 {
        let report = train_step(
            &mut model,
            &batch,
            &labels,
            &weights,
            &mut adam_main,
            &mut adam_es,
            1e-3,
            true,
        )
        .unwrap();
        losses.push(report.l_recons);
    }
    let first = losses[0];
    let last = *losses.last().unwrap();
    assert!(
        last < first,
        "reconstruction did not improve: {first} -> {last}"
    );
    // step-decay can wiggle, but every 10-step window mean must drop
    for w in 0..9 {
        let m1: f64 = losses[w * 10..(w + 1) * 10].iter().sum::<f64>() / 10.0;
        let m2: f64 = losses[(w + 1) * 10..(w + 2) * 10].iter().sum::<f64>() / 10.0;
        assert!(m2 < m1, "window {w}: mean went {m1} -> {m2}");
    }
}

#[test]
fn non_finite_loss_aborts_with_the_offending_term() {
    let world = small_world(39);
    let dataset = synth_generate(&world).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model = DisenModel::<f64>::new(small_model_config(), &mut rng).unwrap();
    // poison the encoder so activations overflow
    for v in model.autoencoder.encoder_fc.weight.value.data_mut() {
        *v = 1e308;
    }
    let (batch, labels) = batch_from_dataset::<f64>(&dataset, 4, 14);
    let err = compute_step_gradients(
        &mut model,
        &batch,
        &labels,
        &LossWeights::default(),
        StepOptions::default(),
    )
    .unwrap_err();
    match err {
        Error::NonFinite(what) => assert!(what.contains("L_"), "diagnostic does not name a term: {what}"),
        other => panic!("expected a non-finite abort, got {other}"),
    }
}

// ---------------------------------------------------------------------------
// fit / checkpoint behavior
// ---------------------------------------------------------------------------

fn quick_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_byte_identical_checkpoints() {
    let world = small_world(40);
    let dataset = synth_generate(&world).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_train_config(4);
    let mut bytes = Vec::new();
    for run in 0..2 {
        let path = dir.path().join(format!("run{run}.ckpt"));
        let mut state = TrainerState::<f32>::new(small_model_config(), 99).unwrap();
        fit(&dataset, &cfg, &mut state, Some(&path)).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_run() {
    let world = small_world(41);
    let dataset = synth_generate(&world).unwrap();
    let dir = tempfile::tempdir().unwrap();

    // uninterrupted: 6 epochs
    let full_path = dir.path().join("full.ckpt");
    let mut full_state = TrainerState::<f32>::new(small_model_config(), 7).unwrap();
    let full_hist = fit(&dataset, &quick_train_config(6), &mut full_state, Some(&full_path)).unwrap();

    // interrupted: 3 epochs, then resume from the checkpoint file
    let part_path = dir.path().join("part.ckpt");
    let mut part_state = TrainerState::<f32>::new(small_model_config(), 7).unwrap();
    let hist_a = fit(&dataset, &quick_train_config(3), &mut part_state, Some(&part_path)).unwrap();
    let mut resumed = load_checkpoint(&part_path).unwrap();
    assert_eq!(resumed.epoch, 3);
    let hist_b = fit(&dataset, &quick_train_config(6), &mut resumed, Some(&part_path)).unwrap();

    let stitched: Vec<_> = hist_a.into_iter().chain(hist_b).collect();
    assert_eq!(full_hist.len(), stitched.len());
    for (a, b) in full_hist.iter().zip(&stitched) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.l_total.to_bits(), b.l_total.to_bits(), "epoch {} diverged", a.epoch);
    }
    // and the final checkpoints are byte-identical
    let full_bytes = std::fs::read(&full_path).unwrap();
    let part_bytes = std::fs::read(&part_path).unwrap();
    assert_eq!(full_bytes, part_bytes);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let world = small_world(42);
    let dataset = synth_generate(&world).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.ckpt");
    let path_b = dir.path().join("b.ckpt");
    let mut state = TrainerState::<f32>::new(small_model_config(), 3).unwrap();
    fit(&dataset, &quick_train_config(2), &mut state, Some(&path_a)).unwrap();
    let mut loaded = load_checkpoint(&path_a).unwrap();
    save_checkpoint(&mut loaded, &path_b).unwrap();
    assert_eq!(std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());
}

#[test]
fn checkpoint_with_wrong_version_is_rejected() {
    let world = small_world(43);
    let dataset = synth_generate(&world).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ckpt");
    let mut state = TrainerState::<f32>::new(small_model_config(), 3).unwrap();
    fit(&dataset, &quick_train_config(2), &mut state, Some(&path)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    match load_checkpoint(&path).unwrap_err() {
        Error::Format { detail, .. } => assert!(detail.contains("version"), "{detail}"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn checkpoint_architecture_mismatch_is_rejected() {
    let world = small_world(44);
    let dataset = synth_generate(&world).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut state = TrainerState::<f32>::new(small_model_config(), 3).unwrap();
    fit(&dataset, &quick_train_config(2), &mut state, Some(&path)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let mut other = small_model_config();
    other.code_dim = 4;
    assert!(matches!(expect_model_config(&loaded, &other), Err(Error::Config(_))));
}

#[test]
fn empty_dataset_fails_before_any_step() {
    let world = small_world(45);
    let mut dataset = synth_generate(&world).unwrap();
    dataset.metadata.clear();
    let mut state = TrainerState::<f32>::new(small_model_config(), 3).unwrap();
    assert!(matches!(
        fit(&dataset, &quick_train_config(1), &mut state, None),
        Err(Error::EmptyDataset(_))
    ));
}

#[test]
fn dataset_dimension_mismatch_is_rejected() {
    let world = SynthWorld {
        embedding_dim: 20,
        ..small_world(46)
    };
    let dataset = synth_generate(&world).unwrap();
    let mut state = TrainerState::<f32>::new(small_model_config(), 3).unwrap();
    match fit(&dataset, &quick_train_config(1), &mut state, None) {
        Err(Error::Config(msg)) => assert!(msg.contains("dimension"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}
