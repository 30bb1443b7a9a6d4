//! Auto-encoder disentangler.
//!
//! The encoder (batch norm followed by one fully-connected layer) projects a
//! D-dimensional input embedding to a Z-dimensional bottleneck code. The
//! code is split in half into a speaker code and an environment code, each
//! L1-normalized independently. Within each triplet the speaker codes of the
//! second and third members are swapped before decoding; the first member is
//! never swapped. The decoder mirrors the encoder (batch norm, then
//! fully-connected) and reconstructs the input; the reconstruction loss is
//! the summed elementwise absolute error, averaged over triplets.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    l1_normalize_forward, l1_normalize_backward, BnCache, BnLayer, FcCache, FcLayer, L1NormCache, Mode,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bottleneck geometry: input dimension D and code dimension Z, with the
/// code split equally into speaker and environment halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisentanglerConfig {
    pub input_dim: usize,
    pub code_dim: usize,
}

impl DisentanglerConfig {
    pub fn new(input_dim: usize, code_dim: usize) -> Result<Self> {
        let cfg = DisentanglerConfig { input_dim, code_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_dim < 2 || self.code_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "code_dim must be an even number >= 2, got {}",
                self.code_dim
            )));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.input_dim < self.code_dim {
            log::warn!(
                "code_dim {} exceeds input_dim {}; the bottleneck is wider than its input",
                self.code_dim,
                self.input_dim
            );
        }
        Ok(())
    }

    /// Speaker-code dimension d = Z/2.
    pub fn speaker_dim(&self) -> usize {
        self.code_dim / 2
    }

    /// Environment-code dimension Z - d.
    pub fn env_dim(&self) -> usize {
        self.code_dim - self.speaker_dim()
    }
}

/// Encoder and decoder parameters; dimensions are symmetric (D -> Z -> D).
#[derive(Debug, Clone)]
pub struct AutoEncoder<S> {
    pub cfg: DisentanglerConfig,
    pub encoder_bn: BnLayer<S>,
    pub encoder_fc: FcLayer<S>,
    pub decoder_bn: BnLayer<S>,
    pub decoder_fc: FcLayer<S>,
}

pub struct EncodeCache<S> {
    bn: BnCache<S>,
    fc: FcCache<S>,
}

pub struct DecodeCache<S> {
    bn: BnCache<S>,
    fc: FcCache<S>,
    spk_cols: usize,
}

impl<S: Scalar> AutoEncoder<S> {
    pub fn new(cfg: DisentanglerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(AutoEncoder {
            cfg,
            encoder_bn: BnLayer::new(cfg.input_dim),
            encoder_fc: FcLayer::new(cfg.input_dim, cfg.code_dim, rng),
            decoder_bn: BnLayer::new(cfg.code_dim),
            decoder_fc: FcLayer::new(cfg.code_dim, cfg.input_dim, rng),
        })
    }

    /// Projects input embeddings to bottleneck codes: `z = FC(BN(e))`.
    pub fn encode(&mut self, e: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, EncodeCache<S>)> {
        if e.cols() != self.cfg.input_dim {
            return Err(Error::shape(
                "encode",
                format!("{} input columns", self.cfg.input_dim),
                format!("{}", e.cols()),
            ));
        }
        let (h, bn) = self.encoder_bn.forward(e, mode)?;
        let (z, fc) = self.encoder_fc.forward(&h)?;
        Ok((z, EncodeCache { bn, fc }))
    }

    /// Eval-mode encode on a shared reference; safe for read-only use.
    pub fn encode_eval(&self, e: &Tensor<S>) -> Result<Tensor<S>> {
        if e.cols() != self.cfg.input_dim {
            return Err(Error::shape(
                "encode",
                format!("{} input columns", self.cfg.input_dim),
                format!("{}", e.cols()),
            ));
        }
        let (h, _) = self.encoder_bn.forward_eval(e)?;
        let (z, _) = self.encoder_fc.forward(&h)?;
        Ok(z)
    }

    pub fn encode_backward(&mut self, cache: &EncodeCache<S>, grad_z: &Tensor<S>) -> Result<Tensor<S>> {
        let grad_h = self.encoder_fc.backward(&cache.fc, grad_z)?;
        self.encoder_bn.backward(&cache.bn, &grad_h)
    }

    /// Reconstructs embeddings from codes: `ê = FC(BN(concat(spk, env)))`.
    pub fn decode(&mut self, codes: &CodeBatch<S>, mode: Mode) -> Result<(Tensor<S>, DecodeCache<S>)> {
        let joined = Tensor::concat_cols(&codes.spk, &codes.env)?;
        if joined.cols() != self.cfg.code_dim {
            return Err(Error::shape(
                "decode",
                format!("{} code columns", self.cfg.code_dim),
                format!("{}", joined.cols()),
            ));
        }
        let (h, bn) = self.decoder_bn.forward(&joined, mode)?;
        let (out, fc) = self.decoder_fc.forward(&h)?;
        Ok((
            out,
            DecodeCache {
                bn,
                fc,
                spk_cols: codes.spk.cols(),
            },
        ))
    }

    /// Backward through decode; returns gradients for the (spk, env) inputs.
    pub fn decode_backward(
        &mut self,
        cache: &DecodeCache<S>,
        grad_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let grad_h = self.decoder_fc.backward(&cache.fc, grad_out)?;
        let grad_joined = self.decoder_bn.backward(&cache.bn, &grad_h)?;
        grad_joined.split_cols(cache.spk_cols)
    }
}

/// Disentangled codes: speaker half and environment half, both L1-normalized
/// per row. Rows follow the triplet layout (members j = 1, 2, 3 contiguous)
/// whenever the batch is triplet-structured.
#[derive(Debug, Clone)]
pub struct CodeBatch<S> {
    pub spk: Tensor<S>,
    pub env: Tensor<S>,
}

impl<S: Scalar> CodeBatch<S> {
    pub fn new(spk: Tensor<S>, env: Tensor<S>) -> Result<Self> {
        if spk.rows() != env.rows() {
            return Err(Error::shape(
                "code batch",
                format!("{} rows", spk.rows()),
                format!("{} rows", env.rows()),
            ));
        }
        Ok(CodeBatch { spk, env })
    }

    pub fn rows(&self) -> usize {
        self.spk.rows()
    }

    fn expect_triplets(&self, context: &str) -> Result<usize> {
        if self.rows() % 3 != 0 {
            return Err(Error::BatchStructure(format!(
                "{context} requires triplet-structured rows (multiple of 3), got {}",
                self.rows()
            )));
        }
        Ok(self.rows() / 3)
    }
}

pub struct SplitCache<S> {
    spk_norm: L1NormCache<S>,
    env_norm: L1NormCache<S>,
}

/// Splits bottleneck codes into equally sized speaker and environment
/// halves, L1-normalizing each independently.
pub fn split_codes<S: Scalar>(z: &Tensor<S>) -> Result<(CodeBatch<S>, SplitCache<S>)> {
    if z.cols() % 2 != 0 {
        return Err(Error::Config(format!(
            "code dimension must be even to split in half, got {}",
            z.cols()
        )));
    }
    let (spk_raw, env_raw) = z.split_cols(z.cols() / 2)?;
    let (spk, spk_norm) = l1_normalize_forward(&spk_raw);
    let (env, env_norm) = l1_normalize_forward(&env_raw);
    Ok((CodeBatch { spk, env }, SplitCache { spk_norm, env_norm }))
}

/// Backward through the split: gradients on the normalized halves map back
/// to a gradient on the raw bottleneck code.
pub fn split_codes_backward<S: Scalar>(
    cache: &SplitCache<S>,
    grad_spk: &Tensor<S>,
    grad_env: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g_spk = l1_normalize_backward(&cache.spk_norm, grad_spk)?;
    let g_env = l1_normalize_backward(&cache.env_norm, grad_env)?;
    Tensor::concat_cols(&g_spk, &g_env)
}

/// Exchanges the speaker codes of triplet members j = 2 and j = 3; the first
/// member and all environment codes stay untouched. An involution.
pub fn swap_speaker_codes<S: Scalar>(codes: &CodeBatch<S>) -> Result<CodeBatch<S>> {
    let triplets = codes.expect_triplets("swap_speaker_codes")?;
    let mut spk = codes.spk.clone();
    for t in 0..triplets {
        let a = 3 * t + 1;
        let b = 3 * t + 2;
        for c in 0..spk.cols() {
            let va = spk.get(a, c);
            let vb = spk.get(b, c);
            spk.set(a, c, vb);
            spk.set(b, c, va);
        }
    }
    Ok(CodeBatch {
        spk,
        env: codes.env.clone(),
    })
}

/// Applies the swap permutation to a speaker-code gradient; the swap is its
/// own inverse, so backward equals forward.
pub fn swap_speaker_grads<S: Scalar>(grad_spk: &Tensor<S>) -> Result<Tensor<S>> {
    if grad_spk.rows() % 3 != 0 {
        return Err(Error::BatchStructure(format!(
            "swap backward requires triplet-structured rows, got {}",
            grad_spk.rows()
        )));
    }
    let mut out = grad_spk.clone();
    for t in 0..grad_spk.rows() / 3 {
        let a = 3 * t + 1;
        let b = 3 * t + 2;
        for c in 0..out.cols() {
            let va = out.get(a, c);
            let vb = out.get(b, c);
            out.set(a, c, vb);
            out.set(b, c, va);
        }
    }
    Ok(out)
}

/// Summed elementwise absolute reconstruction error over all triplet
/// members, averaged over the triplets in the batch.
pub fn recons_loss<S: Scalar>(e: &Tensor<S>, e_hat: &Tensor<S>) -> Result<S> {
    if !e.same_shape(e_hat) {
        return Err(Error::shape(
            "recons_loss",
            format!("{}x{}", e.rows(), e.cols()),
            format!("{}x{}", e_hat.rows(), e_hat.cols()),
        ));
    }
    if e.rows() % 3 != 0 {
        return Err(Error::BatchStructure(format!(
            "recons_loss requires triplet-structured rows, got {}",
            e.rows()
        )));
    }
    let triplets = S::of_usize(e.rows() / 3);
    let mut total = S::zero();
    for (&a, &b) in e.data().iter().zip(e_hat.data()) {
        total += (a - b).abs();
    }
    Ok(total / triplets)
}

/// Gradient of [`recons_loss`] with respect to the reconstruction `e_hat`.
/// The subgradient at an exact zero difference is 0.
pub fn recons_loss_backward<S: Scalar>(e: &Tensor<S>, e_hat: &Tensor<S>, upstream: S) -> Result<Tensor<S>> {
    if !e.same_shape(e_hat) {
        return Err(Error::shape(
            "recons_loss backward",
            format!("{}x{}", e.rows(), e.cols()),
            format!("{}x{}", e_hat.rows(), e_hat.cols()),
        ));
    }
    let scale = upstream / S::of_usize(e.rows() / 3);
    let mut grad = Tensor::zeros_like(e_hat);
    for i in 0..e.data().len() {
        let d = e_hat.data()[i] - e.data()[i];
        let sign = if d > S::zero() {
            S::one()
        } else if d < S::zero() {
            -S::one()
        } else {
            S::zero()
        };
        grad.data_mut()[i] = sign * scale;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn identity_autoencoder(dim: usize) -> AutoEncoder<f64> {
        let cfg = DisentanglerConfig::new(dim, dim).unwrap();
        let mut ae = AutoEncoder::new(cfg, &mut rng(0)).unwrap();
        ae.encoder_bn = BnLayer::with_settings(dim, 0.1, 1e-12);
        ae.encoder_fc = FcLayer::from_parts(Tensor::identity(dim), Tensor::zeros(1, dim)).unwrap();
        ae.decoder_bn = BnLayer::with_settings(dim, 0.1, 1e-12);
        ae.decoder_fc = FcLayer::from_parts(Tensor::identity(dim), Tensor::zeros(1, dim)).unwrap();
        ae
    }

    #[test]
    fn encode_identity_configuration_returns_input() {
        let mut ae = identity_autoencoder(4);
        let e = Tensor::from_vec(2, 4, vec![1.0, -2.0, 0.5, 3.0, 0.25, 1.5, -0.75, 2.0]).unwrap();
        let (z, _) = ae.encode(&e, Mode::Eval).unwrap();
        for (a, b) in z.data().iter().zip(e.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn encode_preserves_row_order() {
        let cfg = DisentanglerConfig::new(6, 4).unwrap();
        let ae = AutoEncoder::<f64>::new(cfg, &mut rng(11)).unwrap();
        let mut r = rng(12);
        let batch = crate::rng::normal_tensor::<f64>(&mut r, 9, 6, 1.0);
        let whole = ae.encode_eval(&batch).unwrap();
        for i in 0..9 {
            let single = batch.select_rows(&[i]);
            // encode_eval of a single row must equal the matching batch row
            let z = ae.encode_eval(&single).unwrap();
            for c in 0..4 {
                assert_relative_eq!(z.get(0, c), whole.get(i, c), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn split_codes_hand_example() {
        let z = Tensor::from_vec(1, 4, vec![2.0, -2.0, 1.0, 1.0]).unwrap();
        let (codes, _) = split_codes(&z).unwrap();
        assert_relative_eq!(codes.spk.get(0, 0), 0.5, max_relative = 1e-9);
        assert_relative_eq!(codes.spk.get(0, 1), -0.5, max_relative = 1e-9);
        assert_relative_eq!(codes.env.get(0, 0), 0.5, max_relative = 1e-9);
        assert_relative_eq!(codes.env.get(0, 1), 0.5, max_relative = 1e-9);
    }

    #[test]
    fn split_codes_zero_half_is_guarded() {
        let z = Tensor::from_vec(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (codes, _) = split_codes(&z).unwrap();
        assert_eq!(codes.env.get(0, 0), 0.0);
        assert_eq!(codes.env.get(0, 1), 0.0);
    }

    #[test]
    fn split_codes_rejects_odd_width() {
        let z = Tensor::<f64>::zeros(1, 5);
        assert!(matches!(split_codes(&z), Err(Error::Config(_))));
    }

    #[test]
    fn split_codes_norms_invert_the_normalization() {
        let mut r = rng(5);
        let z = crate::rng::normal_tensor::<f64>(&mut r, 4, 8, 2.0);
        let (codes, _) = split_codes(&z).unwrap();
        for row in 0..4 {
            let spk_norm: f64 = z.row(row)[..4].iter().map(|v| v.abs()).sum();
            let env_norm: f64 = z.row(row)[4..].iter().map(|v| v.abs()).sum();
            for c in 0..4 {
                assert_relative_eq!(codes.spk.get(row, c) * spk_norm, z.get(row, c), max_relative = 1e-9);
                assert_relative_eq!(codes.env.get(row, c) * env_norm, z.get(row, c + 4), max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn swap_exchanges_second_and_third_members() {
        let spk = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let env = Tensor::from_vec(3, 2, vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]).unwrap();
        let codes = CodeBatch::new(spk, env).unwrap();
        let swapped = swap_speaker_codes(&codes).unwrap();
        assert_eq!(swapped.spk.row(0), &[1.0, 2.0]);
        assert_eq!(swapped.spk.row(1), &[5.0, 6.0]);
        assert_eq!(swapped.spk.row(2), &[3.0, 4.0]);
        // environment codes untouched
        assert!(swapped.env.bits_eq(&codes.env));
    }

    #[test]
    fn swap_fixed_point_when_members_equal() {
        let spk = Tensor::from_vec(3, 2, vec![1.0, 2.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let env = Tensor::zeros(3, 2);
        let codes = CodeBatch::new(spk.clone(), env).unwrap();
        let swapped = swap_speaker_codes(&codes).unwrap();
        assert!(swapped.spk.bits_eq(&spk));
    }

    #[test]
    fn swap_twice_is_identity() {
        let mut r = rng(9);
        let spk = crate::rng::normal_tensor::<f64>(&mut r, 6, 3, 1.0);
        let env = crate::rng::normal_tensor::<f64>(&mut r, 6, 3, 1.0);
        let codes = CodeBatch::new(spk, env).unwrap();
        let twice = swap_speaker_codes(&swap_speaker_codes(&codes).unwrap()).unwrap();
        assert!(twice.spk.bits_eq(&codes.spk));
        assert!(twice.env.bits_eq(&codes.env));
    }

    #[test]
    fn swap_rejects_non_triplet_batches() {
        let spk = Tensor::<f64>::zeros(4, 2);
        let env = Tensor::<f64>::zeros(4, 2);
        let codes = CodeBatch::new(spk, env).unwrap();
        assert!(matches!(swap_speaker_codes(&codes), Err(Error::BatchStructure(_))));
    }

    #[test]
    fn recons_loss_zero_on_equal_inputs() {
        let e = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(recons_loss(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn recons_loss_hand_sum() {
        // One triplet whose first member differs by |1| + |1| = 2.
        let e = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let e_hat = Tensor::from_vec(3, 2, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(recons_loss(&e, &e_hat).unwrap(), 2.0);
    }

    #[test]
    fn recons_loss_is_averaged_over_triplets() {
        let e = Tensor::<f64>::zeros(6, 1);
        let mut e_hat = Tensor::<f64>::zeros(6, 1);
        e_hat.set(0, 0, 3.0);
        assert_relative_eq!(recons_loss(&e, &e_hat).unwrap(), 1.5, max_relative = 1e-12);
    }

    #[test]
    fn decode_identity_configuration_returns_codes() {
        let mut ae = identity_autoencoder(4);
        let spk = Tensor::from_vec(1, 2, vec![0.5, -0.25]).unwrap();
        let env = Tensor::from_vec(1, 2, vec![0.1, 0.2]).unwrap();
        let codes = CodeBatch::new(spk, env).unwrap();
        let (out, _) = ae.decode(&codes, Mode::Eval).unwrap();
        let want = [0.5, -0.25, 0.1, 0.2];
        for (a, b) in out.data().iter().zip(want.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn swapped_reconstruction_matches_unswapped_on_oracle_codes() {
        // Oracle codes: within a triplet all speaker codes are identical, so
        // swapping members 2 and 3 changes nothing about reconstruction.
        let cfg = DisentanglerConfig::new(6, 4).unwrap();
        let mut ae = AutoEncoder::<f64>::new(cfg, &mut rng(21)).unwrap();
        let mut r = rng(22);
        let mut spk = Tensor::zeros(6, 2);
        let mut env = Tensor::zeros(6, 2);
        for t in 0..2 {
            let srow = crate::rng::normal_tensor::<f64>(&mut r, 1, 2, 1.0);
            for j in 0..3 {
                spk.row_mut(3 * t + j).copy_from_slice(srow.row(0));
                let erow = crate::rng::normal_tensor::<f64>(&mut r, 1, 2, 1.0);
                env.row_mut(3 * t + j).copy_from_slice(erow.row(0));
            }
        }
        let e = crate::rng::normal_tensor::<f64>(&mut r, 6, 6, 1.0);
        let codes = CodeBatch::new(spk, env).unwrap();
        let swapped = swap_speaker_codes(&codes).unwrap();
        let (out_a, _) = ae.decode(&codes, Mode::Eval).unwrap();
        let (out_b, _) = ae.decode(&swapped, Mode::Eval).unwrap();
        assert_eq!(
            recons_loss(&e, &out_a).unwrap().to_bits(),
            recons_loss(&e, &out_b).unwrap().to_bits()
        );
    }
}
