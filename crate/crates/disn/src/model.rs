//! The assembled disentanglement framework: auto-encoder plus the three
//! discriminators, with named traversal over parameters and state tensors.
//!
//! Parameters are partitioned into two disjoint sets: the adversarial
//! environment discriminator `E^S`, and everything else ("main"). The two
//! sets are updated by separate optimizers from the same mini-batch.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Param;
use crate::discriminators::{EnvDisc, SpeakerDisc};
use crate::disentangler::{AutoEncoder, DisentanglerConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyperparameters, persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub code_dim: usize,
    pub n_speakers: usize,
    pub env_hidden_dim: usize,
    pub env_out_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        DisentanglerConfig::new(self.input_dim, self.code_dim)?;
        if self.n_speakers < 2 {
            return Err(Error::Config(format!(
                "n_speakers must be >= 2, got {}",
                self.n_speakers
            )));
        }
        if self.env_hidden_dim < 1 || self.env_out_dim < 1 {
            return Err(Error::Config("environment discriminator dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn disentangler(&self) -> DisentanglerConfig {
        DisentanglerConfig {
            input_dim: self.input_dim,
            code_dim: self.code_dim,
        }
    }
}

/// Which parameter partition a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    /// Everything except the adversarial environment discriminator.
    Main,
    /// The adversarial environment discriminator `E^S`.
    EnvSpk,
}

#[derive(Debug, Clone)]
pub struct DisenModel<S> {
    pub cfg: ModelConfig,
    pub autoencoder: AutoEncoder<S>,
    pub speaker_disc: SpeakerDisc<S>,
    pub env_disc_env: EnvDisc<S>,
    pub env_disc_spk: EnvDisc<S>,
}

impl<S: Scalar> DisenModel<S> {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.disentangler();
        let autoencoder = AutoEncoder::new(d, rng)?;
        let speaker_disc = SpeakerDisc::new(d.speaker_dim(), cfg.n_speakers, rng);
        let env_disc_env = EnvDisc::new(d.env_dim(), cfg.env_hidden_dim, cfg.env_out_dim, rng);
        let env_disc_spk = EnvDisc::new(d.speaker_dim(), cfg.env_hidden_dim, cfg.env_out_dim, rng);
        Ok(DisenModel {
            cfg,
            autoencoder,
            speaker_disc,
            env_disc_env,
            env_disc_spk,
        })
    }

    /// Visits every trainable parameter with its canonical name and set.
    /// The order is fixed; checkpoint manifests and flat parameter packing
    /// both rely on it.
    pub fn visit_params(&mut self, mut f: impl FnMut(&str, ParamSet, &mut Param<S>)) {
        let ae = &mut self.autoencoder;
        f("encoder.bn.gamma", ParamSet::Main, &mut ae.encoder_bn.gamma);
        f("encoder.bn.beta", ParamSet::Main, &mut ae.encoder_bn.beta);
        f("encoder.fc.weight", ParamSet::Main, &mut ae.encoder_fc.weight);
        f("encoder.fc.bias", ParamSet::Main, &mut ae.encoder_fc.bias);
        f("decoder.bn.gamma", ParamSet::Main, &mut ae.decoder_bn.gamma);
        f("decoder.bn.beta", ParamSet::Main, &mut ae.decoder_bn.beta);
        f("decoder.fc.weight", ParamSet::Main, &mut ae.decoder_fc.weight);
        f("decoder.fc.bias", ParamSet::Main, &mut ae.decoder_fc.bias);
        let sd = &mut self.speaker_disc;
        f("speaker_disc.fc.weight", ParamSet::Main, &mut sd.classifier.weight);
        f("speaker_disc.fc.bias", ParamSet::Main, &mut sd.classifier.bias);
        f("speaker_disc.ap_scale", ParamSet::Main, &mut sd.ap_scale);
        f("speaker_disc.ap_offset", ParamSet::Main, &mut sd.ap_offset);
        for (prefix, disc, set) in [
            ("env_disc_env", &mut self.env_disc_env, ParamSet::Main),
            ("env_disc_spk", &mut self.env_disc_spk, ParamSet::EnvSpk),
        ] {
            for (bname, block) in [("block1", &mut disc.block1), ("block2", &mut disc.block2)] {
                f(&format!("{prefix}.{bname}.bn.gamma"), set, &mut block.bn.gamma);
                f(&format!("{prefix}.{bname}.bn.beta"), set, &mut block.bn.beta);
                f(&format!("{prefix}.{bname}.fc.weight"), set, &mut block.fc.weight);
                f(&format!("{prefix}.{bname}.fc.bias"), set, &mut block.fc.bias);
            }
        }
    }

    /// Visits non-trainable state tensors (batch-norm running statistics).
    pub fn visit_state(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>)) {
        let ae = &mut self.autoencoder;
        f("encoder.bn.running_mean", &mut ae.encoder_bn.running_mean);
        f("encoder.bn.running_var", &mut ae.encoder_bn.running_var);
        f("decoder.bn.running_mean", &mut ae.decoder_bn.running_mean);
        f("decoder.bn.running_var", &mut ae.decoder_bn.running_var);
        for (prefix, disc) in [
            ("env_disc_env", &mut self.env_disc_env),
            ("env_disc_spk", &mut self.env_disc_spk),
        ] {
            for (bname, block) in [("block1", &mut disc.block1), ("block2", &mut disc.block2)] {
                f(&format!("{prefix}.{bname}.bn.running_mean"), &mut block.bn.running_mean);
                f(&format!("{prefix}.{bname}.bn.running_var"), &mut block.bn.running_var);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(|_, _, p| p.zero_grad());
    }

    pub fn n_scalar_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, p| n += p.value.data().len());
        n
    }

    /// Snapshot of every parameter value, keyed by canonical name.
    pub fn param_snapshot(&mut self) -> Vec<(String, ParamSet, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_params(|name, set, p| out.push((name.to_string(), set, p.value.clone())));
        out
    }

    /// Casts all parameters (values and optimizer moments) and state into
    /// another scalar type.
    pub fn cast<T: Scalar>(&mut self) -> DisenModel<T> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut out = DisenModel::<T>::new(self.cfg, &mut rng).expect("config already validated");
        let mut params: Vec<(Tensor<T>, Tensor<T>, Tensor<T>)> = Vec::new();
        self.visit_params(|_, _, p| {
            params.push((
                Tensor::cast_from(&p.value),
                Tensor::cast_from(&p.m1),
                Tensor::cast_from(&p.m2),
            ))
        });
        let mut it = params.into_iter();
        out.visit_params(|_, _, p| {
            let (v, m1, m2) = it.next().expect("same traversal order");
            *p = Param::new(v);
            p.m1 = m1;
            p.m2 = m2;
        });
        let mut states: Vec<Tensor<T>> = Vec::new();
        self.visit_state(|_, t| states.push(Tensor::cast_from(t)));
        let mut it = states.into_iter();
        out.visit_state(|_, t| *t = it.next().expect("same traversal order"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_config() -> ModelConfig {
        ModelConfig {
            input_dim: 10,
            code_dim: 6,
            n_speakers: 4,
            env_hidden_dim: 5,
            env_out_dim: 4,
        }
    }

    #[test]
    fn traversal_order_is_stable_and_partitioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DisenModel::<f64>::new(test_config(), &mut rng).unwrap();
        let mut names = Vec::new();
        model.visit_params(|name, set, _| names.push((name.to_string(), set)));
        assert_eq!(names.len(), 12 + 8 + 8);
        assert!(names.iter().take(20).all(|(_, s)| *s == ParamSet::Main));
        assert!(names.iter().skip(20).all(|(_, s)| *s == ParamSet::EnvSpk));
        assert_eq!(names[0].0, "encoder.bn.gamma");
        assert_eq!(names[20].0, "env_disc_spk.block1.bn.gamma");
    }

    #[test]
    fn cast_round_trips_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = DisenModel::<f32>::new(test_config(), &mut rng).unwrap();
        let mut up = model.cast::<f64>();
        let back = up.cast::<f32>();
        let mut a = Vec::new();
        model.visit_params(|_, _, p| a.push(p.value.clone()));
        let mut b_model = back;
        let mut b = Vec::new();
        b_model.visit_params(|_, _, p| b.push(p.value.clone()));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bits_eq(y));
        }
    }

    #[test]
    fn rejects_odd_code_dim() {
        let mut cfg = test_config();
        cfg.code_dim = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(DisenModel::<f64>::new(cfg, &mut rng).is_err());
    }
}
