//! Flow-matching objective and supervised pretraining.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, Metadata};
use crate::error::{Error, Result};
use crate::model::{VelocityNet, T_MIN};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{domain, gaussian_sample, RngStream};
use crate::synth::{GlyphFont, SceneSample};
use crate::tensor::Tensor;

/// Anything that maps `(z_t, source, mask, t)` to a velocity.
pub trait VelocityField {
    fn velocity(&self, z_t: &Tensor, source: &Tensor, mask: &Tensor, t: f32) -> Result<Tensor>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, z_t: &Tensor, source: &Tensor, mask: &Tensor, t: f32) -> Result<Tensor> {
        self.velocity_forward(z_t, source, mask, t, None)
    }
}

/// One supervised example: the data endpoint `z0` plus the conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub z0: Tensor,
    pub source: Tensor,
    pub mask: Tensor,
}

impl FlowPair {
    pub fn from_sample(s: &SceneSample) -> Self {
        Self {
            z0: s.clean.clone(),
            source: s.masked_source(),
            mask: s.mask.clone(),
        }
    }
}

/// Interpolant draw: `(z_t, z1 - z0, t)` with `t ~ U(T_MIN, 1)`, `z1 ~ N(0, I)`.
pub fn interpolate(z0: &Tensor, rng: &mut RngStream) -> (Tensor, Vec<f32>, f32) {
    let t = rng.uniform_range(T_MIN as f64, 1.0) as f32;
    let z1 = gaussian_sample(z0.shape(), rng);
    let zt: Vec<f32> = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect();
    let target = z1.data().iter().zip(z0.data()).map(|(&b, &a)| b - a).collect();
    (
        Tensor::from_vec(z0.shape().to_vec(), zt).expect("same shape"),
        target,
        t,
    )
}

/// Mean over the batch of the per-element squared velocity error.
pub fn flow_matching_loss(
    field: &dyn VelocityField,
    batch: &[FlowPair],
    rng: &mut RngStream,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for p in batch {
        let (zt, target, t) = interpolate(&p.z0, rng);
        let v = field.velocity(&zt, &p.source, &p.mask, t)?;
        let se: f64 = v
            .data()
            .iter()
            .zip(&target)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        total += se / target.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Same draws as [`flow_matching_loss`], but also accumulates the gradient of
/// the batch loss into the network's parameters.
pub fn flow_matching_backward(
    net: &mut VelocityNet,
    batch: &[FlowPair],
    rng: &mut RngStream,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for p in batch {
        let (zt, target, t) = interpolate(&p.z0, rng);
        let mut g = Graph::new();
        let v = net.record(&mut g, &zt, &p.source, &p.mask, t, None)?;
        let loss = g.mse_to(v, Arc::new(target));
        total += g.scalar(loss) as f64;
        let grads = g.backward(loss)?;
        net.params.accumulate(&grads, weight)?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: u64,
    /// Cosine decay of the learning rate to `final_lr_fraction * lr`.
    pub cosine_decay: bool,
    pub final_lr_fraction: f64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Probability that a scene whose product carries a brand label is paired
    /// with a target that keeps the tag's promotional text (drawn on the clean
    /// background). Models the text-copying habit of inpainters pretrained on
    /// imperfect data.
    pub text_target_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 100,
            cosine_decay: true,
            final_lr_fraction: 0.05,
            checkpoint_every: 500,
            text_target_prob: 0.0,
        }
    }
}

impl PretrainConfig {
    /// Learning rate used for the update that follows `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = if self.cosine_decay && self.steps > 0 {
            let p = (step as f64 / self.steps as f64).min(1.0);
            let f = self.final_lr_fraction;
            f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("pretrain lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.text_target_prob) {
            return Err(Error::Config("text_target_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Training pairs for a corpus. The text-target choice is a pure function of
/// `(seed, sample seed)`.
pub fn training_pairs(
    samples: &[SceneSample],
    font: &GlyphFont,
    text_target_prob: f64,
    seed: u64,
) -> Vec<FlowPair> {
    samples
        .iter()
        .map(|s| {
            let mut pair = FlowPair::from_sample(s);
            if s.label_box.is_some() {
                let mut r = RngStream::keyed(seed, &[domain::SCENE, s.seed, 1]);
                if r.bernoulli(text_target_prob) {
                    pair.z0 = s.text_overlay(font);
                }
            }
            pair
        })
        .collect()
}

/// Minibatch for `step`: deterministic in `(seed, step)`, epoch-wise shuffled.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = (n / batch).max(1) as u64;
    let epoch = step / per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::keyed(seed, &[domain::DATA_ORDER, epoch]).shuffle(&mut order);
    let start = ((step % per_epoch) as usize) * batch;
    (0..batch).map(|i| order[(start + i) % n]).collect()
}

pub struct PretrainState {
    pub net: VelocityNet,
    pub optimizer: AdamState,
    pub step: u64,
}

impl PretrainState {
    pub fn fresh(net: VelocityNet, lr: f64) -> Self {
        let optimizer = AdamState::new(
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            &net.params,
        );
        Self {
            net,
            optimizer,
            step: 0,
        }
    }

    pub fn checkpoint(&self, config_hash: &str, master_seed: u64) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            optimizer: self.optimizer.clone(),
            metadata: Metadata {
                step: self.step,
                config_hash: config_hash.to_string(),
                master_seed,
                net: self.net.config.clone(),
                adam: self.optimizer.config.clone(),
                adam_steps: self.optimizer.step_count,
            },
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            step: ck.metadata.step,
            net: ck.net,
            optimizer: ck.optimizer,
        }
    }
}

/// Run pretraining up to `config.steps`, calling `on_step(step, loss)` after
/// every update. Resuming from a state at step k continues with exactly the
/// batches and noise a fresh run would have used from step k.
pub fn pretrain(
    state: &mut PretrainState,
    pairs: &[FlowPair],
    config: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&PretrainState, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    config.validate()?;
    if pairs.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} training pairs for batch size {}",
            pairs.len(),
            config.batch_size
        )));
    }
    let mut losses = Vec::new();
    while state.step < config.steps {
        let idx = batch_indices(pairs.len(), config.batch_size, seed, state.step);
        let batch: Vec<FlowPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let mut rng = RngStream::keyed(seed, &[domain::FM_NOISE, state.step]);
        let loss = flow_matching_backward(&mut state.net, &batch, &mut rng)?;
        state.optimizer.config.lr = config.lr_at(state.step);
        if !loss.is_finite() {
            return Err(Error::numerical("flow_matching_loss"));
        }
        state.optimizer.step(&mut state.net.params, false)?;
        state.step += 1;
        losses.push(loss);
        on_step(state, loss)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::synth::{generate_scene, GenConfig};

    struct Oracle;

    // Recovers z1 - z0 from z_t when the source carries the full clean image.
    impl VelocityField for Oracle {
        fn velocity(&self, z_t: &Tensor, source: &Tensor, _: &Tensor, t: f32) -> Result<Tensor> {
            z_t.zip_map(source, |z, s| (z - s) / t)
        }
    }

    struct Zero;

    impl VelocityField for Zero {
        fn velocity(&self, z_t: &Tensor, _: &Tensor, _: &Tensor, _: f32) -> Result<Tensor> {
            Ok(Tensor::zeros(z_t.shape()))
        }
    }

    fn pair(z0: Tensor) -> FlowPair {
        FlowPair {
            source: z0.clone(),
            mask: Tensor::zeros(&[1, z0.shape()[1], z0.shape()[2]]),
            z0,
        }
    }

    #[test]
    fn oracle_field_has_near_zero_loss() {
        let mut s = RngStream::new(0, 0);
        let z0 = gaussian_sample(&[3, 8, 8], &mut s).map(|v| 0.5 + 0.1 * v);
        let loss = flow_matching_loss(&Oracle, &[pair(z0)], &mut s).unwrap();
        assert!(loss < 1e-8, "{loss}");
    }

    #[test]
    fn zero_field_on_zero_data_has_unit_loss() {
        let mut s = RngStream::new(1, 0);
        let batch: Vec<FlowPair> = (0..10).map(|_| pair(Tensor::zeros(&[3, 32, 32]))).collect();
        // 10 samples x 3072 elements = 3e4 draws; standard error of the mean ~ 0.008
        let loss = flow_matching_loss(&Zero, &batch, &mut s).unwrap();
        assert!((loss - 1.0).abs() < 0.04, "{loss}");
    }

    #[test]
    fn backward_loss_matches_plain_loss() {
        let cfg = NetConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            ..NetConfig::default()
        };
        let mut net = VelocityNet::new(cfg, 0).unwrap();
        let font = GlyphFont::builtin();
        let samples: Vec<SceneSample> = (0..2)
            .map(|i| generate_scene(i, &GenConfig::default(), &font).unwrap())
            .collect();
        let pairs = training_pairs(&samples, &font, 0.0, 0);
        let a = flow_matching_loss(&net, &pairs, &mut RngStream::new(5, 5)).unwrap();
        let b = flow_matching_backward(&mut net, &pairs, &mut RngStream::new(5, 5)).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert!(net.params.get("final.out.w").unwrap().grad().is_some());
    }

    #[test]
    fn learning_rate_schedule() {
        let c = PretrainConfig {
            steps: 1000,
            lr: 1.0,
            warmup_steps: 10,
            final_lr_fraction: 0.1,
            ..Default::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - c.lr_at(10)).abs() < 1e-4);
        assert!((c.lr_at(500) - 0.55).abs() < 1e-12);
        assert!((c.lr_at(1000) - 0.1).abs() < 1e-12);
        let flat = PretrainConfig {
            cosine_decay: false,
            warmup_steps: 0,
            ..c
        };
        assert_eq!(flat.lr_at(700), 1.0);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(16, 4, 3, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn text_targets_only_for_labelled_products() {
        let font = GlyphFont::builtin();
        let samples: Vec<SceneSample> = (0..40)
            .map(|i| generate_scene(i, &GenConfig::default(), &font).unwrap())
            .collect();
        let pairs = training_pairs(&samples, &font, 1.0, 0);
        for (s, p) in samples.iter().zip(&pairs) {
            assert_eq!(p.z0 != s.clean, s.label_box.is_some());
        }
        assert!(training_pairs(&samples, &font, 0.0, 0)
            .iter()
            .zip(&samples)
            .all(|(p, s)| p.z0 == s.clean));
    }
}
