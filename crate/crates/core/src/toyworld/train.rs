//! ε-prediction training on the sprite world.
//!
//! Standard noise-prediction objective: draw a timestep and a Gaussian noise
//! vector per sample, noise the image forward, and regress the noise with mse.
//! A slice of batches swaps every prompt token for the null token so the same
//! table learns the unconditional embedding used by classifier-free guidance.
//!
//! Every random draw comes from one seeded ChaCha8 stream in a fixed order
//! (epoch permutation, then per batch: dropout flag, then per sample: t and
//! noise), so the loss curve is bit-reproducible.

use super::DatasetItem;
use crate::denoiser::{forward_on_tape, DenoiserWeights};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scheduler::{add_noise, NoiseSchedule};
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::{denoiser::patchify, denoiser::time_features};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of batches trained with all-null prompt tokens.
    pub cfg_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 3e-4, cfg_dropout: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub batch_losses: Vec<f32>,
    pub first_tenth_mean: f64,
    pub last_tenth_mean: f64,
}

impl TrainReport {
    fn from_losses(batch_losses: Vec<f32>) -> Self {
        let n = batch_losses.len();
        let tenth = (n / 10).max(1);
        let mean = |s: &[f32]| s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64;
        Self {
            first_tenth_mean: mean(&batch_losses[..tenth]),
            last_tenth_mean: mean(&batch_losses[n - tenth..]),
            batch_losses,
        }
    }
}

/// Train the denoiser (and its token table) in place; returns the loss curve.
pub fn train_denoiser(
    data: &[DatasetItem],
    weights: &mut DenoiserWeights<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training data must be nonempty".into()));
    }
    if cfg.batch_size < 1 || cfg.epochs < 1 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<f32>::new(cfg.lr);
    let mut batch_losses = Vec::new();
    let dcfg = weights.cfg.clone();
    let image_numel: usize = dcfg.image_shape().iter().product();

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let drop_prompt = rng.gen::<f64>() < cfg.cfg_dropout;

            // Per-sample draws, in chunk order.
            let mut tok_data = Vec::with_capacity(b * dcfg.tokens() * dcfg.patch_dim());
            let mut sin_data = Vec::with_capacity(b * dcfg.time_embed_dim);
            let mut target = Vec::with_capacity(b * image_numel);
            let mut ids = Vec::with_capacity(b * 5);
            for &i in chunk {
                let t = rng.gen_range(1..=sched.t_train);
                let noise_data: Vec<f32> = (0..image_numel)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x as f32
                    })
                    .collect();
                let noise = Tensor::new(dcfg.image_shape(), noise_data)?;
                let zt = add_noise(&data[i].image, t, &noise, sched)?;
                tok_data.extend_from_slice(patchify(&zt)?.data());
                sin_data.extend(time_features(t, dcfg.time_embed_dim).iter().map(|&x| x as f32));
                target.extend_from_slice(noise.data());
                let embed_ids = if drop_prompt {
                    [super::NULL_ID; 5]
                } else {
                    data[i].tokens.embed_ids()
                };
                ids.extend_from_slice(&embed_ids);
            }

            let mut tape = GradTape::<f32>::new();
            let handles = weights.register(&mut tape, true);
            let z_tokens = tape.constant_raw(vec![b, dcfg.tokens(), dcfg.patch_dim()], tok_data);
            let sin_feats = tape.constant_raw(vec![b, dcfg.time_embed_dim], sin_data);
            let text = tape.gather_rows(handles.get("token_embed"), Arc::new(ids), vec![b, 5, dcfg.d_text]);
            let fwd = forward_on_tape(&mut tape, &handles, &dcfg, z_tokens, sin_feats, text, &BTreeMap::new());
            let target_h = tape.constant_raw(vec![b, dcfg.image_size, dcfg.image_size, dcfg.channels], target);
            let loss = tape.mse(fwd.eps_image, target_h);

            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "loss became non-finite after {} batches",
                    batch_losses.len()
                )));
            }
            batch_losses.push(loss_val);

            let grads = tape.backward(loss)?;
            for (name, tensor) in weights.named_tensors_mut() {
                let g = grads.get(handles.get(&name));
                adam.step(&name, tensor.data_mut(), &g);
            }
        }
    }
    Ok(TrainReport::from_losses(batch_losses))
}
