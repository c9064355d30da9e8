//! Noise-prediction training of the U-Net.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::unet::{DiffusionModel, UNet, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            warmup: 100,
            grad_clip: Some(1.0),
            seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DiffusionModel,
    /// Minibatch loss per step.
    pub losses: Vec<f64>,
}

/// Trains `eps_theta` by regressing the injected noise of `q_sample(x0, t, eps)`
/// with `t` uniform over `1..=T`. Images are `[1, C, S, S]` in `[-1, 1]`.
pub fn train_ddpm(
    images: &[Tensor],
    cfg: UNetConfig,
    sched: &NoiseSchedule,
    tc: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if images.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if tc.batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut net = UNet::new(cfg, &mut rng)?;
    let mut opt = Adam::new(AdamConfig {
        lr: tc.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut x0s = Vec::with_capacity(tc.batch);
        let mut ts = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            x0s.push(images[rng.random_range(0..images.len())].clone());
            ts.push(rng.random_range(1..=sched.steps()));
        }
        let x0 = Tensor::stack_batch(&x0s)?;
        let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
        let mut xt = Vec::with_capacity(x0.len());
        let per = x0.len() / tc.batch;
        for (i, &t) in ts.iter().enumerate() {
            let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
            let r = i * per..(i + 1) * per;
            xt.extend(
                x0.data()[r.clone()]
                    .iter()
                    .zip(&eps.data()[r])
                    .map(|(x, e)| a * x + b * e),
            );
        }
        let xt = Tensor::new(x0.shape().to_vec(), xt)?;

        let mut g = Graph::new();
        let xv = g.constant(xt);
        let target = g.constant(eps);
        let out = net.forward(&mut g, xv, &ts, true)?;
        let diff = g.sub(out.eps, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        let grads = g.backward(loss).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss: lv },
            other => other,
        })?;
        let mut named: BTreeMap<String, Tensor> = out
            .params
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|t| (k.clone(), t.clone())))
            .collect();
        if let Some(clip) = tc.grad_clip {
            let norm = named
                .values()
                .flat_map(|t| t.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                named.values_mut().for_each(|t| *t = t.scale(s));
            }
        }
        drop(g);
        let lr = if step < tc.warmup {
            tc.lr * (step + 1) as f64 / tc.warmup as f64
        } else {
            tc.lr
        };
        opt.step_with_lr(&mut net.params, &named, lr)?;
        losses.push(lv);
        on_step(step, lv);
    }
    let model = DiffusionModel {
        net,
        sched: sched.clone(),
    };
    if let Some(path) = &tc.checkpoint {
        model.save(path)?;
    }
    Ok(TrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            image_size: 8,
            channels: 3,
            base_width: 8,
            channel_mult: vec![1, 2],
            decoder_block_ids: vec![0, 1],
            time_embed_dim: 16,
            groups: 4,
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let sched = ScheduleConfig::linear(100).build().unwrap();
        let r = train_ddpm(&[], tiny_cfg(), &sched, &TrainConfig::default(), |_, _| {});
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn loss_drops_below_trivial_baseline() {
        // Two-colour blocks: learnable structure on a tiny net.
        let images: Vec<Tensor> = (0..8)
            .map(|k| {
                Tensor::from_fn([1, 3, 8, 8], |i| {
                    let (c, p) = (i / 64, i % 64);
                    let left = (p % 8) < 4;
                    let v = if left { 0.8 } else { -0.6 };
                    if (c + k) % 3 == 0 {
                        -v
                    } else {
                        v
                    }
                })
            })
            .collect();
        let sched = ScheduleConfig::linear(100).build().unwrap();
        let tc = TrainConfig {
            steps: 150,
            batch: 8,
            lr: 2e-3,
            warmup: 10,
            ..Default::default()
        };
        let out = train_ddpm(&images, tiny_cfg(), &sched, &tc, |_, _| {}).unwrap();
        let head: f64 = out.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = out.losses[tc.steps - 30..].iter().sum::<f64>() / 30.0;
        assert!(tail < head, "head {head} tail {tail}");
        // Predicting zero noise would score ~1.
        assert!(tail < 1.0, "tail {tail}");
    }
}
