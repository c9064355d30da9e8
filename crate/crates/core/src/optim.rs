//! Adam optimizer over named parameter sets.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Named parameters in a deterministic (sorted) order.
pub type ParamSet = BTreeMap<String, Arc<Tensor>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` maps parameter names to gradients; parameters with
    /// no entry are left untouched (but still see the shared step counter).
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step_with_lr(params, grads, self.cfg.lr)
    }

    pub fn step_with_lr(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return shape_err(
                        "adam",
                        format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                    )
                }
                None => return shape_err("adam", format!("gradient for unknown param {name}")),
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = Arc::make_mut(params.get_mut(name).expect("validated above"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w".into(), Arc::new(Tensor::new([1], vec![w]).unwrap()));
        p
    }

    fn grad_of(p: &ParamSet, f: impl Fn(f64) -> f64) -> BTreeMap<String, Tensor> {
        let w = p["w"].data()[0];
        BTreeMap::from([("w".to_string(), Tensor::new([1], vec![f(w)]).unwrap())])
    }

    #[test]
    fn one_step_descends() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let g = grad_of(&p, |w| 2.0 * w);
        opt.step(&mut p, &g).unwrap();
        assert!(p["w"].data()[0] < 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.3);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            let g = grad_of(&p, |_| 0.0);
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p["w"].data()[0], 0.3);
    }

    #[test]
    fn convex_quadratic_decreases_monotonically_after_warmup() {
        // f(w) = 0.5 * sum(a_i * w_i^2)
        let a = [1.0, 4.0, 0.25];
        let mut p = ParamSet::new();
        p.insert(
            "w".into(),
            Arc::new(Tensor::new([3], vec![1.0, -1.0, 2.0]).unwrap()),
        );
        let mut opt = Adam::new(AdamConfig::default());
        let loss = |p: &ParamSet| -> f64 {
            p["w"]
                .data()
                .iter()
                .zip(&a)
                .map(|(w, ai)| 0.5 * ai * w * w)
                .sum()
        };
        let mut losses = vec![loss(&p)];
        for _ in 0..200 {
            let g: Vec<f64> = p["w"].data().iter().zip(&a).map(|(w, ai)| ai * w).collect();
            let grads = BTreeMap::from([("w".to_string(), Tensor::new([3], g).unwrap())]);
            opt.step(&mut p, &grads).unwrap();
            losses.push(loss(&p));
        }
        let warmup = 10;
        for pair in losses[warmup..].windows(2) {
            assert!(pair[1] < pair[0], "loss rose: {} -> {}", pair[0], pair[1]);
        }
        assert!(losses[200] < 0.8 * losses[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros([2]))]);
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(opt.steps_taken(), 0);
    }
}
