//! Noise schedules and the closed-form forward/reverse updates of the
//! diffusion process. Timesteps are 1-based (`1..=T`); level 0 denotes clean
//! data with `alpha_bar = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
}

/// Which fixed reverse-step variance to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// `sigma_t^2 = beta_t`
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t` (posterior variance)
    #[default]
    BetaTilde,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
    #[serde(default)]
    pub variance: VarianceKind,
}

impl ScheduleConfig {
    pub fn linear(steps: usize) -> Self {
        ScheduleConfig {
            steps,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: BetaKind::Linear,
            variance: VarianceKind::BetaTilde,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = build_schedule(self.steps, self.beta_start, self.beta_end, self.kind)?;
        s.set_variance(self.variance);
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    cfg: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Builds a `T`-step schedule with `beta` running from `beta_start` to `beta_end`.
pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: BetaKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        BetaKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let mut s = NoiseSchedule {
        cfg: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            kind,
            variance: VarianceKind::BetaTilde,
        },
        beta,
        alpha,
        alpha_bar,
        sigma: Vec::new(),
    };
    s.set_variance(VarianceKind::BetaTilde);
    Ok(s)
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.cfg
    }

    pub fn set_variance(&mut self, kind: VarianceKind) {
        self.cfg.variance = kind;
        self.sigma = (1..=self.steps())
            .map(|t| reverse_variance(self.alpha_bar(t), self.alpha_bar(t - 1), kind).sqrt())
            .collect();
    }

    pub fn variance_kind(&self) -> VarianceKind {
        self.cfg.variance
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepRange {
                t,
                lo: 1,
                hi: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::TimestepRange {
                t,
                lo: 0,
                hi: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `abar_t`, with `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio `abar_t / (1 - abar_t)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok(ab / (1.0 - ab))
    }

    /// Timesteps whose SNR lies in `[lo, hi]`.
    pub fn snr_band(&self, lo: f64, hi: f64) -> Vec<usize> {
        (1..=self.steps())
            .filter(|&t| {
                let s = self.alpha_bar(t) / (1.0 - self.alpha_bar(t));
                s >= lo && s <= hi
            })
            .collect()
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        noise_to_level(x0, self.alpha_bar(t), eps)
    }

    /// Stochastic reverse step `x_t -> x_{t-1}` with externally supplied noise.
    /// The noise term is dropped at `t = 1`.
    pub fn ddpm_step(
        &self,
        x_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        noise: &Tensor,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        same_shape("ddpm_step", x_t, eps_hat)?;
        same_shape("ddpm_step", x_t, noise)?;
        let step = ReverseStep::new(
            self.alpha_bar(t),
            self.alpha_bar(t - 1),
            self.variance_kind(),
        );
        let mean = step.mean(x_t, eps_hat)?;
        if t == 1 {
            Ok(mean)
        } else {
            mean.axpby(1.0, noise, step.variance.sqrt())
        }
    }

    /// Predicted clean sample `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
    pub fn f_theta(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        predict_x0(x_t, self.alpha_bar(t), eps_hat)
    }

    /// Deterministic DDIM step to an earlier level `t_prev < t` (0 allowed).
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        t: usize,
        t_prev: usize,
        eps_hat: &Tensor,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::Ordering(format!(
                "ddim_step needs t_prev < t, got {t_prev} >= {t}"
            )));
        }
        self.ddim_transport(x_t, t, t_prev, eps_hat)
    }

    /// Deterministic DDIM inversion step to a later level `t_next > t` (t may be 0).
    pub fn ddim_invert_step(
        &self,
        x_t: &Tensor,
        t: usize,
        t_next: usize,
        eps_hat: &Tensor,
    ) -> Result<Tensor> {
        self.check_level(t)?;
        self.check_t(t_next)?;
        if t_next <= t {
            return Err(Error::Ordering(format!(
                "ddim_invert_step needs t_next > t, got {t_next} <= {t}"
            )));
        }
        self.ddim_transport(x_t, t, t_next, eps_hat)
    }

    /// `sqrt(abar_to) f_theta(x, from) + sqrt(1 - abar_to) eps` for any pair of levels.
    pub fn ddim_transport(
        &self,
        x: &Tensor,
        from: usize,
        to: usize,
        eps_hat: &Tensor,
    ) -> Result<Tensor> {
        self.check_level(from)?;
        self.check_level(to)?;
        same_shape("ddim", x, eps_hat)?;
        let x0 = predict_x0(x, self.alpha_bar(from), eps_hat)?;
        let ab = self.alpha_bar(to);
        x0.axpby(ab.sqrt(), eps_hat, (1.0 - ab).sqrt())
    }
}

/// `sqrt(abar) x0 + sqrt(1 - abar) eps` for an explicit noise level.
pub fn noise_to_level(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    same_shape("q_sample", x0, eps)?;
    x0.axpby(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

fn predict_x0(x_t: &Tensor, alpha_bar: f64, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape("f_theta", x_t, eps_hat)?;
    let inv = 1.0 / alpha_bar.sqrt();
    x_t.axpby(inv, eps_hat, -(1.0 - alpha_bar).sqrt() * inv)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn reverse_variance(ab_t: f64, ab_prev: f64, kind: VarianceKind) -> f64 {
    let beta = 1.0 - ab_t / ab_prev;
    match kind {
        VarianceKind::Beta => beta,
        VarianceKind::BetaTilde => (1.0 - ab_prev) / (1.0 - ab_t) * beta,
    }
}

/// Coefficients of one reverse transition between two retained levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseStep {
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    /// Effective per-step `beta = 1 - abar_t / abar_prev`.
    pub beta: f64,
    /// Fixed reverse variance (`Sigma`).
    pub variance: f64,
}

impl ReverseStep {
    pub fn new(alpha_bar: f64, alpha_bar_prev: f64, kind: VarianceKind) -> Self {
        ReverseStep {
            alpha_bar,
            alpha_bar_prev,
            beta: 1.0 - alpha_bar / alpha_bar_prev,
            variance: reverse_variance(alpha_bar, alpha_bar_prev, kind),
        }
    }

    /// Posterior mean `(x_t - beta / sqrt(1 - abar_t) eps) / sqrt(1 - beta)`.
    pub fn mean(&self, x_t: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
        same_shape("reverse mean", x_t, eps_hat)?;
        let inv = 1.0 / (1.0 - self.beta).sqrt();
        x_t.axpby(
            inv,
            eps_hat,
            -inv * self.beta / (1.0 - self.alpha_bar).sqrt(),
        )
    }
}

/// A strided subsequence of a base schedule's timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct RespacedSchedule {
    base: NoiseSchedule,
    steps: Vec<usize>,
}

/// Near-uniform grid of `n_steps` timesteps ending exactly at `t0`:
/// `round(i * t0 / n_steps)` for `i = 1..=n_steps`.
pub fn respace(sched: &NoiseSchedule, n_steps: usize, t0: usize) -> Result<RespacedSchedule> {
    sched.check_t(t0)?;
    if n_steps == 0 || n_steps > t0 {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= n_steps <= t0, got n_steps={n_steps}, t0={t0}"
        )));
    }
    let steps = (1..=n_steps)
        .map(|i| ((i * t0) as f64 / n_steps as f64).round() as usize)
        .collect();
    Ok(RespacedSchedule {
        base: sched.clone(),
        steps,
    })
}

impl RespacedSchedule {
    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    /// Retained timesteps in increasing order.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn t0(&self) -> usize {
        *self.steps.last().expect("respaced grid is never empty")
    }

    /// Retained level preceding grid position `i` (0 before the first step).
    pub fn prev(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.steps[i - 1]
        }
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.base.alpha_bar(self.steps[i])
    }

    /// Reverse transition `steps[i] -> prev(i)` with telescoped coefficients.
    pub fn reverse_step(&self, i: usize) -> ReverseStep {
        ReverseStep::new(
            self.base.alpha_bar(self.steps[i]),
            self.base.alpha_bar(self.prev(i)),
            self.base.variance_kind(),
        )
    }

    /// Effective betas of the respaced chain, one per retained step.
    pub fn betas(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.reverse_step(i).beta).collect()
    }
}
