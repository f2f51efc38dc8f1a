//! Noise schedules, forward diffusion, posterior denoising, DDIM steps and
//! the noise-composition recursion.
//!
//! Index convention used throughout the crate: `alpha_bar[t]` is the running
//! product of `alpha[0..=t]`, with `alpha_bar[-1]` defined as 1. Applying
//! noising steps `0..=t` to clean data `x0` yields the level-`t` sample
//!
//! ```text
//! x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps_multi[t]
//! ```
//!
//! so level `T-1` is (near-)pure noise and "level -1" is the clean data. The
//! recursion-versus-closed-form equivalence test pins this bookkeeping down;
//! see the `chain_recursion_matches_closed_form` test.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Per-step noise schedule tables.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    descriptor: ScheduleDescriptor,
}

/// Compact schedule description persisted in checkpoints; the tables are
/// regenerated, not stored per element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    #[serde(rename = "T")]
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_count, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `alpha_bar[t-1]`, with the `alpha_bar[-1] = 1` convention.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        self.descriptor
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::OutOfRange(format!(
                "step {t} outside schedule of length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Builds a linear beta schedule with `alpha_bar` as the running product.
pub fn make_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs at least 2 steps, got {t_count}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let denom = (t_count - 1) as f64;
    let beta: Vec<f64> = (0..t_count)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        descriptor: ScheduleDescriptor {
            t_count,
            beta_start,
            beta_end,
        },
    })
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Applies noising step `t`: maps the level-`t-1` sample to level `t` via
/// `sqrt(alpha[t]) * x + sqrt(beta[t]) * eps`.
pub fn forward_step(
    x: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    check_same_shape(x, eps, "forward_step noise")?;
    let a = sched.alpha(t).sqrt();
    let b = sched.beta(t).sqrt();
    Ok(x * a + eps * b)
}

/// Jumps from clean data to the level-`t` sample in closed form:
/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps_multi`.
pub fn forward_jump(
    x0: &Array2<f64>,
    t: usize,
    eps_multi: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    check_same_shape(x0, eps_multi, "forward_jump noise")?;
    let a = sched.alpha_bar(t).sqrt();
    let b = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(x0 * a + eps_multi * b)
}

/// Derives the multi-step noise for level `t` from the level-`t-1` multi-step
/// noise and the fresh single-step noise:
///
/// ```text
/// eps_multi[t] = (sqrt(alpha[t]) * sqrt(1 - alpha_bar[t-1]) * eps_multi[t-1]
///                 + sqrt(beta[t]) * eps_single[t]) / sqrt(1 - alpha_bar[t])
/// ```
///
/// The identity `alpha[t] * (1 - alpha_bar[t-1]) + beta[t] = 1 - alpha_bar[t]`
/// keeps the output unit-variance for independent unit-variance inputs.
pub fn compose_noise(
    eps_multi_prev: &Array2<f64>,
    eps_single: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::OutOfRange(
            "compose_noise needs t >= 1; no multi-step noise precedes step 0".into(),
        ));
    }
    sched.check_t(t)?;
    check_same_shape(eps_multi_prev, eps_single, "compose_noise inputs")?;
    let wa = (sched.alpha(t) * (1.0 - sched.alpha_bar_prev(t))).sqrt();
    let wb = sched.beta(t).sqrt();
    let denom = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok((eps_multi_prev * wa + eps_single * wb) / denom)
}

/// Inverse of [`compose_noise`]: recovers the level-`t-1` multi-step noise
/// from the level-`t` one and the single-step noise consumed at step `t`.
pub fn decompose_noise(
    eps_multi: &Array2<f64>,
    eps_single: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::OutOfRange(
            "decompose_noise needs t >= 1".into(),
        ));
    }
    sched.check_t(t)?;
    check_same_shape(eps_multi, eps_single, "decompose_noise inputs")?;
    let wa = (sched.alpha(t) * (1.0 - sched.alpha_bar_prev(t))).sqrt();
    let wb = sched.beta(t).sqrt();
    let denom = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok((eps_multi * denom - eps_single * wb) / wa)
}

/// All single-step noises plus the multi-step noises derived from them by the
/// compose recursion. `single[t]` drives step `t`; `multi[t]` maps clean data
/// to level `t` in one jump.
#[derive(Debug, Clone)]
pub struct NoiseChain {
    single: Vec<Array2<f64>>,
    multi: Vec<Array2<f64>>,
}

impl NoiseChain {
    pub fn single(&self, t: usize) -> &Array2<f64> {
        &self.single[t]
    }

    pub fn multi(&self, t: usize) -> &Array2<f64> {
        &self.multi[t]
    }

    pub fn len(&self) -> usize {
        self.single.len()
    }

    pub fn is_empty(&self) -> bool {
        self.single.is_empty()
    }
}

/// Unit-Gaussian array for diffusion step `t` of the chain seeded by `seed`.
/// Exposed so the lazy chain can regenerate singles instead of storing them.
pub fn chain_single_noise(rows: usize, cols: usize, seed: u64, t: usize) -> Array2<f64> {
    let mut rng = seeds::indexed_rng(seed, "noise-chain", t as u64);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Samples all single-step noises independently, then folds the compose
/// recursion to obtain every multi-step noise.
pub fn build_noise_chain(
    rows: usize,
    cols: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<NoiseChain> {
    let t_count = sched.len();
    let mut single = Vec::with_capacity(t_count);
    for t in 0..t_count {
        single.push(chain_single_noise(rows, cols, seed, t));
    }
    let mut multi = Vec::with_capacity(t_count);
    multi.push(single[0].clone());
    for t in 1..t_count {
        let next = compose_noise(&multi[t - 1], &single[t], t, sched)?;
        multi.push(next);
    }
    Ok(NoiseChain { single, multi })
}

/// Memory-light view of a noise chain: holds only the current multi-step
/// noise and walks down one level at a time, regenerating single-step noises
/// from the seed. Agrees with [`build_noise_chain`] to float accumulation
/// error (the equivalence test pins 1e-6).
#[derive(Debug, Clone)]
pub struct LazyNoiseChain {
    rows: usize,
    cols: usize,
    seed: u64,
    t: usize,
    multi_t: Array2<f64>,
}

impl LazyNoiseChain {
    /// Folds the compose recursion up to `t_top` once, storing only the
    /// resulting multi-step noise.
    pub fn new(
        rows: usize,
        cols: usize,
        sched: &NoiseSchedule,
        seed: u64,
        t_top: usize,
    ) -> Result<Self> {
        sched.check_t(t_top)?;
        let mut multi = chain_single_noise(rows, cols, seed, 0);
        for t in 1..=t_top {
            let single = chain_single_noise(rows, cols, seed, t);
            multi = compose_noise(&multi, &single, t, sched)?;
        }
        Ok(Self {
            rows,
            cols,
            seed,
            t: t_top,
            multi_t: multi,
        })
    }

    pub fn level(&self) -> usize {
        self.t
    }

    pub fn multi(&self) -> &Array2<f64> {
        &self.multi_t
    }

    /// Steps from level `t` to level `t-1` by inverting the compose identity.
    pub fn step_down(&mut self, sched: &NoiseSchedule) -> Result<()> {
        if self.t == 0 {
            return Err(Error::OutOfRange("lazy chain already at level 0".into()));
        }
        let single = chain_single_noise(self.rows, self.cols, self.seed, self.t);
        self.multi_t = decompose_noise(&self.multi_t, &single, self.t, sched)?;
        self.t -= 1;
        Ok(())
    }
}

/// One ancestral denoising step: maps the level-`t` sample to level `t-1`
/// (clean data when `t == 0`) using the predicted multi-step noise.
///
/// Mean `(x - beta[t] / sqrt(1 - alpha_bar[t]) * eps) / sqrt(alpha[t])`,
/// standard deviation `sqrt(beta[t] * (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]))`.
/// The `alpha_bar[-1] = 1` convention makes the final step deterministic
/// regardless of `z`.
pub fn ddpm_step(
    x: &Array2<f64>,
    eps_pred: &Array2<f64>,
    t: usize,
    z: Option<&Array2<f64>>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    check_same_shape(x, eps_pred, "ddpm_step prediction")?;
    let beta = sched.beta(t);
    let one_minus_abar = 1.0 - sched.alpha_bar(t);
    let mean = (x - &(eps_pred * (beta / one_minus_abar.sqrt()))) / sched.alpha(t).sqrt();
    let std = (beta * (1.0 - sched.alpha_bar_prev(t)) / one_minus_abar).sqrt();
    match z {
        Some(z) if std > 0.0 => {
            check_same_shape(x, z, "ddpm_step posterior noise")?;
            Ok(mean + &(z * std))
        }
        _ => Ok(mean),
    }
}

/// One deterministic DDIM step from level `t_next` to level `t_prev`;
/// `t_prev = None` denoises fully to clean data (`alpha_bar = 1`).
pub fn ddim_step(
    x: &Array2<f64>,
    eps_pred: &Array2<f64>,
    t_next: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t_next)?;
    check_same_shape(x, eps_pred, "ddim_step prediction")?;
    if let Some(p) = t_prev {
        if p >= t_next {
            return Err(Error::InvalidArgument(format!(
                "ddim step pair must decrease, got {t_next} -> {p}"
            )));
        }
    }
    let abar_next = sched.alpha_bar(t_next);
    let x0_hat = (x - &(eps_pred * (1.0 - abar_next).sqrt())) / abar_next.sqrt();
    match t_prev {
        None => Ok(x0_hat),
        Some(p) => {
            let abar_prev = sched.alpha_bar(p);
            Ok(&x0_hat * abar_prev.sqrt() + eps_pred * (1.0 - abar_prev).sqrt())
        }
    }
}
