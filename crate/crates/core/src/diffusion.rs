//! Cosine noise schedule, forward partial noising and DDIM reverse sampling
//! over the scalar range channel.
//!
//! Directions never enter this module: only a vector of (normalized) ranges
//! is noised and denoised.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DiffusionError;
use crate::prior::stream_rng;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper bound on any single-step beta.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

pub fn build_cosine_schedule(steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 10 {
        return Err(DiffusionError::ScheduleTooShort(steps));
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for t in 1..=steps {
        let prev = alpha_bar[t - 1];
        let target = f(t) / f0;
        let beta = (1.0 - target / prev).min(MAX_BETA);
        alpha_bar.push(prev * (1.0 - beta));
    }
    Ok(NoiseSchedule { steps, alpha_bar })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SDEditConfig {
    /// Fraction of the schedule to noise to: `T' = round(alpha_frac * T)`.
    pub alpha_frac: f64,
    pub ddim_steps: usize,
    /// 0 gives deterministic DDIM.
    pub eta: f64,
}

impl Default for SDEditConfig {
    fn default() -> Self {
        Self {
            alpha_frac: 0.25,
            ddim_steps: 50,
            eta: 0.0,
        }
    }
}

impl SDEditConfig {
    pub fn t_prime(&self, total: usize) -> usize {
        ((self.alpha_frac * total as f64).round() as usize).clamp(1, total)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.alpha_frac > 0.0 && self.alpha_frac <= 1.0) {
            return Err(DiffusionError::InvalidTimestep { t: 0, lo: 1, hi: 0 });
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(DiffusionError::CallbackFailure(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeState {
    pub ranges: Vec<f64>,
    pub timestep: usize,
}

impl RangeState {
    pub fn clean(ranges: Vec<f64>) -> Self {
        Self { ranges, timestep: 0 }
    }
}

/// Standard-normal noise for `n` elements; element `i` draws from its own stream.
pub fn gaussian_noise(n: usize, seed: u64) -> Vec<f64> {
    // 64 elements per stream keeps the per-element cost low and order fixed.
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(n);
    for (c, start) in (0..n).step_by(CHUNK).enumerate() {
        let mut rng = stream_rng(seed, c as u64);
        for _ in start..(start + CHUNK).min(n) {
            out.push(StandardNormal.sample(&mut rng));
        }
    }
    out
}

/// `r_t' = sqrt(abar) r_0 + sqrt(1 - abar) eps` with the given noise.
pub fn forward_diffuse_with_noise(
    r0: &RangeState,
    t_prime: usize,
    schedule: &NoiseSchedule,
    eps: &[f64],
) -> Result<RangeState, DiffusionError> {
    if r0.timestep != 0 {
        return Err(DiffusionError::InvalidTimestep { t: r0.timestep, lo: 0, hi: 0 });
    }
    if t_prime < 1 || t_prime > schedule.steps() {
        return Err(DiffusionError::InvalidTimestep { t: t_prime, lo: 1, hi: schedule.steps() });
    }
    assert_eq!(eps.len(), r0.ranges.len(), "one noise value per ray");
    let ab = schedule.alpha_bar(t_prime);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(RangeState {
        ranges: r0.ranges.iter().zip(eps).map(|(r, e)| a * r + b * e).collect(),
        timestep: t_prime,
    })
}

pub fn forward_diffuse(
    r0: &RangeState,
    t_prime: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<RangeState, DiffusionError> {
    let eps = gaussian_noise(r0.ranges.len(), seed);
    forward_diffuse_with_noise(r0, t_prime, schedule, &eps)
}

/// What the denoiser returns for one batch of rays at one timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenoiserOutput {
    pub eps_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub occ_logit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseResult {
    pub state: RangeState,
    /// Uncertainty and occupancy from the final denoiser call.
    pub b_hat: Vec<f64>,
    pub occ_logit: Vec<f64>,
    pub calls: usize,
}

/// Evenly spaced timesteps from `t_prime` down to 0, both ends included.
pub fn ddim_timesteps(t_prime: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|i| ((t_prime as f64) * (steps - i) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Deterministic (eta = 0) or stochastic DDIM from `r_tprime.timestep` to 0.
///
/// The denoiser receives `(r_t, t, x0_prev)` where `x0_prev` is the previous
/// step's clean estimate (zeros on the first call) for self-conditioning.
pub fn ddim_reverse<F>(
    r_tprime: &RangeState,
    mut denoiser: F,
    cfg: &SDEditConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ReverseResult, DiffusionError>
where
    F: FnMut(&[f64], usize, &[f64]) -> Result<DenoiserOutput, DiffusionError>,
{
    let t_prime = r_tprime.timestep;
    if t_prime < 1 || t_prime > schedule.steps() {
        return Err(DiffusionError::InvalidTimestep { t: t_prime, lo: 1, hi: schedule.steps() });
    }
    if cfg.ddim_steps < 1 || cfg.ddim_steps > t_prime {
        return Err(DiffusionError::InvalidStepCount { steps: cfg.ddim_steps, t_prime });
    }
    let n = r_tprime.ranges.len();
    let times = ddim_timesteps(t_prime, cfg.ddim_steps);
    let mut r = r_tprime.ranges.clone();
    let mut x0_prev = vec![0.0; n];
    let mut last = DenoiserOutput::default();
    let mut calls = 0;
    for (i, pair) in times.windows(2).enumerate() {
        let (t, t_next) = (pair[0], pair[1]);
        let out = denoiser(&r, t, &x0_prev)?;
        calls += 1;
        if out.eps_hat.len() != n || out.b_hat.len() != n || out.occ_logit.len() != n {
            return Err(DiffusionError::CallbackFailure(format!(
                "denoiser returned {} / {} / {} values for {n} rays",
                out.eps_hat.len(),
                out.b_hat.len(),
                out.occ_logit.len()
            )));
        }
        let ab = schedule.alpha_bar(t);
        let ab_next = schedule.alpha_bar(t_next);
        let sigma = if cfg.eta > 0.0 {
            cfg.eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).sqrt()
        } else {
            0.0
        };
        let noise = if sigma > 0.0 {
            gaussian_noise(n, seed.wrapping_add(i as u64 + 1))
        } else {
            Vec::new()
        };
        let dir_coef = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
        for j in 0..n {
            let x0 = (r[j] - (1.0 - ab).sqrt() * out.eps_hat[j]) / ab.sqrt();
            x0_prev[j] = x0;
            let mut next = ab_next.sqrt() * x0 + dir_coef * out.eps_hat[j];
            if sigma > 0.0 {
                next += sigma * noise[j];
            }
            r[j] = next;
        }
        last = out;
    }
    Ok(ReverseResult {
        state: RangeState { ranges: r, timestep: 0 },
        b_hat: last.b_hat,
        occ_logit: last.occ_logit,
        calls,
    })
}

/// Per-scene affine range normalization, `(r - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeNormalizer {
    pub mean: f64,
    pub std: f64,
}

impl RangeNormalizer {
    /// Statistics of the given (sparse input) ranges; std floored at 1 mm.
    pub fn fit(ranges: &[f64]) -> Self {
        let n = ranges.len().max(1) as f64;
        let mean = ranges.iter().sum::<f64>() / n;
        let var = ranges.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(1e-3),
        }
    }

    pub fn normalize(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Denormalized range clamped at 0, and whether it was non-negative.
    pub fn denormalize_clamped(&self, z: f64) -> (f64, bool) {
        let r = self.denormalize(z);
        if r >= 0.0 {
            (r, true)
        } else {
            (0.0, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = build_cosine_schedule(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bars().len(), 1001);
        for t in 0..1000 {
            assert!(s.alpha_bar(t) > s.alpha_bar(t + 1), "t = {t}");
        }
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alpha_bar(1000) > 0.0);
        assert!(build_cosine_schedule(9).is_err());
    }

    #[test]
    fn schedule_matches_closed_form_before_clipping() {
        let s = build_cosine_schedule(1000).unwrap();
        let f = |t: f64| (((t / 1000.0) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        for t in [1usize, 10, 250, 500, 900] {
            let want = f(t as f64) / f(0.0);
            assert!((s.alpha_bar(t) - want).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn zero_noise_scales_exactly() {
        let s = build_cosine_schedule(1000).unwrap();
        let r0 = RangeState::clean(vec![1.0, -2.0, 0.5]);
        let out = forward_diffuse_with_noise(&r0, 250, &s, &[0.0; 3]).unwrap();
        let a = s.alpha_bar(250).sqrt();
        assert_eq!(out.ranges, vec![a * 1.0, a * -2.0, a * 0.5]);
        assert_eq!(out.timestep, 250);
    }

    #[test]
    fn first_step_is_near_identity() {
        let s = build_cosine_schedule(1000).unwrap();
        let r0 = RangeState::clean(vec![0.3; 100]);
        let out = forward_diffuse(&r0, 1, &s, 7).unwrap();
        let std = (1.0 - s.alpha_bar(1)).sqrt();
        assert!(std < 0.01);
        for r in &out.ranges {
            assert!((r - 0.3).abs() < 6.0 * std + 1e-4);
        }
    }

    #[test]
    fn forward_rejects_bad_timesteps() {
        let s = build_cosine_schedule(100).unwrap();
        let r0 = RangeState::clean(vec![0.0]);
        assert!(forward_diffuse(&r0, 0, &s, 0).is_err());
        assert!(forward_diffuse(&r0, 101, &s, 0).is_err());
        let noisy = RangeState { ranges: vec![0.0], timestep: 3 };
        assert!(forward_diffuse(&noisy, 5, &s, 0).is_err());
    }

    #[test]
    fn timestep_subsequence() {
        assert_eq!(ddim_timesteps(10, 5), vec![10, 8, 6, 4, 2, 0]);
        let ts = ddim_timesteps(250, 50);
        assert_eq!(ts.len(), 51);
        assert_eq!(ts[0], 250);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn zero_denoiser_closed_form() {
        let s = build_cosine_schedule(1000).unwrap();
        let state = RangeState { ranges: vec![0.7, -1.2], timestep: 20 };
        let cfg = SDEditConfig { ddim_steps: 4, ..Default::default() };
        let out = ddim_reverse(
            &state,
            |r, _, _| Ok(DenoiserOutput { eps_hat: vec![0.0; r.len()], b_hat: vec![1.0; r.len()], occ_logit: vec![0.0; r.len()] }),
            &cfg,
            &s,
            0,
        )
        .unwrap();
        let a = s.alpha_bar(20).sqrt();
        for (got, r) in out.state.ranges.iter().zip(&state.ranges) {
            assert!((got - r / a).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_too_many_steps() {
        let s = build_cosine_schedule(1000).unwrap();
        let state = RangeState { ranges: vec![0.0], timestep: 10 };
        let cfg = SDEditConfig { ddim_steps: 11, ..Default::default() };
        let err = ddim_reverse(&state, |_, _, _| Ok(DenoiserOutput::default()), &cfg, &s, 0).unwrap_err();
        assert!(matches!(err, DiffusionError::InvalidStepCount { .. }));
    }

    #[test]
    fn callback_failure_propagates() {
        let s = build_cosine_schedule(1000).unwrap();
        let state = RangeState { ranges: vec![0.0], timestep: 250 };
        let err = ddim_reverse(
            &state,
            |_, _, _| Err(DiffusionError::CallbackFailure("boom".into())),
            &SDEditConfig::default(),
            &s,
            0,
        )
        .unwrap_err();
        assert_eq!(err, DiffusionError::CallbackFailure("boom".into()));
    }

    #[test]
    fn t_prime_interpretation() {
        assert_eq!(SDEditConfig::default().t_prime(1000), 250);
        assert_eq!(SDEditConfig { alpha_frac: 1.0, ..Default::default() }.t_prime(1000), 1000);
        assert_eq!(SDEditConfig { alpha_frac: 1e-9, ..Default::default() }.t_prime(1000), 1);
    }

    #[test]
    fn normalizer_clamps_negative_ranges() {
        let n = RangeNormalizer::fit(&[5.0, 15.0]);
        assert_eq!(n.mean, 10.0);
        assert_eq!(n.std, 5.0);
        assert_eq!(n.denormalize(n.normalize(12.5)), 12.5);
        assert_eq!(n.denormalize_clamped(-3.0), (0.0, false));
        assert_eq!(n.denormalize_clamped(0.0), (10.0, true));
    }
}
