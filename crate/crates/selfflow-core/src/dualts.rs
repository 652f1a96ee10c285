//! Per-token noising plans.
//!
//! Dual scheduling draws two timesteps t, s from the training distribution
//! and a Bernoulli(R_M) mask over tokens; masked tokens are noised at s,
//! the rest at t. Because every token's level is marginally distributed as
//! p(t), heterogeneous noise is introduced without disturbing the per-token
//! timestep distribution. The degraded baselines (full masking, fully
//! independent per-token levels) and the narrow-band variant live here too.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::interpolate;
use crate::rng::Philox;
use crate::schedules::TimestepDistribution;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Homogeneous noise: every token at t.
    Vanilla,
    /// Dual scheduling: masked tokens at s, others at t.
    Dual,
    /// Masked tokens fully noised (tau = 1), others at t.
    FullMask,
    /// Independent per-token levels drawn from p(t).
    DiffusionForcing,
    /// Dual, but s is confined to [max(0, t − 0.2), t].
    NearDual,
}

/// One batch element's noising plan.
#[derive(Clone, Debug)]
pub struct NoisingPlan {
    pub mode: PlanMode,
    pub t: f64,
    /// Second timestep; carried but unused for Vanilla / DiffusionForcing.
    pub s: f64,
    pub mask: Vec<bool>,
    pub tau: Vec<f64>,
    pub tau_min: f64,
}

/// Draw one plan for a sequence of `n` tokens.
///
/// The draw order is fixed: t, then s, then the per-token randomness. That
/// keeps rng consumption identical across objectives sharing a plan mode,
/// which the bitwise-equivalence guarantees in the objectives layer rely on.
pub fn sample_plan(
    dist: &TimestepDistribution,
    r_m: f64,
    n: usize,
    mode: PlanMode,
    rng: &mut Philox,
) -> Result<NoisingPlan> {
    if !(0.0..=0.5).contains(&r_m) {
        return Err(Error::InvalidArg(format!(
            "masking ratio must be in [0, 0.5], got {r_m}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArg("plan needs at least one token".into()));
    }
    let t = dist.sample(rng);
    let s_raw = dist.sample(rng);
    match mode {
        PlanMode::Vanilla => Ok(NoisingPlan {
            mode,
            t,
            s: s_raw,
            mask: vec![false; n],
            tau: vec![t; n],
            tau_min: t,
        }),
        PlanMode::Dual | PlanMode::NearDual => {
            let s = if mode == PlanMode::NearDual {
                // uniform over the admissible band just below t; reuses the
                // second draw's slot so consumption stays aligned with Dual
                let lo = (t - 0.2).max(0.0);
                lo + (t - lo) * rng.uniform()
            } else {
                s_raw
            };
            let mask: Vec<bool> = (0..n).map(|_| rng.uniform() < r_m).collect();
            let tau: Vec<f64> = mask.iter().map(|&m| if m { s } else { t }).collect();
            Ok(NoisingPlan {
                mode,
                t,
                s,
                mask,
                tau,
                tau_min: t.min(s),
            })
        }
        PlanMode::FullMask => {
            let mask: Vec<bool> = (0..n).map(|_| rng.uniform() < r_m).collect();
            let tau: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { t }).collect();
            let tau_min = tau.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(NoisingPlan {
                mode,
                t,
                s: s_raw,
                mask,
                tau,
                tau_min,
            })
        }
        PlanMode::DiffusionForcing => {
            let tau: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
            let tau_min = tau.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(NoisingPlan {
                mode,
                t,
                s: s_raw,
                mask: vec![false; n],
                tau,
                tau_min,
            })
        }
    }
}

/// Sample one independent plan per batch element, splitting the rng.
pub fn sample_plans(
    dist: &TimestepDistribution,
    r_m: f64,
    n: usize,
    batch: usize,
    mode: PlanMode,
    rng: &mut Philox,
) -> Result<Vec<NoisingPlan>> {
    (0..batch)
        .map(|_| {
            let mut child = rng.split();
            sample_plan(dist, r_m, n, mode, &mut child)
        })
        .collect()
}

/// Noise a batch under its plans: the student's heterogeneous view x_tau
/// and the cleaner homogeneous view x_{tau_min}, one plan per element.
pub fn apply_plan(
    plans: &[NoisingPlan],
    x0: &Tensor,
    x1: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, n) = (x0.shape()[0], x0.shape()[1]);
    if plans.len() != b {
        return Err(Error::InvalidArg(format!(
            "{} plans for a batch of {b}",
            plans.len()
        )));
    }
    let mut tau = Vec::with_capacity(b * n);
    let mut tau_min = Vec::with_capacity(b * n);
    for plan in plans {
        if plan.tau.len() != n {
            return Err(Error::InvalidArg(format!(
                "plan has {} tokens, batch has {n}",
                plan.tau.len()
            )));
        }
        tau.extend_from_slice(&plan.tau);
        tau_min.extend(std::iter::repeat_n(plan.tau_min, n));
    }
    let tau = Tensor::new(vec![b, n], tau)?;
    let tau_min = Tensor::new(vec![b, n], tau_min)?;
    Ok((
        interpolate(x0, x1, &tau)?,
        interpolate(x0, x1, &tau_min)?,
    ))
}
