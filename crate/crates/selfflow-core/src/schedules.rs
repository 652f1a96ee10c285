//! Timestep sampling distributions, the timeshift transform, and inference
//! grids.
//!
//! The timeshift bijection s(α,t) = αt / (1 + (α−1)t) underlies everything
//! here: shifted-uniform sampling is uniform sampling pushed through it,
//! shifting a logit-normal by α moves its location parameter by ln α, and a
//! descending shifted grid is stratified sampling from the shifted uniform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Philox;

/// s(α, t) = αt / (1 + (α−1)t). Strictly increasing in t, fixes 0 and 1.
pub fn timeshift(alpha: f64, t: f64) -> Result<f64> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "timeshift alpha must be > 0, got {alpha}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArg(format!(
            "timeshift t must be in [0,1], got {t}"
        )));
    }
    // fixed points returned exactly; the rational form rounds at t = 1
    if t == 0.0 {
        return Ok(0.0);
    }
    if t == 1.0 {
        return Ok(1.0);
    }
    Ok(alpha * t / (1.0 + (alpha - 1.0) * t))
}

fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

/// Logit-normal density with location `mu` and scale `sigma`; 0 at the
/// endpoints by convention.
fn logit_normal_pdf(t: f64, mu: f64, sigma: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let z = (logit(t) - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt() * t * (1.0 - t))
}

/// Error function, Abramowitz & Stegun 7.1.26 (|err| < 1.5e-7). Accurate
/// enough for the CDF comparisons it backs.
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

const PLATEAU_GRID: usize = 4096;

/// Timestep sampling distribution p(t) on [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimestepDistribution {
    Uniform,
    ShiftedUniform {
        alpha: f64,
    },
    LogitNormal {
        mu: f64,
        sigma: f64,
        #[serde(default = "one")]
        trainshift: f64,
    },
    PlateauLogitNormal {
        mu: f64,
        sigma: f64,
        #[serde(default = "one")]
        trainshift: f64,
    },
    /// With probability `p_hi`, sample uniformly from `interval`; otherwise
    /// from `base`. Covers the low-SNR tail a shifted base may starve.
    LowSnrMixture {
        base: Box<TimestepDistribution>,
        p_hi: f64,
        interval: [f64; 2],
    },
}

fn one() -> f64 {
    1.0
}

impl TimestepDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            TimestepDistribution::Uniform => Ok(()),
            TimestepDistribution::ShiftedUniform { alpha } => {
                if *alpha > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "shifted_uniform alpha must be > 0, got {alpha}"
                    )))
                }
            }
            TimestepDistribution::LogitNormal {
                sigma, trainshift, ..
            } => {
                if *sigma <= 0.0 {
                    Err(Error::Config(format!(
                        "logit_normal sigma must be > 0, got {sigma}"
                    )))
                } else if *trainshift <= 0.0 {
                    Err(Error::Config(format!(
                        "logit_normal trainshift must be > 0, got {trainshift}"
                    )))
                } else {
                    Ok(())
                }
            }
            TimestepDistribution::PlateauLogitNormal {
                mu,
                sigma,
                trainshift,
            } => {
                if *sigma <= 0.0 || *trainshift <= 0.0 {
                    return Err(Error::Config(
                        "plateau_logit_normal needs sigma > 0 and trainshift > 0".into(),
                    ));
                }
                // reject bimodal parameterizations up front
                plateau_mode(mu + trainshift.ln(), *sigma).map(|_| ())
            }
            TimestepDistribution::LowSnrMixture {
                base,
                p_hi,
                interval,
            } => {
                base.validate()?;
                if !(0.0..=1.0).contains(p_hi) {
                    return Err(Error::Config(format!(
                        "p_hi must be a probability, got {p_hi}"
                    )));
                }
                let [lo, hi] = interval;
                if !(0.0 <= *lo && lo < hi && *hi <= 1.0) {
                    return Err(Error::Config(format!(
                        "interval [{lo}, {hi}] must be a nonempty subinterval of [0,1]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Probability density at `t`. Logit-normal families report the shifted
    /// density directly (location mu + ln(trainshift)).
    pub fn density(&self, t: f64) -> f64 {
        match self {
            TimestepDistribution::Uniform => {
                if (0.0..=1.0).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }
            TimestepDistribution::ShiftedUniform { alpha } => {
                if (0.0..=1.0).contains(&t) {
                    let d = alpha + (1.0 - alpha) * t;
                    alpha / (d * d)
                } else {
                    0.0
                }
            }
            TimestepDistribution::LogitNormal {
                mu,
                sigma,
                trainshift,
            } => logit_normal_pdf(t, mu + trainshift.ln(), *sigma),
            TimestepDistribution::PlateauLogitNormal {
                mu,
                sigma,
                trainshift,
            } => {
                let mu_s = mu + trainshift.ln();
                let (mode, plateau, normalizer) =
                    plateau_mode(mu_s, *sigma).expect("validated parameters");
                // constant all the way to t = 1 inclusive: the plateau does
                // not vanish at the noise endpoint
                if !(0.0..=1.0).contains(&t) || t == 0.0 {
                    0.0
                } else if t < mode {
                    logit_normal_pdf(t, mu_s, *sigma) * normalizer
                } else {
                    plateau * normalizer
                }
            }
            TimestepDistribution::LowSnrMixture {
                base,
                p_hi,
                interval,
            } => {
                let [lo, hi] = *interval;
                let in_band = if (lo..=hi).contains(&t) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                };
                (1.0 - p_hi) * base.density(t) + p_hi * in_band
            }
        }
    }

    /// Closed-form CDF (used by the Kolmogorov–Smirnov checks).
    pub fn cdf(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self {
            TimestepDistribution::Uniform => t,
            TimestepDistribution::ShiftedUniform { alpha } => {
                // inverse pushforward: P(s(α,U) ≤ t) = s(1/α, t)
                timeshift(1.0 / alpha, t).expect("t clamped")
            }
            TimestepDistribution::LogitNormal {
                mu,
                sigma,
                trainshift,
            } => {
                if t <= 0.0 {
                    0.0
                } else if t >= 1.0 {
                    1.0
                } else {
                    normal_cdf((logit(t) - mu - trainshift.ln()) / sigma)
                }
            }
            TimestepDistribution::PlateauLogitNormal { .. } => {
                // no closed form; integrate the density
                quadrature(|u| self.density(u), 0.0, t, 4096)
            }
            TimestepDistribution::LowSnrMixture {
                base,
                p_hi,
                interval,
            } => {
                let [lo, hi] = *interval;
                let band = ((t - lo) / (hi - lo)).clamp(0.0, 1.0);
                (1.0 - p_hi) * base.cdf(t) + p_hi * band
            }
        }
    }

    pub fn sample(&self, rng: &mut Philox) -> f64 {
        match self {
            TimestepDistribution::Uniform => rng.uniform(),
            TimestepDistribution::ShiftedUniform { alpha } => {
                timeshift(*alpha, rng.uniform()).expect("uniform draw is in [0,1)")
            }
            TimestepDistribution::LogitNormal {
                mu,
                sigma,
                trainshift,
            } => {
                // Gaussian → logistic → timeshift; exact via the pushforward
                // identity for the shifted parameter.
                let z = mu + sigma * rng.normal();
                let t = 1.0 / (1.0 + (-z).exp());
                timeshift(*trainshift, t).expect("logistic output is in (0,1)")
            }
            TimestepDistribution::PlateauLogitNormal {
                mu,
                sigma,
                trainshift,
            } => {
                let mu_s = mu + trainshift.ln();
                let table = plateau_cdf_table(mu_s, *sigma);
                table.sample(rng.uniform())
            }
            TimestepDistribution::LowSnrMixture {
                base,
                p_hi,
                interval,
            } => {
                if rng.uniform() < *p_hi {
                    rng.uniform_in(interval[0], interval[1])
                } else {
                    base.sample(rng)
                }
            }
        }
    }

    pub fn sample_n(&self, rng: &mut Philox, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Interior points where the density has a jump or kink. Quadrature of
    /// the total mass splits at these.
    fn knots(&self) -> Vec<f64> {
        match self {
            TimestepDistribution::Uniform | TimestepDistribution::ShiftedUniform { .. } => vec![],
            TimestepDistribution::LogitNormal { .. } => vec![],
            TimestepDistribution::PlateauLogitNormal {
                mu,
                sigma,
                trainshift,
            } => {
                let (mode, _, _) =
                    plateau_mode(mu + trainshift.ln(), *sigma).expect("validated parameters");
                vec![mode]
            }
            TimestepDistribution::LowSnrMixture { base, interval, .. } => {
                let mut k = base.knots();
                k.extend_from_slice(interval);
                k
            }
        }
    }

    /// Total mass of the density over [0, 1] by composite midpoint
    /// quadrature, split at the density's knots so jumps are integrated
    /// one-sided.
    pub fn density_mass(&self, panels: usize) -> f64 {
        let mut cuts = self.knots();
        cuts.retain(|&t| t > 0.0 && t < 1.0);
        cuts.push(0.0);
        cuts.push(1.0);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut mass = 0.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let n = ((panels as f64 * (b - a)).ceil() as usize).max(64);
            let h = (b - a) / n as f64;
            let mut seg = 0.0;
            for i in 0..n {
                seg += self.density(a + (i as f64 + 0.5) * h);
            }
            mass += seg * h;
        }
        mass
    }
}

/// Composite Simpson quadrature with `panels` subintervals (`panels` even).
pub fn quadrature(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = if panels.is_multiple_of(2) { panels } else { panels + 1 };
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// Argmax, modal density, and renormalizer for the plateau construction.
///
/// The mode of the logit-normal is found by golden-section search on (0, 1);
/// a fine-grid scan first verifies unimodality and rejects parameterizations
/// with two local maxima, which the plateau construction does not define.
/// Results are cached per (mu, sigma) since density evaluation calls this on
/// every point.
pub fn plateau_mode(mu: f64, sigma: f64) -> Result<(f64, f64, f64)> {
    use std::collections::HashMap;
    use std::sync::Mutex;
    static CACHE: Mutex<Option<HashMap<(u64, u64), (f64, f64, f64)>>> = Mutex::new(None);

    let key = (mu.to_bits(), sigma.to_bits());
    if let Some(hit) = CACHE
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .get(&key)
    {
        return Ok(*hit);
    }
    let out = plateau_mode_uncached(mu, sigma)?;
    CACHE
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .insert(key, out);
    Ok(out)
}

fn plateau_mode_uncached(mu: f64, sigma: f64) -> Result<(f64, f64, f64)> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArg(format!("sigma must be > 0, got {sigma}")));
    }
    // Stationary points of log p satisfy g(t) = 0 with
    //   g(t) = (logit(t) − mu)/sigma² − (2t − 1),
    // and g runs from −∞ to +∞. For sigma² ≤ 2, g is monotone: exactly one
    // stationary point, the mode. For sigma² > 2, g has interior extrema at
    // t(1−t) = 1/(2 sigma²); if g changes sign across them the density is
    // bimodal and the plateau construction is rejected.
    let s2 = sigma * sigma;
    let g = |t: f64| (logit(t) - mu) / s2 - (2.0 * t - 1.0);
    if s2 > 2.0 {
        let half_gap = (0.25 - 1.0 / (2.0 * s2)).sqrt();
        let (t_lo, t_hi) = (0.5 - half_gap, 0.5 + half_gap);
        if g(t_lo) > 0.0 && g(t_hi) < 0.0 {
            return Err(Error::Numerical(format!(
                "logit-normal(mu={mu}, sigma={sigma}) is bimodal; \
                 the plateau construction is undefined"
            )));
        }
    }

    // bisect g for its sign change; the root is the mode
    let (mut lo, mut hi) = (1e-15, 1.0 - 1e-15);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    let mode = 0.5 * (lo + hi);
    let pdf = |t: f64| logit_normal_pdf(t, mu, sigma);
    let plateau = pdf(mode);
    let below = quadrature(pdf, 0.0, mode, 200_000);
    let mass = below + (1.0 - mode) * plateau;
    Ok((mode, plateau, 1.0 / mass))
}

/// Tabulated inverse CDF for the plateau density (no closed-form inverse).
struct PlateauTable {
    ts: Vec<f64>,
    cdf: Vec<f64>,
}

impl PlateauTable {
    fn sample(&self, u: f64) -> f64 {
        // binary search for the bracketing cell, then linear interpolation
        let idx = self.cdf.partition_point(|&c| c < u);
        if idx == 0 {
            return self.ts[0];
        }
        if idx >= self.cdf.len() {
            return *self.ts.last().unwrap();
        }
        let (c0, c1) = (self.cdf[idx - 1], self.cdf[idx]);
        let (t0, t1) = (self.ts[idx - 1], self.ts[idx]);
        if c1 > c0 {
            t0 + (t1 - t0) * (u - c0) / (c1 - c0)
        } else {
            t0
        }
    }
}

fn plateau_cdf_table(mu: f64, sigma: f64) -> std::sync::Arc<PlateauTable> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex};
    static CACHE: Mutex<Option<HashMap<(u64, u64), Arc<PlateauTable>>>> = Mutex::new(None);

    let key = (mu.to_bits(), sigma.to_bits());
    if let Some(hit) = CACHE
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .get(&key)
    {
        return Arc::clone(hit);
    }
    let table = Arc::new(build_plateau_cdf_table(mu, sigma));
    CACHE
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .insert(key, Arc::clone(&table));
    table
}

fn build_plateau_cdf_table(mu: f64, sigma: f64) -> PlateauTable {
    let (mode, plateau, normalizer) = plateau_mode(mu, sigma).expect("validated parameters");
    let pdf = |t: f64| {
        if t <= 0.0 {
            0.0
        } else if t < mode {
            logit_normal_pdf(t, mu, sigma) * normalizer
        } else {
            plateau * normalizer
        }
    };
    let n = PLATEAU_GRID;
    let mut ts = Vec::with_capacity(n + 1);
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    let h = 1.0 / n as f64;
    ts.push(0.0);
    cdf.push(0.0);
    let mut prev = pdf(0.0);
    for i in 1..=n {
        let t = i as f64 * h;
        let cur = pdf(t);
        acc += 0.5 * (prev + cur) * h;
        prev = cur;
        ts.push(t);
        cdf.push(acc);
    }
    // normalize the trapezoid tabulation so u ∈ [0,1) always lands
    let total = *cdf.last().unwrap();
    for c in cdf.iter_mut() {
        *c /= total;
    }
    PlateauTable { ts, cdf }
}

/// Descending inference grid: s(α, k/n) for k = n..0, endpoints exactly
/// 1 and 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub n_steps: usize,
    pub sampleshift: f64,
    pub timesteps: Vec<f64>,
}

pub fn eval_grid(n_steps: usize, sampleshift: f64) -> Result<EvalGrid> {
    if n_steps == 0 {
        return Err(Error::InvalidArg("eval grid needs n_steps >= 1".into()));
    }
    if sampleshift <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "sampleshift must be > 0, got {sampleshift}"
        )));
    }
    let timesteps: Vec<f64> = (0..=n_steps)
        .rev()
        .map(|k| timeshift(sampleshift, k as f64 / n_steps as f64))
        .collect::<Result<_>>()?;
    Ok(EvalGrid {
        n_steps,
        sampleshift,
        timesteps,
    })
}

/// One-sample KS statistic: empirical CDF of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut worst = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        let hi = (i + 1) as f64 / n - c;
        let lo = c - i as f64 / n;
        worst = worst.max(hi.max(lo));
    }
    worst
}
