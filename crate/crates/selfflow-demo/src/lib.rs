//! Interactive browser demo, compiled to WebAssembly.
//!
//! Three operations are exposed to the page: the timestep-schedule explorer
//! (densities, the timeshift map, and sample histograms), the dual-timestep
//! noising view on procedural toy images, and the oracle Euler sampling
//! trajectory. All returns are flat f64 buffers the page draws onto
//! canvases; errors surface as strings.

use wasm_bindgen::prelude::wasm_bindgen;

use selfflow_core::data::{self, DatasetSpec, Split};
use selfflow_core::dualts::NoisingPlan;
use selfflow_core::flow::{interpolate, velocity_target};
use selfflow_core::rng::Philox;
use selfflow_core::schedules::{eval_grid, timeshift, TimestepDistribution};
use selfflow_core::tensor::Tensor;

fn parse_dist(json: &str) -> Result<TimestepDistribution, String> {
    let dist: TimestepDistribution =
        serde_json::from_str(json).map_err(|e| format!("bad distribution json: {e}"))?;
    dist.validate().map_err(|e| e.to_string())?;
    Ok(dist)
}

fn demo_spec() -> DatasetSpec {
    DatasetSpec::toy_default(7, 1024, 256)
}

/// Density p(t) sampled on a uniform grid of `n` points in (0, 1).
#[wasm_bindgen]
pub fn density_curve(dist_json: &str, n: u32) -> Result<Vec<f64>, String> {
    let dist = parse_dist(dist_json)?;
    let n = n.max(2) as usize;
    Ok((0..n)
        .map(|i| dist.density((i as f64 + 0.5) / n as f64))
        .collect())
}

/// The timeshift map s(alpha, t) on a uniform grid of `n` points.
#[wasm_bindgen]
pub fn timeshift_curve(alpha: f64, n: u32) -> Result<Vec<f64>, String> {
    let n = n.max(2) as usize;
    (0..n)
        .map(|i| timeshift(alpha, i as f64 / (n - 1) as f64).map_err(|e| e.to_string()))
        .collect()
}

/// Histogram (bin densities) of `n_samples` draws from the distribution.
#[wasm_bindgen]
pub fn sample_histogram(
    dist_json: &str,
    n_samples: u32,
    bins: u32,
    seed: u32,
) -> Result<Vec<f64>, String> {
    let dist = parse_dist(dist_json)?;
    let bins = bins.max(1) as usize;
    let n = n_samples.max(1) as usize;
    let mut rng = Philox::seed(seed as u64);
    let mut counts = vec![0.0; bins];
    for _ in 0..n {
        let t = dist.sample(&mut rng);
        let b = ((t * bins as f64) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    // normalize to a density so the curve overlays directly
    let scale = bins as f64 / n as f64;
    for c in counts.iter_mut() {
        *c *= scale;
    }
    Ok(counts)
}

/// Dual-timestep noising of one toy image under forced (t, s) and a mask
/// drawn at ratio `r_m`.
///
/// Returns 3·256 + 16 values: clean pixels, the student's mixed view, the
/// teacher's cleaner view (all in [−1,1] pixel space), then the 16 per-token
/// mask flags.
#[wasm_bindgen]
pub fn dual_plan_demo(
    class: u32,
    t: f64,
    s: f64,
    r_m: f64,
    seed: u32,
) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&s) {
        return Err("t and s must lie in [0,1]".into());
    }
    if !(0.0..=0.5).contains(&r_m) {
        return Err("masking ratio must lie in [0, 0.5]".into());
    }
    let spec = demo_spec();
    let class = (class as usize) % spec.num_classes;
    // walk the split until an index with the requested class comes up
    let index = (seed as usize) * spec.num_classes + class;
    let (pixels, _) = data::sample_image(&spec, 7, Split::Heldout, index);
    let tokens = data::tokenize(&pixels).map_err(|e| e.to_string())?;
    let x0 = selfflow_core::tensor::reshape(&tokens, vec![1, data::TOKENS, data::TOKEN_DIM])
        .map_err(|e| e.to_string())?;

    let mut rng = Philox::keyed(seed as u64, 0x000d_11a1);
    let x1 = Tensor::new(
        x0.shape().to_vec(),
        (0..x0.numel()).map(|_| 0.5 * rng.normal()).collect(),
    )
    .map_err(|e| e.to_string())?;

    let mask: Vec<bool> = (0..data::TOKENS).map(|_| rng.uniform() < r_m).collect();
    let tau: Vec<f64> = mask.iter().map(|&m| if m { s } else { t }).collect();
    let plan = NoisingPlan {
        mode: selfflow_core::dualts::PlanMode::Dual,
        t,
        s,
        mask: mask.clone(),
        tau,
        tau_min: t.min(s),
    };
    let (x_tau, x_taumin) =
        selfflow_core::dualts::apply_plan(&[plan], &x0, &x1).map_err(|e| e.to_string())?;

    let to_pixels = |x: &Tensor| -> Result<Vec<f64>, String> {
        let t2 = selfflow_core::tensor::reshape(x, vec![data::TOKENS, data::TOKEN_DIM])
            .map_err(|e| e.to_string())?;
        data::detokenize(&t2).map_err(|e| e.to_string())
    };
    let mut out = pixels;
    out.extend(to_pixels(&x_tau)?);
    out.extend(to_pixels(&x_taumin)?);
    out.extend(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    Ok(out)
}

/// Euler integration from pure noise to a toy image using the exact
/// straight-path velocity as the model. Returns (steps+1)·256 pixel values:
/// the state after every step, ending at the recovered image.
#[wasm_bindgen]
pub fn oracle_trajectory(
    class: u32,
    steps: u32,
    sampleshift: f64,
    seed: u32,
) -> Result<Vec<f64>, String> {
    let steps = steps.clamp(1, 200) as usize;
    let spec = demo_spec();
    let class = (class as usize) % spec.num_classes;
    let index = (seed as usize) * spec.num_classes + class;
    let (pixels, _) = data::sample_image(&spec, 7, Split::Heldout, index);
    let tokens = data::tokenize(&pixels).map_err(|e| e.to_string())?;
    let x0 = selfflow_core::tensor::reshape(&tokens, vec![1, data::TOKENS, data::TOKEN_DIM])
        .map_err(|e| e.to_string())?;

    let mut rng = Philox::keyed(seed as u64, 0x000d_ac1e);
    let x1 = Tensor::new(
        x0.shape().to_vec(),
        (0..x0.numel()).map(|_| rng.normal()).collect(),
    )
    .map_err(|e| e.to_string())?;
    let v = velocity_target(&x0, &x1).map_err(|e| e.to_string())?;
    let grid = eval_grid(steps, sampleshift).map_err(|e| e.to_string())?;

    let mut frames = Vec::with_capacity((steps + 1) * 256);
    let push_frame = |frames: &mut Vec<f64>, x: &Tensor| -> Result<(), String> {
        let t2 = selfflow_core::tensor::reshape(x, vec![data::TOKENS, data::TOKEN_DIM])
            .map_err(|e| e.to_string())?;
        frames.extend(data::detokenize(&t2).map_err(|e| e.to_string())?);
        Ok(())
    };
    push_frame(&mut frames, &x1)?;
    // take the sampler's steps one at a time so every intermediate is kept;
    // the oracle velocity is constant along the path
    let mut x = x1.clone();
    for w in grid.timesteps.windows(2) {
        let dt = w[1] - w[0];
        x = selfflow_core::tensor::add(&x, &selfflow_core::tensor::scale(&v, dt))
            .map_err(|e| e.to_string())?;
        push_frame(&mut frames, &x)?;
    }
    Ok(frames)
}

/// Interpolated view x_t at a single homogeneous timestep, for the scrubber.
#[wasm_bindgen]
pub fn noise_level_preview(class: u32, t: f64, seed: u32) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&t) {
        return Err("t must lie in [0,1]".into());
    }
    let spec = demo_spec();
    let class = (class as usize) % spec.num_classes;
    let index = (seed as usize) * spec.num_classes + class;
    let (pixels, _) = data::sample_image(&spec, 7, Split::Heldout, index);
    let tokens = data::tokenize(&pixels).map_err(|e| e.to_string())?;
    let x0 = selfflow_core::tensor::reshape(&tokens, vec![1, data::TOKENS, data::TOKEN_DIM])
        .map_err(|e| e.to_string())?;
    let mut rng = Philox::keyed(seed as u64, 0x9e11);
    let x1 = Tensor::new(
        x0.shape().to_vec(),
        (0..x0.numel()).map(|_| rng.normal()).collect(),
    )
    .map_err(|e| e.to_string())?;
    let tau = Tensor::full(&[1, data::TOKENS], t);
    let xt = interpolate(&x0, &x1, &tau).map_err(|e| e.to_string())?;
    let t2 = selfflow_core::tensor::reshape(&xt, vec![data::TOKENS, data::TOKEN_DIM])
        .map_err(|e| e.to_string())?;
    data::detokenize(&t2).map_err(|e| e.to_string())
}
