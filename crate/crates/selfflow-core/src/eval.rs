//! Sample-quality scoring and representation probing.
//!
//! Samples are scored by the Fréchet distance between Gaussian fits of
//! feature distributions. The matrix square root is taken through the
//! symmetric product form tr((A^{1/2} B A^{1/2})^{1/2}) so only symmetric
//! eigenproblems arise, solved by a cyclic Jacobi sweep. Representation
//! quality is measured by layer-wise linear probes: multinomial logistic
//! regression on mean-pooled frozen features.

use crate::data::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, TokenBatch};
use crate::model::{forward_eval, ModelParams};
use crate::objectives::encoder_features;
use crate::rng::Philox;
use crate::schedules::EvalGrid;
use crate::tensor::Tensor;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major,
/// n×n). Returns eigenvalues and the orthonormal eigenvector matrix Q
/// (columns are eigenvectors), so A = Q diag(l) Qᵀ.
pub fn jacobi_eigh(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::InvalidArg(format!(
            "jacobi_eigh: {} values for a {n}x{n} matrix",
            a.len()
        )));
    }
    const MAX_SWEEPS: usize = 50;
    const TOL: f64 = 1e-14;

    let mut m = a.to_vec();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for r in (p + 1)..n {
                s += m[p * n + r].abs();
            }
        }
        s
    };
    let scale: f64 = (0..n).map(|i| m[i * n + i].abs()).fold(1e-300, f64::max);

    for sweep in 0..MAX_SWEEPS {
        if off(&m) <= TOL * scale * (n * n) as f64 {
            let vals = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((vals, q));
        }
        let _ = sweep;
        for p in 0..n.saturating_sub(1) {
            for r in (p + 1)..n {
                let apq = m[p * n + r];
                if apq.abs() <= TOL * scale {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[r * n + r];
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e154 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + r];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + r] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[r * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[r * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkq = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkq;
                    q[k * n + r] = s * qkp + c * qkq;
                }
            }
        }
    }
    Err(Error::Numerical(format!(
        "jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (n = {n}, off = {})",
        off(&m)
    )))
}

/// Gaussian moments of a feature sample.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major F×F covariance, symmetrized.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

impl GaussianFit {
    /// Fit from rows `[M, F]` with the unbiased (M−1) covariance estimator.
    pub fn fit(rows: &Tensor) -> Result<GaussianFit> {
        if rows.rank() != 2 {
            return Err(Error::InvalidArg(format!(
                "GaussianFit::fit expects [M, F], got {}",
                crate::tensor::fmt_shape(rows.shape())
            )));
        }
        let (m, f) = (rows.shape()[0], rows.shape()[1]);
        if m < 2 {
            return Err(Error::InvalidArg("need at least two samples".into()));
        }
        let mut mean = vec![0.0; f];
        for r in 0..m {
            for c in 0..f {
                mean[c] += rows.data()[r * f + c];
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        let mut cov = vec![0.0; f * f];
        for r in 0..m {
            let row = &rows.data()[r * f..(r + 1) * f];
            for i in 0..f {
                let di = row[i] - mean[i];
                for j in i..f {
                    cov[i * f + j] += di * (row[j] - mean[j]);
                }
            }
        }
        let denom = (m - 1) as f64;
        for i in 0..f {
            for j in i..f {
                let v = cov[i * f + j] / denom;
                cov[i * f + j] = v;
                cov[j * f + i] = v;
            }
        }
        Ok(GaussianFit {
            mean,
            cov,
            dim: f,
            count: m,
        })
    }
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Squared Fréchet distance between two Gaussian fits:
/// ‖Δμ‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2}), with the cross term evaluated as
/// tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}). Clamped at zero.
pub fn frechet(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::InvalidArg(format!(
            "dimension mismatch: {} vs {}",
            a.dim, b.dim
        )));
    }
    let n = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();

    // A^{1/2} via eigendecomposition, eigenvalues clamped at 0
    let (vals_a, q_a) = jacobi_eigh(&a.cov, n)?;
    let mut sqrt_a = vec![0.0; n * n];
    for (k, &l) in vals_a.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let qi = q_a[i * n + k] * s;
            if qi == 0.0 {
                continue;
            }
            for j in 0..n {
                sqrt_a[i * n + j] += qi * q_a[j * n + k];
            }
        }
    }

    // M = A^{1/2} B A^{1/2}, symmetrized against rounding
    let tmp = matmul_sq(&sqrt_a, &b.cov, n);
    let mut m = matmul_sq(&tmp, &sqrt_a, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let (vals_m, _) = jacobi_eigh(&m, n)?;
    let tr_cross: f64 = vals_m.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..n).map(|i| a.cov[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| b.cov[i * n + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_cross).max(0.0))
}

/// Which features the Fréchet score is computed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Detokenized pixels, flattened (F = 256).
    Pixel,
    /// Mean-pooled features of the frozen toy encoder (F = H).
    ProbeEncoder,
}

/// Features of a token batch in the requested space, one row per sample.
pub fn extract_features(
    spec: &DatasetSpec,
    batch_x: &Tensor,
    space: FeatureSpace,
    encoder: Option<&crate::model::EncoderParams>,
) -> Result<Tensor> {
    let b = batch_x.shape()[0];
    match space {
        FeatureSpace::Pixel => {
            let mut rows = Vec::with_capacity(b * data::IMAGE_SIZE * data::IMAGE_SIZE);
            for i in 0..b {
                let tokens = crate::tensor::slice(batch_x, 0, i, 1)?;
                let tokens = crate::tensor::reshape(
                    &tokens,
                    vec![data::TOKENS, data::TOKEN_DIM],
                )?;
                rows.extend(data::tokens_to_pixels(spec, &tokens)?);
            }
            Tensor::new(vec![b, data::IMAGE_SIZE * data::IMAGE_SIZE], rows)
        }
        FeatureSpace::ProbeEncoder => {
            let enc = encoder.ok_or_else(|| {
                Error::InvalidArg("probe_encoder feature space requires an encoder".into())
            })?;
            let feats = encoder_features(enc, batch_x)?; // [B, N, H]
            let pooled = crate::tensor::mean_axis(&feats, 1)?;
            Ok(pooled)
        }
    }
}

/// Draw `n_samples` from the model (labels cycling over the classes), and
/// score them against held-out data in the requested feature space.
#[allow(clippy::too_many_arguments)]
pub fn score_model(
    params: &ModelParams,
    spec: &DatasetSpec,
    heldout: &TokenBatch,
    n_samples: usize,
    grid: &EvalGrid,
    space: FeatureSpace,
    encoder: Option<&crate::model::EncoderParams>,
    seed: u64,
) -> Result<f64> {
    let samples = sample_tokens(params, n_samples, grid, seed)?;
    let feat_dim = match space {
        FeatureSpace::Pixel => data::IMAGE_SIZE * data::IMAGE_SIZE,
        FeatureSpace::ProbeEncoder => params.config.hidden,
    };
    if n_samples < 10 * feat_dim {
        eprintln!(
            "warning: {n_samples} samples for {feat_dim}-dim features; \
             covariance estimates will be noisy (recommended >= {})",
            10 * feat_dim
        );
    }
    let model_feats = extract_features(spec, &samples, space, encoder)?;
    let data_feats = extract_features(spec, &heldout.x, space, encoder)?;
    let fit_model = GaussianFit::fit(&model_feats)?;
    let fit_data = GaussianFit::fit(&data_feats)?;
    frechet(&fit_model, &fit_data)
}

/// Generate `n` samples via the Euler sampler, batched; labels cycle over
/// the classes so the class marginal is uniform.
pub fn sample_tokens(
    params: &ModelParams,
    n: usize,
    grid: &EvalGrid,
    seed: u64,
) -> Result<Tensor> {
    let cfg = &params.config;
    let (tokens, dim, k) = (cfg.tokens, cfg.token_dim, cfg.num_classes);
    let chunk = 64usize;
    let mut out = Vec::with_capacity(n * tokens * dim);
    let mut produced = 0usize;
    while produced < n {
        let b = chunk.min(n - produced);
        let mut rng = Philox::keyed(seed, 0x5a17_0000 ^ produced as u64);
        let numel = b * tokens * dim;
        let x1 = Tensor::new(
            vec![b, tokens, dim],
            (0..numel).map(|_| rng.normal()).collect(),
        )?;
        let labels: Vec<usize> = (0..b).map(|i| (produced + i) % k).collect();
        let sample = euler_sample(
            |x, t, labels| {
                let tau = Tensor::full(&x.shape()[..2], t);
                let (v, _) = forward_eval(params, x, &tau, labels)?;
                Ok(v)
            },
            &x1,
            grid,
            Some(&labels),
        )?;
        out.extend_from_slice(sample.data());
        produced += b;
    }
    Tensor::new(vec![n, tokens, dim], out)
}

/// Fréchet distance between two disjoint halves of a feature matrix: the
/// sampling-noise floor every model score should be compared against.
pub fn self_distance(features: &Tensor) -> Result<f64> {
    let m = features.shape()[0];
    let half = m / 2;
    let a = crate::tensor::slice(features, 0, 0, half)?;
    let b = crate::tensor::slice(features, 0, half, m - half)?;
    frechet(&GaussianFit::fit(&a)?, &GaussianFit::fit(&b)?)
}

/// Multinomial logistic regression on frozen features: full-batch gradient
/// descent, 500 iterations, lr 0.1, L2 penalty `l2`. Returns held-out
/// top-1 accuracy.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    heldout_features: &Tensor,
    heldout_labels: &[usize],
    l2: f64,
) -> Result<f64> {
    let (m, f) = (features.shape()[0], features.shape()[1]);
    if m != labels.len() || heldout_features.shape()[0] != heldout_labels.len() {
        return Err(Error::InvalidArg("feature/label count mismatch".into()));
    }
    let k = labels.iter().max().map(|&x| x + 1).unwrap_or(0);
    if k < 2 {
        return Err(Error::InvalidArg(
            "probe needs at least two classes in the training labels".into(),
        ));
    }
    if m < k {
        return Err(Error::InvalidArg(format!(
            "{m} samples cannot cover {k} classes"
        )));
    }

    // standardize features for a well-conditioned descent
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for r in 0..m {
        for c in 0..f {
            mean[c] += features.data()[r * f + c];
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    for r in 0..m {
        for c in 0..f {
            let d = features.data()[r * f + c] - mean[c];
            std[c] += d * d;
        }
    }
    for v in std.iter_mut() {
        *v = (*v / m as f64).sqrt().max(1e-8);
    }
    let norm = |rows: &Tensor| -> Vec<f64> {
        let n_rows = rows.shape()[0];
        let mut out = vec![0.0; n_rows * f];
        for r in 0..n_rows {
            for c in 0..f {
                out[r * f + c] = (rows.data()[r * f + c] - mean[c]) / std[c];
            }
        }
        out
    };
    let x = norm(features);
    let x_held = norm(heldout_features);

    let mut w = vec![0.0; f * k];
    let mut b = vec![0.0; k];
    let lr = 0.1;
    let iters = 500;
    let mut logits = vec![0.0; m * k];
    let mut grad_w = vec![0.0; f * k];
    let mut grad_b = vec![0.0; k];
    for _ in 0..iters {
        for r in 0..m {
            for c in 0..k {
                let mut z = b[c];
                for j in 0..f {
                    z += x[r * f + j] * w[j * k + c];
                }
                logits[r * k + c] = z;
            }
            let row = &mut logits[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut zsum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                zsum += *v;
            }
            for v in row.iter_mut() {
                *v /= zsum;
            }
        }
        grad_w.iter_mut().for_each(|v| *v = 0.0);
        grad_b.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..m {
            for c in 0..k {
                let delta = logits[r * k + c] - if labels[r] == c { 1.0 } else { 0.0 };
                grad_b[c] += delta;
                for j in 0..f {
                    grad_w[j * k + c] += delta * x[r * f + j];
                }
            }
        }
        let inv_m = 1.0 / m as f64;
        for (wi, gw) in w.iter_mut().zip(&grad_w) {
            *wi -= lr * (gw * inv_m + 2.0 * l2 * *wi);
        }
        for (bi, gb) in b.iter_mut().zip(&grad_b) {
            *bi -= lr * gb * inv_m;
        }
    }

    let n_held = heldout_labels.len();
    let mut correct = 0usize;
    for r in 0..n_held {
        let mut best = 0usize;
        let mut best_z = f64::NEG_INFINITY;
        for c in 0..k {
            let mut z = b[c];
            for j in 0..f {
                z += x_held[r * f + j] * w[j * k + c];
            }
            if z > best_z {
                best_z = z;
                best = c;
            }
        }
        if heldout_labels[r] == best {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_held as f64)
}

/// Accuracy of a linear probe on each layer's mean-pooled hidden state,
/// with inputs noised at the homogeneous probe timestep.
pub fn probe_all_layers(
    params: &ModelParams,
    probe_batch: &TokenBatch,
    eval_batch: &TokenBatch,
    tau_probe: f64,
    l2: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&tau_probe) {
        return Err(Error::InvalidArg(format!(
            "tau_probe must be in [0,1], got {tau_probe}"
        )));
    }
    let features = |batch: &TokenBatch, stream: u64| -> Result<Vec<Tensor>> {
        let shape = batch.x.shape();
        let mut rng = Philox::keyed(seed, stream);
        let x1 = Tensor::new(
            shape.to_vec(),
            (0..batch.x.numel()).map(|_| rng.normal()).collect(),
        )?;
        let tau = Tensor::full(&shape[..2], tau_probe);
        let x_noised = crate::flow::interpolate(&batch.x, &x1, &tau)?;
        // unconditional forward: the probe must not see the label
        let (_, hiddens) = forward_eval(params, &x_noised, &tau, None)?;
        hiddens
            .iter()
            .map(|h| crate::tensor::mean_axis(h, 1))
            .collect()
    };
    let train_feats = features(probe_batch, 0xf0)?;
    let eval_feats = features(eval_batch, 0xf1)?;
    let train_labels = probe_batch.labels.as_ref().expect("labeled probe batch");
    let eval_labels = eval_batch.labels.as_ref().expect("labeled probe batch");
    train_feats
        .iter()
        .zip(&eval_feats)
        .map(|(tr, ev)| linear_probe(tr, train_labels, ev, eval_labels, l2))
        .collect()
}
