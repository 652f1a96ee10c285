//! Procedural toy dataset: 16×16 grayscale images of eight parametric shape
//! classes, patched into 16 tokens of 16 channels.
//!
//! Generation is pure per (seed, split, index), so the dataset never needs
//! to be materialized; files exist for reproducibility audits. Pixels live
//! in [−1, 1]; training tokens are additionally standardized with global
//! statistics frozen into the spec so the data is scale-matched to unit
//! Gaussian noise.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TokenBatch;
use crate::metrics::fnv1a_hex;
use crate::rng::Philox;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const PATCH: usize = 4;
/// 16 patches of 4×4.
pub const TOKENS: usize = (IMAGE_SIZE / PATCH) * (IMAGE_SIZE / PATCH);
pub const TOKEN_DIM: usize = PATCH * PATCH;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Heldout => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Additive pixel noise before clamping.
    pub sigma_px: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Token standardization, frozen at spec creation.
    pub norm_mean: f64,
    pub norm_std: f64,
    pub format_version: u32,
}

impl DatasetSpec {
    /// Build the default 8-class spec with normalization statistics frozen
    /// from 10^4 train-split samples under `seed`.
    pub fn toy_default(seed: u64, n_train: usize, n_eval: usize) -> DatasetSpec {
        let mut spec = DatasetSpec {
            num_classes: 8,
            sigma_px: 0.05,
            n_train,
            n_eval,
            norm_mean: 0.0,
            norm_std: 1.0,
            format_version: FORMAT_VERSION,
        };
        let (mean, std) = compute_normalization(&spec, seed, 10_000);
        spec.norm_mean = mean;
        spec.norm_std = std;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 8 {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=8, got {}",
                self.num_classes
            )));
        }
        if self.sigma_px < 0.0 {
            return Err(Error::Config("sigma_px must be >= 0".into()));
        }
        if self.norm_std <= 0.0 {
            return Err(Error::Config("norm_std must be > 0".into()));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        Ok(())
    }

    pub fn spec_hash(&self) -> String {
        fnv1a_hex(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

fn shape_intensity(class: usize, x: f64, y: f64, p: &ShapeJitter) -> f64 {
    let dx = x - p.cx;
    let dy = y - p.cy;
    let d = (dx * dx + dy * dy).sqrt();
    let soft = |v: f64| v.clamp(0.0, 1.0);
    match class {
        // filled disc
        0 => soft(4.0 * p.scale - d + 0.5),
        // ring
        1 => soft(1.1 - (d - 5.0 * p.scale).abs()),
        // filled square
        2 => {
            let h = 3.5 * p.scale;
            soft(h - dx.abs() + 0.5).min(soft(h - dy.abs() + 0.5))
        }
        // plus sign
        3 => {
            let arm = 5.5 * p.scale;
            let horiz = soft(1.3 - dy.abs()).min(soft(arm - dx.abs() + 0.5));
            let vert = soft(1.3 - dx.abs()).min(soft(arm - dy.abs() + 0.5));
            horiz.max(vert)
        }
        // horizontal stripes
        4 => {
            let v = (std::f64::consts::TAU * (y + p.phase) / 4.0).sin();
            soft(0.5 + 1.5 * v)
        }
        // vertical stripes
        5 => {
            let v = (std::f64::consts::TAU * (x + p.phase) / 4.0).sin();
            soft(0.5 + 1.5 * v)
        }
        // checkerboard
        6 => {
            let cell = 4.0;
            let ix = ((x + p.phase) / cell).floor() as i64;
            let iy = ((y + p.phase2) / cell).floor() as i64;
            if (ix + iy).rem_euclid(2) == 0 {
                1.0
            } else {
                0.0
            }
        }
        // two gaussian blobs on a jittered diagonal
        7 => {
            let (ox, oy) = (3.2 * p.scale * p.angle.cos(), 3.2 * p.scale * p.angle.sin());
            let d1 = ((dx - ox).powi(2) + (dy - oy).powi(2)) / (2.0 * 2.2 * 2.2);
            let d2 = ((dx + ox).powi(2) + (dy + oy).powi(2)) / (2.0 * 2.2 * 2.2);
            soft((-d1).exp() + (-d2).exp())
        }
        _ => 0.0,
    }
}

struct ShapeJitter {
    cx: f64,
    cy: f64,
    scale: f64,
    intensity: f64,
    phase: f64,
    phase2: f64,
    angle: f64,
}

/// Raw image for (seed, split, index): pixels in [−1, 1], plus the label.
pub fn sample_image(spec: &DatasetSpec, seed: u64, split: Split, index: usize) -> (Vec<f64>, usize) {
    let mut rng = Philox::keyed(seed, (split.stream_tag() << 56) | index as u64);
    let label = index % spec.num_classes;
    let jitter = ShapeJitter {
        cx: 7.5 + rng.uniform_in(-2.0, 2.0),
        cy: 7.5 + rng.uniform_in(-2.0, 2.0),
        scale: rng.uniform_in(0.7, 1.3),
        intensity: rng.uniform_in(0.6, 1.0),
        phase: rng.uniform_in(0.0, 4.0),
        phase2: rng.uniform_in(0.0, 4.0),
        angle: rng.uniform_in(0.0, std::f64::consts::PI),
    };
    let mut pixels = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for yi in 0..IMAGE_SIZE {
        for xi in 0..IMAGE_SIZE {
            let v = jitter.intensity * shape_intensity(label, xi as f64, yi as f64, &jitter);
            let noisy = (v + spec.sigma_px * rng.normal()).clamp(0.0, 1.0);
            pixels.push(2.0 * noisy - 1.0);
        }
    }
    (pixels, label)
}

/// Row-major 4×4 patching: token p holds image[4·pr .. 4·pr+4, 4·pc .. 4·pc+4]
/// flattened row-major.
pub fn tokenize(image: &[f64]) -> Result<Tensor> {
    if image.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::InvalidArg(format!(
            "tokenize expects {} pixels, got {}",
            IMAGE_SIZE * IMAGE_SIZE,
            image.len()
        )));
    }
    let per_side = IMAGE_SIZE / PATCH;
    let mut data = Vec::with_capacity(image.len());
    for pr in 0..per_side {
        for pc in 0..per_side {
            for r in 0..PATCH {
                for c in 0..PATCH {
                    data.push(image[(pr * PATCH + r) * IMAGE_SIZE + pc * PATCH + c]);
                }
            }
        }
    }
    Tensor::new(vec![TOKENS, TOKEN_DIM], data)
}

pub fn detokenize(tokens: &Tensor) -> Result<Vec<f64>> {
    if tokens.shape() != [TOKENS, TOKEN_DIM] {
        return Err(Error::InvalidArg(format!(
            "detokenize expects [{TOKENS}x{TOKEN_DIM}], got {}",
            crate::tensor::fmt_shape(tokens.shape())
        )));
    }
    let per_side = IMAGE_SIZE / PATCH;
    let mut image = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for pr in 0..per_side {
        for pc in 0..per_side {
            let tok = pr * per_side + pc;
            for r in 0..PATCH {
                for c in 0..PATCH {
                    image[(pr * PATCH + r) * IMAGE_SIZE + pc * PATCH + c] =
                        tokens.data()[tok * TOKEN_DIM + r * PATCH + c];
                }
            }
        }
    }
    Ok(image)
}

/// Global pixel mean/std over `n` train samples (pre-standardization).
pub fn compute_normalization(spec: &DatasetSpec, seed: u64, n: usize) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let (pixels, _) = sample_image(spec, seed, Split::Train, i);
        for &p in &pixels {
            sum += p;
            sum_sq += p * p;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let var = sum_sq / count as f64 - mean * mean;
    (mean, var.max(1e-12).sqrt())
}

/// Standardized token batch for the given indices.
pub fn batch(spec: &DatasetSpec, seed: u64, split: Split, indices: &[usize]) -> Result<TokenBatch> {
    let b = indices.len();
    let mut data = Vec::with_capacity(b * TOKENS * TOKEN_DIM);
    let mut labels = Vec::with_capacity(b);
    for &i in indices {
        let (pixels, label) = sample_image(spec, seed, split, i);
        let toks = tokenize(&pixels)?;
        data.extend(toks.data().iter().map(|&v| (v - spec.norm_mean) / spec.norm_std));
        labels.push(label);
    }
    TokenBatch::new(
        Tensor::new(vec![b, TOKENS, TOKEN_DIM], data)?,
        Some(labels),
    )
}

/// Undo standardization and patching: tokens `[N, C]` back to [−1, 1]
/// pixel rows.
pub fn tokens_to_pixels(spec: &DatasetSpec, tokens: &Tensor) -> Result<Vec<f64>> {
    let denorm = tokens.map(|v| v * spec.norm_std + spec.norm_mean);
    detokenize(&denorm)
}

// ── file format ─────────────────────────────────────────────────────────
//
// Line 1: JSON header. Then n·TOKENS·TOKEN_DIM little-endian f32 token
// values (standardized), then n little-endian u16 labels.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub seed: u64,
    pub split: Split,
    pub n: usize,
    pub spec_hash: String,
}

pub fn write_dataset(
    path: &Path,
    spec: &DatasetSpec,
    seed: u64,
    split: Split,
    n: usize,
) -> Result<()> {
    spec.validate()?;
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        seed,
        split,
        n,
        spec_hash: spec.spec_hash(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    let indices: Vec<usize> = (0..n).collect();
    let tb = batch(spec, seed, split, &indices)?;
    for &v in tb.x.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    for &l in tb.labels.as_ref().expect("labeled") {
        out.write_all(&(l as u16).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Header without touching the payload.
pub fn inspect_dataset(path: &Path) -> Result<DatasetHeader> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad header: {e}")))
}

/// Read a dataset file, validating the header against `expected` when given.
pub fn read_dataset(path: &Path, expected: Option<&DatasetSpec>) -> Result<(DatasetHeader, TokenBatch)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: DatasetHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {} != supported {FORMAT_VERSION}",
            header.format_version
        )));
    }
    if let Some(want) = expected {
        if &header.spec != want {
            return Err(Error::Format(format!(
                "dataset spec mismatch:\n  file: {}\n  want: {}",
                serde_json::to_string(&header.spec).unwrap_or_default(),
                serde_json::to_string(want).unwrap_or_default(),
            )));
        }
    }
    let n_vals = header.n * TOKENS * TOKEN_DIM;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let need = n_vals * 4 + header.n * 2;
    if payload.len() != need {
        return Err(Error::Format(format!(
            "truncated dataset: payload {} bytes, expected {need}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(n_vals);
    for chunk in payload[..n_vals * 4].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let mut labels = Vec::with_capacity(header.n);
    for chunk in payload[n_vals * 4..].chunks_exact(2) {
        labels.push(u16::from_le_bytes(chunk.try_into().unwrap()) as usize);
    }
    let tb = TokenBatch::new(
        Tensor::new(vec![header.n, TOKENS, TOKEN_DIM], data)?,
        Some(labels),
    )?;
    Ok((header, tb))
}
