//! The training loop: streaming batches, per-step metrics, periodic
//! Fréchet evaluation, and checkpoints that resume bit for bit.
//!
//! All randomness is derived statelessly from `(seed, domain, step)`
//! through the counter-based generator, so a run restarted from any
//! checkpoint replays the exact step stream of an unbroken run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::eval::{self, FeatureSpace};
use crate::metrics::MetricsWriter;
use crate::model::{init_params, EncoderParams, ModelParams};
use crate::objectives::{train_probe_encoder, train_step, ObjectiveVariant, TrainState};
use crate::rng::Philox;
use crate::schedules::eval_grid;
use crate::tensor::Tensor;

// rng stream domains, packed into the high byte of the stream id
const DOM_INIT: u64 = 1 << 56;
const DOM_NOISE: u64 = 2 << 56;
const DOM_PLAN: u64 = 3 << 56;
const DOM_ENCODER: u64 = 4 << 56;
const DOM_EVAL: u64 = 5 << 56;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub step: u64,
    pub rng: RngState,
    /// "f64" for exact resume; "f32" for compact export.
    pub dtype: String,
    pub param_names: Vec<String>,
    pub param_shapes: Vec<Vec<usize>>,
    /// Buffer order: student, teacher, opt_m, opt_v (each in param order).
    pub sections: Vec<String>,
}

fn write_tensors(
    out: &mut impl std::io::Write,
    tensors: &[&Tensor],
    f32_mode: bool,
) -> Result<()> {
    for t in tensors {
        for &v in t.data() {
            if f32_mode {
                out.write_all(&(v as f32).to_le_bytes())?;
            } else {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Serialize the full training state. `f32_mode` halves the file at the
/// cost of exact resumability.
pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    state: &TrainState,
    f32_mode: bool,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        config_hash: config.hash(),
        step: state.step,
        rng: RngState {
            seed: config.seed,
            next_step: state.step,
        },
        dtype: if f32_mode { "f32" } else { "f64" }.to_string(),
        param_names: state.student.flat_names(),
        param_shapes: state
            .student
            .flat()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect(),
        sections: vec![
            "student".into(),
            "teacher".into(),
            "opt_m".into(),
            "opt_v".into(),
        ],
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Format(e.to_string()))?;
    std::io::Write::write_all(&mut out, b"\n")?;
    write_tensors(&mut out, &state.student.flat(), f32_mode)?;
    write_tensors(&mut out, &state.teacher.flat(), f32_mode)?;
    write_tensors(&mut out, &state.opt_m.iter().collect::<Vec<_>>(), f32_mode)?;
    write_tensors(&mut out, &state.opt_v.iter().collect::<Vec<_>>(), f32_mode)?;
    std::io::Write::flush(&mut out)?;
    Ok(())
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    use std::io::BufRead;
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, TrainState)> {
    use std::io::{BufRead, Read};
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} != supported {CHECKPOINT_VERSION}",
            header.format_version
        )));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    let total: usize = header
        .param_shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum();
    let elem = if header.dtype == "f32" { 4 } else { 8 };
    let need = 4 * total * elem;
    if payload.len() != need {
        return Err(Error::Format(format!(
            "truncated checkpoint: {} bytes, expected {need}",
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(4 * total);
    if header.dtype == "f32" {
        for chunk in payload.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    } else {
        for chunk in payload.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }

    // materialize the parameter tree, then overwrite every tensor in order
    let mut seed_rng = Philox::keyed(header.config.seed, DOM_INIT);
    let mut student = init_params(&header.config.model, &mut seed_rng)?;
    let mut teacher = student.clone();
    let shapes = header.param_shapes.clone();
    let mut cursor = 0usize;
    let take = |shapes: &[Vec<usize>], values: &[f64], cursor: &mut usize| -> Vec<Tensor> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), values[*cursor..*cursor + n].to_vec())
                    .expect("checkpoint shapes are consistent");
                *cursor += n;
                t
            })
            .collect()
    };
    let s_tensors = take(&shapes, &values, &mut cursor);
    for (dst, src) in student.flat_mut().into_iter().zip(s_tensors) {
        *dst = src;
    }
    let t_tensors = take(&shapes, &values, &mut cursor);
    for (dst, src) in teacher.flat_mut().into_iter().zip(t_tensors) {
        *dst = src;
    }
    let opt_m = take(&shapes, &values, &mut cursor);
    let opt_v = take(&shapes, &values, &mut cursor);

    Ok((
        header.clone(),
        TrainState {
            student,
            teacher,
            opt_m,
            opt_v,
            step: header.step,
        },
    ))
}

#[derive(Clone, Debug, Serialize)]
struct RunHeaderRecord<'a> {
    kind: &'a str,
    config_hash: String,
    seed: u64,
    variant: ObjectiveVariant,
    total_steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_gen: f64,
    pub l_rep: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub fd_pixel: f64,
    pub fd_floor: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub final_fd: Option<f64>,
}

/// Evaluate the pixel-space Fréchet score of the EMA teacher against the
/// held-out split, plus the held-out self-distance noise floor.
pub fn evaluate_fd(config: &RunConfig, params: &ModelParams, step: u64) -> Result<(f64, f64)> {
    let grid = eval_grid(config.sample_steps, config.sampleshift)?;
    let n_eval = config.dataset.n_eval;
    let heldout = data::batch(
        &config.dataset,
        config.data_seed,
        Split::Heldout,
        &(0..n_eval).collect::<Vec<_>>(),
    )?;
    let eval_seed = config
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(DOM_EVAL | step);
    let fd = eval::score_model(
        params,
        &config.dataset,
        &heldout,
        config.eval_samples,
        &grid,
        FeatureSpace::Pixel,
        None,
        eval_seed,
    )?;
    let held_feats =
        eval::extract_features(&config.dataset, &heldout.x, FeatureSpace::Pixel, None)?;
    let floor = eval::self_distance(&held_feats)?;
    Ok((fd, floor))
}

/// Run (or resume) training. The output directory receives `config.toml`,
/// `metrics.jsonl`, periodic checkpoints, and `final.sfckpt`.
pub fn train_run(
    config: &RunConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
    force: bool,
) -> Result<RunOutcome> {
    config.validate()?;
    let metrics_path = out_dir.join("metrics.jsonl");
    if resume_from.is_none() && metrics_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already contains a run (pass force to overwrite)",
            out_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join("config.toml"))?;

    let (mut state, mut writer) = match resume_from {
        Some(ckpt) => {
            let (header, state) = load_checkpoint(ckpt)?;
            if header.config_hash != config.hash() {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} does not match run config {}",
                    header.config_hash,
                    config.hash()
                )));
            }
            if header.dtype != "f64" {
                return Err(Error::Config(
                    "only f64 checkpoints resume exactly; this one is f32".into(),
                ));
            }
            (state, MetricsWriter::append(&metrics_path)?)
        }
        None => {
            let mut init_rng = Philox::keyed(config.seed, DOM_INIT);
            let params = init_params(&config.model, &mut init_rng)?;
            let mut writer = MetricsWriter::create(&metrics_path)?;
            writer.write(&RunHeaderRecord {
                kind: "run",
                config_hash: config.hash(),
                seed: config.seed,
                variant: config.objective.variant,
                total_steps: config.total_steps,
            })?;
            (TrainState::new(params), writer)
        }
    };

    // the frozen encoder for external alignment, trained deterministically
    let encoder: Option<EncoderParams> =
        if config.objective.variant == ObjectiveVariant::RepaExternal {
            let mut enc_rng = Philox::keyed(config.seed, DOM_ENCODER);
            Some(train_probe_encoder(
                &config.dataset,
                config.data_seed,
                &config.model,
                0.95,
                2000,
                &mut enc_rng,
            )?)
        } else {
            None
        };

    let b = config.batch_size;
    let n_train = config.dataset.n_train;
    let mut final_fd = None;

    while state.step < config.total_steps {
        let step = state.step;
        let t0 = Instant::now();

        let indices: Vec<usize> = (0..b)
            .map(|i| (step as usize * b + i) % n_train)
            .collect();
        let batch = data::batch(&config.dataset, config.data_seed, Split::Train, &indices)?;

        let mut noise_rng = Philox::keyed(config.seed, DOM_NOISE | step);
        let numel = batch.x.numel();
        let x1 = Tensor::new(
            batch.x.shape().to_vec(),
            (0..numel).map(|_| noise_rng.normal()).collect(),
        )?;

        let mut plan_rng = Philox::keyed(config.seed, DOM_PLAN | step);
        let metrics = match train_step(
            &mut state,
            &batch,
            &x1,
            &config.objective,
            &config.distribution,
            &config.optimizer,
            encoder.as_ref(),
            &mut plan_rng,
        ) {
            Ok(m) => m,
            Err(e) => {
                // keep the last good state for diagnosis before bailing
                save_checkpoint(&out_dir.join("last_good.sfckpt"), config, &state, false)?;
                writer.flush()?;
                return Err(e);
            }
        };

        writer.write(&StepRecord {
            step: metrics.step,
            l_gen: metrics.l_gen,
            l_rep: metrics.l_rep,
            grad_norm: metrics.grad_norm,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })?;

        let at_end = state.step == config.total_steps;
        let eval_due =
            at_end || (config.eval_interval > 0 && state.step % config.eval_interval == 0);
        if eval_due && config.eval_samples > 0 {
            let t1 = Instant::now();
            let (fd, floor) = evaluate_fd(config, &state.teacher, state.step)?;
            final_fd = Some(fd);
            writer.write(&EvalRecord {
                step: state.step,
                fd_pixel: fd,
                fd_floor: floor,
                wall_ms: t1.elapsed().as_secs_f64() * 1e3,
            })?;
        }

        if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0 && !at_end
        {
            save_checkpoint(
                &out_dir.join(format!("step_{:06}.sfckpt", state.step)),
                config,
                &state,
                false,
            )?;
        }
    }
    writer.flush()?;

    let final_checkpoint = out_dir.join("final.sfckpt");
    save_checkpoint(&final_checkpoint, config, &state, false)?;

    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        final_step: state.step,
        final_checkpoint,
        metrics_path,
        final_fd,
    })
}
