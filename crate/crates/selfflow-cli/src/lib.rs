//! Command implementations behind the `selfflow` binary.
//!
//! Everything here is a thin orchestration layer over `selfflow_core`:
//! dataset generation, training runs, sampling, evaluation, probing, and
//! the ablation suites with their CSV/markdown summaries.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use selfflow_core::config::RunConfig;
use selfflow_core::data::{self, DatasetSpec, Split};
use selfflow_core::dualts::PlanMode;
use selfflow_core::error::{Error, Result};
use selfflow_core::eval::{self, FeatureSpace};
use selfflow_core::metrics::MetricsWriter;
use selfflow_core::model::TransformerConfig;
use selfflow_core::objectives::{train_probe_encoder, ObjectiveConfig, ObjectiveVariant};
use selfflow_core::rng::Philox;
use selfflow_core::schedules::eval_grid;
use selfflow_core::tensor::Tensor;
use selfflow_core::trainer::{load_checkpoint, train_run};

/// Worker cap honored by the ablation suites.
pub fn max_threads() -> usize {
    std::env::var("SELFFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

pub fn cmd_gen_data(
    spec_path: Option<&Path>,
    seed: u64,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let spec: DatasetSpec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => DatasetSpec::toy_default(seed, 8192, 2048),
    };
    spec.validate()?;
    let train_path = out_dir.join("train.sfdata");
    if train_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            train_path.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("spec.toml"),
        toml::to_string_pretty(&spec).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    data::write_dataset(&train_path, &spec, seed, Split::Train, spec.n_train)?;
    data::write_dataset(
        &out_dir.join("heldout.sfdata"),
        &spec,
        seed,
        Split::Heldout,
        spec.n_eval,
    )?;
    println!(
        "wrote {} train + {} heldout samples to {} (spec hash {})",
        spec.n_train,
        spec.n_eval,
        out_dir.display(),
        spec.spec_hash()
    );
    Ok(())
}

pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    objective_override: Option<ObjectiveVariant>,
    resume: Option<&Path>,
    force: bool,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(variant) = objective_override {
        config.objective = ObjectiveConfig::for_variant(variant, &config.model);
    }
    let out = train_run(&config, out_dir, resume, force)?;
    println!(
        "trained {} steps (config hash {}); final checkpoint {}",
        out.final_step,
        config.hash(),
        out.final_checkpoint.display()
    );
    if let Some(fd) = out.final_fd {
        println!("final fd_pixel = {fd:.4}");
    }
    Ok(())
}

/// Render a batch of [−1,1] images as one binary PGM contact sheet. The
/// producing config hash rides along as a PGM comment.
pub fn write_pgm_grid(
    path: &Path,
    images: &[Vec<f64>],
    side: usize,
    config_hash: &str,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArg("no images to render".into()));
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let pad = 1usize;
    let w = cols * (side + pad) + pad;
    let h = rows * (side + pad) + pad;
    let mut canvas = vec![32u8; w * h];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = (i / cols, i % cols);
        for y in 0..side {
            for x in 0..side {
                let v = ((img[y * side + x] + 1.0) * 0.5 * 255.0).clamp(0.0, 255.0) as u8;
                let py = pad + r0 * (side + pad) + y;
                let px = pad + c0 * (side + pad) + x;
                canvas[py * w + px] = v;
            }
        }
    }
    let mut out = Vec::with_capacity(canvas.len() + 64);
    out.extend_from_slice(format!("P5\n# config {config_hash}\n{w} {h}\n255\n").as_bytes());
    out.extend_from_slice(&canvas);
    std::fs::write(path, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    steps: usize,
    sampleshift: f64,
    class: Option<usize>,
    out: &Path,
    pgm: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let (header, state) = load_checkpoint(checkpoint)?;
    let cfg = &header.config;
    if let Some(c) = class {
        if c >= cfg.model.num_classes {
            return Err(Error::Config(format!(
                "class {c} out of range for {} classes",
                cfg.model.num_classes
            )));
        }
    }
    let grid = eval_grid(steps, sampleshift)?;
    // the EMA teacher is the sampling model
    let params = &state.teacher;
    let tokens = sample_class_tokens(params, n, &grid, class, seed)?;

    // persist in the dataset format so downstream tools can read it
    let mut writer = std::io::BufWriter::new(std::fs::File::create(out)?);
    let file_header = data::DatasetHeader {
        format_version: data::FORMAT_VERSION,
        spec: cfg.dataset.clone(),
        seed,
        split: Split::Heldout,
        n,
        spec_hash: header.config_hash.clone(),
    };
    serde_json::to_writer(&mut writer, &file_header).map_err(|e| Error::Format(e.to_string()))?;
    std::io::Write::write_all(&mut writer, b"\n")?;
    for &v in tokens.data() {
        std::io::Write::write_all(&mut writer, &(v as f32).to_le_bytes())?;
    }
    for i in 0..n {
        let label = class.unwrap_or(i % cfg.model.num_classes) as u16;
        std::io::Write::write_all(&mut writer, &label.to_le_bytes())?;
    }
    std::io::Write::flush(&mut writer)?;

    if let Some(pgm_path) = pgm {
        let images: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = selfflow_core::tensor::slice(&tokens, 0, i, 1)?;
                let t = selfflow_core::tensor::reshape(&t, vec![data::TOKENS, data::TOKEN_DIM])?;
                data::tokens_to_pixels(&cfg.dataset, &t)
            })
            .collect::<Result<_>>()?;
        write_pgm_grid(pgm_path, &images, data::IMAGE_SIZE, &header.config_hash)?;
    }
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn sample_class_tokens(
    params: &selfflow_core::model::ModelParams,
    n: usize,
    grid: &selfflow_core::schedules::EvalGrid,
    class: Option<usize>,
    seed: u64,
) -> Result<Tensor> {
    let cfg = &params.config;
    let (tokens, dim, k) = (cfg.tokens, cfg.token_dim, cfg.num_classes);
    let chunk = 64usize;
    let mut out = Vec::with_capacity(n * tokens * dim);
    let mut produced = 0usize;
    while produced < n {
        let b = chunk.min(n - produced);
        let mut rng = Philox::keyed(seed, 0x5a3e_0000 ^ produced as u64);
        let x1 = Tensor::new(
            vec![b, tokens, dim],
            (0..b * tokens * dim).map(|_| rng.normal()).collect(),
        )?;
        let labels: Vec<usize> = (0..b)
            .map(|i| class.unwrap_or((produced + i) % k))
            .collect();
        let sample = selfflow_core::flow::euler_sample(
            |x, t, labels| {
                let tau = Tensor::full(&x.shape()[..2], t);
                let (v, _) = selfflow_core::model::forward_eval(params, x, &tau, labels)?;
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

#[derive(Serialize)]
struct EvalOutRecord {
    step: u64,
    fd_pixel: Option<f64>,
    fd_probe: Option<f64>,
    fd_floor: f64,
    config_hash: String,
}

pub fn cmd_eval(
    checkpoint: &Path,
    dataset: Option<&Path>,
    n: usize,
    space: FeatureSpace,
    seed: u64,
) -> Result<()> {
    let (header, state) = load_checkpoint(checkpoint)?;
    let cfg = &header.config;
    let heldout = match dataset {
        Some(path) => {
            // rejected if the file's spec does not match the checkpoint's
            let (_, tb) = data::read_dataset(path, Some(&cfg.dataset))?;
            tb
        }
        None => data::batch(
            &cfg.dataset,
            cfg.data_seed,
            Split::Heldout,
            &(0..cfg.dataset.n_eval).collect::<Vec<_>>(),
        )?,
    };
    let grid = eval_grid(cfg.sample_steps, cfg.sampleshift)?;
    let encoder = match space {
        FeatureSpace::ProbeEncoder => {
            let mut rng = Philox::keyed(cfg.seed, 0xE5C0_DE00);
            Some(train_probe_encoder(
                &cfg.dataset,
                cfg.data_seed,
                &cfg.model,
                0.95,
                2000,
                &mut rng,
            )?)
        }
        FeatureSpace::Pixel => None,
    };
    let fd = eval::score_model(
        &state.teacher,
        &cfg.dataset,
        &heldout,
        n,
        &grid,
        space,
        encoder.as_ref(),
        seed,
    )?;
    let held_feats = eval::extract_features(&cfg.dataset, &heldout.x, space, encoder.as_ref())?;
    let floor = eval::self_distance(&held_feats)?;
    let (fd_pixel, fd_probe) = match space {
        FeatureSpace::Pixel => (Some(fd), None),
        FeatureSpace::ProbeEncoder => (None, Some(fd)),
    };
    println!("step {} fd = {fd:.4} (noise floor {floor:.4})", header.step);
    if let Some(dir) = checkpoint.parent() {
        let mut w = MetricsWriter::append(&dir.join("metrics.jsonl"))?;
        w.write(&EvalOutRecord {
            step: header.step,
            fd_pixel,
            fd_probe,
            fd_floor: floor,
            config_hash: header.config_hash.clone(),
        })?;
        w.flush()?;
    }
    Ok(())
}

fn probe_record(step: u64, tau: f64, accs: &[f64], config_hash: &str) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    map.insert("step".into(), step.into());
    map.insert("tau_probe".into(), tau.into());
    for (d, &acc) in accs.iter().enumerate() {
        map.insert(format!("probe_acc_layer_{d}"), acc.into());
    }
    map.insert("config_hash".into(), config_hash.into());
    serde_json::Value::Object(map)
}

pub fn cmd_probe(checkpoint: &Path, dataset: Option<&Path>, tau: f64, l2: f64) -> Result<()> {
    let (header, state) = load_checkpoint(checkpoint)?;
    let cfg = &header.config;
    let full = match dataset {
        Some(path) => data::read_dataset(path, Some(&cfg.dataset))?.1,
        None => data::batch(
            &cfg.dataset,
            cfg.data_seed,
            Split::Heldout,
            &(0..cfg.dataset.n_eval).collect::<Vec<_>>(),
        )?,
    };
    // disjoint probe-train / probe-eval halves
    let m = full.batch_size();
    let half = m / 2;
    let take = |from: usize, len: usize| -> Result<selfflow_core::flow::TokenBatch> {
        let x = selfflow_core::tensor::slice(&full.x, 0, from, len)?;
        let labels = full.labels.as_ref().expect("labeled")[from..from + len].to_vec();
        selfflow_core::flow::TokenBatch::new(x, Some(labels))
    };
    let probe_train = take(0, half)?;
    let probe_eval = take(half, m - half)?;
    let accs = eval::probe_all_layers(&state.teacher, &probe_train, &probe_eval, tau, l2, cfg.seed)?;
    for (d, acc) in accs.iter().enumerate() {
        println!("layer {d}: probe accuracy {acc:.4}");
    }
    if let Some(dir) = checkpoint.parent() {
        let mut w = MetricsWriter::append(&dir.join("metrics.jsonl"))?;
        w.write(&probe_record(header.step, tau, &accs, &header.config_hash))?;
        w.flush()?;
    }
    Ok(())
}

/// A named objective layout inside a suite.
pub struct SuiteEntry {
    pub name: String,
    pub config: RunConfig,
}

/// The preset ablation suites.
#[allow(clippy::too_many_arguments)]
pub fn suite_entries(
    suite: &str,
    seeds: u64,
    base_model: &TransformerConfig,
    steps: u64,
    batch_size: usize,
    eval_samples: usize,
    base_seed: u64,
) -> Result<Vec<SuiteEntry>> {
    let mk = |name: &str, variant: ObjectiveVariant, plan: Option<PlanMode>, model: &TransformerConfig, seed: u64| {
        let mut cfg = RunConfig::toy_default(variant, seed);
        cfg.model = model.clone();
        cfg.objective = ObjectiveConfig::for_variant(variant, model);
        if let Some(p) = plan {
            cfg.objective.plan_mode = p;
        }
        cfg.batch_size = batch_size;
        cfg.total_steps = steps;
        cfg.eval_interval = (steps / 4).max(1);
        cfg.eval_samples = eval_samples;
        SuiteEntry {
            name: name.to_string(),
            config: cfg,
        }
    };

    let mut entries = Vec::new();
    match suite {
        "fig3b" => {
            for seed in 0..seeds {
                let s = base_seed + seed;
                entries.push(mk(&format!("vanilla/s{seed}"), ObjectiveVariant::Vanilla, None, base_model, s));
                entries.push(mk(
                    &format!("dual_no_ssl/s{seed}"),
                    ObjectiveVariant::Vanilla,
                    Some(PlanMode::Dual),
                    base_model,
                    s,
                ));
                entries.push(mk(
                    &format!("full_mask/s{seed}"),
                    ObjectiveVariant::Vanilla,
                    Some(PlanMode::FullMask),
                    base_model,
                    s,
                ));
                entries.push(mk(
                    &format!("diffusion_forcing/s{seed}"),
                    ObjectiveVariant::Vanilla,
                    Some(PlanMode::DiffusionForcing),
                    base_model,
                    s,
                ));
            }
        }
        "fig10a" => {
            for seed in 0..seeds {
                let s = base_seed + seed;
                entries.push(mk(&format!("selfflow/s{seed}"), ObjectiveVariant::SelfFlow, None, base_model, s));
                entries.push(mk(
                    &format!("no_rep_loss/s{seed}"),
                    ObjectiveVariant::Vanilla,
                    Some(PlanMode::Dual),
                    base_model,
                    s,
                ));
                entries.push(mk(
                    &format!("no_mask/s{seed}"),
                    ObjectiveVariant::SelfFlowNoMask,
                    None,
                    base_model,
                    s,
                ));
                entries.push(mk(
                    &format!("near_dual/s{seed}"),
                    ObjectiveVariant::SelfFlowNearDual,
                    None,
                    base_model,
                    s,
                ));
                entries.push(mk(&format!("l1/s{seed}"), ObjectiveVariant::SelfFlowL1, None, base_model, s));
            }
        }
        "scaling" => {
            for &depth in &[4usize, 6, 8] {
                let mut model = base_model.clone();
                model.depth = depth;
                for seed in 0..seeds {
                    let s = base_seed + seed;
                    entries.push(mk(
                        &format!("vanilla_d{depth}/s{seed}"),
                        ObjectiveVariant::Vanilla,
                        None,
                        &model,
                        s,
                    ));
                    entries.push(mk(
                        &format!("selfflow_d{depth}/s{seed}"),
                        ObjectiveVariant::SelfFlow,
                        None,
                        &model,
                        s,
                    ));
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown suite '{other}' (expected fig3b, fig10a, or scaling)"
            )))
        }
    }
    Ok(entries)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub fd: f64,
    pub config_hash: String,
}

/// Run every entry (work-stealing across up to SELFFLOW_THREADS workers),
/// then write `summary.csv` and `report.md` under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate(
    suite: &str,
    seeds: u64,
    out_dir: &Path,
    model: &TransformerConfig,
    steps: u64,
    batch_size: usize,
    eval_samples: usize,
    force: bool,
) -> Result<()> {
    let entries = suite_entries(suite, seeds, model, steps, batch_size, eval_samples, 9000)?;
    let csv_path = out_dir.join("summary.csv");
    if csv_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            csv_path.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let queue: Mutex<VecDeque<SuiteEntry>> = Mutex::new(entries.into());
    let rows: Mutex<Vec<SuiteRow>> = Mutex::new(Vec::new());
    let workers = max_threads();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let entry = match queue.lock().unwrap().pop_front() {
                        Some(e) => e,
                        None => return Ok(()),
                    };
                    let dir = out_dir.join(entry.name.replace('/', "_"));
                    let outcome = train_run(&entry.config, &dir, None, true)?;
                    let hash = entry.config.hash();
                    // collect every eval record from the run's metrics
                    let text = std::fs::read_to_string(&outcome.metrics_path)?;
                    let mut collected = Vec::new();
                    for line in text.lines() {
                        if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                            if let (Some(step), Some(fd)) =
                                (v.get("step").and_then(|s| s.as_u64()), v.get("fd_pixel").and_then(|f| f.as_f64()))
                            {
                                let (variant, seed) = entry
                                    .name
                                    .split_once("/s")
                                    .map(|(v, s)| (v.to_string(), s.parse().unwrap_or(0)))
                                    .unwrap_or((entry.name.clone(), 0));
                                collected.push(SuiteRow {
                                    variant,
                                    seed,
                                    step,
                                    fd,
                                    config_hash: hash.clone(),
                                });
                            }
                        }
                    }
                    rows.lock().unwrap().extend(collected);
                }
            }));
        }
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;

    let mut rows = rows.into_inner().unwrap();
    rows.sort_by(|a, b| (&a.variant, a.seed, a.step).cmp(&(&b.variant, b.seed, b.step)));
    write_suite_summary(out_dir, suite, &rows)?;
    println!("suite {suite}: {} rows -> {}", rows.len(), csv_path.display());
    Ok(())
}

pub fn write_suite_summary(out_dir: &Path, suite: &str, rows: &[SuiteRow]) -> Result<()> {
    use std::io::Write;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("summary.csv"))?);
    writeln!(csv, "variant,seed,step,fd,config_hash")?;
    for r in rows {
        writeln!(csv, "{},{},{},{},{}", r.variant, r.seed, r.step, r.fd, r.config_hash)?;
    }
    csv.flush()?;

    // median final-step fd per variant
    let mut by_variant: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let final_step = rows.iter().map(|r| r.step).max().unwrap_or(0);
    for r in rows.iter().filter(|r| r.step == final_step) {
        by_variant.entry(r.variant.clone()).or_default().push(r.fd);
    }
    let mut md = String::new();
    md.push_str(&format!("# Ablation suite `{suite}`\n\n"));
    md.push_str(&format!("Final step: {final_step}\n\n"));
    md.push_str("| variant | seeds | median fd | min | max |\n");
    md.push_str("|---|---|---|---|---|\n");
    for (variant, fds) in &mut by_variant {
        fds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = median_of(fds);
        md.push_str(&format!(
            "| {variant} | {} | {median:.4} | {:.4} | {:.4} |\n",
            fds.len(),
            fds.first().unwrap(),
            fds.last().unwrap()
        ));
    }
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    md.push_str(&format!("\nRun config hashes: {}\n", hashes.join(", ")));
    std::fs::write(out_dir.join("report.md"), md)?;
    Ok(())
}

pub fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Process exit code for an error, per the documented convention:
/// 2 config, 3 numerical, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArg(_) | Error::ShapeMismatch { .. } => 2,
        Error::Numerical(_) | Error::NonFinite(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_compositions() {
        let model = TransformerConfig::toy_default();
        let fig3b = suite_entries("fig3b", 2, &model, 100, 4, 64, 1).unwrap();
        let names: Vec<&str> = fig3b
            .iter()
            .map(|e| e.name.split_once('/').unwrap().0)
            .collect();
        assert_eq!(
            &names[..4],
            &["vanilla", "dual_no_ssl", "full_mask", "diffusion_forcing"]
        );
        assert_eq!(fig3b.len(), 8);

        let fig10a = suite_entries("fig10a", 1, &model, 100, 4, 64, 1).unwrap();
        let names: Vec<&str> = fig10a
            .iter()
            .map(|e| e.name.split_once('/').unwrap().0)
            .collect();
        assert_eq!(
            names,
            vec!["selfflow", "no_rep_loss", "no_mask", "near_dual", "l1"]
        );

        let scaling = suite_entries("scaling", 1, &model, 100, 4, 64, 1).unwrap();
        assert_eq!(scaling.len(), 6);

        assert!(suite_entries("nope", 1, &model, 100, 4, 64, 1).is_err());
    }

    #[test]
    fn median_edges() {
        assert_eq!(median_of(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median_of(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    #[test]
    fn exit_codes_map_kinds() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
        assert_eq!(exit_code(&Error::Format("x".into())), 4);
    }
}
