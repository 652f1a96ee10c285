//! Re-score saved fixture checkpoints under different sampling protocols.

use std::path::PathBuf;

use selfflow_core::data::{self, Split};
use selfflow_core::eval::{self, FeatureSpace};
use selfflow_core::schedules::eval_grid;
use selfflow_core::trainer::load_checkpoint;

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/tmp/acceptance_fixture"));
    let shifts: Vec<f64> = std::env::args()
        .nth(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0.75, 1.0, 1.78]);
    let steps: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(50);
    let n_samples: usize = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1024);

    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .expect("fixture directory")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("final.sfckpt").exists())
        .collect();
    dirs.sort();

    for dir in dirs {
        let (header, state) = match load_checkpoint(&dir.join("final.sfckpt")) {
            Ok(x) => x,
            Err(e) => {
                eprintln!("skip {}: {e}", dir.display());
                continue;
            }
        };
        let cfg = &header.config;
        let heldout = data::batch(
            &cfg.dataset,
            cfg.data_seed,
            Split::Heldout,
            &(0..cfg.dataset.n_eval).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut line = format!("{:24}", dir.file_name().unwrap().to_string_lossy());
        for &shift in &shifts {
            let grid = eval_grid(steps, shift).unwrap();
            let fd = eval::score_model(
                &state.teacher,
                &cfg.dataset,
                &heldout,
                n_samples,
                &grid,
                FeatureSpace::Pixel,
                None,
                777,
            )
            .unwrap();
            line.push_str(&format!("  shift{shift}: {fd:8.3}"));
        }
        println!("{line}");
    }
}
