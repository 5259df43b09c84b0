//! Runs the full loop (base teacher plus three students) on a reduced
//! default world and writes CSVs and plots.
//!
//! cargo run --release --example odst_loop -- [out_dir]

use std::path::PathBuf;

use odst::experiment::{ExperimentConfig, RunControl};
use odst::{run_experiment, Mode, RngSeed, TrainConfig};

fn main() -> odst::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("odst_loop"), PathBuf::from);
    let cfg = ExperimentConfig {
        seed: RngSeed(1),
        n: 2000,
        m: 50_000,
        mode: Mode::Odst,
        train: TrainConfig::default().with_epochs(60),
        ..ExperimentConfig::default()
    };
    let run = run_experiment(&cfg, &out, &RunControl::default())?;
    for r in &run.state.history {
        println!(
            "t={} k={:?} error {:.4} AUROC {:.4} far AUROC {:.4} T {:.3} precision {:?} max v {:?}",
            r.iteration,
            r.k,
            r.test_error,
            r.auroc,
            r.auroc_far.unwrap_or(f64::NAN),
            r.temperature,
            r.selection_precision,
            r.max_rest_confidence
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
