//! ODST against standard self-training baselines on shared data.
//!
//! cargo run --release --example compare_modes -- [out_dir]

use std::path::PathBuf;

use odst::experiment::{compare_modes, ExperimentConfig};
use odst::{Mode, TrainConfig};

fn main() -> odst::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("odst_compare"), PathBuf::from);
    let cfg = ExperimentConfig {
        n: 2000,
        m: 50_000,
        iterations: 2,
        train: TrainConfig::default().with_epochs(40),
        ..ExperimentConfig::default()
    };
    let modes = [Mode::Odst, Mode::St, Mode::StOt];
    let cmp = compare_modes(&cfg, &modes, &[1, 2], &out)?;
    println!("{:<8} {:>10} {:>12} {:>10} {:>10}", "mode", "base err", "final err", "AUROC", "precision");
    for r in &cmp.rows {
        println!(
            "{:<8} {:>10.4} {:>7.4}±{:.4} {:>10.4} {:>10}",
            r.mode.name(),
            r.base_test_error.mean,
            r.final_test_error.mean,
            r.final_test_error.std,
            r.final_auroc.mean,
            r.final_selection_precision
                .map_or("-".to_string(), |s| format!("{:.4}", s.mean))
        );
    }
    for c in &cmp.cells {
        println!("{} seed {}: train checksum {:016x}", c.mode, c.seed.0, c.data.train);
    }
    Ok(())
}
