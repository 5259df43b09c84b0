//! Trains an outlier-exposure teacher on the default world and compares it
//! with the Bayes-optimal base predictor.
//!
//! cargo run --release --example base_teacher -- [seed] [epochs]

use std::time::Instant;

use odst::calib::{fit_model, Calibration};
use odst::data::Features;
use odst::oracle::{bounding_box, grid_2d, oracle_gap, OracleTarget};
use odst::train::{classification_error, train_base};
use odst::{Mode, RngSeed, TrainConfig, WorldSpec};

fn main() -> odst::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seed = RngSeed(args.first().copied().unwrap_or(1));
    let epochs = args.get(1).copied().unwrap_or(200) as usize;

    let world = WorldSpec::default_ring().compile()?;
    let t = world.sample_labeled(4000, seed.derive("train", 0))?;
    let u = world.sample_unlabeled(200_000, seed.derive("unlabeled", 0))?;
    let (in_val, _) = world.make_validation_sets(2000, 10, seed.derive("val", 0))?;
    let test = world.sample_test(10_000, seed.derive("test", 0))?;

    let cfg = TrainConfig {
        mode: Mode::BaseOe,
        seed: seed.derive("model", 0),
        ..TrainConfig::default()
    }
    .with_epochs(epochs);
    let start = Instant::now();
    let out = train_base(&t, u.features(), Some(&in_val), &cfg)?;
    println!("trained {} epochs in {:.1?}, picked epoch {}", epochs, start.elapsed(), out.selected_epoch);
    println!("test error {:.4}", classification_error(&out.model, &test)?);

    let (lo, hi) = bounding_box(u.features())?;
    let grid = grid_2d([lo[0], lo[1]], [hi[0], hi[1]], 101);
    let fresh = world.sample_unlabeled(10_000, seed.derive("oracle_points", 0))?;
    let id = Calibration::identity();
    let fit = fit_model(&out.model, in_val.features(), in_val.labels())?;
    for (name, pts) in [("grid", &grid), ("p_all samples", fresh.features())] {
        let gap = oracle_gap(&out.model, &id, &world, pts, OracleTarget::Base)?;
        let gap_cal = oracle_gap(&out.model, &fit.calibration, &world, pts, OracleTarget::Base)?;
        println!("{name:>14}: mean L1 gap {gap:.4} (raw), {gap_cal:.4} (T = {:.3})", fit.calibration.temperature());
    }
    let mut both = Features::empty(2);
    for row in grid.rows().chain(fresh.features().rows()) {
        both.push(row)?;
    }
    println!("      combined: {:.4}", oracle_gap(&out.model, &id, &world, &both, OracleTarget::Base)?);
    Ok(())
}
