//! Central-difference check of the analytic gradient of the soft-label
//! cross-entropy for a small seeded network.

use odst::model::{grad_check, Example};
use odst::{ClassifierModel, RngSeed};
use rand::Rng;

fn main() -> odst::Result<()> {
    let model = ClassifierModel::init(&[2, 16, 16, 4], RngSeed(11))?;
    let mut rng = RngSeed(12).rng();
    let xs: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let ts: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let batch: Vec<Example<'_>> = xs.iter().zip(&ts).map(|(x, t)| Example::new(x, t)).collect();
    let report = grad_check(&model, &batch, 1e-6, 1e-5)?;
    println!(
        "{} parameters, max relative error {:.3e} at parameter {}, passed: {}",
        model.num_params(),
        report.max_relative_error,
        report.worst_param,
        report.passed
    );
    Ok(())
}
