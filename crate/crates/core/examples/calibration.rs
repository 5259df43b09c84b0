//! Temperature scaling by ECE minimisation on synthetic logits whose
//! softmax is calibrated at a known temperature.

use odst::calib::{ece_at, fit_temperature, grid_step_ratio};
use odst::model::softmax;
use rand::Rng;

fn main() -> odst::Result<()> {
    let k = 4;
    let injected = 2.5;
    let mut rng = odst::RngSeed(7).rng();
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..20_000 {
        let l: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = softmax(&l)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let y = (0..k).find(|&c| {
            acc += p[c];
            u < acc
        });
        labels.push(y.unwrap_or(k - 1));
        logits.extend(l.iter().map(|v| v * injected));
    }

    let fit = fit_temperature(&logits, k, &labels)?;
    println!("injected scale {injected}, fitted T {:.4}", fit.calibration.temperature());
    println!("grid step ratio {:.4}", grid_step_ratio());
    println!("ECE at T=1 {:.4}, after {:.4}", fit.ece_before, fit.ece_after);
    println!("ECE at the injected T {:.4}", ece_at(&logits, k, &labels, injected)?);
    Ok(())
}
