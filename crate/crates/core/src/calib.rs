//! Temperature scaling fitted by minimizing the expected calibration error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_tempered, ClassifierModel};
use crate::prob::{argmax, ProbVector};
use crate::data::Features;

pub const MIN_TEMPERATURE: f64 = 0.05;
pub const MAX_TEMPERATURE: f64 = 20.0;
pub const GRID_POINTS: usize = 400;
pub const ECE_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    temperature: f64,
}

impl Calibration {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&temperature) {
            return Err(Error::Precondition(format!(
                "temperature {temperature} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            )));
        }
        Ok(Self { temperature })
    }

    pub fn identity() -> Self {
        Self { temperature: 1.0 }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn apply(&self, logits: &[f64]) -> Result<ProbVector> {
        apply_temperature(logits, self.temperature)
    }

    /// Calibrated probabilities for every row, in row order.
    pub fn predict_all(&self, model: &ClassifierModel, x: &Features) -> Result<Vec<ProbVector>> {
        let k = model.num_classes();
        model
            .forward_all(x)?
            .chunks_exact(k)
            .map(|l| self.apply(l))
            .collect()
    }

    /// Sidecar file next to a model checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(Error::at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
        let raw: Calibration = serde_json::from_str(&text)?;
        Calibration::new(raw.temperature)
    }
}

/// `softmax(logits / t)`.
pub fn apply_temperature(logits: &[f64], t: f64) -> Result<ProbVector> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("temperature {t} must be > 0")));
    }
    softmax_tempered(logits, t)
}

/// Bin index for a confidence: bins are `(b/B, (b+1)/B]`, with 0 in bin 0.
fn bin_of(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1)
}

/// Expected calibration error with `bins` equal-width confidence bins.
pub fn ece(predictions: &[(ProbVector, usize)], bins: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    ece_from_pairs(
        predictions.iter().map(|(p, y)| (p.max(), p.argmax() == *y)),
        predictions.len(),
        bins,
    )
}

/// ECE from `(confidence, correct)` pairs.
pub fn ece_from_pairs(pairs: impl Iterator<Item = (f64, bool)>, n: usize, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Precondition("bins must be >= 1".into()));
    }
    if n == 0 {
        return Err(Error::Empty("prediction list"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (c, ok) in pairs {
        let b = bin_of(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        correct[b] += usize::from(ok);
    }
    let n = n as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

/// ECE of `softmax(logits / t)` against `labels`.
pub fn ece_at(logits: &[f64], k: usize, labels: &[usize], t: f64) -> Result<f64> {
    let pairs = logits.chunks_exact(k).zip(labels).map(|(l, &y)| {
        let p = apply_temperature(l, t).expect("t > 0");
        (p.max(), argmax(l) == y)
    });
    ece_from_pairs(pairs, labels.len(), ECE_BINS)
}

/// Log-spaced grid over `[MIN_TEMPERATURE, MAX_TEMPERATURE]`.
pub fn temperature_grid() -> Vec<f64> {
    let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    (0..GRID_POINTS)
        .map(|i| {
            (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64)
                .exp()
                .clamp(MIN_TEMPERATURE, MAX_TEMPERATURE)
        })
        .collect()
}

/// Ratio between neighbouring grid temperatures.
pub fn grid_step_ratio() -> f64 {
    ((MAX_TEMPERATURE / MIN_TEMPERATURE).ln() / (GRID_POINTS - 1) as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFit {
    pub calibration: Calibration,
    pub ece_before: f64,
    pub ece_after: f64,
}

/// Fits the temperature minimizing ECE over the log grid (plus `T = 1`),
/// then refines around the best grid point with one golden-section pass
/// in log-temperature. The refined value is kept only if it does not
/// raise the ECE, so `ece_after <= ece_before` always holds.
pub fn fit_temperature(logits: &[f64], k: usize, labels: &[usize]) -> Result<CalibrationFit> {
    if labels.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if logits.len() != labels.len() * k {
        return Err(Error::Dimension {
            expected: labels.len() * k,
            got: logits.len(),
        });
    }
    let eval = |t: f64| ece_at(logits, k, labels, t);
    let ece_before = eval(1.0)?;
    let grid = temperature_grid();
    let mut best = (ece_before, 1.0);
    let mut best_idx = None;
    for (i, &t) in grid.iter().enumerate() {
        let e = eval(t)?;
        if e < best.0 {
            best = (e, t);
            best_idx = Some(i);
        }
    }

    if let Some(i) = best_idx {
        let lo = grid[i.saturating_sub(1)].ln();
        let hi = grid[(i + 1).min(grid.len() - 1)].ln();
        let t = golden_section(lo, hi, 24, |lt| eval(lt.exp()).unwrap_or(f64::INFINITY)).exp();
        let t = t.clamp(MIN_TEMPERATURE, MAX_TEMPERATURE);
        let e = eval(t)?;
        if e < best.0 {
            best = (e, t);
        }
    }

    Ok(CalibrationFit {
        calibration: Calibration::new(best.1)?,
        ece_before,
        ece_after: best.0,
    })
}

/// Fits on a model's logits over the in-distribution validation set.
pub fn fit_model(model: &ClassifierModel, x: &Features, labels: &[usize]) -> Result<CalibrationFit> {
    let logits = model.forward_all(x)?;
    fit_temperature(&logits, model.num_classes(), labels)
}

fn golden_section(mut a: f64, mut b: f64, iters: usize, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}
