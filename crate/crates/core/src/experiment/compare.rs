use std::path::Path;

use log::info;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{run_experiment, DataChecksums, RunControl};
use crate::error::{Error, Result};
use crate::metrics::IterationReport;
use crate::rng::RngSeed;
use crate::train::Mode;

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub mode: Mode,
    pub seed: RngSeed,
    pub data: DataChecksums,
    pub history: Vec<IterationReport>,
}

impl CellResult {
    pub fn base(&self) -> &IterationReport {
        &self.history[0]
    }

    pub fn last(&self) -> &IterationReport {
        self.history.last().expect("history holds the base row")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub seeds: usize,
    pub base_test_error: Spread,
    pub final_test_error: Spread,
    pub final_auroc: Spread,
    pub final_selection_precision: Option<Spread>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub cells: Vec<CellResult>,
}

pub const COMPARE_FILE: &str = "compare.csv";

/// Runs every `(mode, seed)` cell in `out/<MODE>/seed<seed>`. Cells with
/// the same seed share every dataset; this is checked by checksum.
pub fn compare_modes(cfg: &ExperimentConfig, modes: &[Mode], seeds: &[u64], out: &Path) -> Result<Comparison> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one mode and one seed".into()));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        for &mode in modes {
            let cell_cfg = ExperimentConfig {
                mode,
                seed: RngSeed(seed),
                ..cfg.clone()
            };
            let dir = out.join(mode.name()).join(format!("seed{seed}"));
            let run = run_experiment(&cell_cfg, &dir, &RunControl::default())?;
            info!("{mode} seed {seed}: data checksums {:?}", run.state.data);
            cells.push(CellResult {
                mode,
                seed: RngSeed(seed),
                data: run.state.data,
                history: run.state.history,
            });
        }
        let same_seed: Vec<&CellResult> = cells.iter().filter(|c| c.seed == RngSeed(seed)).collect();
        if same_seed.iter().any(|c| c.data != same_seed[0].data) {
            return Err(Error::Precondition(format!("modes saw different data for seed {seed}")));
        }
    }

    let rows = modes
        .iter()
        .map(|&mode| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.mode == mode).collect();
            let col = |f: &dyn Fn(&CellResult) -> f64| Spread::of(&mine.iter().map(|c| f(c)).collect::<Vec<_>>()).expect("seeds nonempty");
            let precisions: Vec<f64> = mine.iter().filter_map(|c| c.last().selection_precision).collect();
            ComparisonRow {
                mode,
                seeds: mine.len(),
                base_test_error: col(&|c| c.base().test_error),
                final_test_error: col(&|c| c.last().test_error),
                final_auroc: col(&|c| c.last().auroc),
                final_selection_precision: Spread::of(&precisions),
            }
        })
        .collect();
    let cmp = Comparison { rows, cells };
    write_comparison(&out.join(COMPARE_FILE), &cmp)?;
    Ok(cmp)
}

pub fn write_comparison(path: &Path, cmp: &Comparison) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mode",
        "seeds",
        "base_test_error_mean",
        "base_test_error_std",
        "final_test_error_mean",
        "final_test_error_std",
        "final_auroc_mean",
        "final_auroc_std",
        "final_selection_precision_mean",
        "final_selection_precision_std",
    ])?;
    for r in &cmp.rows {
        let (pm, ps) = r
            .final_selection_precision
            .map_or((String::new(), String::new()), |s| (s.mean.to_string(), s.std.to_string()));
        w.write_record([
            r.mode.name().to_string(),
            r.seeds.to_string(),
            r.base_test_error.mean.to_string(),
            r.base_test_error.std.to_string(),
            r.final_test_error.mean.to_string(),
            r.final_test_error.std.to_string(),
            r.final_auroc.mean.to_string(),
            r.final_auroc.std.to_string(),
            pm,
            ps,
        ])?;
    }
    w.flush().map_err(Error::at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread() {
        assert_eq!(Spread::of(&[]), None);
        assert_eq!(Spread::of(&[2.0]).unwrap(), Spread { mean: 2.0, std: 0.0 });
        let s = Spread::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
