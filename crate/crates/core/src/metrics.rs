//! Evaluation: test error, confidence-based OOD AUROC, and selection
//! quality measured against the hidden provenance of the pool.

use serde::{Deserialize, Serialize};

use crate::calib::Calibration;
use crate::data::{LabeledSet, Provenance};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::select::SelectionResult;

/// Fraction of argmax misclassifications of the calibrated model.
pub fn test_error(model: &ClassifierModel, calib: &Calibration, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let preds = calib.predict_all(model, test.features())?;
    let wrong = preds
        .iter()
        .zip(test.labels())
        .filter(|(p, &y)| p.argmax() != y)
        .count();
    Ok(wrong as f64 / test.len() as f64)
}

/// Twice the Mann-Whitney U statistic of `pos` over `neg` (ties count
/// one half), computed from average ranks. Exact integer.
pub fn mann_whitney_u2(pos: &[f64], neg: &[f64]) -> Result<u128> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("AUROC score set"));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN confidence".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // a tie group at 0-based [i, j) has average rank (i + 1 + j) / 2
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let in_group = all[i..j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += in_group * (i + 1 + j) as u128;
        i = j;
    }
    let n = pos.len() as u128;
    Ok(rank_sum2 - n * (n + 1))
}

/// Probability that a random in-distribution confidence exceeds a random
/// OOD confidence, ties counted one half.
pub fn auroc(in_conf: &[f64], ood_conf: &[f64]) -> Result<f64> {
    let u2 = mann_whitney_u2(in_conf, ood_conf)?;
    Ok(u2 as f64 / (2 * in_conf.len() as u128 * ood_conf.len() as u128) as f64)
}

/// Fraction of unique selected samples that truly come from the
/// in-distribution, and the fraction of the pool's in-distribution samples
/// that were selected. `None` where undefined.
pub fn selection_precision(selection: &SelectionResult, provenance: &[Provenance]) -> (Option<f64>, Option<f64>) {
    let selected = selection.entries.len();
    let selected_in = selection
        .entries
        .iter()
        .filter(|e| provenance[e.index].in_distribution)
        .count();
    let pool_in = provenance.iter().filter(|p| p.in_distribution).count();
    let precision = (selected > 0).then(|| selected_in as f64 / selected as f64);
    let recall = (pool_in > 0).then(|| selected_in as f64 / pool_in as f64);
    (precision, recall)
}

/// Among selected in-distribution samples, the fraction whose pseudo-label
/// class equals the generating class.
pub fn label_accuracy(selection: &SelectionResult, provenance: &[Provenance]) -> Option<f64> {
    let (mut total, mut right) = (0usize, 0usize);
    for e in &selection.entries {
        if let Some(true_class) = provenance[e.index].class() {
            total += 1;
            right += usize::from(true_class == e.class);
        }
    }
    (total > 0).then(|| right as f64 / total as f64)
}

/// Metrics of the model `f_t`; the selection fields describe the
/// selection that produced it (absent for the base model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub mode: String,
    pub test_error: f64,
    pub auroc: f64,
    pub auroc_far: Option<f64>,
    pub ece_before: f64,
    pub ece_after: f64,
    pub temperature: f64,
    pub k: Option<usize>,
    pub accepted_per_class: Vec<usize>,
    pub selected_total: usize,
    pub selection_precision: Option<f64>,
    pub selection_recall_in_pool: Option<f64>,
    pub label_accuracy: Option<f64>,
    pub max_rest_confidence: Option<f64>,
}

/// Column order of the metrics CSV.
pub const REPORT_COLUMNS: [&str; 15] = [
    "iteration",
    "mode",
    "test_error",
    "auroc",
    "auroc_far",
    "ece_before",
    "ece_after",
    "temperature",
    "k",
    "accepted_per_class",
    "selected_total",
    "selection_precision",
    "selection_recall_in_pool",
    "label_accuracy",
    "max_rest_confidence",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn parse<T: std::str::FromStr>(s: &str, col: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("column {col}: cannot parse `{s}`")))
}

fn parse_opt<T: std::str::FromStr>(s: &str, col: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(s, col).map(Some)
    }
}

impl IterationReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [Some(self.test_error), Some(self.auroc), self.auroc_far, Some(self.ece_before), Some(self.ece_after)]
            .into_iter()
            .chain([self.selection_precision, self.selection_recall_in_pool, self.label_accuracy])
            .flatten();
        for r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Domain(format!("rate {r} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// CSV fields in [`REPORT_COLUMNS`] order. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.mode.clone(),
            self.test_error.to_string(),
            self.auroc.to_string(),
            opt(self.auroc_far),
            self.ece_before.to_string(),
            self.ece_after.to_string(),
            self.temperature.to_string(),
            opt(self.k),
            self.accepted_per_class
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            self.selected_total.to_string(),
            opt(self.selection_precision),
            opt(self.selection_recall_in_pool),
            opt(self.label_accuracy),
            opt(self.max_rest_confidence),
        ]
    }

    pub fn from_record(rec: &[&str]) -> Result<Self> {
        if rec.len() != REPORT_COLUMNS.len() {
            return Err(Error::Format(format!(
                "expected {} columns, got {}",
                REPORT_COLUMNS.len(),
                rec.len()
            )));
        }
        let c = &REPORT_COLUMNS;
        Ok(Self {
            iteration: parse(rec[0], c[0])?,
            mode: rec[1].to_string(),
            test_error: parse(rec[2], c[2])?,
            auroc: parse(rec[3], c[3])?,
            auroc_far: parse_opt(rec[4], c[4])?,
            ece_before: parse(rec[5], c[5])?,
            ece_after: parse(rec[6], c[6])?,
            temperature: parse(rec[7], c[7])?,
            k: parse_opt(rec[8], c[8])?,
            accepted_per_class: if rec[9].is_empty() {
                Vec::new()
            } else {
                rec[9].split(';').map(|s| parse(s, c[9])).collect::<Result<_>>()?
            },
            selected_total: parse(rec[10], c[10])?,
            selection_precision: parse_opt(rec[11], c[11])?,
            selection_recall_in_pool: parse_opt(rec[12], c[12])?,
            label_accuracy: parse_opt(rec[13], c[13])?,
            max_rest_confidence: parse_opt(rec[14], c[14])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::select::SelectedEntry;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 5], &[0.4; 3]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[f64::NAN], &[0.1]).is_err());
    }

    fn prov(in_dist: bool, component: u32) -> Provenance {
        Provenance {
            component,
            in_distribution: in_dist,
        }
    }

    fn selection(entries: &[(usize, usize)]) -> SelectionResult {
        SelectionResult {
            k: 1,
            entries: entries
                .iter()
                .map(|&(index, class)| SelectedEntry { index, class, copies: 1 })
                .collect(),
            per_class: Vec::new(),
            warnings: Vec::new(),
        }
    }

    #[test]
    fn precision_and_recall() {
        let p = vec![prov(true, 0), prov(true, 1), prov(false, 7), prov(true, 1)];
        let sel = selection(&[(0, 0), (1, 1)]);
        assert_eq!(selection_precision(&sel, &p), (Some(1.0), Some(2.0 / 3.0)));
        let sel = selection(&[(0, 0), (2, 1)]);
        assert_eq!(selection_precision(&sel, &p).0, Some(0.5));
        assert_eq!(selection_precision(&selection(&[]), &p).0, None);
    }

    #[test]
    fn label_accuracy_cases() {
        let p = vec![prov(true, 0), prov(true, 1), prov(false, 7)];
        assert_eq!(label_accuracy(&selection(&[(0, 0), (1, 1), (2, 3)]), &p), Some(1.0));
        assert_eq!(label_accuracy(&selection(&[(0, 1), (1, 1)]), &p), Some(0.5));
        assert_eq!(label_accuracy(&selection(&[(2, 1)]), &p), None);
    }

    #[test]
    fn report_roundtrip() {
        let r = IterationReport {
            iteration: 2,
            mode: "ODST".into(),
            test_error: 0.1 + 0.2,
            auroc: 0.987_654_321_012_345_6,
            auroc_far: None,
            ece_before: 0.03,
            ece_after: 1e-17,
            temperature: 0.731,
            k: Some(10_000),
            accepted_per_class: vec![1, 2, 3, 4],
            selected_total: 40_000,
            selection_precision: Some(0.95),
            selection_recall_in_pool: Some(1.0 / 3.0),
            label_accuracy: None,
            max_rest_confidence: Some(0.625),
        };
        let rec = r.to_record();
        let refs: Vec<&str> = rec.iter().map(String::as_str).collect();
        assert_eq!(IterationReport::from_record(&refs).unwrap(), r);
        assert!(r.validate().is_ok());
    }

    proptest! {
        #[test]
        fn auroc_is_antisymmetric_and_rank_invariant(
            a in prop::collection::vec(0u8..20, 1..40),
            b in prop::collection::vec(0u8..20, 1..40),
        ) {
            let a: Vec<f64> = a.into_iter().map(|v| v as f64 / 20.0).collect();
            let b: Vec<f64> = b.into_iter().map(|v| v as f64 / 20.0).collect();
            let ab = mann_whitney_u2(&a, &b).unwrap();
            let ba = mann_whitney_u2(&b, &a).unwrap();
            prop_assert_eq!(ab + ba, 2 * (a.len() * b.len()) as u128);
            prop_assert_eq!(auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap(), 1.0);
            let f = |v: &f64| (3.0 * v).exp() - 7.0;
            let fa: Vec<f64> = a.iter().map(f).collect();
            let fb: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(auroc(&fa, &fb).unwrap(), auroc(&a, &b).unwrap());
        }
    }
}
