//! Pseudo-labeling of the pool, per-class confidence thresholds, class
//! balanced top-k selection, and attachment of the soft targets q and v.

use std::cmp::Ordering;

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::calib::Calibration;
use crate::data::Features;
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::prob::{mix_with_uniform, ProbVector};
use crate::rng::RngSeed;
use crate::train::{Mode, SoftSet};

/// Calibrated teacher predictions for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolAnnotation {
    probs: Vec<ProbVector>,
    predicted: Vec<usize>,
    confidence: Vec<f64>,
}

impl PoolAnnotation {
    pub fn from_probs(probs: Vec<ProbVector>) -> Self {
        let predicted = probs.iter().map(ProbVector::argmax).collect();
        let confidence = probs.iter().map(ProbVector::max).collect();
        Self {
            probs,
            predicted,
            confidence,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.first().map_or(0, ProbVector::len)
    }

    pub fn probs(&self) -> &[ProbVector] {
        &self.probs
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    /// `p(c | x)` for every sample.
    pub fn class_scores(&self, c: usize) -> Vec<f64> {
        self.probs.iter().map(|p| p[c]).collect()
    }
}

/// Annotates every pool sample with calibrated teacher probabilities.
pub fn pseudo_label_pool(teacher: &ClassifierModel, calib: &Calibration, pool: &Features) -> Result<PoolAnnotation> {
    Ok(PoolAnnotation::from_probs(calib.predict_all(teacher, pool)?))
}

/// A class threshold; `AboveOne` admits nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    Finite(f64),
    AboveOne,
}

impl Threshold {
    pub fn admits(self, confidence: f64) -> bool {
        match self {
            Threshold::Finite(t) => confidence >= t,
            Threshold::AboveOne => false,
        }
    }

    pub fn max(self, other: Threshold) -> Threshold {
        match (self, other) {
            (Threshold::Finite(a), Threshold::Finite(b)) => Threshold::Finite(a.max(b)),
            _ => Threshold::AboveOne,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Threshold::Finite(t) => Some(t),
            Threshold::AboveOne => None,
        }
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::Finite(t) => write!(f, "{t}"),
            Threshold::AboveOne => f.write_str("ABOVE_ONE"),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ABOVE_ONE" {
            return Ok(Threshold::AboveOne);
        }
        s.parse()
            .map(Threshold::Finite)
            .map_err(|_| Error::Format(format!("bad threshold `{s}`")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Precondition(format!("alpha {alpha} outside (0,1)")));
    }
    Ok(())
}

/// Nearest-rank empirical quantile: the `ceil(alpha * n)`-th smallest value.
pub fn nearest_rank_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Empty("out-distribution validation scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // guard against alpha * n landing a hair above an integer
    let rank = ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Out-distribution threshold for class `c`: the alpha-quantile of
/// `p(c | x)` over all out-distribution validation samples.
pub fn ood_threshold(ood_val: &PoolAnnotation, c: usize, alpha: f64) -> Result<f64> {
    nearest_rank_quantile(&ood_val.class_scores(c), alpha)
}

/// Smallest score `theta` such that the samples scoring `>= theta` have
/// one-vs-all precision `>= alpha` for the positive class.
pub fn precision_threshold(scores: &[f64], positive: &[bool], alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Empty("in-distribution validation scores"));
    }
    if scores.len() != positive.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: positive.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut total) = (0usize, 0usize);
    let mut best = Threshold::AboveOne;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(positive[order[i]]);
            total += 1;
            i += 1;
        }
        if tp as f64 / total as f64 >= alpha {
            best = Threshold::Finite(s);
        }
    }
    Ok(best)
}

/// In-distribution threshold for class `c` on the labeled validation set.
pub fn id_threshold(in_val: &PoolAnnotation, labels: &[usize], c: usize, alpha: f64) -> Result<Threshold> {
    let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
    precision_threshold(&in_val.class_scores(c), &positive, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub ood: f64,
    pub id: Threshold,
    pub final_threshold: Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub per_class: Vec<ClassThresholds>,
    pub uses_ood: bool,
}

impl SelectionThresholds {
    /// Final threshold is `max(id, ood)` when `use_ood`, else `id` alone.
    pub fn compute(
        in_val: &PoolAnnotation,
        in_labels: &[usize],
        ood_val: &PoolAnnotation,
        alpha: f64,
        use_ood: bool,
    ) -> Result<Self> {
        let k = in_val.num_classes();
        let per_class = (0..k)
            .map(|c| {
                let ood = ood_threshold(ood_val, c, alpha)?;
                let id = id_threshold(in_val, in_labels, c, alpha)?;
                let final_threshold = if use_ood { id.max(Threshold::Finite(ood)) } else { id };
                Ok(ClassThresholds {
                    ood,
                    id,
                    final_threshold,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            per_class,
            uses_ood: use_ood,
        })
    }

    pub fn final_threshold(&self, c: usize) -> Threshold {
        self.per_class[c].final_threshold
    }
}

/// Per-class budget `floor(5 N (t + 1) / K)`.
pub fn k_schedule(n_labeled: usize, k: usize, t: usize) -> usize {
    5 * n_labeled * (t + 1) / k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedEntry {
    /// Pool index.
    pub index: usize,
    pub class: usize,
    /// Copies of this sample in I, including the original (>= 1).
    pub copies: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub accepted_unique: usize,
    pub above_threshold: usize,
    /// Extra copies added to reach k.
    pub repetitions: usize,
}

impl ClassSelection {
    pub fn total(&self) -> usize {
        self.accepted_unique + self.repetitions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k: usize,
    pub entries: Vec<SelectedEntry>,
    pub per_class: Vec<ClassSelection>,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    pub fn unique_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.index)
    }

    pub fn total_size(&self) -> usize {
        self.entries.iter().map(|e| e.copies).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Confidence descending, pool index ascending.
fn rank_order(conf: &[f64], a: usize, b: usize) -> Ordering {
    conf[b].total_cmp(&conf[a]).then(a.cmp(&b))
}

/// Per class: the `k` most confident samples predicted as that class whose
/// confidence clears the class threshold. Classes with fewer than `k`
/// accepted samples are filled up by uniform seeded repetition.
pub fn select_topk(pool: &PoolAnnotation, thresholds: &SelectionThresholds, k: usize, seed: RngSeed) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Precondition("k must be > 0".into()));
    }
    let n_classes = thresholds.per_class.len();
    if pool.num_classes() != n_classes && !pool.is_empty() {
        return Err(Error::Dimension {
            expected: n_classes,
            got: pool.num_classes(),
        });
    }
    let conf = pool.confidence();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, (&c, &p)) in pool.predicted().iter().zip(conf).enumerate() {
        if thresholds.final_threshold(c).admits(p) {
            by_class[c].push(i);
        }
    }

    let mut entries = Vec::new();
    let mut per_class = Vec::with_capacity(n_classes);
    let mut warnings = Vec::new();
    for (c, mut cands) in by_class.into_iter().enumerate() {
        let above = cands.len();
        cands.sort_by(|&a, &b| rank_order(conf, a, b));
        cands.truncate(k);
        let accepted = cands.len();
        let mut copies = vec![1usize; accepted];
        let mut repetitions = 0;
        if accepted == 0 {
            let msg = format!("class {c}: no pool sample clears threshold {}", thresholds.final_threshold(c));
            warn!("{msg}");
            warnings.push(msg);
        } else if accepted < k {
            let mut rng = seed.derive("repeat", c as u64).rng();
            repetitions = k - accepted;
            for _ in 0..repetitions {
                copies[rng.random_range(0..accepted)] += 1;
            }
        }
        entries.extend(cands.iter().zip(&copies).map(|(&index, &copies)| SelectedEntry {
            index,
            class: c,
            copies,
        }));
        per_class.push(ClassSelection {
            accepted_unique: accepted,
            above_threshold: above,
            repetitions,
        });
    }
    Ok(SelectionResult {
        k,
        entries,
        per_class,
        warnings,
    })
}

/// Soft targets for the student.
#[derive(Debug, Clone)]
pub struct PseudoLabels {
    /// I with targets q, repeated samples duplicated literally.
    pub selected: SoftSet,
    /// U \ I with targets v; empty for modes without that loss term.
    pub rest: SoftSet,
    /// Largest entry of any v.
    pub max_rest_confidence: f64,
}

/// Target for a non-selected sample under `mode`.
pub fn rest_target(p: &ProbVector, mode: Mode) -> Result<ProbVector> {
    match mode {
        Mode::AblateHardU => Ok(ProbVector::uniform(p.len())),
        Mode::AblateNoSmooth => Ok(p.clone()),
        _ => mix_with_uniform(p, 0.5),
    }
}

/// `q(z)` is the calibrated teacher prediction for selected `z`; `v(z)`
/// for the rest depends on the mode (half-uniform mix for ODST).
pub fn assign_pseudo_labels(
    pool: &Features,
    annotations: &PoolAnnotation,
    selection: &SelectionResult,
    mode: Mode,
) -> Result<PseudoLabels> {
    if pool.len() != annotations.len() {
        return Err(Error::Dimension {
            expected: annotations.len(),
            got: pool.len(),
        });
    }
    let k = annotations.num_classes();
    let d = pool.dim();
    let mut selected = SoftSet::new(k, d);
    let mut in_i = vec![false; pool.len()];
    for e in &selection.entries {
        in_i[e.index] = true;
        for _ in 0..e.copies {
            selected.push(pool.row(e.index), &annotations.probs()[e.index], 1.0)?;
        }
    }
    let mut rest = SoftSet::new(k, d);
    let mut max_rest_confidence = 0.0f64;
    if mode.trains_on_rest() {
        for (i, p) in annotations.probs().iter().enumerate() {
            if !in_i[i] {
                let v = rest_target(p, mode)?;
                max_rest_confidence = max_rest_confidence.max(v.max());
                rest.push(pool.row(i), &v, 1.0)?;
            }
        }
    }
    Ok(PseudoLabels {
        selected,
        rest,
        max_rest_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_sample_annotation() {
        let ann = PoolAnnotation::from_probs(vec![pv(&[0.1, 0.9])]);
        assert_eq!(ann.predicted(), &[1]);
        assert_eq!(ann.confidence(), &[0.9]);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(nearest_rank_quantile(&[0.4, 0.1, 0.3, 0.2], 0.5).unwrap(), 0.2);
        assert_eq!(nearest_rank_quantile(&[0.3; 7], 0.9).unwrap(), 0.3);
        let scores: Vec<f64> = (0..5000).rev().map(|i| i as f64).collect();
        assert_eq!(nearest_rank_quantile(&scores, 0.998).unwrap(), 4989.0); // 4990th smallest
        assert!(nearest_rank_quantile(&[], 0.5).is_err());
        assert!(nearest_rank_quantile(&[0.1], 1.0).is_err());
    }

    #[test]
    fn precision_threshold_examples() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let pos = [true, true, false, true];
        assert_eq!(precision_threshold(&scores, &pos, 0.66).unwrap(), Threshold::Finite(0.6));
        let pos = [false, true, true, true];
        assert_eq!(precision_threshold(&scores, &pos, 0.99).unwrap(), Threshold::AboveOne);
        let pos = [true, true, false, false];
        assert_eq!(precision_threshold(&scores, &pos, 0.99).unwrap(), Threshold::Finite(0.8));
        assert!(precision_threshold(&[], &[], 0.5).is_err());
    }

    #[test]
    fn k_schedule_examples() {
        assert_eq!(k_schedule(50_000, 10, 0), 25_000);
        assert_eq!(k_schedule(50_000, 10, 2), 75_000);
        assert_eq!(k_schedule(1000, 4, 1), 2500);
    }

    fn thresholds(finals: &[Threshold]) -> SelectionThresholds {
        SelectionThresholds {
            per_class: finals
                .iter()
                .map(|&t| ClassThresholds {
                    ood: 0.0,
                    id: t,
                    final_threshold: t,
                })
                .collect(),
            uses_ood: true,
        }
    }

    #[test]
    fn repetition_fills_to_k() {
        let ann = PoolAnnotation::from_probs(vec![
            pv(&[0.9, 0.1]),
            pv(&[0.8, 0.2]),
            pv(&[0.7, 0.3]),
            pv(&[0.2, 0.8]),
        ]);
        let th = thresholds(&[Threshold::Finite(0.5), Threshold::AboveOne]);
        let sel = select_topk(&ann, &th, 5, RngSeed(3)).unwrap();
        assert_eq!(sel.per_class[0].accepted_unique, 3);
        assert_eq!(sel.per_class[0].repetitions, 2);
        assert_eq!(sel.per_class[0].total(), 5);
        assert_eq!(sel.per_class[1].total(), 0);
        assert_eq!(sel.warnings.len(), 1);
        assert_eq!(sel.total_size(), 5);
        assert_eq!(sel.entries.iter().map(|e| e.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn pseudo_labels_follow_the_mixing_rule() {
        let x = Features::new(1, vec![0.0, 1.0]).unwrap();
        let ann = PoolAnnotation::from_probs(vec![pv(&[1.0, 0.0, 0.0, 0.0]), pv(&[0.1, 0.7, 0.1, 0.1])]);
        let th = thresholds(&[Threshold::AboveOne, Threshold::Finite(0.5), Threshold::AboveOne, Threshold::AboveOne]);
        let sel = select_topk(&ann, &th, 1, RngSeed(0)).unwrap();
        let labels = assign_pseudo_labels(&x, &ann, &sel, Mode::Odst).unwrap();
        assert_eq!(labels.selected.len(), 1);
        assert_eq!(labels.selected.target(0), ann.probs()[1].as_slice());
        assert_eq!(labels.rest.len(), 1);
        assert_eq!(labels.rest.target(0), &[0.625, 0.125, 0.125, 0.125]);
        assert_eq!(labels.max_rest_confidence, 0.625);

        let hard = assign_pseudo_labels(&x, &ann, &sel, Mode::AblateHardU).unwrap();
        assert_eq!(hard.rest.target(0), &[0.25; 4]);
        let raw = assign_pseudo_labels(&x, &ann, &sel, Mode::AblateNoSmooth).unwrap();
        assert_eq!(raw.rest.target(0), &[1.0, 0.0, 0.0, 0.0]);
        let st = assign_pseudo_labels(&x, &ann, &sel, Mode::St).unwrap();
        assert!(st.rest.is_empty());
    }

    #[test]
    fn threshold_text_roundtrip() {
        for t in [Threshold::Finite(0.25), Threshold::AboveOne] {
            assert_eq!(t.to_string().parse::<Threshold>().unwrap(), t);
        }
    }

    proptest! {
        #[test]
        fn raising_alpha_never_lowers_thresholds(
            scores in prop::collection::vec(0.0f64..1.0, 1..60),
            flags in prop::collection::vec(any::<bool>(), 60),
            a in 0.01f64..0.98,
            bump in 0.0f64..0.5,
        ) {
            let b = (a + bump).min(0.99);
            let pos = &flags[..scores.len()];
            let lo = precision_threshold(&scores, pos, a).unwrap();
            let hi = precision_threshold(&scores, pos, b).unwrap();
            let rank = |t: Threshold| t.value().unwrap_or(f64::INFINITY);
            prop_assert!(rank(hi) >= rank(lo));
            prop_assert!(nearest_rank_quantile(&scores, b).unwrap() >= nearest_rank_quantile(&scores, a).unwrap());
        }

        #[test]
        fn selection_respects_thresholds_and_budget(
            raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..80),
            t0 in 0.3f64..0.9,
            t1 in 0.3f64..0.9,
            t2 in 0.3f64..0.9,
            k in 1usize..20,
            seed in any::<u64>(),
        ) {
            let probs: Vec<ProbVector> = raw
                .iter()
                .map(|&(a, b, c)| {
                    let s = a + b + c + 1e-9;
                    pv(&[a / s, b / s, 1.0 - a / s - b / s])
                })
                .collect();
            let ann = PoolAnnotation::from_probs(probs);
            let th = thresholds(&[Threshold::Finite(t0), Threshold::Finite(t1), Threshold::Finite(t2)]);
            let sel = select_topk(&ann, &th, k, RngSeed(seed)).unwrap();
            for e in &sel.entries {
                prop_assert!(th.final_threshold(e.class).admits(ann.confidence()[e.index]));
                prop_assert_eq!(ann.predicted()[e.index], e.class);
            }
            for cs in &sel.per_class {
                prop_assert!(cs.total() == k || cs.total() == 0);
                prop_assert!(cs.repetitions == 0 || cs.accepted_unique < k);
            }
            let again = select_topk(&ann, &th, k, RngSeed(seed)).unwrap();
            prop_assert_eq!(sel, again);
        }
    }
}
