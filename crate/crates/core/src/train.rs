//! Mini-batch SGD for the base (outlier-exposure) objective, the student
//! objective and the self-training baselines.
//!
//! Every step draws one batch from the labeled stream (T, or T plus the
//! selected pseudo-labeled set I) and, when the objective has an
//! unlabeled term, one equally sized batch from the unlabeled stream. The
//! step loss is `mean_labeled + mean_unlabeled`, so the two expectation
//! terms keep equal weight whatever the ratio of set sizes.

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Features, LabeledSet};
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, Example};
use crate::prob::{argmax, ProbVector};
use crate::rng::{Rng, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Labeled CE plus uniform-target CE on all of U.
    BaseOe,
    /// Labeled CE only.
    BaseCe,
    Odst,
    /// Standard self-training: precision threshold only, no loss on U \ I.
    St,
    /// Both thresholds, but the ST loss.
    StOt,
    /// ODST with uniform targets on U \ I.
    AblateHardU,
    /// ODST with raw teacher predictions on U \ I.
    AblateNoSmooth,
    /// ODST trained once from the base teacher with the final iteration's k.
    NonIterative,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::BaseOe,
        Mode::BaseCe,
        Mode::Odst,
        Mode::St,
        Mode::StOt,
        Mode::AblateHardU,
        Mode::AblateNoSmooth,
        Mode::NonIterative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaseOe => "BASE_OE",
            Mode::BaseCe => "BASE_CE",
            Mode::Odst => "ODST",
            Mode::St => "ST",
            Mode::StOt => "ST_OT",
            Mode::AblateHardU => "ABLATE_HARD_U",
            Mode::AblateNoSmooth => "ABLATE_NO_SMOOTH",
            Mode::NonIterative => "NON_ITERATIVE",
        }
    }

    pub fn is_base(self) -> bool {
        matches!(self, Mode::BaseOe | Mode::BaseCe)
    }

    /// Whether the student objective carries the damped U \ I term.
    pub fn trains_on_rest(self) -> bool {
        matches!(
            self,
            Mode::Odst | Mode::AblateHardU | Mode::AblateNoSmooth | Mode::NonIterative
        )
    }

    /// Whether selection also applies the out-distribution threshold.
    pub fn uses_ood_threshold(self) -> bool {
        !matches!(self, Mode::St)
    }

    /// Objective used to train the initial teacher.
    pub fn base_mode(self) -> Mode {
        match self {
            Mode::St | Mode::StOt | Mode::BaseCe => Mode::BaseCe,
            _ => Mode::BaseOe,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Piecewise-constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            decay_epochs: vec![80, 120, 160],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Passes over the labeled set T.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of pseudo-labeled samples in the ST / ST-OT loss.
    pub lambda: f64,
    pub hidden: Vec<usize>,
    /// Fraction of final epochs over which the best validation checkpoint
    /// is kept.
    pub selection_fraction: f64,
    pub warm_start: bool,
    pub mode: Mode,
    pub seed: RngSeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 1.0,
            hidden: vec![64, 64],
            selection_fraction: 0.2,
            warm_start: false,
            mode: Mode::BaseOe,
            seed: RngSeed(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if !(self.lr.initial > 0.0) || !(self.lr.factor > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum/weight decay out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.selection_fraction) {
            return Err(Error::Config("selection_fraction outside [0,1]".into()));
        }
        Ok(())
    }

    /// Scales epochs and decay points together.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let scale = epochs as f64 / self.epochs as f64;
        self.lr.decay_epochs = self
            .lr
            .decay_epochs
            .iter()
            .map(|&e| ((e as f64 * scale).round() as usize).max(1))
            .collect();
        self.epochs = epochs;
        self
    }

    pub fn layer_sizes(&self, d: usize, k: usize) -> Vec<usize> {
        let mut s = vec![d];
        s.extend(&self.hidden);
        s.push(k);
        s
    }
}

/// Features with one soft target and one loss weight per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSet {
    x: Features,
    targets: Vec<f64>,
    weights: Vec<f64>,
    k: usize,
}

impl SoftSet {
    pub fn new(k: usize, d: usize) -> Self {
        Self {
            x: Features::empty(d),
            targets: Vec::new(),
            weights: Vec::new(),
            k,
        }
    }

    pub fn push(&mut self, x: &[f64], target: &ProbVector, weight: f64) -> Result<()> {
        if target.len() != self.k {
            return Err(Error::Dimension {
                expected: self.k,
                got: target.len(),
            });
        }
        self.x.push(x)?;
        self.targets.extend_from_slice(target.as_slice());
        self.weights.push(weight);
        Ok(())
    }

    /// T with one-hot targets.
    pub fn from_labeled(t: &LabeledSet) -> Self {
        let k = t.num_classes();
        let mut s = Self::new(k, t.features().dim());
        for ex in t.iter() {
            let mut target = vec![0.0; k];
            target[ex.y] = 1.0;
            s.x.push(ex.x).expect("dimension checked by LabeledSet");
            s.targets.extend(target);
            s.weights.push(1.0);
        }
        s
    }

    /// Every row with the same target.
    pub fn constant(x: &Features, target: &ProbVector) -> Self {
        let n = x.len();
        Self {
            x: x.clone(),
            targets: target.as_slice().repeat(n),
            weights: vec![1.0; n],
            k: target.len(),
        }
    }

    pub fn extend(&mut self, other: &SoftSet) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Dimension {
                expected: self.k,
                got: other.k,
            });
        }
        for i in 0..other.len() {
            self.x.push(other.x.row(i))?;
        }
        self.targets.extend_from_slice(&other.targets);
        self.weights.extend_from_slice(&other.weights);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn features(&self) -> &Features {
        &self.x
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.k..(i + 1) * self.k]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            x: self.x.row(i),
            target: self.target(i),
            weight: self.weights[i],
        }
    }
}

/// Endless sampler without replacement: walks a fresh seeded permutation
/// of `0..n` each pass.
#[derive(Debug, Clone)]
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl IndexStream {
    fn new(n: usize, seed: RngSeed) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: seed.rng(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// What one optimization step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Objective value on the drawn batches, before the update.
    pub loss: f64,
}

/// Two-stream SGD with Nesterov momentum.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    model: ClassifierModel,
    velocity: Vec<f64>,
    labeled: &'a SoftSet,
    unlabeled: Option<&'a SoftSet>,
    labeled_stream: IndexStream,
    unlabeled_stream: Option<IndexStream>,
    steps_per_epoch: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// `passes_over` sets the epoch length: `ceil(passes_over / batch)` steps.
    pub fn new(
        cfg: &'a TrainConfig,
        model: ClassifierModel,
        labeled: &'a SoftSet,
        unlabeled: Option<&'a SoftSet>,
        passes_over: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if labeled.is_empty() {
            return Err(Error::Config("labeled stream is empty".into()));
        }
        if let Some(u) = unlabeled {
            if u.is_empty() {
                return Err(Error::Config("unlabeled stream is empty".into()));
            }
        }
        let labeled_stream = IndexStream::new(labeled.len(), cfg.seed.derive("labeled-stream", 0));
        let unlabeled_stream =
            unlabeled.map(|u| IndexStream::new(u.len(), cfg.seed.derive("unlabeled-stream", 0)));
        Ok(Self {
            velocity: vec![0.0; model.num_params()],
            model,
            cfg,
            labeled,
            unlabeled,
            labeled_stream,
            unlabeled_stream,
            steps_per_epoch: passes_over.max(1).div_ceil(cfg.batch_size),
            step: 0,
        })
    }

    pub fn model(&self) -> &ClassifierModel {
        &self.model
    }

    pub fn into_model(self) -> ClassifierModel {
        self.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let b = self.cfg.batch_size;
        let labeled_idx = self.labeled_stream.next_batch(b);
        let batch: Vec<Example<'_>> = labeled_idx.iter().map(|&i| self.labeled.example(i)).collect();
        let (mut loss, mut grad) = self.model.loss_and_grad_sum(&batch)?;
        let nl = batch.len() as f64;
        loss /= nl;
        grad.iter_mut().for_each(|g| *g /= nl);

        let mut unlabeled_idx = Vec::new();
        if let (Some(u), Some(stream)) = (self.unlabeled, self.unlabeled_stream.as_mut()) {
            unlabeled_idx = stream.next_batch(b);
            let batch: Vec<Example<'_>> = unlabeled_idx.iter().map(|&i| u.example(i)).collect();
            let (lu, gu) = self.model.loss_and_grad_sum(&batch)?;
            let nu = batch.len() as f64;
            loss += lu / nu;
            grad.iter_mut().zip(&gu).for_each(|(g, v)| *g += v / nu);
        }

        let lr = self.cfg.lr.rate(self.epoch());
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((p, v), g) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(&grad)
        {
            let g = g + wd * *p;
            *v = mu * *v + g;
            *p -= lr * (g + mu * *v);
        }
        if !loss.is_finite() || !self.model.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {}", self.step)));
        }
        self.step += 1;
        Ok(StepRecord {
            labeled: labeled_idx,
            unlabeled: unlabeled_idx,
            loss,
        })
    }

    /// Runs all epochs. With a validation set, returns the parameters with
    /// the lowest validation error seen at the end of any epoch in the final
    /// `selection_fraction` of training (earliest wins ties).
    pub fn run(mut self, val: Option<&LabeledSet>) -> Result<TrainOutcome> {
        let epochs = self.cfg.epochs;
        let window = ((epochs as f64 * self.cfg.selection_fraction).ceil() as usize).clamp(1, epochs);
        let first_candidate = epochs - window;
        let mut best: Option<(f64, usize, ClassifierModel)> = None;
        let mut last_loss = f64::NAN;
        for epoch in 0..epochs {
            for _ in 0..self.steps_per_epoch {
                last_loss = self.step()?.loss;
            }
            if epoch >= first_candidate {
                if let Some(val) = val {
                    let err = classification_error(&self.model, val)?;
                    if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                        best = Some((err, epoch, self.model.clone()));
                    }
                }
            }
        }
        Ok(match best {
            Some((err, epoch, model)) => TrainOutcome {
                model,
                selected_epoch: epoch,
                val_error: Some(err),
                last_loss,
            },
            None => TrainOutcome {
                model: self.model,
                selected_epoch: epochs - 1,
                val_error: None,
                last_loss,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub selected_epoch: usize,
    pub val_error: Option<f64>,
    pub last_loss: f64,
}

/// Fraction of argmax mistakes.
pub fn classification_error(model: &ClassifierModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let k = model.num_classes();
    let logits = model.forward_all(set.features())?;
    let wrong = logits
        .chunks_exact(k)
        .zip(set.labels())
        .filter(|(l, &y)| argmax(l) != y)
        .count();
    Ok(wrong as f64 / set.len() as f64)
}

fn fresh_model(cfg: &TrainConfig, d: usize, k: usize, init: Option<&ClassifierModel>) -> Result<ClassifierModel> {
    match init {
        Some(m) if cfg.warm_start => Ok(m.clone()),
        _ => ClassifierModel::init(&cfg.layer_sizes(d, k), cfg.seed.derive("init", 0)),
    }
}

/// Trains the initial teacher. `BASE_OE` adds the uniform-target term on
/// all of `u`; `BASE_CE` ignores `u`.
pub fn train_base(
    t: &LabeledSet,
    u: &Features,
    in_val: Option<&LabeledSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if t.is_empty() {
        return Err(Error::Config("labeled set T is empty".into()));
    }
    let k = t.num_classes();
    let labeled = SoftSet::from_labeled(t);
    let model = fresh_model(cfg, t.features().dim(), k, None)?;
    let outcome = match cfg.mode {
        Mode::BaseOe => {
            if u.is_empty() {
                return Err(Error::Config("BASE_OE needs a nonempty unlabeled set".into()));
            }
            let uniform = SoftSet::constant(u, &ProbVector::uniform(k));
            Trainer::new(cfg, model, &labeled, Some(&uniform), t.len())?.run(in_val)?
        }
        Mode::BaseCe => Trainer::new(cfg, model, &labeled, None, t.len())?.run(in_val)?,
        other => {
            return Err(Error::Config(format!("train_base called with mode {other}")));
        }
    };
    info!(
        "{} base model: epoch {} selected, val error {:?}",
        cfg.mode, outcome.selected_epoch, outcome.val_error
    );
    Ok(outcome)
}

/// Trains a student on T, the selected set I (targets q, repetitions as
/// literal duplicates) and, for the ODST family, the rest U \ I (targets v).
pub fn train_student(
    t: &LabeledSet,
    selected: &SoftSet,
    rest: &SoftSet,
    in_val: Option<&LabeledSet>,
    cfg: &TrainConfig,
    teacher: Option<&ClassifierModel>,
) -> Result<TrainOutcome> {
    if cfg.mode.is_base() {
        return Err(Error::Config(format!("train_student called with mode {}", cfg.mode)));
    }
    if t.is_empty() {
        return Err(Error::Config("labeled set T is empty".into()));
    }
    let k = t.num_classes();
    let mut labeled = SoftSet::from_labeled(t);
    if selected.is_empty() {
        warn!("{}: selected set I is empty, training on T only", cfg.mode);
    } else if cfg.mode.trains_on_rest() {
        labeled.extend(selected)?;
    } else {
        let mut weighted = selected.clone();
        weighted.weights.iter_mut().for_each(|w| *w *= cfg.lambda);
        labeled.extend(&weighted)?;
    }
    let model = fresh_model(cfg, t.features().dim(), k, teacher)?;
    let unlabeled = (cfg.mode.trains_on_rest() && !rest.is_empty()).then_some(rest);
    Trainer::new(cfg, model, &labeled, unlabeled, t.len())?.run(in_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;

    fn toy_separable(n: usize) -> LabeledSet {
        let mut rng = RngSeed(5).rng();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            xs.push(c + rand::Rng::random_range(&mut rng, -1.0..1.0));
            xs.push(rand::Rng::random_range(&mut rng, -1.0..1.0));
            ys.push(y);
        }
        LabeledSet::new(Role::Train, 2, Features::new(2, xs).unwrap(), ys).unwrap()
    }

    fn quick(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: vec![8],
            batch_size: 32,
            ..TrainConfig::default()
        }
        .with_epochs(30)
    }

    #[test]
    fn lr_schedule_is_piecewise_constant() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(79), 0.1);
        assert!((s.rate(80) - 0.01).abs() < 1e-15);
        assert!((s.rate(199) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn base_ce_separates_separable_data() {
        let t = toy_separable(200);
        let out = train_base(&t, &Features::empty(2), None, &quick(Mode::BaseCe)).unwrap();
        assert_eq!(classification_error(&out.model, &t).unwrap(), 0.0);
    }

    #[test]
    fn base_oe_needs_unlabeled() {
        let t = toy_separable(10);
        assert!(matches!(
            train_base(&t, &Features::empty(2), None, &quick(Mode::BaseOe)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_labeled_set_is_a_config_error() {
        let t = LabeledSet::new(Role::Train, 2, Features::empty(2), vec![]).unwrap();
        assert!(train_base(&t, &Features::empty(2), None, &quick(Mode::BaseCe)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let t = toy_separable(64);
        let cfg = quick(Mode::BaseCe);
        let a = train_base(&t, &Features::empty(2), Some(&t), &cfg).unwrap();
        let b = train_base(&t, &Features::empty(2), Some(&t), &cfg).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("st-ot".parse::<Mode>().unwrap(), Mode::StOt);
        assert!("nope".parse::<Mode>().is_err());
    }

    #[test]
    fn index_stream_covers_each_pass() {
        let mut s = IndexStream::new(10, RngSeed(1));
        let mut first = s.next_batch(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }
}
