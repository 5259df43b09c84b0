use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{emit_report, SelectionRow};
use crate::calib::{fit_model, Calibration, CalibrationFit};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::metrics::{auroc, label_accuracy, selection_precision, test_error, IterationReport};
use crate::model::ClassifierModel;
use crate::select::{
    assign_pseudo_labels, k_schedule, pseudo_label_pool, select_topk, SelectionResult, SelectionThresholds,
};
use crate::synth::{World, WorldSpec};
use crate::train::{train_base, train_student, Mode};

/// All sets of one run, generated from the run seed alone.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub world: World,
    pub train: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub in_val: LabeledSet,
    pub ood_val: UnlabeledSet,
    pub test: LabeledSet,
    pub ood_test: UnlabeledSet,
    pub far_test: Option<UnlabeledSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataChecksums {
    pub train: u64,
    pub unlabeled: u64,
    pub in_val: u64,
    pub ood_val: u64,
    pub test: u64,
    pub ood_test: u64,
    pub far_test: Option<u64>,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.world.spec()?;
        let world = spec.compile()?;
        let s = cfg.seed.derive("data", 0);
        let train = world.sample_labeled(cfg.n, s.derive("train", 0))?;
        let unlabeled = world.sample_unlabeled(cfg.m, s.derive("unlabeled", 0))?;
        let (in_val, ood_val) = world.make_validation_sets(cfg.n_in_val, cfg.n_ood_val, s.derive("val", 0))?;
        let test = world.sample_test(cfg.n_test, s.derive("test", 0))?;
        let ood_test = world.sample_ood(cfg.n_ood_test, s.derive("ood_test", 0))?;
        let far_test = match cfg.far_shift {
            Some(shift) => {
                let far = WorldSpec {
                    out_components: spec.far_ood_block(shift),
                    ..spec.clone()
                }
                .compile()?;
                Some(far.sample_ood(cfg.n_ood_test, s.derive("far_test", 0))?)
            }
            None => None,
        };
        Ok(Self {
            world,
            train,
            unlabeled,
            in_val,
            ood_val,
            test,
            ood_test,
            far_test,
        })
    }

    pub fn checksums(&self) -> DataChecksums {
        DataChecksums {
            train: self.train.checksum(),
            unlabeled: self.unlabeled.checksum(),
            in_val: self.in_val.checksum(),
            ood_val: self.ood_val.checksum(),
            test: self.test.checksum(),
            ood_test: self.ood_test.checksum(),
            far_test: self.far_test.as_ref().map(UnlabeledSet::checksum),
        }
    }

    /// Writes every set in the binary dataset format.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
        self.train.write_to(&dir.join("train.bin"))?;
        self.unlabeled.write_to(&dir.join("unlabeled.bin"))?;
        self.in_val.write_to(&dir.join("in_val.bin"))?;
        self.ood_val.write_to(&dir.join("ood_val.bin"))?;
        self.test.write_to(&dir.join("test.bin"))?;
        self.ood_test.write_to(&dir.join("ood_test.bin"))?;
        if let Some(far) = &self.far_test {
            far.write_to(&dir.join("far_test.bin"))?;
        }
        Ok(())
    }
}

/// Calibration and test metrics of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fit: CalibrationFit,
    pub test_error: f64,
    pub auroc: f64,
    pub auroc_far: Option<f64>,
}

fn confidences(model: &ClassifierModel, calib: &Calibration, x: &crate::data::Features) -> Result<Vec<f64>> {
    Ok(calib.predict_all(model, x)?.iter().map(|p| p.max()).collect())
}

/// Fits the temperature on in_val, then measures test error and the
/// confidence AUROC of test vs held-out out-distribution samples.
pub fn evaluate_model(model: &ClassifierModel, data: &Datasets) -> Result<Evaluation> {
    let fit = fit_model(model, data.in_val.features(), data.in_val.labels())?;
    let calib = fit.calibration;
    let in_conf = confidences(model, &calib, data.test.features())?;
    let ood_conf = confidences(model, &calib, data.ood_test.features())?;
    let auroc_far = match &data.far_test {
        Some(far) => Some(auroc(&in_conf, &confidences(model, &calib, far.features())?)?),
        None => None,
    };
    Ok(Evaluation {
        fit,
        test_error: test_error(model, &calib, &data.test)?,
        auroc: auroc(&in_conf, &ood_conf)?,
        auroc_far,
    })
}

fn base_report(iteration: usize, mode: Mode, ev: &Evaluation, k: usize) -> IterationReport {
    IterationReport {
        iteration,
        mode: mode.name().to_string(),
        test_error: ev.test_error,
        auroc: ev.auroc,
        auroc_far: ev.auroc_far,
        ece_before: ev.fit.ece_before,
        ece_after: ev.fit.ece_after,
        temperature: ev.fit.calibration.temperature(),
        k: None,
        accepted_per_class: vec![0; k],
        selected_total: 0,
        selection_precision: None,
        selection_recall_in_pool: None,
        label_accuracy: None,
        max_rest_confidence: None,
    }
}

/// Where the loop stands: the current teacher with its calibration and
/// everything reported so far.
#[derive(Debug, Clone)]
pub struct ExperimentState {
    /// Student iterations completed.
    pub completed: usize,
    pub teacher: ClassifierModel,
    pub calibration: Calibration,
    pub last_selection: Option<SelectionResult>,
    pub history: Vec<IterationReport>,
    pub selections: Vec<SelectionRow>,
    pub data: DataChecksums,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    fingerprint: u64,
    completed: usize,
    teacher_file: String,
    temperature: f64,
    last_selection: Option<SelectionResult>,
    history: Vec<IterationReport>,
    selections: Vec<SelectionRow>,
    data: DataChecksums,
}

const STATE_FILE: &str = "state.json";

fn model_file(iteration: usize) -> String {
    format!("model_t{iteration}.bin")
}

impl ExperimentState {
    fn persist(&self, out: &Path, fingerprint: u64) -> Result<()> {
        let iteration = self.history.last().map_or(0, |r| r.iteration);
        let teacher_file = model_file(iteration);
        self.teacher.save(&out.join(&teacher_file))?;
        self.calibration
            .save(&out.join(format!("model_t{iteration}.temp.json")))?;
        let file = StateFile {
            fingerprint,
            completed: self.completed,
            teacher_file,
            temperature: self.calibration.temperature(),
            last_selection: self.last_selection.clone(),
            history: self.history.clone(),
            selections: self.selections.clone(),
            data: self.data,
        };
        let tmp = out.join("state.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&file)?).map_err(Error::at(&tmp))?;
        let dst = out.join(STATE_FILE);
        std::fs::rename(&tmp, &dst).map_err(Error::at(dst))
    }

    fn restore(out: &Path, fingerprint: u64, data: DataChecksums) -> Result<Option<Self>> {
        let path = out.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read(&path).map_err(Error::at(&path))?;
        let file: StateFile = serde_json::from_slice(&text)?;
        if file.fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "{} was written by a different configuration",
                path.display()
            )));
        }
        if file.data != data {
            return Err(Error::Precondition("regenerated data differ from the checkpointed run".into()));
        }
        Ok(Some(Self {
            completed: file.completed,
            teacher: ClassifierModel::load(&out.join(&file.teacher_file))?,
            calibration: Calibration::new(file.temperature)?,
            last_selection: file.last_selection,
            history: file.history,
            selections: file.selections,
            data: file.data,
        }))
    }
}

/// Controls for checkpointed execution.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Continue from `state.json` in the output directory if present.
    pub resume: bool,
    /// Return after this many student iterations in total.
    pub stop_after: Option<usize>,
    /// Also write every dataset to `<out>/data`.
    pub write_data: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: ExperimentState,
    pub out: PathBuf,
    pub finished: bool,
}

/// Base training followed by calibrate, pseudo-label, select, assign and
/// train-student per iteration. The state is checkpointed to `out` after
/// the base model and after each iteration, and reports are rewritten
/// each time, so a failed run leaves its last consistent state behind.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, ctl: &RunControl) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(Error::at(out))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(Error::at(&cfg_path))?;
    let fingerprint = cfg.fingerprint()?;

    let data = Datasets::generate(cfg).map_err(Error::in_stage("generate"))?;
    let checksums = data.checksums();
    info!("data checksums {checksums:?}");
    if ctl.write_data {
        data.write_to(&out.join("data"))?;
    }
    let k = data.world.num_classes();

    let restored = if ctl.resume {
        ExperimentState::restore(out, fingerprint, checksums)?
    } else {
        None
    };
    let mut state = match restored {
        Some(s) => {
            info!("resuming after {} completed iterations", s.completed);
            s
        }
        None => {
            let base_cfg = cfg.train_config(0);
            let base = train_base(&data.train, data.unlabeled.features(), Some(&data.in_val), &base_cfg)
                .map_err(Error::in_stage("train-base"))?;
            let ev = evaluate_model(&base.model, &data).map_err(Error::in_stage("evaluate"))?;
            let state = ExperimentState {
                completed: 0,
                teacher: base.model,
                calibration: ev.fit.calibration,
                last_selection: None,
                history: vec![base_report(0, base_cfg.mode, &ev, k)],
                selections: Vec::new(),
                data: checksums,
            };
            state.persist(out, fingerprint)?;
            emit_report(out, &state.history, &state.selections)?;
            state
        }
    };

    let schedule = cfg.student_iterations();
    while state.completed < schedule.len() {
        if ctl.stop_after.is_some_and(|s| state.completed >= s) {
            return Ok(RunOutcome {
                state,
                out: out.to_path_buf(),
                finished: false,
            });
        }
        let t = schedule[state.completed];
        state = iterate(cfg, &data, state, t, out)?;
        state.persist(out, fingerprint)?;
        emit_report(out, &state.history, &state.selections)?;
    }
    Ok(RunOutcome {
        state,
        out: out.to_path_buf(),
        finished: true,
    })
}

/// One pass through steps A to E with selection budget `k_schedule(t)`.
fn iterate(cfg: &ExperimentConfig, data: &Datasets, state: ExperimentState, t: usize, out: &Path) -> Result<ExperimentState> {
    let mode = cfg.mode;
    let k = data.world.num_classes();
    let teacher = &state.teacher;
    let calib = state.calibration;
    let iteration = t + 1;

    let pool = data.unlabeled.features();
    let pool_ann = pseudo_label_pool(teacher, &calib, pool).map_err(Error::in_stage("pseudo-label"))?;
    let thresholds = (|| {
        let in_ann = pseudo_label_pool(teacher, &calib, data.in_val.features())?;
        let ood_ann = pseudo_label_pool(teacher, &calib, data.ood_val.features())?;
        SelectionThresholds::compute(&in_ann, data.in_val.labels(), &ood_ann, cfg.alpha, mode.uses_ood_threshold())
    })()
    .map_err(Error::in_stage("threshold"))?;
    let budget = k_schedule(cfg.n, k, t);
    let selection = select_topk(&pool_ann, &thresholds, budget, cfg.seed.derive("select", t as u64))
        .map_err(Error::in_stage("select"))?;
    let labels = assign_pseudo_labels(pool, &pool_ann, &selection, mode).map_err(Error::in_stage("assign"))?;
    info!(
        "{mode} t={t}: k={budget}, |I|={} ({} unique), |U\\I| used={}",
        labels.selected.len(),
        selection.entries.len(),
        labels.rest.len()
    );

    let student = train_student(
        &data.train,
        &labels.selected,
        &labels.rest,
        Some(&data.in_val),
        &cfg.train_config(iteration),
        Some(teacher),
    )
    .map_err(Error::in_stage("train-student"))?
    .model;
    let ev = evaluate_model(&student, data).map_err(Error::in_stage("evaluate"))?;

    let provenance = data.unlabeled.provenance();
    let (precision, recall) = selection_precision(&selection, provenance);
    let mut report = base_report(iteration, mode, &ev, k);
    report.k = Some(budget);
    report.accepted_per_class = selection.per_class.iter().map(|c| c.accepted_unique).collect();
    report.selected_total = selection.total_size();
    report.selection_precision = precision;
    report.selection_recall_in_pool = recall;
    report.label_accuracy = label_accuracy(&selection, provenance);
    report.max_rest_confidence = mode.trains_on_rest().then_some(labels.max_rest_confidence);

    super::report::write_selection_dumps(out, iteration, &selection, &pool_ann, provenance)?;

    let mut next = state;
    next.selections
        .extend(SelectionRow::from_selection(iteration, &selection, &thresholds));
    next.history.push(report);
    next.completed += 1;
    next.teacher = student;
    next.calibration = ev.fit.calibration;
    next.last_selection = Some(selection);
    Ok(next)
}
