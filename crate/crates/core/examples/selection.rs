//! Pseudo-labels a pool with a base teacher, computes both class
//! thresholds, selects the top-k per class and scores the selection
//! against the hidden provenance.

use odst::calib::fit_model;
use odst::metrics::selection_precision;
use odst::select::{assign_pseudo_labels, k_schedule, pseudo_label_pool, select_topk, SelectionThresholds};
use odst::train::train_base;
use odst::{Mode, RngSeed, TrainConfig, WorldSpec};

fn main() -> odst::Result<()> {
    let seed = RngSeed(4);
    let world = WorldSpec::default_ring().compile()?;
    let t = world.sample_labeled(2000, seed.derive("train", 0))?;
    let u = world.sample_unlabeled(50_000, seed.derive("unlabeled", 0))?;
    let (in_val, ood_val) = world.make_validation_sets(2000, 5000, seed.derive("val", 0))?;

    let cfg = TrainConfig {
        mode: Mode::BaseOe,
        seed,
        ..TrainConfig::default()
    }
    .with_epochs(60);
    let teacher = train_base(&t, u.features(), Some(&in_val), &cfg)?.model;
    let calib = fit_model(&teacher, in_val.features(), in_val.labels())?.calibration;

    let pool = pseudo_label_pool(&teacher, &calib, u.features())?;
    let in_ann = pseudo_label_pool(&teacher, &calib, in_val.features())?;
    let ood_ann = pseudo_label_pool(&teacher, &calib, ood_val.features())?;
    let k = k_schedule(t.len(), world.num_classes(), 0);

    for (name, use_ood) in [("precision only", false), ("precision and OOD quantile", true)] {
        let thr = SelectionThresholds::compute(&in_ann, in_val.labels(), &ood_ann, 0.98, use_ood)?;
        let sel = select_topk(&pool, &thr, k, seed)?;
        let (precision, recall) = selection_precision(&sel, u.provenance());
        println!("{name}: k = {k}");
        for (c, (cs, ct)) in sel.per_class.iter().zip(&thr.per_class).enumerate() {
            println!(
                "  class {c}: id {} ood {:.4} final {} | above {} accepted {} repeated {}",
                ct.id, ct.ood, ct.final_threshold, cs.above_threshold, cs.accepted_unique, cs.repetitions
            );
        }
        println!("  precision {precision:?}, recall in pool {recall:?}");
        let labels = assign_pseudo_labels(u.features(), &pool, &sel, Mode::Odst)?;
        println!(
            "  |I| = {}, |U \\ I| = {}, max confidence of the rest targets {:.4}",
            labels.selected.len(),
            labels.rest.len(),
            labels.max_rest_confidence
        );
    }
    Ok(())
}
