use odst::dedup::{
    dedup_run, l2_distance, nn_within_radius, nn_within_radius_naive, ssim, DedupConfig, DedupStage, ImageSet,
    ImageTensor,
};
use odst::RngSeed;
use rand::Rng;

const SHAPE: (usize, usize, usize) = (12, 12, 3);

fn random_set(rng: &mut impl Rng, n: usize, hi: f64) -> ImageSet {
    let (h, w, c) = SHAPE;
    let mut set = ImageSet::new(h, w, c);
    for _ in 0..n {
        let v = (0..h * w * c).map(|_| rng.random_range(0.0..hi)).collect();
        set.push(&ImageTensor::new(h, w, c, v).unwrap()).unwrap();
    }
    set
}

/// `src` plus a random perturbation of L2 norm `scale` (before clamping).
fn perturbed(rng: &mut impl Rng, src: &ImageTensor, scale: f64) -> ImageTensor {
    let (h, w, c) = src.shape();
    let noise: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    let v = src
        .values()
        .iter()
        .zip(&noise)
        .map(|(a, n)| (a + scale * n / norm).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(h, w, c, v).unwrap()
}

#[test]
fn blocked_search_equals_naive() {
    let mut rng = RngSeed(41).rng();
    let refs = random_set(&mut rng, 1000, 1.0);
    let corpus = random_set(&mut rng, 10_000, 1.0);
    for radius in [2000.0 / 255.0, 8.0, 8.5] {
        let fast = nn_within_radius(&corpus, &refs, radius).unwrap();
        let slow = nn_within_radius_naive(&corpus, &refs, radius).unwrap();
        assert!(!fast.is_empty(), "radius {radius} finds nothing");
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            assert_eq!(a.corpus_index, b.corpus_index);
            assert_eq!(a.reference_index, b.reference_index);
            assert_eq!(a.distance.to_bits(), b.distance.to_bits());
        }
    }
}

#[test]
fn exact_and_perturbed_plants_are_removed() {
    let mut rng = RngSeed(42).rng();
    let refs = random_set(&mut rng, 50, 1.0);
    let mut corpus = random_set(&mut rng, 300, 1.0);
    let exact = refs.image(3);
    let noisy = perturbed(&mut rng, &refs.image(7), 5.0);
    let d = l2_distance(noisy.values(), refs.row(7));
    assert!(d > 3.0 && d < 2000.0 / 255.0, "perturbed copy at {d}");
    corpus.push(&exact).unwrap();
    corpus.push(&noisy).unwrap();
    let (i_exact, i_noisy) = (corpus.len() - 2, corpus.len() - 1);

    let out = dedup_run(&corpus, &[refs], &DedupConfig::default()).unwrap();
    assert!(out.mask[i_exact] && out.mask[i_noisy]);
    let rec = |i: usize| out.audit.iter().find(|r| r.corpus_index == i).unwrap();
    assert_eq!(rec(i_exact).stage, DedupStage::HardRadius);
    assert_eq!(rec(i_exact).l2, 0.0);
    assert_eq!(rec(i_noisy).stage, DedupStage::Similarity);
    assert_eq!(rec(i_noisy).reference_index, 7);
    assert!(rec(i_noisy).ssim_distance.unwrap() < 0.4);
    assert_eq!(out.removed(), out.audit.iter().filter(|r| r.removed).count());
}

#[test]
fn distant_image_is_retained() {
    let mut rng = RngSeed(43).rng();
    let refs = random_set(&mut rng, 200, 0.25);
    let (h, w, c) = (16, 16, 3);
    let mut refs16 = ImageSet::new(h, w, c);
    for i in 0..refs.len() {
        let src = refs.image(i);
        let v: Vec<f64> = (0..h * w * c).map(|j| src.values()[j % src.values().len()]).collect();
        refs16.push(&ImageTensor::new(h, w, c, v).unwrap()).unwrap();
    }
    let probe = ImageTensor::new(h, w, c, vec![1.0; h * w * c]).unwrap();
    let min = (0..refs16.len())
        .map(|i| l2_distance(probe.values(), refs16.row(i)))
        .fold(f64::INFINITY, f64::min);
    assert!(min >= 20.0, "probe only {min} away");
    let corpus = ImageSet::from_images(&[probe]).unwrap();
    let out = dedup_run(&corpus, &[refs16], &DedupConfig::default()).unwrap();
    assert_eq!(out.mask, vec![false]);
    assert!(out.audit.is_empty());
}

#[test]
fn removal_grows_with_thresholds() {
    let mut rng = RngSeed(44).rng();
    let refs = random_set(&mut rng, 40, 1.0);
    let mut corpus = random_set(&mut rng, 100, 1.0);
    for (i, scale) in [0.5, 2.0, 3.5, 5.0, 6.5, 7.5].iter().cycle().take(24).enumerate() {
        let img = perturbed(&mut rng, &refs.image(i), *scale);
        corpus.push(&img).unwrap();
    }
    let configs = [
        (1.0, 4.0, 0.1),
        (2.0, 6.0, 0.2),
        (3.0, 2000.0 / 255.0, 0.4),
        (4.0, 8.0, 0.6),
        (6.0, 9.0, 0.9),
    ];
    let mut prev: Option<Vec<bool>> = None;
    for (hard, cand, ssim_max) in configs {
        let cfg = DedupConfig {
            hard_radius: hard,
            candidate_radius: cand,
            ssim_dist_max: ssim_max,
            ..DedupConfig::default()
        };
        let mask = dedup_run(&corpus, &[refs.clone()], &cfg).unwrap().mask;
        if let Some(p) = &prev {
            assert!(p.iter().zip(&mask).all(|(&a, &b)| !a || b), "config {cfg:?} un-removed an image");
        }
        prev = Some(mask);
    }
}

#[test]
fn multiple_reference_sets_report_their_origin() {
    let mut rng = RngSeed(45).rng();
    let a = random_set(&mut rng, 10, 1.0);
    let b = random_set(&mut rng, 10, 1.0);
    let corpus = ImageSet::from_images(&[b.image(4), a.image(9)]).unwrap();
    let out = dedup_run(&corpus, &[a, b], &DedupConfig::default()).unwrap();
    assert_eq!(out.mask, vec![true, true]);
    assert_eq!((out.audit[0].reference_set, out.audit[0].reference_index), (1, 4));
    assert_eq!((out.audit[1].reference_set, out.audit[1].reference_index), (0, 9));
}

#[test]
fn ssim_identity_and_symmetry() {
    let mut rng = RngSeed(46).rng();
    let set = random_set(&mut rng, 20, 1.0);
    for i in 0..set.len() {
        let x = set.image(i);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        let z = set.image((i + 1) % set.len());
        assert!((ssim(&x, &z).unwrap() - ssim(&z, &x).unwrap()).abs() <= 1e-12);
    }
}
