use odst::oracle::{bayes_base, bayes_iter_closed, bayes_iter_recursive, bayes_limit, bayes_step, OraclePoint};
use odst::{ProbVector, RngSeed, WorldSpec};
use proptest::prelude::*;

fn point(p_in: f64, p_all: f64, post: &[f64]) -> OraclePoint {
    OraclePoint::new(p_in, p_all, ProbVector::new(post.to_vec()).unwrap()).unwrap()
}

fn max_abs(a: &ProbVector, b: &ProbVector) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn hand_computed_values() {
    // r = 3/4
    let pt = point(1.0, 3.0, &[0.7, 0.2, 0.1]);
    let base = bayes_base(&pt).unwrap();
    for (got, want) in base.as_slice().iter().zip([0.425, 0.3, 0.275]) {
        assert!((got - want).abs() < 1e-15);
    }
    let t2 = bayes_iter_closed(&pt, 2).unwrap();
    for (got, want) in t2.as_slice().iter().zip([0.5453125, 0.25625, 0.1984375]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert_eq!(bayes_limit(&pt).unwrap().as_slice(), &[0.7, 0.2, 0.1]);
}

#[test]
fn closed_form_tracks_recursion_on_the_world() {
    let world = WorldSpec::default_ring().compile().unwrap();
    let pts = world.sample_unlabeled(2000, RngSeed(51)).unwrap();
    for x in pts.features().rows() {
        let pt = OraclePoint::from_world(&world, x).unwrap();
        let mut rec = bayes_base(&pt).unwrap();
        for t in 0..=50 {
            if t > 0 {
                rec = bayes_step(&pt, &rec).unwrap();
            }
            assert!(max_abs(&rec, &bayes_iter_closed(&pt, t).unwrap()) <= 1e-12);
        }
    }
}

#[test]
fn zero_in_density_stays_uniform() {
    let pt = point(0.0, 1.0, &[1.0, 0.0]);
    for t in [0, 1, 10] {
        assert_eq!(bayes_iter_closed(&pt, t).unwrap().as_slice(), &[0.5, 0.5]);
    }
    assert_eq!(bayes_limit(&pt).unwrap().as_slice(), &[0.5, 0.5]);
    assert!(OraclePoint::new(0.0, 0.0, ProbVector::uniform(2)).unwrap().ratio().is_err());
}

proptest! {
    #[test]
    fn iterates_approach_the_limit(
        p_in in 1e-6f64..10.0,
        p_all in 1e-6f64..10.0,
        raw in proptest::collection::vec(0.01f64..1.0, 2..6),
    ) {
        let s: f64 = raw.iter().sum();
        let post: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let pt = point(p_in, p_all, &post);
        let limit = bayes_limit(&pt).unwrap();
        prop_assert!(max_abs(&bayes_base(&pt).unwrap(), &bayes_iter_closed(&pt, 0).unwrap()) <= 1e-14);
        let mut prev = f64::INFINITY;
        for t in 0..30 {
            let gap = max_abs(&bayes_iter_closed(&pt, t).unwrap(), &limit);
            prop_assert!(gap <= prev + 1e-15);
            prev = gap;
            prop_assert!(max_abs(&bayes_iter_closed(&pt, t).unwrap(), &bayes_iter_recursive(&pt, t).unwrap()) <= 1e-12);
        }
    }
}
