use odst::synth::{ComponentSpec, Covariance};
use odst::{RngSeed, WorldSpec};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Plain re-derivation of a Gaussian mixture density, kept separate from the
/// library's Cholesky/log-sum-exp path.
fn gauss_pdf(x: &[f64], c: &ComponentSpec) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    match &c.covariance {
        Covariance::Diagonal(var) => x
            .iter()
            .zip(&c.mean)
            .zip(var)
            .map(|((xi, mi), v)| (-(xi - mi).powi(2) / (2.0 * v)).exp() / (two_pi * v).sqrt())
            .product(),
        Covariance::Full(m) => {
            assert_eq!(m.len(), 2, "oracle handles 2x2 only");
            let (a, b, cc, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
            let det = a * d - b * cc;
            let (u, v) = (x[0] - c.mean[0], x[1] - c.mean[1]);
            let quad = (d * u * u - (b + cc) * u * v + a * v * v) / det;
            (-0.5 * quad).exp() / (two_pi * det.sqrt())
        }
    }
}

fn mixture(x: &[f64], comps: &[ComponentSpec]) -> f64 {
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter().map(|c| c.weight / total * gauss_pdf(x, c)).sum()
}

#[test]
fn labeled_class_counts_are_binomial() {
    let world = WorldSpec::default_ring().compile().unwrap();
    let k = world.num_classes();
    for seed in 1..4 {
        let n = 4000;
        let t = world.sample_labeled(n, RngSeed(seed)).unwrap();
        let p = 1.0 / k as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (c, &count) in t.class_counts().iter().enumerate() {
            let z = (count as f64 - n as f64 * p).abs() / sd;
            assert!(z <= 4.0, "seed {seed} class {c}: count {count}, z {z:.2}");
        }
    }
}

#[test]
fn in_distribution_fraction_of_pool() {
    let world = WorldSpec::default_ring().compile().unwrap();
    let u = world.sample_unlabeled(200_000, RngSeed(2)).unwrap();
    let f = u.in_distribution_fraction();
    assert!((0.045..=0.055).contains(&f), "fraction {f}");
}

#[test]
fn first_marginal_passes_chi_squared() {
    let world = WorldSpec::default_ring().compile().unwrap();
    let spec = world.spec();
    let u = world.sample_unlabeled(100_000, RngSeed(11)).unwrap();

    // marginal of x_0 under p_all: weighted 1-d normal mixture
    let mut parts: Vec<(f64, Normal)> = Vec::new();
    let blocks = [(&spec.in_components, spec.pi_in), (&spec.out_components, 1.0 - spec.pi_in)];
    for (comps, block_weight) in blocks {
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in comps.iter() {
            let var = match &c.covariance {
                Covariance::Diagonal(v) => v[0],
                Covariance::Full(m) => m[0][0],
            };
            parts.push((block_weight * c.weight / total, Normal::new(c.mean[0], var.sqrt()).unwrap()));
        }
    }
    let cdf = |x: f64| parts.iter().map(|(w, n)| w * n.cdf(x)).sum::<f64>();

    let edges: Vec<f64> = (0..=40).map(|i| -5.0 + 0.25 * i as f64).collect();
    let mut observed = vec![0usize; edges.len() + 1];
    for row in u.features().rows() {
        let bin = edges.partition_point(|&e| e < row[0]);
        observed[bin] += 1;
    }
    let n = u.len() as f64;
    let mut stat = 0.0;
    for (b, &obs) in observed.iter().enumerate() {
        let lo = if b == 0 { 0.0 } else { cdf(edges[b - 1]) };
        let hi = if b == edges.len() { 1.0 } else { cdf(edges[b]) };
        let expected = n * (hi - lo);
        assert!(expected >= 5.0, "bin {b} expects {expected}");
        stat += (obs as f64 - expected).powi(2) / expected;
    }
    let df = (observed.len() - 1) as f64;
    let p = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat:.2} on {df} df, p = {p:.4}");
}

#[test]
fn densities_match_brute_force() {
    let world = WorldSpec::default_ring().compile().unwrap();
    let spec = world.spec().clone();
    let pts = world.sample_unlabeled(500, RngSeed(3)).unwrap();
    for x in pts.features().rows() {
        let p_in = mixture(x, &spec.in_components);
        let p_out = mixture(x, &spec.out_components);
        let p_all = spec.pi_in * p_in + (1.0 - spec.pi_in) * p_out;
        for (got, want) in [
            (world.density_in(x).unwrap(), p_in),
            (world.density_out(x).unwrap(), p_out),
            (world.density_all(x).unwrap(), p_all),
        ] {
            assert!((got - want).abs() <= 1e-12 * want.max(1e-300), "{got} vs {want}");
        }
        let post = world.posterior_in(x).unwrap();
        for (c, comp) in spec.in_components.iter().enumerate() {
            let total: f64 = spec.in_components.iter().map(|c| c.weight).sum();
            let want = comp.weight / total * gauss_pdf(x, comp) / p_in;
            assert!((post[c] - want).abs() <= 1e-12, "posterior {c}: {} vs {want}", post[c]);
        }
    }
}

#[test]
fn full_covariance_density_matches_brute_force() {
    let spec = WorldSpec {
        d: 2,
        in_components: vec![
            ComponentSpec {
                mean: vec![1.0, -0.5],
                covariance: Covariance::Full(vec![vec![1.0, 0.6], vec![0.6, 0.8]]),
                weight: 0.6,
            },
            ComponentSpec::isotropic(vec![-1.0, 1.0], 0.7, 0.4),
        ],
        out_components: vec![ComponentSpec {
            mean: vec![0.0, 3.0],
            covariance: Covariance::Full(vec![vec![2.0, -0.9], vec![-0.9, 1.5]]),
            weight: 1.0,
        }],
        pi_in: 0.25,
    };
    let world = spec.compile().unwrap();
    let pts = world.sample_unlabeled(300, RngSeed(8)).unwrap();
    for x in pts.features().rows() {
        let want = spec.pi_in * mixture(x, &spec.in_components) + (1.0 - spec.pi_in) * mixture(x, &spec.out_components);
        let got = world.density_all(x).unwrap();
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }
}

#[test]
fn sampling_is_reproducible() {
    let world = WorldSpec::default_ring().compile().unwrap();
    let a = world.sample_unlabeled(10_000, RngSeed(5)).unwrap();
    let b = world.sample_unlabeled(10_000, RngSeed(5)).unwrap();
    let c = world.sample_unlabeled(10_000, RngSeed(6)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let d = pool.install(|| world.sample_unlabeled(10_000, RngSeed(5)).unwrap());
    assert_eq!(a.checksum(), d.checksum());
}
