//! The synthetic open world: a labeled in-distribution block of K Gaussian
//! classes inside a much larger Gaussian mixture that generates the
//! unlabeled pool. All densities are exact and evaluated in log space.

use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Features, LabeledSet, Provenance, Role, UnlabeledSet};
use crate::error::{Error, Result};
use crate::prob::ProbVector;
use crate::rng::{Rng, RngSeed};

/// Samples generated per seeded substream.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    pub covariance: Covariance,
    pub weight: f64,
}

impl ComponentSpec {
    pub fn isotropic(mean: Vec<f64>, std: f64, weight: f64) -> Self {
        let d = mean.len();
        Self {
            mean,
            covariance: Covariance::Diagonal(vec![std * std; d]),
            weight,
        }
    }
}

/// Serializable description of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub d: usize,
    /// `in_components[c]` generates class `c`.
    pub in_components: Vec<ComponentSpec>,
    pub out_components: Vec<ComponentSpec>,
    /// Weight of the in-distribution block inside `p_all`.
    pub pi_in: f64,
}

/// Knobs of the `default_ring` preset.
#[derive(Debug, Clone, PartialEq)]
pub struct RingPreset {
    pub k: usize,
    pub class_radius: f64,
    pub class_std: f64,
    pub outer_count: usize,
    pub outer_radius: f64,
    pub outer_std: f64,
    pub inner_count: usize,
    pub inner_radius: f64,
    pub inner_std: f64,
    pub pi_in: f64,
}

impl Default for RingPreset {
    fn default() -> Self {
        Self {
            k: 4,
            class_radius: 2f64.sqrt(),
            class_std: 0.5,
            outer_count: 48,
            outer_radius: 3.5,
            outer_std: 0.6,
            inner_count: 12,
            inner_radius: 1.9,
            inner_std: 0.4,
            pi_in: 0.05,
        }
    }
}

impl RingPreset {
    /// Classes sit on a circle at angles `pi/4 + 2 pi c / K`. The inner
    /// ring of unrelated components interleaves with the classes and
    /// overlaps their tails; the outer ring surrounds everything.
    pub fn build(&self) -> WorldSpec {
        let k = self.k;
        let in_components = (0..k)
            .map(|c| {
                let a = PI / 4.0 + TAU * c as f64 / k as f64;
                ComponentSpec::isotropic(
                    vec![self.class_radius * a.cos(), self.class_radius * a.sin()],
                    self.class_std,
                    1.0 / k as f64,
                )
            })
            .collect();
        let m_out = self.outer_count + self.inner_count;
        let mut out_components = Vec::with_capacity(m_out);
        for j in 0..self.inner_count {
            let a = TAU * j as f64 / self.inner_count as f64;
            out_components.push(ComponentSpec::isotropic(
                vec![self.inner_radius * a.cos(), self.inner_radius * a.sin()],
                self.inner_std,
                1.0 / m_out as f64,
            ));
        }
        for j in 0..self.outer_count {
            let a = TAU * (j as f64 + 0.5) / self.outer_count as f64;
            out_components.push(ComponentSpec::isotropic(
                vec![self.outer_radius * a.cos(), self.outer_radius * a.sin()],
                self.outer_std,
                1.0 / m_out as f64,
            ));
        }
        WorldSpec {
            d: 2,
            in_components,
            out_components,
            pi_in: self.pi_in,
        }
    }
}

impl WorldSpec {
    /// d=2, K=4, M=64, pi_in=0.05.
    pub fn default_ring() -> Self {
        RingPreset::default().build()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default_ring" => Ok(Self::default_ring()),
            _ => Err(Error::Config(format!("unknown world preset `{name}`"))),
        }
    }

    /// Out-of-distribution block displaced far from the training data;
    /// evaluation only.
    pub fn far_ood_block(&self, shift: f64) -> Vec<ComponentSpec> {
        self.out_components
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.mean[0] += shift;
                c
            })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.in_components.len()
    }

    pub fn compile(&self) -> Result<World> {
        World::new(self.clone())
    }
}

/// Gaussian with a precomputed Cholesky factor.
#[derive(Debug, Clone)]
struct Gaussian {
    mean: Vec<f64>,
    /// Lower-triangular factor, row-major `d x d`.
    chol: Vec<f64>,
    /// `-0.5 * (d ln 2pi + ln det Sigma)`
    log_norm: f64,
}

impl Gaussian {
    fn new(spec: &ComponentSpec, d: usize) -> Result<Self> {
        if spec.mean.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: spec.mean.len(),
            });
        }
        if !(spec.weight > 0.0) {
            return Err(Error::Config(format!("component weight {} must be > 0", spec.weight)));
        }
        let mut full = vec![0.0; d * d];
        match &spec.covariance {
            Covariance::Diagonal(diag) => {
                if diag.len() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        got: diag.len(),
                    });
                }
                for i in 0..d {
                    full[i * d + i] = diag[i];
                }
            }
            Covariance::Full(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Dimension {
                        expected: d,
                        got: rows.len(),
                    });
                }
                for i in 0..d {
                    for j in 0..d {
                        if (rows[i][j] - rows[j][i]).abs() > 1e-12 * (1.0 + rows[i][j].abs()) {
                            return Err(Error::Config("covariance is not symmetric".into()));
                        }
                        full[i * d + j] = rows[i][j];
                    }
                }
            }
        }
        let chol = cholesky(&full, d)?;
        let log_det: f64 = (0..d).map(|i| 2.0 * chol[i * d + i].ln()).sum();
        Ok(Self {
            mean: spec.mean.clone(),
            chol,
            log_norm: -0.5 * (d as f64 * TAU.ln() + log_det),
        })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        // forward substitution L u = x - mu
        let mut quad = 0.0;
        let mut u = [0.0f64; 16];
        let mut heap;
        let u: &mut [f64] = if d <= 16 {
            &mut u[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[i * d + j] * u[j];
            }
            u[i] = s / self.chol[i * d + i];
            quad += u[i] * u[i];
        }
        self.log_norm - 0.5 * quad
    }

    fn sample(&self, rng: &mut Rng, out: &mut Vec<f64>) {
        let d = self.mean.len();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut v = self.mean[i];
            for j in 0..=i {
                v += self.chol[i * d + j] * eps[j];
            }
            out.push(v);
        }
    }
}

fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Config("covariance is not positive definite".into()));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// `ln sum exp(v)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
struct Block {
    gaussians: Vec<Gaussian>,
    log_weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Block {
    fn new(specs: &[ComponentSpec], d: usize, name: &str) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config(format!("{name} block has no components")));
        }
        let total: f64 = specs.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{name} weights sum to {total}, expected 1")));
        }
        let gaussians = specs.iter().map(|c| Gaussian::new(c, d)).collect::<Result<Vec<_>>>()?;
        let mut acc = 0.0;
        let cumulative = specs
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(Self {
            gaussians,
            log_weights: specs.iter().map(|c| c.weight.ln()).collect(),
            cumulative,
        })
    }

    fn component_log_joint(&self, x: &[f64]) -> Vec<f64> {
        self.gaussians
            .iter()
            .zip(&self.log_weights)
            .map(|(g, lw)| lw + g.log_pdf(x))
            .collect()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(self.component_log_joint(x))
    }

    fn pick(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

/// Validated world with precomputed factors; densities and sampling.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    inner: Block,
    outer: Block,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        let k = spec.in_components.len();
        if k < 2 {
            return Err(Error::Config(format!("need K >= 2 classes, got {k}")));
        }
        if spec.d == 0 {
            return Err(Error::Config("dimension must be > 0".into()));
        }
        if !(spec.pi_in > 0.0 && spec.pi_in < 1.0) {
            return Err(Error::Config(format!("pi_in {} outside (0,1)", spec.pi_in)));
        }
        let inner = Block::new(&spec.in_components, spec.d, "in-distribution")?;
        let outer = Block::new(&spec.out_components, spec.d, "out-distribution")?;
        Ok(Self { spec, inner, outer })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.d
    }

    pub fn num_classes(&self) -> usize {
        self.spec.in_components.len()
    }

    /// Total component count M.
    pub fn num_components(&self) -> usize {
        self.spec.in_components.len() + self.spec.out_components.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.d {
            return Err(Error::Dimension {
                expected: self.spec.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn log_density_in(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.inner.log_density(x))
    }

    pub fn log_density_out(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.outer.log_density(x))
    }

    pub fn log_density_all(&self, x: &[f64]) -> Result<f64> {
        let li = self.log_density_in(x)?;
        let lo = self.outer.log_density(x);
        Ok(log_sum_exp([
            self.spec.pi_in.ln() + li,
            (1.0 - self.spec.pi_in).ln() + lo,
        ]))
    }

    pub fn density_in(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_in(x)?.exp())
    }

    pub fn density_out(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_out(x)?.exp())
    }

    pub fn density_all(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_all(x)?.exp())
    }

    /// `p_in(k | x)`; uniform where `p_in(x)` underflows to zero.
    pub fn posterior_in(&self, x: &[f64]) -> Result<ProbVector> {
        self.check_dim(x)?;
        let k = self.num_classes();
        let joint = self.inner.component_log_joint(x);
        let total = log_sum_exp(joint.iter().copied());
        if total.exp() == 0.0 {
            return Ok(ProbVector::uniform(k));
        }
        let mut p: Vec<f64> = joint.iter().map(|l| (l - total).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        Ok(ProbVector::from_normalized(p))
    }

    fn chunked<T: Send>(
        n: usize,
        seed: RngSeed,
        tag: &str,
        gen: impl Fn(&mut Rng, usize) -> Vec<T> + Sync,
    ) -> Vec<T> {
        let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
        chunks
            .par_iter()
            .map(|&c| {
                let len = CHUNK.min(n - c * CHUNK);
                gen(&mut seed.derive(tag, c as u64).rng(), len)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    }

    fn draw_labeled(&self, n: usize, seed: RngSeed, role: Role) -> Result<LabeledSet> {
        if n == 0 {
            return Err(Error::Precondition("sample count must be > 0".into()));
        }
        let d = self.spec.d;
        let rows: Vec<(Vec<f64>, usize)> = Self::chunked(n, seed, "labeled", |rng, len| {
            (0..len)
                .map(|_| {
                    let c = self.inner.pick(rng);
                    let mut x = Vec::with_capacity(d);
                    self.inner.gaussians[c].sample(rng, &mut x);
                    (x, c)
                })
                .collect()
        });
        let mut values = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for (x, c) in rows {
            values.extend(x);
            y.push(c);
        }
        LabeledSet::new(role, self.num_classes(), Features::new(d, values)?, y)
    }

    fn draw_unlabeled(&self, m: usize, seed: RngSeed, role: Role, pi_in: f64) -> Result<UnlabeledSet> {
        if m == 0 {
            return Err(Error::Precondition("sample count must be > 0".into()));
        }
        let d = self.spec.d;
        let k = self.num_classes() as u32;
        let rows: Vec<(Vec<f64>, Provenance)> = Self::chunked(m, seed, "unlabeled", |rng, len| {
            (0..len)
                .map(|_| {
                    let mut x = Vec::with_capacity(d);
                    let prov = if rng.random::<f64>() < pi_in {
                        let c = self.inner.pick(rng);
                        self.inner.gaussians[c].sample(rng, &mut x);
                        Provenance {
                            component: c as u32,
                            in_distribution: true,
                        }
                    } else {
                        let j = self.outer.pick(rng);
                        self.outer.gaussians[j].sample(rng, &mut x);
                        Provenance {
                            component: k + j as u32,
                            in_distribution: false,
                        }
                    };
                    (x, prov)
                })
                .collect()
        });
        let mut values = Vec::with_capacity(m * d);
        let mut prov = Vec::with_capacity(m);
        for (x, p) in rows {
            values.extend(x);
            prov.push(p);
        }
        UnlabeledSet::new(role, self.num_classes(), Features::new(d, values)?, prov)
    }

    /// `n` i.i.d. draws from `p_in(x, y)`.
    pub fn sample_labeled(&self, n: usize, seed: RngSeed) -> Result<LabeledSet> {
        self.draw_labeled(n, seed, Role::Train)
    }

    /// Labeled in-distribution test set.
    pub fn sample_test(&self, n: usize, seed: RngSeed) -> Result<LabeledSet> {
        self.draw_labeled(n, seed, Role::Test)
    }

    /// `m` i.i.d. draws from `p_all(x)`, with hidden provenance.
    pub fn sample_unlabeled(&self, m: usize, seed: RngSeed) -> Result<UnlabeledSet> {
        self.draw_unlabeled(m, seed, Role::Unlabeled, self.spec.pi_in)
    }

    /// Draws from the out-distribution block only.
    pub fn sample_ood(&self, n: usize, seed: RngSeed) -> Result<UnlabeledSet> {
        self.draw_unlabeled(n, seed, Role::OodVal, 0.0)
    }

    /// In-distribution validation set from `p_in(x, y)` and an
    /// out-distribution validation set drawn only from the out block.
    pub fn make_validation_sets(
        &self,
        n_in: usize,
        n_ood: usize,
        seed: RngSeed,
    ) -> Result<(LabeledSet, UnlabeledSet)> {
        let in_val = self.draw_labeled(n_in, seed.derive("in_val", 0), Role::InVal)?;
        let ood_val = self.sample_ood(n_ood, seed.derive("ood_val", 0))?;
        Ok((in_val, ood_val))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_class(sep: f64) -> World {
        WorldSpec {
            d: 2,
            in_components: vec![
                ComponentSpec::isotropic(vec![-sep, 0.0], 1.0, 0.5),
                ComponentSpec::isotropic(vec![sep, 0.0], 1.0, 0.5),
            ],
            out_components: vec![ComponentSpec::isotropic(vec![0.0, 5.0], 2.0, 1.0)],
            pi_in: 0.3,
        }
        .compile()
        .unwrap()
    }

    #[test]
    fn default_world_shape() {
        let w = WorldSpec::default_ring().compile().unwrap();
        assert_eq!(w.dim(), 2);
        assert_eq!(w.num_classes(), 4);
        assert_eq!(w.num_components(), 64);
        assert_eq!(w.spec().pi_in, 0.05);
    }

    #[test]
    fn density_at_mean_of_standard_gaussian() {
        let w = WorldSpec {
            d: 2,
            in_components: vec![
                ComponentSpec::isotropic(vec![0.0, 0.0], 1.0, 1.0 - 1e-300),
                ComponentSpec::isotropic(vec![1e6, 0.0], 1.0, 1e-300),
            ],
            out_components: vec![ComponentSpec::isotropic(vec![0.0, 0.0], 1.0, 1.0)],
            pi_in: 0.5,
        }
        .compile()
        .unwrap();
        assert_relative_eq!(w.density_in(&[0.0, 0.0]).unwrap(), 1.0 / TAU, max_relative = 1e-14);
    }

    #[test]
    fn symmetric_posterior_is_half() {
        let w = two_class(1.5);
        let p = w.posterior_in(&[0.0, 3.0]).unwrap();
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn posterior_is_uniform_where_density_underflows() {
        let w = two_class(1.0);
        let p = w.posterior_in(&[1e3, 0.0]).unwrap();
        assert_eq!(w.density_in(&[1e3, 0.0]).unwrap(), 0.0);
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    /// Direct summation of weighted Gaussian pdfs, written from the
    /// textbook formula with an explicit inverse for full covariances.
    fn brute_density(comps: &[ComponentSpec], x: &[f64]) -> f64 {
        comps
            .iter()
            .map(|c| {
                let (a, b, cc) = match &c.covariance {
                    Covariance::Diagonal(v) => (v[0], 0.0, v[1]),
                    Covariance::Full(m) => (m[0][0], m[0][1], m[1][1]),
                };
                let det = a * cc - b * b;
                let dx = x[0] - c.mean[0];
                let dy = x[1] - c.mean[1];
                let q = (cc * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                c.weight * (-0.5 * q).exp() / (TAU * det.sqrt())
            })
            .sum()
    }

    #[test]
    fn densities_match_direct_summation() {
        let mut spec = WorldSpec::default_ring();
        spec.out_components[3].covariance = Covariance::Full(vec![vec![0.5, 0.2], vec![0.2, 0.3]]);
        let w = spec.compile().unwrap();
        let mut rng = RngSeed(11).rng();
        for _ in 0..200 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let din = brute_density(&spec.in_components, &x);
            let dout = brute_density(&spec.out_components, &x);
            assert_relative_eq!(w.density_in(&x).unwrap(), din, max_relative = 1e-10);
            assert_relative_eq!(w.density_out(&x).unwrap(), dout, max_relative = 1e-10);
            // mixture identity
            assert_relative_eq!(
                w.density_all(&x).unwrap(),
                spec.pi_in * din + (1.0 - spec.pi_in) * dout,
                max_relative = 1e-10
            );
            let post = w.posterior_in(&x).unwrap();
            for (c, comp) in spec.in_components.iter().enumerate() {
                let joint = brute_density(std::slice::from_ref(comp), &x);
                assert_relative_eq!(post[c], joint / din, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let w = two_class(1.0);
        assert!(matches!(w.density_in(&[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn invalid_worlds_are_rejected() {
        let mut spec = WorldSpec::default_ring();
        spec.in_components[0].covariance = Covariance::Diagonal(vec![0.0, 1.0]);
        assert!(spec.compile().is_err());
        let mut spec = WorldSpec::default_ring();
        spec.pi_in = 1.0;
        assert!(spec.compile().is_err());
        let mut spec = WorldSpec::default_ring();
        spec.out_components[0].weight *= 2.0;
        assert!(spec.compile().is_err());
    }

    #[test]
    fn small_samples() {
        let w = WorldSpec::default_ring().compile().unwrap();
        let t = w.sample_labeled(4, RngSeed(1)).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.labels().iter().all(|&y| y < 4));
        assert!(w.sample_labeled(0, RngSeed(1)).is_err());
        let u = w.sample_unlabeled(1, RngSeed(1)).unwrap();
        assert_eq!(u.len(), 1);
        let p = u.provenance()[0];
        assert_eq!(p.in_distribution, (p.component as usize) < 4);
        let (iv, ov) = w.make_validation_sets(3, 1, RngSeed(5)).unwrap();
        assert_eq!((iv.len(), ov.len()), (3, 1));
    }

    #[test]
    fn sampling_is_deterministic() {
        let w = WorldSpec::default_ring().compile().unwrap();
        let a = w.sample_unlabeled(9000, RngSeed(3)).unwrap();
        let b = w.sample_unlabeled(9000, RngSeed(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, w.sample_unlabeled(9000, RngSeed(4)).unwrap());
    }
}
