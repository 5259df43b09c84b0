//! Bayes-optimal predictions for the base objective and for the iterated
//! soft-label objective, in closed form and by recursion.
//!
//! Every formula depends on the two densities only through their ratio,
//! so an [`OraclePoint`] may hold them up to a common positive factor.

use rayon::prelude::*;

use crate::calib::Calibration;
use crate::data::Features;
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::prob::ProbVector;
use crate::synth::World;

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePoint {
    pub p_in_density: f64,
    pub p_all_density: f64,
    /// `p_in(k | x)`; uniform by convention where `p_in(x) = 0`.
    pub class_posterior: ProbVector,
}

impl OraclePoint {
    pub fn new(p_in_density: f64, p_all_density: f64, class_posterior: ProbVector) -> Result<Self> {
        if !(p_in_density >= 0.0) || !(p_all_density >= 0.0) {
            return Err(Error::Domain("densities must be >= 0".into()));
        }
        let k = class_posterior.len();
        let class_posterior = if p_in_density == 0.0 {
            ProbVector::uniform(k)
        } else {
            class_posterior
        };
        Ok(Self {
            p_in_density,
            p_all_density,
            class_posterior,
        })
    }

    /// Exact point of `world` at `x`, densities rescaled by their maximum.
    pub fn from_world(world: &World, x: &[f64]) -> Result<Self> {
        let li = world.log_density_in(x)?;
        let la = world.log_density_all(x)?;
        let m = li.max(la);
        if m == f64::NEG_INFINITY {
            return Err(Error::Domain("both densities vanish".into()));
        }
        Self::new((li - m).exp(), (la - m).exp(), world.posterior_in(x)?)
    }

    fn check(&self) -> Result<()> {
        if !(self.p_in_density + self.p_all_density > 0.0) {
            return Err(Error::Domain("p_in(x) + p_all(x) must be > 0".into()));
        }
        Ok(())
    }

    /// `r = p_all / (p_in + p_all)`.
    pub fn ratio(&self) -> Result<f64> {
        self.check()?;
        Ok(self.p_all_density / (self.p_in_density + self.p_all_density))
    }

    pub fn num_classes(&self) -> usize {
        self.class_posterior.len()
    }
}

/// Minimizer of labeled CE plus uniform-target CE on `p_all`:
/// `(p_in(k|x) p_in(x) + p_all(x) / K) / (p_in(x) + p_all(x))`.
pub fn bayes_base(pt: &OraclePoint) -> Result<ProbVector> {
    pt.check()?;
    let k = pt.num_classes() as f64;
    let denom = pt.p_in_density + pt.p_all_density;
    let v = pt
        .class_posterior
        .as_slice()
        .iter()
        .map(|&pk| (pk * pt.p_in_density + pt.p_all_density / k) / denom)
        .collect();
    Ok(ProbVector::from_normalized(v))
}

/// `p_in(k|x) + r^(t+1) (1/K - p_in(k|x))`.
pub fn bayes_iter_closed(pt: &OraclePoint, t: usize) -> Result<ProbVector> {
    let r = pt.ratio()?;
    let k = pt.num_classes() as f64;
    let rt = r.powi(t as i32 + 1);
    let v = pt
        .class_posterior
        .as_slice()
        .iter()
        .map(|&pk| pk + rt * (1.0 / k - pk))
        .collect();
    Ok(ProbVector::from_normalized(v))
}

/// One step of the soft-label recursion: a student trained on the
/// labeled data plus teacher predictions `prev` on `p_all`.
pub fn bayes_step(pt: &OraclePoint, prev: &ProbVector) -> Result<ProbVector> {
    pt.check()?;
    if prev.len() != pt.num_classes() {
        return Err(Error::Dimension {
            expected: pt.num_classes(),
            got: prev.len(),
        });
    }
    let denom = pt.p_in_density + pt.p_all_density;
    let v = pt
        .class_posterior
        .as_slice()
        .iter()
        .zip(prev.as_slice())
        .map(|(&pk, &qk)| (pt.p_in_density * pk + pt.p_all_density * qk) / denom)
        .collect();
    Ok(ProbVector::from_normalized(v))
}

/// Iterates [`bayes_step`] `t` times from [`bayes_base`].
pub fn bayes_iter_recursive(pt: &OraclePoint, t: usize) -> Result<ProbVector> {
    let mut p = bayes_base(pt)?;
    for _ in 0..t {
        p = bayes_step(pt, &p)?;
    }
    Ok(p)
}

/// `t -> infinity`: `p_in(k|x)` where `p_in(x) > 0`, uniform elsewhere.
pub fn bayes_limit(pt: &OraclePoint) -> Result<ProbVector> {
    pt.check()?;
    if pt.p_in_density > 0.0 {
        Ok(pt.class_posterior.clone())
    } else {
        Ok(ProbVector::uniform(pt.num_classes()))
    }
}

/// Which oracle a model is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleTarget {
    Base,
    Iteration(usize),
    Limit,
}

impl OracleTarget {
    pub fn evaluate(self, pt: &OraclePoint) -> Result<ProbVector> {
        match self {
            OracleTarget::Base => bayes_base(pt),
            OracleTarget::Iteration(t) => bayes_iter_closed(pt, t),
            OracleTarget::Limit => bayes_limit(pt),
        }
    }
}

/// Regular `res x res` grid over an axis-aligned box in 2-d.
pub fn grid_2d(lo: [f64; 2], hi: [f64; 2], res: usize) -> Features {
    let mut values = Vec::with_capacity(res * res * 2);
    let step = |a: f64, b: f64, i: usize| {
        if res == 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * i as f64 / (res - 1) as f64
        }
    };
    for i in 0..res {
        for j in 0..res {
            values.push(step(lo[0], hi[0], i));
            values.push(step(lo[1], hi[1], j));
        }
    }
    Features::new(2, values).expect("rows are 2-d")
}

/// Per-dimension `[min, max]` of a set of rows.
pub fn bounding_box(x: &Features) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::Empty("bounding box input"));
    }
    let d = x.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in x.rows() {
        for i in 0..d {
            lo[i] = lo[i].min(row[i]);
            hi[i] = hi[i].max(row[i]);
        }
    }
    Ok((lo, hi))
}

/// Mean L1 distance between calibrated model predictions and the oracle
/// over `points`.
pub fn oracle_gap(
    model: &ClassifierModel,
    calib: &Calibration,
    world: &World,
    points: &Features,
    target: OracleTarget,
) -> Result<f64> {
    let preds = calib.predict_all(model, points)?;
    oracle_gap_of(&preds, world, points, target)
}

/// Mean L1 gap for precomputed predictions.
pub fn oracle_gap_of(preds: &[ProbVector], world: &World, points: &Features, target: OracleTarget) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("evaluation points"));
    }
    if preds.len() != points.len() {
        return Err(Error::Dimension {
            expected: points.len(),
            got: preds.len(),
        });
    }
    let rows: Vec<&[f64]> = points.rows().collect();
    let gaps = rows
        .par_iter()
        .zip(preds)
        .map(|(x, p)| {
            let pt = OraclePoint::from_world(world, x)?;
            Ok(p.l1_distance(&target.evaluate(&pt)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn base_examples() {
        let pt = OraclePoint::new(1.0, 1.0, pv(&[0.7, 0.3])).unwrap();
        let p = bayes_base(&pt).unwrap();
        assert_relative_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.4, epsilon = 1e-15);

        let pt = OraclePoint::new(0.0, 2.0, pv(&[0.9, 0.05, 0.05])).unwrap();
        assert_eq!(bayes_base(&pt).unwrap(), ProbVector::uniform(3));

        let pt = OraclePoint::new(1.0, 1e-12, pv(&[0.7, 0.3])).unwrap();
        assert_relative_eq!(bayes_base(&pt).unwrap()[0], 0.7, epsilon = 1e-11);
    }

    #[test]
    fn both_zero_is_a_domain_error() {
        let pt = OraclePoint::new(0.0, 0.0, pv(&[0.5, 0.5])).unwrap();
        assert!(matches!(bayes_base(&pt), Err(Error::Domain(_))));
        assert!(bayes_iter_closed(&pt, 3).is_err());
        assert!(bayes_limit(&pt).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let pt = OraclePoint::new(1.0, 1.0, pv(&[1.0, 0.0])).unwrap();
        let p = bayes_iter_closed(&pt, 1).unwrap();
        assert_relative_eq!(p[0], 0.875, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.125, epsilon = 1e-15);
        assert_eq!(bayes_iter_closed(&pt, 0).unwrap(), bayes_base(&pt).unwrap());

        let far = OraclePoint::new(0.0, 1.0, pv(&[0.9, 0.1])).unwrap();
        for t in [0, 1, 7, 50] {
            assert_eq!(bayes_iter_closed(&far, t).unwrap(), ProbVector::uniform(2));
        }
    }

    #[test]
    fn recursion_fixed_point() {
        let post = pv(&[0.2, 0.5, 0.3]);
        let pt = OraclePoint::new(0.4, 1.3, post.clone()).unwrap();
        let next = bayes_step(&pt, &post).unwrap();
        for k in 0..3 {
            assert_relative_eq!(next[k], post[k], epsilon = 1e-15);
        }
        assert_eq!(bayes_iter_recursive(&pt, 0).unwrap(), bayes_base(&pt).unwrap());
    }

    #[test]
    fn limit_cases() {
        let pt = OraclePoint::new(0.3, 0.7, pv(&[0.6, 0.4])).unwrap();
        assert_eq!(bayes_limit(&pt).unwrap(), pv(&[0.6, 0.4]));
        let pt = OraclePoint::new(0.0, 0.7, pv(&[0.6, 0.4])).unwrap();
        assert_eq!(bayes_limit(&pt).unwrap(), ProbVector::uniform(2));
    }

    #[test]
    fn grid_corners() {
        let g = grid_2d([-1.0, 0.0], [1.0, 2.0], 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g.row(0), &[-1.0, 0.0]);
        assert_eq!(g.row(8), &[1.0, 2.0]);
        assert_eq!(g.row(4), &[0.0, 1.0]);
    }
}
