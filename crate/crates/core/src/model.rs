//! Feed-forward classifier with tanh hidden units, softmax outputs and
//! cross-entropy against soft targets. Backprop is written out by hand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::data::Features;
use crate::error::{Error, Result};
use crate::prob::ProbVector;
use crate::rng::{fnv1a, RngSeed};

const MAGIC: &[u8; 8] = b"ODSTMODL";
const VERSION: u32 = 1;

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// summation order (and every bit of the result) is independent of how
/// many threads process them.
const GRAD_CHUNK: usize = 32;

/// Multilayer perceptron `d -> hidden... -> K`.
///
/// Parameters are stored in one flat vector. Layer `l` owns an
/// `in x out` row-major weight block followed by `out` biases, so the
/// pre-activation of unit `j` is `b[j] + sum_i x[i] * w[i * out + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// A batch item: features, soft target, and loss weight.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub target: &'a [f64],
    pub weight: f64,
}

impl<'a> Example<'a> {
    pub fn new(x: &'a [f64], target: &'a [f64]) -> Self {
        Self { x, target, weight: 1.0 }
    }
}

/// Per-thread activation buffers.
struct Scratch {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl ClassifierModel {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if sizes[sizes.len() - 1] < 2 {
            return Err(Error::Config("output width must be >= 2".into()));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: &[usize], seed: RngSeed) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut rng = seed.rng();
        let mut off = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for p in &mut m.params[off..off + n_in * n_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += n_in * n_out + n_out;
        }
        Ok(m)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        if params.len() != m.params.len() {
            return Err(Error::Dimension {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        fnv1a(&bytes)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn scratch(&self) -> Scratch {
        let widest = *self.sizes.iter().max().unwrap();
        Scratch {
            acts: self.sizes.iter().map(|&s| vec![0.0; s]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Fills `s.acts`; the last entry holds the logits.
    fn forward_into(&self, x: &[f64], s: &mut Scratch) {
        s.acts[0].copy_from_slice(x);
        let n_layers = self.sizes.len() - 1;
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let (lo, hi) = s.acts.split_at_mut(l + 1);
            let input = &lo[l];
            let out = &mut hi[0];
            out.copy_from_slice(b);
            for (i, &xi) in input.iter().enumerate() {
                let row = &w[i * n_out..(i + 1) * n_out];
                for (o, &wij) in out.iter_mut().zip(row) {
                    *o += xi * wij;
                }
            }
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            off += n_in * n_out + n_out;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut s = self.scratch();
        self.forward_into(x, &mut s);
        Ok(s.acts.pop().unwrap())
    }

    /// Logits for every row, row-major `n x K`.
    pub fn forward_all(&self, x: &Features) -> Result<Vec<f64>> {
        if x.dim() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.dim(),
            });
        }
        let k = self.num_classes();
        let rows: Vec<&[f64]> = x.rows().collect();
        let mut out = vec![0.0; rows.len() * k];
        out.par_chunks_mut(k * 256)
            .zip(rows.par_chunks(256))
            .for_each(|(dst, src)| {
                let mut s = self.scratch();
                for (d, x) in dst.chunks_exact_mut(k).zip(src) {
                    self.forward_into(x, &mut s);
                    d.copy_from_slice(&s.acts[s.acts.len() - 1]);
                }
            });
        Ok(out)
    }

    /// Adds `weight * d CE(target, softmax(f(x))) / d params` to `grad`
    /// and returns the weighted loss.
    fn accumulate(&self, ex: &Example<'_>, grad: &mut [f64], s: &mut Scratch) -> f64 {
        self.forward_into(ex.x, s);
        let n_layers = self.sizes.len() - 1;
        let logits = &s.acts[n_layers];
        let k = logits.len();
        let lse = log_sum_exp(logits);
        let mut loss = 0.0;
        for c in 0..k {
            let t = ex.target[c];
            if t != 0.0 {
                loss -= t * (logits[c] - lse);
            }
            s.delta[c] = ex.weight * ((logits[c] - lse).exp() - t);
        }

        let mut off = self.params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            off -= n_in * n_out + n_out;
            let input = &s.acts[l];
            let delta = &s.delta[..n_out];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for (g, &d) in gb.iter_mut().zip(delta) {
                *g += d;
            }
            for (i, &xi) in input.iter().enumerate() {
                for (g, &d) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(delta) {
                    *g += xi * d;
                }
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                for i in 0..n_in {
                    let row = &w[i * n_out..(i + 1) * n_out];
                    let back = dot(row, delta);
                    let a = input[i];
                    s.delta_prev[i] = back * (1.0 - a * a);
                }
                std::mem::swap(&mut s.delta, &mut s.delta_prev);
            }
        }
        ex.weight * loss
    }

    /// Sum of weighted losses and gradients over `batch`.
    pub fn loss_and_grad_sum(&self, batch: &[Example<'_>]) -> Result<(f64, Vec<f64>)> {
        for ex in batch {
            self.check_input(ex.x)?;
            if ex.target.len() != self.num_classes() {
                return Err(Error::Dimension {
                    expected: self.num_classes(),
                    got: ex.target.len(),
                });
            }
        }
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut s = self.scratch();
                let mut g = vec![0.0; self.params.len()];
                let loss = chunk.iter().map(|ex| self.accumulate(ex, &mut g, &mut s)).sum();
                (loss, g)
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss, grad))
    }

    /// Weighted loss sum over `batch` without gradients.
    pub fn loss_sum(&self, batch: &[Example<'_>]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            total += ex.weight * ce_soft_raw(ex.target, &self.forward(ex.x)?);
        }
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::at(path))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w).map_err(Error::at(path))?;
        w.flush().map_err(Error::at(path))
    }

    pub fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::at(path))?;
        Self::decode(&mut BufReader::new(file))
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        if n > 64 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            sizes.push(u32::from_le_bytes(b4) as usize);
        }
        let mut m = Self::zeros(&sizes)?;
        let mut b8 = [0u8; 8];
        for p in &mut m.params {
            r.read_exact(&mut b8)?;
            *p = f64::from_le_bytes(b8);
        }
        if !m.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(m)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN logit".into()));
    }
    if logits.len() < 2 {
        return Err(Error::Precondition("softmax needs at least 2 logits".into()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(ProbVector::from_normalized(e.into_iter().map(|v| v / s).collect()))
}

/// Softmax of `logits / temperature`.
pub fn softmax_tempered(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax(&scaled)
}

fn ce_soft_raw(target: &[f64], logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    target
        .iter()
        .zip(logits)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &l)| -t * (l - lse))
        .sum()
}

/// `-sum_i target_i * log softmax(logits)_i`.
pub fn ce_soft(target: &ProbVector, logits: &[f64]) -> Result<f64> {
    if target.len() != logits.len() {
        return Err(Error::Dimension {
            expected: target.len(),
            got: logits.len(),
        });
    }
    Ok(ce_soft_raw(target.as_slice(), logits))
}

/// Gradient of the mean cross-entropy over `batch`.
pub fn backward(model: &ClassifierModel, batch: &[Example<'_>]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (_, mut g) = model.loss_and_grad_sum(batch)?;
    let n = batch.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// Floor on the relative-error denominator, so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of the mean batch loss.
pub fn grad_check_against(
    model: &ClassifierModel,
    batch: &[Example<'_>],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("step {step} must be > 0")));
    }
    if analytic.len() != model.num_params() {
        return Err(Error::Dimension {
            expected: model.num_params(),
            got: analytic.len(),
        });
    }
    let n = batch.len() as f64;
    let mut probe = model.clone();
    let mut worst = (0.0, 0);
    for i in 0..model.num_params() {
        let orig = probe.params[i];
        probe.params[i] = orig + step;
        let up = probe.loss_sum(batch)? / n;
        probe.params[i] = orig - step;
        let down = probe.loss_sum(batch)? / n;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_param: worst.1,
        passed: worst.0 <= tolerance,
    })
}

pub fn grad_check(
    model: &ClassifierModel,
    batch: &[Example<'_>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = backward(model, batch)?;
    grad_check_against(model, batch, &analytic, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = ClassifierModel::zeros(&[3, 5, 4]).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_linear_layer_picks_weight_row() {
        // 3 inputs, 2 outputs: w is 3x2 row-major, then bias
        let params = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5];
        let m = ClassifierModel::from_params(&[3, 2], params).unwrap();
        assert_eq!(m.forward(&[1.0, 0.0, 0.0]).unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = ClassifierModel::zeros(&[3, 2]).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_relative_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300);
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn ce_examples() {
        let t = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert_relative_eq!(ce_soft(&t, &[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let logits = [0.3, -1.2, 2.0];
        let p = softmax(&logits).unwrap();
        assert_relative_eq!(ce_soft(&p, &logits).unwrap(), p.entropy(), epsilon = 1e-14);
        let u = ProbVector::uniform(10);
        assert_relative_eq!(ce_soft(&u, &[0.0; 10]).unwrap(), 10f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn output_layer_gradient_is_outer_product() {
        let m = ClassifierModel::init(&[2, 3, 2], RngSeed(4)).unwrap();
        let x = [0.7, -0.2];
        let target = [0.25, 0.75];
        let g = backward(&m, &[Example::new(&x, &target)]).unwrap();

        // hidden activations via a 1-hidden-layer forward by hand
        let p = m.params();
        let h: Vec<f64> = (0..3)
            .map(|j| (p[6 + j] + x[0] * p[j] + x[1] * p[3 + j]).tanh())
            .collect();
        let off = 9;
        let logits: Vec<f64> = (0..2)
            .map(|c| p[off + 6 + c] + (0..3).map(|j| h[j] * p[off + j * 2 + c]).sum::<f64>())
            .collect();
        let s = softmax(&logits).unwrap();
        for j in 0..3 {
            for c in 0..2 {
                assert_relative_eq!(g[off + j * 2 + c], (s[c] - target[c]) * h[j], epsilon = 1e-14);
            }
        }
        for c in 0..2 {
            assert_relative_eq!(g[off + 6 + c], s[c] - target[c], epsilon = 1e-14);
        }
    }

    #[test]
    fn gradient_vanishes_at_minimum() {
        let m = ClassifierModel::init(&[2, 4, 3], RngSeed(9)).unwrap();
        let x = [0.1, 0.4];
        let p = softmax(&m.forward(&x).unwrap()).unwrap();
        let g = backward(&m, &[Example::new(&x, p.as_slice())]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn grad_check_edges() {
        // one weight + two biases is the smallest valid model: 1 input, 2 outputs
        let m = ClassifierModel::from_params(&[1, 2], vec![0.3, -0.1, 0.05, 0.0]).unwrap();
        let x = [0.9];
        let t = [0.2, 0.8];
        let batch = [Example::new(&x, &t)];
        assert!(grad_check(&m, &batch, 1e-6, 1e-5).unwrap().passed);

        let mut corrupted = backward(&m, &batch).unwrap();
        corrupted[1] += 1.0;
        let report = grad_check_against(&m, &batch, &corrupted, 1e-6, 1e-5).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_param, 1);

        assert!(grad_check(&m, &batch, 0.0, 1e-5).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = ClassifierModel::init(&[2, 5, 3], RngSeed(1)).unwrap();
        let mut buf = Vec::new();
        m.encode(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"ODSTMODL");
        assert_eq!(ClassifierModel::decode(&mut buf.as_slice()).unwrap(), m);
    }
}
