//! Near-duplicate removal of corpus images against protected reference
//! sets: exact blocked L2 radius search, SSIM, and the staged rule.

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ODSTIMGS";
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const CORPUS_TILE: usize = 64;
const REF_TILE: usize = 256;

/// One image, height x width x channels, interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Dimension {
                expected: height * width * channels,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, pixels.iter().map(|&p| p as f64 / 255.0).collect())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }
}

/// A corpus of equally shaped images stored as flattened rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: Vec::new(),
        }
    }

    pub fn from_images(images: &[ImageTensor]) -> Result<Self> {
        let first = images.first().ok_or(Error::Empty("image list"))?;
        let (h, w, c) = first.shape();
        let mut set = Self::new(h, w, c);
        for img in images {
            set.push(img)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, img: &ImageTensor) -> Result<()> {
        if img.shape() != self.shape() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: img.values.len(),
            });
        }
        self.values.extend_from_slice(&img.values);
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Flattened dimension.
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        if self.dim() == 0 {
            0
        } else {
            self.values.len() / self.dim()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.row(i).to_vec(),
        }
    }

    /// Container: magic, count u64, h/w/c u32, then one byte per value.
    /// Values are rounded to the nearest multiple of 1/255.
    pub fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for s in [self.height, self.width, self.channels] {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        let bytes: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an image container".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let [h, w, c] = dims;
        let mut bytes = vec![0u8; count * h * w * c];
        r.read_exact(&mut bytes)?;
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            values: bytes.iter().map(|&p| p as f64 / 255.0).collect(),
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(Error::at(path))?;
        let mut w = BufWriter::new(f);
        self.encode(&mut w).map_err(Error::at(path))?;
        w.flush().map_err(Error::at(path))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(Error::at(path))?;
        Self::decode(&mut BufReader::new(f))
    }
}

/// A learned perceptual distance. None ships with the crate.
pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, x: &ImageTensor, z: &ImageTensor) -> Result<f64>;
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub hard_radius: f64,
    pub candidate_radius: f64,
    pub ssim_dist_max: f64,
    pub perceptual_dist_max: f64,
    #[serde(skip)]
    pub perceptual_metric: Option<Arc<dyn PerceptualMetric>>,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            hard_radius: 3.0,
            candidate_radius: 2000.0 / 255.0,
            ssim_dist_max: 0.4,
            perceptual_dist_max: 0.025,
            perceptual_metric: None,
        }
    }
}

impl fmt::Debug for DedupConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DedupConfig")
            .field("hard_radius", &self.hard_radius)
            .field("candidate_radius", &self.candidate_radius)
            .field("ssim_dist_max", &self.ssim_dist_max)
            .field("perceptual_dist_max", &self.perceptual_dist_max)
            .field("perceptual_metric", &self.perceptual_metric.is_some())
            .finish()
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.hard_radius, self.candidate_radius, self.ssim_dist_max, self.perceptual_dist_max];
        if all.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("dedup thresholds must be > 0".into()));
        }
        if self.hard_radius >= self.candidate_radius {
            return Err(Error::Config("hard_radius must be < candidate_radius".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborMatch {
    pub corpus_index: usize,
    pub reference_index: usize,
    pub distance: f64,
}

/// Euclidean distance by direct summation in index order.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn squared_norms(set: &ImageSet) -> Vec<f64> {
    (0..set.len())
        .map(|i| set.row(i).iter().map(|v| v * v).sum())
        .collect()
}

fn check_dims(corpus: &ImageSet, references: &ImageSet, radius: f64) -> Result<()> {
    if corpus.dim() != references.dim() {
        return Err(Error::Dimension {
            expected: references.dim(),
            got: corpus.dim(),
        });
    }
    if !(radius > 0.0) {
        return Err(Error::Precondition("radius must be > 0".into()));
    }
    Ok(())
}

/// For every corpus item whose nearest reference is closer than `radius`,
/// one match with that reference (ties go to the smaller index).
///
/// Tiles of the distance matrix are screened with the norm expansion
/// `|a|^2 + |b|^2 - 2 a.b` plus a rounding margin; surviving pairs are
/// rescored with [`l2_distance`], so the output is bit-identical to
/// [`nn_within_radius_naive`].
pub fn nn_within_radius(corpus: &ImageSet, references: &ImageSet, radius: f64) -> Result<Vec<NeighborMatch>> {
    check_dims(corpus, references, radius)?;
    let d = corpus.dim();
    let cn = squared_norms(corpus);
    let rn = squared_norms(references);
    let r2 = radius * radius;
    let eps_scale = 8.0 * (d as f64 + 2.0) * f64::EPSILON;

    let tiles: Vec<usize> = (0..corpus.len()).step_by(CORPUS_TILE).collect();
    let per_tile: Vec<Vec<NeighborMatch>> = tiles
        .par_iter()
        .map(|&start| {
            let end = (start + CORPUS_TILE).min(corpus.len());
            let mut best: Vec<Option<(f64, usize)>> = vec![None; end - start];
            let mut dots = vec![0.0; REF_TILE];
            for rstart in (0..references.len()).step_by(REF_TILE) {
                let rend = (rstart + REF_TILE).min(references.len());
                for (slot, i) in (start..end).enumerate() {
                    let a = corpus.row(i);
                    for (k, j) in (rstart..rend).enumerate() {
                        dots[k] = a.iter().zip(references.row(j)).map(|(x, y)| x * y).sum();
                    }
                    for (k, j) in (rstart..rend).enumerate() {
                        let est = cn[i] + rn[j] - 2.0 * dots[k];
                        let margin = eps_scale * (cn[i] + rn[j] + r2);
                        if est > r2 + margin {
                            continue;
                        }
                        let dist = l2_distance(a, references.row(j));
                        if best[slot].is_none_or(|(bd, _)| dist < bd) {
                            best[slot] = Some((dist, j));
                        }
                    }
                }
            }
            best.into_iter()
                .enumerate()
                .filter_map(|(slot, b)| {
                    b.filter(|(dist, _)| *dist < radius).map(|(distance, j)| NeighborMatch {
                        corpus_index: start + slot,
                        reference_index: j,
                        distance,
                    })
                })
                .collect()
        })
        .collect();
    Ok(per_tile.into_iter().flatten().collect())
}

/// Reference implementation: full double loop.
pub fn nn_within_radius_naive(corpus: &ImageSet, references: &ImageSet, radius: f64) -> Result<Vec<NeighborMatch>> {
    check_dims(corpus, references, radius)?;
    let mut out = Vec::new();
    for i in 0..corpus.len() {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..references.len() {
            let dist = l2_distance(corpus.row(i), references.row(j));
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((distance, j)) = best.filter(|(dist, _)| *dist < radius) {
            out.push(NeighborMatch {
                corpus_index: i,
                reference_index: j,
                distance,
            });
        }
    }
    Ok(out)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let t = i as f64 - half;
        *v = (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean SSIM over all valid 11x11 windows, averaged over channels.
pub fn ssim(x: &ImageTensor, z: &ImageTensor) -> Result<f64> {
    if x.shape() != z.shape() {
        return Err(Error::Dimension {
            expected: x.values.len(),
            got: z.values.len(),
        });
    }
    let (h, w, c) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(Error::Precondition(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let mut map_sum = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut mz, mut sxx, mut szz, mut sxz) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let a = x.at(oy + dy, ox + dx, ch);
                        let b = z.at(oy + dy, ox + dx, ch);
                        mx += wgt * a;
                        mz += wgt * b;
                        sxx += wgt * (a * a);
                        szz += wgt * (b * b);
                        sxz += wgt * (a * b);
                    }
                }
                let vx = sxx - mx * mx;
                let vz = szz - mz * mz;
                let cxz = sxz - mx * mz;
                let num = (2.0 * (mx * mz) + SSIM_C1) * (2.0 * cxz + SSIM_C2);
                let den = (mx * mx + mz * mz + SSIM_C1) * (vx + vz + SSIM_C2);
                map_sum += num / den;
            }
        }
        total += map_sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DedupStage {
    /// Within the hard radius.
    HardRadius,
    /// Candidate judged by the similarity rule.
    Similarity,
}

/// One audited candidate; `removed` is false for candidates kept at the
/// similarity stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub corpus_index: usize,
    pub stage: DedupStage,
    pub reference_set: usize,
    pub reference_index: usize,
    pub l2: f64,
    pub ssim_distance: Option<f64>,
    pub perceptual_distance: Option<f64>,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    /// `true` for corpus items to remove.
    pub mask: Vec<bool>,
    pub audit: Vec<AuditRecord>,
}

impl DedupOutcome {
    pub fn removed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn write_audit(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for rec in &self.audit {
            w.serialize(rec)?;
        }
        w.flush().map_err(Error::at(path))
    }

    /// One `0`/`1` per line.
    pub fn write_mask(&self, path: &Path) -> Result<()> {
        let text: String = self.mask.iter().map(|&m| if m { "1\n" } else { "0\n" }).collect();
        std::fs::write(path, text).map_err(Error::at(path))
    }
}

/// Staged removal against every reference set. Each corpus item is
/// compared with its single nearest reference across all sets.
pub fn dedup_run(corpus: &ImageSet, references: &[ImageSet], cfg: &DedupConfig) -> Result<DedupOutcome> {
    cfg.validate()?;
    let first = references.first().ok_or(Error::Empty("reference sets"))?;
    let (h, w, c) = first.shape();
    let mut all = ImageSet::new(h, w, c);
    let mut origin = Vec::new();
    for (s, set) in references.iter().enumerate() {
        if set.shape() != first.shape() {
            return Err(Error::Dimension {
                expected: first.dim(),
                got: set.dim(),
            });
        }
        all.values.extend_from_slice(&set.values);
        origin.extend((0..set.len()).map(|i| (s, i)));
    }

    let matches = nn_within_radius(corpus, &all, cfg.candidate_radius)?;
    let records = matches
        .par_iter()
        .map(|m| {
            let (reference_set, reference_index) = origin[m.reference_index];
            let mut rec = AuditRecord {
                corpus_index: m.corpus_index,
                stage: DedupStage::HardRadius,
                reference_set,
                reference_index,
                l2: m.distance,
                ssim_distance: None,
                perceptual_distance: None,
                removed: true,
            };
            if m.distance >= cfg.hard_radius {
                let x = corpus.image(m.corpus_index);
                let z = all.image(m.reference_index);
                let sd = 1.0 - ssim(&x, &z)?;
                rec.stage = DedupStage::Similarity;
                rec.ssim_distance = Some(sd);
                rec.removed = sd < cfg.ssim_dist_max;
                if let Some(metric) = &cfg.perceptual_metric {
                    let pd = metric.distance(&x, &z)?;
                    rec.perceptual_distance = Some(pd);
                    rec.removed &= pd < cfg.perceptual_dist_max;
                }
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mask = vec![false; corpus.len()];
    for r in &records {
        mask[r.corpus_index] = r.removed;
    }
    Ok(DedupOutcome { mask, audit: records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn constant(h: usize, w: usize, c: usize, v: f64) -> ImageTensor {
        ImageTensor::new(h, w, c, vec![v; h * w * c]).unwrap()
    }

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let v = (0..h * w).map(|i| ((i * 37) % 251) as f64 / 250.0).collect();
        ImageTensor::new(h, w, 1, v).unwrap()
    }

    #[test]
    fn single_pixel_distance() {
        let a = ImageTensor::from_u8(2, 2, 3, &[10; 12]).unwrap();
        let mut px = [10u8; 12];
        px[5] = 13;
        let b = ImageTensor::from_u8(2, 2, 3, &px).unwrap();
        assert_relative_eq!(l2_distance(a.values(), b.values()), 3.0 / 255.0, epsilon = 1e-15);
        let refs = ImageSet::from_images(&[b.clone()]).unwrap();
        let corpus = ImageSet::from_images(&[b, a]).unwrap();
        let m = nn_within_radius(&corpus, &refs, 1.0).unwrap();
        assert_eq!(m[0].distance, 0.0);
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn constant_image_closed_form() {
        let (a, b) = (0.5, 0.25);
        let expected = ((2.0 * a * b + SSIM_C1) * SSIM_C2) / ((a * a + b * b + SSIM_C1) * SSIM_C2);
        let s = ssim(&constant(16, 16, 3, a), &constant(16, 16, 3, b)).unwrap();
        assert_relative_eq!(s, expected, epsilon = 1e-12);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = ramp(13, 12);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let inv = ImageTensor::new(13, 12, 1, x.values().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&x, &inv).unwrap();
        assert!(s < 1.0);
        assert_eq!(s, ssim(&inv, &x).unwrap());
        assert!(ssim(&x, &ramp(12, 13)).is_err());
        assert!(ssim(&ramp(8, 8), &ramp(8, 8)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DedupConfig::default().validate().is_ok());
        let bad = DedupConfig {
            hard_radius: 9.0,
            ..DedupConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn container_roundtrip() {
        let imgs: Vec<_> = (0..3)
            .map(|k| ImageTensor::from_u8(2, 3, 1, &[k, 1, 2, 3, 4, 255]).unwrap())
            .collect();
        let set = ImageSet::from_images(&imgs).unwrap();
        let mut buf = Vec::new();
        set.encode(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"ODSTIMGS");
        assert_eq!(buf.len(), 8 + 8 + 12 + 18);
        assert_eq!(ImageSet::decode(&mut buf.as_slice()).unwrap(), set);
    }
}
