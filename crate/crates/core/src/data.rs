//! Dataset containers and the `ODST` binary container.
//!
//! Training and selection code only ever sees [`Features`]. Ground-truth
//! provenance of unlabeled samples lives on [`UnlabeledSet`] and is read by
//! the metrics module.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a;

const MAGIC: &[u8; 4] = b"ODST";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    InVal,
    OodVal,
    Test,
    Unlabeled,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Train => 0,
            Role::InVal => 1,
            Role::OodVal => 2,
            Role::Test => 3,
            Role::Unlabeled => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Role::Train,
            1 => Role::InVal,
            2 => Role::OodVal,
            3 => Role::Test,
            4 => Role::Unlabeled,
            _ => return Err(Error::Format(format!("unknown role code {c}"))),
        })
    }

    /// Whether records of this role carry a class label.
    pub fn is_labeled(self) -> bool {
        matches!(self, Role::Train | Role::InVal | Role::Test)
    }
}

/// Row-major `n x d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    d: usize,
    values: Vec<f64>,
}

impl Features {
    pub fn new(d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Precondition("feature dimension must be > 0".into()));
        }
        if values.len() % d != 0 {
            return Err(Error::Dimension {
                expected: d,
                got: values.len() % d,
            });
        }
        Ok(Self { d, values })
    }

    pub fn empty(d: usize) -> Self {
        Self { d, values: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.d)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                got: row.len(),
            });
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// New matrix holding the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Features {
        let mut values = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Features { d: self.d, values }
    }
}

/// Borrowed view of one labeled record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample<'a> {
    pub x: &'a [f64],
    pub y: usize,
}

/// Hidden ground truth for an unlabeled sample: which mixture component
/// generated it. Components `0..K` are the in-distribution classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub component: u32,
    pub in_distribution: bool,
}

impl Provenance {
    /// True class for in-distribution samples.
    pub fn class(&self) -> Option<usize> {
        self.in_distribution.then_some(self.component as usize)
    }
}

/// Borrowed view of one unlabeled record (features only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlabeledSample<'a> {
    pub z: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    role: Role,
    k: usize,
    x: Features,
    y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(role: Role, k: usize, x: Features, y: Vec<usize>) -> Result<Self> {
        if !role.is_labeled() {
            return Err(Error::Precondition(format!("{role:?} sets are unlabeled")));
        }
        if x.len() != y.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                got: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return Err(Error::Index { index: bad, len: k });
        }
        Ok(Self { role, k, x, y })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> &Features {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn get(&self, i: usize) -> LabeledSample<'_> {
        LabeledSample {
            x: self.x.row(i),
            y: self.y[i],
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = LabeledSample<'_>> + '_ {
        self.x.rows().zip(&self.y).map(|(x, &y)| LabeledSample { x, y })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::at(path))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w).map_err(Error::at(path))?;
        w.flush().map_err(Error::at(path))
    }

    pub fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, self.role, self.len(), self.x.dim(), self.k)?;
        for s in self.iter() {
            for v in s.x {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(s.y as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        match AnyDataset::read_from(path)? {
            AnyDataset::Labeled(set) => Ok(set),
            AnyDataset::Unlabeled(_) => Err(Error::Format(format!(
                "{} holds an unlabeled set",
                path.display()
            ))),
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut buf = Vec::new();
        self.encode(&mut buf).expect("writing to a Vec cannot fail");
        fnv1a(&buf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    role: Role,
    k: usize,
    x: Features,
    provenance: Vec<Provenance>,
}

impl UnlabeledSet {
    pub fn new(role: Role, k: usize, x: Features, provenance: Vec<Provenance>) -> Result<Self> {
        if role.is_labeled() {
            return Err(Error::Precondition(format!("{role:?} sets are labeled")));
        }
        if x.len() != provenance.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                got: provenance.len(),
            });
        }
        if role == Role::OodVal && provenance.iter().any(|p| p.in_distribution) {
            return Err(Error::Precondition(
                "ood_val set contains an in-distribution sample".into(),
            ));
        }
        Ok(Self {
            role,
            k,
            x,
            provenance,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// The provenance-free view handed to training and selection.
    pub fn features(&self) -> &Features {
        &self.x
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = UnlabeledSample<'_>> + '_ {
        self.x.rows().map(|z| UnlabeledSample { z })
    }

    /// Ground truth; for evaluation code only.
    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn in_distribution_fraction(&self) -> f64 {
        let n_in = self.provenance.iter().filter(|p| p.in_distribution).count();
        n_in as f64 / self.len().max(1) as f64
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::at(path))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w).map_err(Error::at(path))?;
        w.flush().map_err(Error::at(path))
    }

    pub fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, self.role, self.len(), self.x.dim(), self.k)?;
        for (z, p) in self.x.rows().zip(&self.provenance) {
            for v in z {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&p.component.to_le_bytes())?;
            w.write_all(&[u8::from(p.in_distribution)])?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        match AnyDataset::read_from(path)? {
            AnyDataset::Unlabeled(set) => Ok(set),
            AnyDataset::Labeled(_) => Err(Error::Format(format!(
                "{} holds a labeled set",
                path.display()
            ))),
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut buf = Vec::new();
        self.encode(&mut buf).expect("writing to a Vec cannot fail");
        fnv1a(&buf)
    }
}

/// Either kind of dataset, as decoded from a file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyDataset {
    Labeled(LabeledSet),
    Unlabeled(UnlabeledSet),
}

impl AnyDataset {
    pub fn read_from(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::at(path))?;
        Self::decode(&mut BufReader::new(file))
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut role = [0u8; 1];
        r.read_exact(&mut role)?;
        let role = Role::from_code(role[0])?;
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let d = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;

        let mut values = Vec::with_capacity(count.saturating_mul(d).min(1 << 28));
        let mut buf = [0u8; 8];
        if role.is_labeled() {
            let mut y = Vec::with_capacity(count.min(1 << 28));
            for _ in 0..count {
                for _ in 0..d {
                    r.read_exact(&mut buf)?;
                    values.push(f64::from_le_bytes(buf));
                }
                y.push(read_u32(r)? as usize);
            }
            let x = Features::new(d, values)?;
            Ok(AnyDataset::Labeled(LabeledSet::new(role, k, x, y)?))
        } else {
            let mut prov = Vec::with_capacity(count.min(1 << 28));
            for _ in 0..count {
                for _ in 0..d {
                    r.read_exact(&mut buf)?;
                    values.push(f64::from_le_bytes(buf));
                }
                let component = read_u32(r)?;
                let mut flag = [0u8; 1];
                r.read_exact(&mut flag)?;
                prov.push(Provenance {
                    component,
                    in_distribution: flag[0] != 0,
                });
            }
            let x = Features::new(d, values)?;
            Ok(AnyDataset::Unlabeled(UnlabeledSet::new(role, k, x, prov)?))
        }
    }
}

fn write_header(w: &mut impl Write, role: Role, count: usize, d: usize, k: usize) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[role.code()])?;
    w.write_all(&(count as u64).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(k as u32).to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
