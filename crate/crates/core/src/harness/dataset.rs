//! Labeled sample collections, the synthetic Gaussian-class generator and
//! the binary dataset file format.
//!
//! File layout (all little-endian):
//!
//! | bytes        | field                                  |
//! |--------------|----------------------------------------|
//! | 4            | magic `ULAB`                           |
//! | 4            | `u32` version (currently 1)            |
//! | 4, 4, 4      | `u32` N, d, C                          |
//! | 8·N·d        | `f64` samples, row-major               |
//! | 2·N          | `u16` labels                           |
//! | N            | `u8` split mask (0 = train, 1 = test)  |

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{LabeledSet, Tensor};

pub const MAGIC: &[u8; 4] = b"ULAB";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Fraction of each class assigned to the train split by the generator.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Vec<SplitTag>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize, split: Vec<SplitTag>) -> Result<Self> {
        let n = samples.rows();
        if labels.len() != n || split.len() != n {
            return Err(Error::dim(format!(
                "{n} samples, {} labels, {} split tags",
                labels.len(),
                split.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        Ok(Self { samples, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn ids_in(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    pub fn train_ids(&self) -> Vec<usize> {
        self.ids_in(SplitTag::Train)
    }

    pub fn test_ids(&self) -> Vec<usize> {
        self.ids_in(SplitTag::Test)
    }

    pub fn subset(&self, ids: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.samples.select_rows(ids),
            y: ids.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, d) = (self.len(), self.dim());
        let too_big = |what: &str| Error::Format { offset: 0, message: format!("{what} does not fit in u32") };
        let n32 = u32::try_from(n).map_err(|_| too_big("N"))?;
        let d32 = u32::try_from(d).map_err(|_| too_big("d"))?;
        let c32 = u32::try_from(self.classes).map_err(|_| too_big("C"))?;
        if self.classes > u16::MAX as usize + 1 {
            return Err(too_big("label range"));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + n * d * 8 + n * 3);
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, n32, d32, c32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.samples.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
        out.extend(self.split.iter().map(|s| match s {
            SplitTag::Train => 0u8,
            SplitTag::Test => 1u8,
        }));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset, message };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(
                bytes.len(),
                format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let (n, d, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        if n == 0 || d == 0 {
            return Err(fmt(8, format!("degenerate shape {n}x{d}")));
        }
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(8))
            .and_then(|b| b.checked_add(HEADER_LEN + 3 * n))
            .ok_or_else(|| fmt(8, "shape overflows".into()))?;
        if bytes.len() != expected {
            return Err(fmt(
                bytes.len().min(expected),
                format!("payload size mismatch: expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let mut off = HEADER_LEN;
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(fmt(off, "non-finite sample value".into()));
            }
            values.push(v);
            off += 8;
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
            if l >= c {
                return Err(fmt(off, format!("label {l} out of range for {c} classes")));
            }
            labels.push(l);
            off += 2;
        }
        let mut split = Vec::with_capacity(n);
        for _ in 0..n {
            split.push(match bytes[off] {
                0 => SplitTag::Train,
                1 => SplitTag::Test,
                other => return Err(fmt(off, format!("bad split tag {other}"))),
            });
            off += 1;
        }
        Dataset::new(Tensor::from_rows(n, d, values)?, labels, c, split)
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// Fixed unit direction for class `c` in `d` dimensions: the signed
/// coordinate axes first, then deterministic pseudo-random unit vectors.
fn class_direction(c: usize, d: usize) -> Vec<f64> {
    let mut u = vec![0.0; d];
    if c < 2 * d {
        u[c % d] = if c < d { 1.0 } else { -1.0 };
        return u;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0xD1EC, c as u64));
    for v in &mut u {
        *v = StandardNormal.sample(&mut rng);
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter().map(|v| v / norm).collect()
}

/// `C` isotropic unit-variance Gaussian classes centred at
/// `separation * u_c`, with a per-class deterministic 80/20 train/test mask.
pub fn gen_gaussian_classes(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 2 || dim == 0 {
        return Err(Error::input(format!(
            "need classes >= 2, per_class >= 2, dim >= 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    if classes > u16::MAX as usize + 1 || !separation.is_finite() || separation < 0.0 {
        return Err(Error::input("unsupported class count or separation"));
    }
    let n_train = ((per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, per_class - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut split = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let u = class_direction(c, dim);
        for _ in 0..per_class {
            for &uj in &u {
                let e: f64 = StandardNormal.sample(&mut rng);
                values.push(separation * uj + e);
            }
            labels.push(c);
        }
        let mut order: Vec<usize> = (0..per_class).collect();
        order.shuffle(&mut rng);
        let mut tags = vec![SplitTag::Test; per_class];
        for &j in &order[..n_train] {
            tags[j] = SplitTag::Train;
        }
        split.extend(tags);
    }
    Dataset::new(Tensor::from_rows(classes * per_class, dim, values)?, labels, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let a = gen_gaussian_classes(5, 50, 8, 20.0, 3).unwrap();
        assert_eq!(a, gen_gaussian_classes(5, 50, 8, 20.0, 3).unwrap());
        assert_ne!(a, gen_gaussian_classes(5, 50, 8, 20.0, 4).unwrap());
        assert_eq!(a.train_ids().len(), 200);
        assert_eq!(a.test_ids().len(), 50);
        for c in 0..5 {
            let train_c = a.train_ids().iter().filter(|&&i| a.labels[i] == c).count();
            assert_eq!(train_c, 40);
        }
        assert!(gen_gaussian_classes(1, 10, 2, 1.0, 0).is_err());
        assert!(gen_gaussian_classes(2, 1, 2, 1.0, 0).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = gen_gaussian_classes(3, 10, 4, 2.5, 1).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes.len(), 20 + 30 * 4 * 8 + 30 * 3);
        let b = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn format_errors() {
        let a = gen_gaussian_classes(3, 10, 4, 2.5, 1).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert!(matches!(Dataset::from_bytes(&bytes[..10]), Err(Error::Format { .. })));
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("expected {}", bytes.len())), "{msg}");
        assert!(msg.contains(&format!("found {}", bytes.len() - 7)), "{msg}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad_label = bytes.clone();
        let label_off = 20 + 30 * 4 * 8;
        bad_label[label_off] = 9;
        assert!(matches!(Dataset::from_bytes(&bad_label), Err(Error::Format { offset, .. }) if offset == label_off));
    }
}
