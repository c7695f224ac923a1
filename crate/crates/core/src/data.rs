//! Labeled vector sets, synthetic domain-shift generators and CSV I/O.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

/// Feature matrix plus optional labels, soft pseudo labels and clean probabilities.
///
/// Target-domain ground truth is only reachable through
/// [`LabeledVectorSet::ground_truth_for_diagnostics`]; the adaptation path
/// reads features and black-box answers only.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVectorSet {
    features: DenseArray,
    labels: Option<Vec<usize>>,
    pseudo_labels: Option<DenseArray>,
    clean_prob: Option<Vec<f64>>,
    domain: DomainTag,
}

impl LabeledVectorSet {
    pub fn new(features: DenseArray, labels: Option<Vec<usize>>, domain: DomainTag) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            pseudo_labels: None,
            clean_prob: None,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn features(&self) -> &DenseArray {
        &self.features
    }

    /// Training labels of a source set. Always `None` for target sets.
    pub fn source_labels(&self) -> Option<&[usize]> {
        match self.domain {
            DomainTag::Source => self.labels.as_deref(),
            DomainTag::Target => None,
        }
    }

    /// Hidden ground truth, for measurement only.
    pub fn ground_truth_for_diagnostics(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Number of classes implied by the labels (`max + 1`).
    pub fn label_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
    }

    pub fn pseudo_labels(&self) -> Option<&DenseArray> {
        self.pseudo_labels.as_ref()
    }

    pub fn set_pseudo_labels(&mut self, soft: DenseArray) -> Result<()> {
        if soft.rows() != self.len() {
            return Err(Error::Dimension(format!(
                "{} pseudo-label rows for {} samples",
                soft.rows(),
                self.len()
            )));
        }
        for (i, row) in soft.row_iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Dimension(format!(
                    "pseudo-label row {i} is not on the simplex (sum {total})"
                )));
            }
        }
        self.pseudo_labels = Some(soft);
        Ok(())
    }

    pub fn clean_prob(&self) -> Option<&[f64]> {
        self.clean_prob.as_deref()
    }

    pub fn set_clean_prob(&mut self, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} clean probabilities for {} samples",
                probs.len(),
                self.len()
            )));
        }
        if let Some(bad) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Dimension(format!(
                "clean probability {} at {bad} outside [0, 1]",
                probs[bad]
            )));
        }
        self.clean_prob = Some(probs);
        Ok(())
    }

    /// Same rows with features replaced (e.g. after standardization).
    pub fn with_features(&self, features: DenseArray) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::Dimension("row count changed".into()));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &DenseArray) -> Self {
        let (n, d) = features.dims();
        let n_f = n.max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in features.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_f);
        let mut var = vec![0.0; d];
        for row in features.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n_f).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &DenseArray) -> DenseArray {
        let (n, d) = features.dims();
        let values = features
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        DenseArray::from_raw(n, d, values)
    }
}

fn class_counts(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|c| n / k + usize::from(c < n % k)).collect()
}

fn shuffled(rows: Vec<(Vec<f64>, usize)>, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rows = rows;
    rows.shuffle(rng);
    rows.into_iter().unzip()
}

/// Two interleaving half circles, rotated about the origin.
///
/// Class 0 lies on `(cos t, sin t)`, class 1 on `(1 - cos t, 0.5 - sin t)`,
/// `t` evenly spaced over `[0, pi]`, plus isotropic Gaussian noise.
pub fn gen_two_moons(
    n: usize,
    noise_sigma: f64,
    rotation_deg: f64,
    seed: u64,
) -> Result<LabeledVectorSet> {
    if n < 2 {
        return Err(Error::Config(format!("two-moons needs n >= 2, got {n}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} < 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sin_r, cos_r) = rotation_deg.to_radians().sin_cos();
    let counts = class_counts(n, 2);
    let mut rows = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for i in 0..count {
            let t = if count > 1 {
                PI * i as f64 / (count - 1) as f64
            } else {
                0.0
            };
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let (x, y) = (x + noise_sigma * nx, y + noise_sigma * ny);
            rows.push((vec![cos_r * x - sin_r * y, sin_r * x + cos_r * y], class));
        }
    }
    let (features, labels) = shuffled(rows, &mut rng);
    LabeledVectorSet::new(DenseArray::from_rows(&features)?, Some(labels), DomainTag::Source)
}

/// Source domain unrotated, target domain rotated, from one seed.
pub fn two_moons_task(
    n: usize,
    noise_sigma: f64,
    rotation_deg: f64,
    seed: u64,
) -> Result<(LabeledVectorSet, LabeledVectorSet)> {
    let source = gen_two_moons(n, noise_sigma, 0.0, seed)?;
    let mut target = gen_two_moons(n, noise_sigma, rotation_deg, seed.wrapping_add(1))?;
    target.domain = DomainTag::Target;
    Ok((source, target))
}

/// `K` unit-variance Gaussian blobs; the target copy moves each class mean
/// by `mean_shift` along its own random unit direction.
pub fn gen_gaussian_shift(
    n: usize,
    d: usize,
    k: usize,
    mean_shift: f64,
    seed: u64,
) -> Result<(LabeledVectorSet, LabeledVectorSet)> {
    if k < 2 || d < 1 {
        return Err(Error::Config(format!("blobs need K >= 2 and d >= 1, got K={k}, d={d}")));
    }
    if n < k {
        return Err(Error::Config(format!("blobs need n >= K, got n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const MEAN_SPREAD: f64 = 3.0;
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| MEAN_SPREAD * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let shifted: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            m.iter().zip(&dir).map(|(a, u)| a + mean_shift * u / norm).collect()
        })
        .collect();

    let mut source_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut target_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let draw = |centers: &[Vec<f64>], rng: &mut ChaCha8Rng| {
        let mut rows = Vec::with_capacity(n);
        for (class, &count) in class_counts(n, k).iter().enumerate() {
            for _ in 0..count {
                let x = centers[class]
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                rows.push((x, class));
            }
        }
        shuffled(rows, rng)
    };
    let (sx, sy) = draw(&means, &mut source_rng);
    let (tx, ty) = draw(&shifted, &mut target_rng);
    Ok((
        LabeledVectorSet::new(DenseArray::from_rows(&sx)?, Some(sy), DomainTag::Source)?,
        LabeledVectorSet::new(DenseArray::from_rows(&tx)?, Some(ty), DomainTag::Target)?,
    ))
}

/// Reads a header-first numeric CSV. Every column except `label_column`
/// becomes a feature, in file order.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: Option<&str>,
    domain: DomainTag,
) -> Result<LabeledVectorSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column, domain)
}

pub fn read_csv(
    reader: impl std::io::Read,
    label_column: Option<&str>,
    domain: DomainTag,
) -> Result<LabeledVectorSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect::<Vec<_>>();
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("no column named {name:?}"),
        })?),
        None => None,
    };

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut feats = Vec::with_capacity(headers.len());
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(col) == label_idx {
                labels.push(parse_label(cell).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("label {cell:?} is not a non-negative integer"),
                })?);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {:?}: {cell:?} is not a number", headers[col]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("column {:?}: non-finite value", headers[col]),
                    });
                }
                feats.push(v);
            }
        }
        rows.push(feats);
    }
    let d = headers.len() - usize::from(label_idx.is_some());
    let features = if rows.is_empty() {
        DenseArray::zeros(0, d)
    } else {
        DenseArray::from_rows(&rows)?
    };
    LabeledVectorSet::new(features, label_idx.map(|_| labels), domain)
}

fn parse_label(cell: &str) -> Option<usize> {
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    let f: f64 = cell.parse().ok()?;
    (f >= 0.0 && f.fract() == 0.0 && f < u32::MAX as f64).then_some(f as usize)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Writes `f0..f{d-1}` plus a `label` column when labels are present.
pub fn write_csv(set: &LabeledVectorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let d = set.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    if set.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for i in 0..set.len() {
        let mut rec: Vec<String> = set.features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &set.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
