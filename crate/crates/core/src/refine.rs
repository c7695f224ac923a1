//! Subdomain augmentation, label refinement, co-guessing, sharpening and Mixup.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::MlpClassifier;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Vector-space stand-ins for weak/strong image augmentation.
///
/// Weak views add Gaussian jitter with per-feature standard deviation
/// `weak * feature_std`. Strong views use `strong * feature_std`, then zero
/// each feature with probability `dropout` and rescale the whole vector by
/// a factor drawn from `scale_range`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub weak: f64,
    pub strong: f64,
    pub dropout: f64,
    pub scale_range: (f64, f64),
    pub views: usize,
    #[serde(skip)]
    pub feature_std: Vec<f64>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            weak: 0.05,
            strong: 0.2,
            dropout: 0.1,
            scale_range: (0.8, 1.2),
            views: 2,
            feature_std: Vec::new(),
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak >= 0.0 && self.weak < self.strong) {
            return Err(Error::Config(format!(
                "need 0 <= weak jitter ({}) < strong jitter ({})",
                self.weak, self.strong
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.views == 0 {
            return Err(Error::Config("need at least one augmentation view".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad scale range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Copy of the policy with jitter scaled to the given data.
    pub fn fitted_to(&self, features: &DenseArray) -> Result<Self> {
        self.validate()?;
        let std = crate::data::Standardizer::fit(features).std;
        Ok(Self {
            feature_std: std,
            ..self.clone()
        })
    }

    fn std_of(&self, j: usize) -> f64 {
        self.feature_std.get(j).copied().unwrap_or(1.0)
    }

    /// One augmented view of every row of `x`.
    pub fn augment<R: Rng + ?Sized>(&self, x: &DenseArray, kind: AugmentKind, rng: &mut R) -> DenseArray {
        let (n, d) = x.dims();
        let mut out = x.values().to_vec();
        match kind {
            AugmentKind::Weak => {
                if self.weak > 0.0 {
                    for (i, v) in out.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += self.weak * self.std_of(i % d) * z;
                    }
                }
            }
            AugmentKind::Strong => {
                let (lo, hi) = self.scale_range;
                for row in out.chunks_mut(d.max(1)) {
                    for (j, v) in row.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += self.strong * self.std_of(j) * z;
                        if self.dropout > 0.0 && rng.random::<f64>() < self.dropout {
                            *v = 0.0;
                        }
                    }
                    let s = if hi > lo { rng.random_range(lo..hi) } else { lo };
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        DenseArray::from_raw(n, d, out)
    }

    /// View kind used for the `m`-th easy-sample view: weak and strong alternate.
    pub fn easy_view_kind(m: usize) -> AugmentKind {
        if m % 2 == 0 {
            AugmentKind::Weak
        } else {
            AugmentKind::Strong
        }
    }
}

/// Average of `net`'s predictions over `views` augmented copies of `x`,
/// with the kind of view `m` given by `kind_of(m)`.
pub fn mean_view_predictions<R: Rng + ?Sized>(
    net: &MlpClassifier,
    x: &DenseArray,
    policy: &AugmentationPolicy,
    kind_of: impl Fn(usize) -> AugmentKind,
    rng: &mut R,
) -> Result<DenseArray> {
    let (n, _) = x.dims();
    let k = net.num_classes();
    let mut acc = vec![0.0; n * k];
    for m in 0..policy.views {
        let view = policy.augment(x, kind_of(m), rng);
        let p = net.forward(&view)?;
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / policy.views as f64;
    Ok(DenseArray::from_raw(n, k, acc.into_iter().map(|a| a * inv).collect()))
}

/// `y' = rho * y + (1 - rho) * mean_prediction`, row by row.
pub fn refine_easy(labels: &DenseArray, clean_prob: &[f64], mean_predictions: &DenseArray) -> Result<DenseArray> {
    if labels.dims() != mean_predictions.dims() || labels.rows() != clean_prob.len() {
        return Err(Error::Dimension(format!(
            "labels {:?}, predictions {:?}, {} clean probabilities",
            labels.dims(),
            mean_predictions.dims(),
            clean_prob.len()
        )));
    }
    let (n, k) = labels.dims();
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let w = clean_prob[i];
        for (y, p) in labels.row(i).iter().zip(mean_predictions.row(i)) {
            out.push(w * y + (1.0 - w) * p);
        }
    }
    Ok(DenseArray::from_raw(n, k, out))
}

/// Co-guessed soft labels: the mean over `views` weak views of both
/// networks' predictions.
pub fn co_guess_hard<R: Rng + ?Sized>(
    x: &DenseArray,
    net_a: &MlpClassifier,
    net_b: &MlpClassifier,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<DenseArray> {
    let pa = mean_view_predictions(net_a, x, policy, |_| AugmentKind::Weak, rng)?;
    let pb = mean_view_predictions(net_b, x, policy, |_| AugmentKind::Weak, rng)?;
    let (n, k) = pa.dims();
    let values = pa
        .values()
        .iter()
        .zip(pb.values())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(DenseArray::from_raw(n, k, values))
}

/// Temperature sharpening `p^(1/T) / sum p^(1/T)`.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("sharpening temperature {temperature} <= 0")));
    }
    // Work relative to the largest entry so small temperatures do not underflow.
    let max = p.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Usage("cannot sharpen an all-zero row".into()));
    }
    let powered: Vec<f64> = p.iter().map(|&v| (v / max).powf(1.0 / temperature)).collect();
    let total: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|v| v / total).collect())
}

pub fn sharpen_rows(rows: &DenseArray, temperature: f64) -> Result<DenseArray> {
    let (n, k) = rows.dims();
    let mut out = Vec::with_capacity(n * k);
    for row in rows.row_iter() {
        out.extend(sharpen(row, temperature)?);
    }
    Ok(DenseArray::from_raw(n, k, out))
}

/// Mixed samples and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub features: DenseArray,
    pub targets: DenseArray,
    /// Applied coefficients, each `max(lambda, 1 - lambda)`.
    pub lambdas: Vec<f64>,
}

/// Mixes each primary row with `pool` row `partners[i]` using coefficient
/// `max(lambdas[i], 1 - lambdas[i])` on the primary side.
pub fn mixup_with(
    primary_x: &DenseArray,
    primary_y: &DenseArray,
    pool_x: &DenseArray,
    pool_y: &DenseArray,
    partners: &[usize],
    lambdas: &[f64],
) -> Result<MixedBatch> {
    let (n, d) = primary_x.dims();
    let k = primary_y.cols();
    if primary_y.rows() != n || partners.len() != n || lambdas.len() != n {
        return Err(Error::Dimension("primary rows, partners and lambdas disagree".into()));
    }
    if pool_x.cols() != d || pool_y.cols() != k || pool_x.rows() != pool_y.rows() {
        return Err(Error::Dimension("pool shape does not match primary".into()));
    }
    let mut fx = Vec::with_capacity(n * d);
    let mut fy = Vec::with_capacity(n * k);
    let mut used = Vec::with_capacity(n);
    for i in 0..n {
        let lam = lambdas[i].max(1.0 - lambdas[i]);
        let j = partners[i];
        if j >= pool_x.rows() {
            return Err(Error::Dimension(format!("partner {j} outside pool")));
        }
        for (a, b) in primary_x.row(i).iter().zip(pool_x.row(j)) {
            fx.push(lam * a + (1.0 - lam) * b);
        }
        for (a, b) in primary_y.row(i).iter().zip(pool_y.row(j)) {
            fy.push(lam * a + (1.0 - lam) * b);
        }
        used.push(lam);
    }
    Ok(MixedBatch {
        features: DenseArray::from_raw(n, d, fx),
        targets: DenseArray::from_raw(n, k, fy),
        lambdas: used,
    })
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` per sample and partners drawn
/// uniformly from the pool.
pub fn mixup<R: Rng + ?Sized>(
    primary_x: &DenseArray,
    primary_y: &DenseArray,
    pool_x: &DenseArray,
    pool_y: &DenseArray,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    if pool_x.rows() == 0 {
        return Err(Error::Usage("mixup pool is empty".into()));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    let n = primary_x.rows();
    let mut partners = Vec::with_capacity(n);
    let mut lambdas = Vec::with_capacity(n);
    for _ in 0..n {
        lambdas.push(beta.sample(rng));
        partners.push(rng.random_range(0..pool_x.rows()));
    }
    mixup_with(primary_x, primary_y, pool_x, pool_y, &partners, &lambdas)
}
