//! Loss-distribution division of the target set into easy and hard subdomains.
//!
//! A two-component 1-D Gaussian mixture is fitted to per-sample
//! cross-entropy losses; the posterior of the low-mean component is each
//! sample's clean probability, and thresholding it yields the split.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::MlpClassifier;
use crate::tensor::{log_sum_exp, one_hot, DenseArray};

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Which twin produced a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum NetRole {
    A,
    B,
}

impl NetRole {
    pub fn other(self) -> Self {
        match self {
            NetRole::A => NetRole::B,
            NetRole::B => NetRole::A,
        }
    }
}

/// Two-component mixture; component 0 has the smaller mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMixture2 {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
}

impl GaussianMixture2 {
    fn log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|j| self.weights[j].max(1e-300).ln() + log_normal(x, self.means[j], self.variances[j]))
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter().map(|&x| log_sum_exp(&self.log_joint(x))).sum()
    }

    /// Posterior probability of the low-loss component.
    pub fn clean_posterior(&self, loss: f64) -> f64 {
        let lj = self.log_joint(loss);
        let p = (lj[0] - log_sum_exp(&lj)).exp();
        p.clamp(0.0, 1.0)
    }

    fn ordered(mut self) -> Self {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
        self
    }
}

/// Result of [`fit_gmm2`].
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub mixture: GaussianMixture2,
    /// Log-likelihood at initialization and after every EM iteration.
    pub log_likelihoods: Vec<f64>,
    /// Set when the losses carry no spread; every sample is then treated as clean.
    pub degenerate: bool,
}

impl GmmFit {
    pub fn iterations(&self) -> usize {
        self.log_likelihoods.len().saturating_sub(1)
    }

    pub fn clean_posterior(&self, loss: f64) -> f64 {
        if self.degenerate {
            1.0
        } else {
            self.mixture.clean_posterior(loss)
        }
    }

    pub fn posteriors(&self, losses: &[f64]) -> Vec<f64> {
        losses.iter().map(|&l| self.clean_posterior(l)).collect()
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// EM for a two-component mixture.
///
/// Initialization: means at the 10th/90th percentiles, equal weights, the
/// pooled variance. Stops when the log-likelihood changes by less than `tol`
/// or after `max_iter` iterations.
pub fn fit_gmm2(losses: &[f64], max_iter: usize, tol: f64) -> Result<GmmFit> {
    if losses.len() < 4 {
        return Err(Error::Usage(format!(
            "mixture fit needs at least 4 losses, got {}",
            losses.len()
        )));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let pooled = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;

    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    if pooled < 1e-12 || sorted[0] == sorted[sorted.len() - 1] {
        let mixture = GaussianMixture2 {
            weights: [1.0, 0.0],
            means: [mean, mean],
            variances: [VARIANCE_FLOOR; 2],
        };
        return Ok(GmmFit {
            mixture,
            log_likelihoods: Vec::new(),
            degenerate: true,
        });
    }
    let (mut lo, mut hi) = (percentile(&sorted, 0.1), percentile(&sorted, 0.9));
    if lo == hi {
        lo = sorted[0];
        hi = sorted[sorted.len() - 1];
    }
    let mut gmm = GaussianMixture2 {
        weights: [0.5, 0.5],
        means: [lo, hi],
        variances: [pooled.max(VARIANCE_FLOOR); 2],
    };

    let mut history = vec![gmm.log_likelihood(losses)];
    let mut resp = vec![[0.0; 2]; losses.len()];
    for _ in 0..max_iter {
        // E-step
        for (r, &x) in resp.iter_mut().zip(losses) {
            let lj = gmm.log_joint(x);
            let norm = log_sum_exp(&lj);
            *r = [(lj[0] - norm).exp(), (lj[1] - norm).exp()];
        }
        // M-step
        let mut next = gmm;
        for j in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            if nk < 1e-12 {
                continue;
            }
            let mu = resp.iter().zip(losses).map(|(r, x)| r[j] * x).sum::<f64>() / nk;
            let var = resp
                .iter()
                .zip(losses)
                .map(|(r, x)| r[j] * (x - mu) * (x - mu))
                .sum::<f64>()
                / nk;
            next.weights[j] = nk / n;
            next.means[j] = mu;
            next.variances[j] = var.max(VARIANCE_FLOOR);
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = next.weights.map(|w| w / total);
        gmm = next.ordered();
        let ll = gmm.log_likelihood(losses);
        let delta = (ll - history[history.len() - 1]).abs();
        history.push(ll);
        if delta < tol {
            break;
        }
    }
    Ok(GmmFit {
        mixture: gmm,
        log_likelihoods: history,
        degenerate: false,
    })
}

/// Cross-entropy of each sample's prediction against its hard pseudo label,
/// computed from logits through log-sum-exp. No tape is recorded.
pub fn per_sample_losses(net: &MlpClassifier, features: &DenseArray, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != features.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            features.rows()
        )));
    }
    let k = net.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dimension(format!("label {bad} out of range for {k} classes")));
    }
    let logits = net.logits(features)?;
    Ok(logits
        .row_iter()
        .zip(labels)
        .map(|(z, &y)| (log_sum_exp(z) - z[y]).max(0.0))
        .collect())
}

/// Disjoint easy/hard partition of the target index set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainSplit {
    /// Twin whose losses produced this split.
    pub produced_by: NetRole,
    pub tau: f64,
    pub easy: Vec<usize>,
    /// Hard pseudo labels of the easy samples.
    pub easy_labels: Vec<usize>,
    pub easy_clean_prob: Vec<f64>,
    pub hard: Vec<usize>,
    /// Soft labels of the hard samples, one simplex row each.
    pub hard_soft_labels: DenseArray,
    pub hard_clean_prob: Vec<f64>,
}

impl SubdomainSplit {
    pub fn total(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    /// Checks disjointness, coverage of `0..n` and the threshold rule.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.easy.iter().chain(&self.hard) {
            if i >= n || seen[i] {
                return Err(Error::Usage(format!("index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if self.total() != n {
            return Err(Error::Usage(format!("split covers {} of {n} samples", self.total())));
        }
        if self.easy_clean_prob.iter().any(|&p| p < self.tau)
            || self.hard_clean_prob.iter().any(|&p| p >= self.tau)
        {
            return Err(Error::Usage("clean probability on the wrong side of tau".into()));
        }
        Ok(())
    }
}

/// Thresholds clean probabilities at `tau`. Hard samples start from the
/// one-hot of their hard pseudo label.
pub fn divide(
    posteriors: &[f64],
    labels: &[usize],
    num_classes: usize,
    tau: f64,
    produced_by: NetRole,
) -> Result<SubdomainSplit> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0, 1]")));
    }
    if posteriors.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} posteriors for {} labels",
            posteriors.len(),
            labels.len()
        )));
    }
    let mut split = SubdomainSplit {
        produced_by,
        tau,
        easy: Vec::new(),
        easy_labels: Vec::new(),
        easy_clean_prob: Vec::new(),
        hard: Vec::new(),
        hard_soft_labels: DenseArray::zeros(0, num_classes),
        hard_clean_prob: Vec::new(),
    };
    let mut soft = Vec::new();
    for (i, (&p, &y)) in posteriors.iter().zip(labels).enumerate() {
        if p >= tau {
            split.easy.push(i);
            split.easy_labels.push(y);
            split.easy_clean_prob.push(p);
        } else {
            split.hard.push(i);
            split.hard_clean_prob.push(p);
            soft.extend(one_hot(y, num_classes));
        }
    }
    if split.easy.is_empty() {
        return Err(Error::Threshold(format!(
            "no sample reached clean probability {tau}; lower tau"
        )));
    }
    split.hard_soft_labels = DenseArray::from_raw(split.hard.len(), num_classes, soft);
    Ok(split)
}

/// Writes `index,loss,clean_prob,subdomain` rows for plotting the loss histogram.
pub fn write_division_dump(
    path: impl AsRef<Path>,
    losses: &[f64],
    posteriors: &[f64],
    split: &SubdomainSplit,
) -> Result<()> {
    let path = path.as_ref();
    let mut side = vec!["hard"; losses.len()];
    for &i in &split.easy {
        side[i] = "easy";
    }
    let mut out = String::from("index,loss,clean_prob,subdomain\n");
    for i in 0..losses.len() {
        out.push_str(&format!("{i},{},{},{}\n", losses[i], posteriors[i], side[i]));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
