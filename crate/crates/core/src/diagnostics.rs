//! Ground-truth-aware measurements. Nothing here mutates models or splits.
//!
//! Noise ratios, division ROC AUC, a proxy A-distance between subdomains,
//! an exact-count check of the subdomain error bound, and the metrics export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::blackbox::{accuracy, train_source_model, SourceConfig};
use crate::config::BetaConfig;
use crate::data::{DomainTag, LabeledVectorSet};
use crate::division::SubdomainSplit;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Probes on fewer samples than this per subdomain are flagged.
pub const LOW_CONFIDENCE_SAMPLES: usize = 10;
const BOUND_SLACK: f64 = 1e-9;

/// Fraction of pseudo labels that disagree with ground truth; 0 for an empty set.
pub fn noise_ratio(pseudo: &[usize], truth: &[usize]) -> Result<f64> {
    disagreement(pseudo, truth)
}

fn disagreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} labels vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

/// Mann-Whitney ROC AUC of `scores` for the `positive` class, ties counted
/// as one half. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    if scores.len() != positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscrepancyEstimate {
    /// `2 (1 - 2 err)` clamped to `[0, 2]`.
    pub d: f64,
    /// Balanced held-out error of the probe.
    pub probe_error: f64,
    pub low_confidence: bool,
}

/// Proxy A-distance between two sample sets.
///
/// A fresh probe is trained on half of each set (the smaller side
/// oversampled) and scored on the other half.
pub fn discrepancy_proxy(easy: &DenseArray, hard: &DenseArray, seed: u64) -> Result<DiscrepancyEstimate> {
    let (ne, d) = easy.dims();
    let nh = hard.rows();
    if ne == 0 || nh == 0 {
        return Err(Error::Usage("discrepancy needs two non-empty subdomains".into()));
    }
    if hard.cols() != d {
        return Err(Error::Dimension(format!("{d} vs {} features", hard.cols())));
    }
    let halves = |n: usize| -> (Vec<usize>, Vec<usize>) {
        if n == 1 {
            return (vec![0], vec![0]);
        }
        let cut = n / 2;
        ((0..cut).collect(), (cut..n).collect())
    };
    let (e_train, e_test) = halves(ne);
    let (h_train, h_test) = halves(nh);
    let target = e_train.len().max(h_train.len());
    let cycle = |idx: &[usize]| -> Vec<usize> { idx.iter().copied().cycle().take(target).collect() };
    let (e_fit, h_fit) = (cycle(&e_train), cycle(&h_train));

    let mut rows = Vec::with_capacity(2 * target * d);
    for &i in &e_fit {
        rows.extend_from_slice(easy.row(i));
    }
    for &i in &h_fit {
        rows.extend_from_slice(hard.row(i));
    }
    let labels: Vec<usize> = std::iter::repeat_n(0, target).chain(std::iter::repeat_n(1, target)).collect();
    let set = LabeledVectorSet::new(DenseArray::from_raw(2 * target, d, rows), Some(labels), DomainTag::Source)?;
    let probe = train_source_model(
        &set,
        2,
        &SourceConfig {
            hidden: vec![16],
            epochs: 60,
            seed,
            ..SourceConfig::default()
        },
    )?;
    let err_e = 1.0 - accuracy(&probe.predict(&easy.select_rows(&e_test))?, &vec![0; e_test.len()]);
    let err_h = 1.0 - accuracy(&probe.predict(&hard.select_rows(&h_test))?, &vec![1; h_test.len()]);
    let probe_error = 0.5 * (err_e + err_h);
    Ok(DiscrepancyEstimate {
        d: (2.0 * (1.0 - 2.0 * probe_error)).clamp(0.0, 2.0),
        probe_error,
        low_confidence: ne < LOW_CONFIDENCE_SAMPLES || nh < LOW_CONFIDENCE_SAMPLES,
    })
}

/// Hard labels of one subdomain under every labeling the bound needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubdomainLabels {
    /// The evaluated hypothesis.
    pub h: Vec<usize>,
    /// The probe standing in for the ideal joint hypothesis.
    pub h_star: Vec<usize>,
    pub pseudo: Vec<usize>,
    pub truth: Vec<usize>,
}

impl SubdomainLabels {
    fn check(&self) -> Result<()> {
        let n = self.h.len();
        if self.h_star.len() != n || self.pseudo.len() != n || self.truth.len() != n {
            return Err(Error::Dimension("subdomain label lists differ in length".into()));
        }
        Ok(())
    }
}

/// Every term of the subdomain error bound at one alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub alpha: f64,
    pub eps_alpha: f64,
    pub eps_t: f64,
    /// Discrepancy used on the right-hand side.
    pub d: f64,
    pub d_proxy: f64,
    /// `2 |eps_e(h, h*) - eps_h(h, h*)|`, attained by the pair `(h, h*)`.
    pub d_witness: f64,
    pub lambda: f64,
    pub lambda_hat: f64,
    pub rho_e: f64,
    pub rho_h: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// `lambda_hat <= lambda + rho_e + rho_h`.
    pub corollary_holds: bool,
    pub low_confidence: bool,
    /// False when the ideal-hypothesis probe could not be trained.
    pub valid: bool,
}

/// Evaluates the bound by exact counting for each alpha.
pub fn bound_terms(
    easy: &SubdomainLabels,
    hard: &SubdomainLabels,
    d_proxy: f64,
    alphas: &[f64],
) -> Result<Vec<BoundEstimate>> {
    easy.check()?;
    hard.check()?;
    let e = |a: &[usize], b: &[usize]| disagreement(a, b);
    let eh_pseudo = (e(&easy.h, &easy.pseudo)?, e(&hard.h, &hard.pseudo)?);
    let eh_truth = (e(&easy.h, &easy.truth)?, e(&hard.h, &hard.truth)?);
    let lambda = e(&easy.h_star, &easy.truth)? + e(&hard.h_star, &hard.truth)?;
    let lambda_hat = e(&easy.h_star, &easy.pseudo)? + e(&hard.h_star, &hard.pseudo)?;
    let d_witness = 2.0 * (e(&easy.h, &easy.h_star)? - e(&hard.h, &hard.h_star)?).abs();
    let d_proxy = d_proxy.clamp(0.0, 2.0);
    let d = d_proxy.max(d_witness);
    let rho_e = e(&easy.pseudo, &easy.truth)?;
    let rho_h = e(&hard.pseudo, &hard.truth)?;

    alphas
        .iter()
        .map(|&alpha| {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
            }
            let eps_alpha = alpha * eh_pseudo.0 + (1.0 - alpha) * eh_pseudo.1;
            let eps_t = alpha * eh_truth.0 + (1.0 - alpha) * eh_truth.1;
            let lhs = (eps_alpha - eps_t).abs();
            let rhs = alpha * (d + lambda + lambda_hat) + rho_h;
            Ok(BoundEstimate {
                alpha,
                eps_alpha,
                eps_t,
                d,
                d_proxy,
                d_witness,
                lambda,
                lambda_hat,
                rho_e,
                rho_h,
                lhs,
                rhs,
                holds: lhs <= rhs + BOUND_SLACK,
                corollary_holds: lambda_hat <= lambda + rho_e + rho_h + BOUND_SLACK,
                low_confidence: false,
                valid: true,
            })
        })
        .collect()
}

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Trains the ideal-hypothesis probe on all samples with their true labels.
/// `None` when training is impossible, e.g. a single true class.
pub fn ideal_probe_predictions(
    features: &DenseArray,
    truth: &[usize],
    num_classes: usize,
    hidden: &[usize],
    seed: u64,
) -> Result<Option<Vec<usize>>> {
    let set = LabeledVectorSet::new(features.clone(), Some(truth.to_vec()), DomainTag::Source)?;
    let cfg = SourceConfig {
        hidden: hidden.to_vec(),
        epochs: 200,
        seed,
        ..SourceConfig::default()
    };
    match train_source_model(&set, num_classes, &cfg) {
        Ok(probe) => Ok(Some(probe.predict(features)?)),
        Err(Error::Config(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// The bound check for predictions `h` over a divided sample set.
///
/// Pseudo labels of hard samples are the argmax of the split's soft labels.
/// `h_star` comes from [`ideal_probe_predictions`]; when it is `None` the
/// estimates are marked invalid and computed with the true labels in its place.
#[allow(clippy::too_many_arguments)]
pub fn check_bound(
    h: &[usize],
    h_star: Option<&[usize]>,
    features: &DenseArray,
    split: &SubdomainSplit,
    truth: &[usize],
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<BoundEstimate>> {
    let n = truth.len();
    split.validate(n)?;
    if h.len() != n || features.rows() != n {
        return Err(Error::Dimension("predictions, features and truth differ in length".into()));
    }
    let star = h_star.unwrap_or(truth);
    let pick = |idx: &[usize], v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let easy = SubdomainLabels {
        h: pick(&split.easy, h),
        h_star: pick(&split.easy, star),
        pseudo: split.easy_labels.clone(),
        truth: pick(&split.easy, truth),
    };
    let hard = SubdomainLabels {
        h: pick(&split.hard, h),
        h_star: pick(&split.hard, star),
        pseudo: split.hard_soft_labels.argmax_rows(),
        truth: pick(&split.hard, truth),
    };
    let proxy = if split.hard.is_empty() {
        None
    } else {
        Some(discrepancy_proxy(
            &features.select_rows(&split.easy),
            &features.select_rows(&split.hard),
            seed,
        )?)
    };
    let mut out = bound_terms(&easy, &hard, proxy.map_or(0.0, |p| p.d), alphas)?;
    for est in &mut out {
        est.low_confidence = proxy.is_none_or(|p| p.low_confidence);
        est.valid = h_star.is_some();
    }
    Ok(out)
}

pub fn write_bound_report(path: impl AsRef<Path>, estimates: &[BoundEstimate]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(estimates).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One metrics row. Columns that do not apply to a row are empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_kd: Option<f64>,
    pub l_mi: Option<f64>,
    pub l_dd: Option<f64>,
    pub l_adv: Option<f64>,
    pub rho_e: Option<f64>,
    pub rho_h: Option<f64>,
    pub acc_a: Option<f64>,
    pub acc_b: Option<f64>,
    pub bound_lhs: Option<f64>,
    pub bound_rhs: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 11] = [
    "epoch", "l_kd", "l_mi", "l_dd", "l_adv", "rho_e", "rho_h", "acc_a", "acc_b", "bound_lhs", "bound_rhs",
];

impl EpochMetrics {
    fn cells(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        vec![
            self.epoch.to_string(),
            f(self.l_kd),
            f(self.l_mi),
            f(self.l_dd),
            f(self.l_adv),
            f(self.rho_e),
            f(self.rho_h),
            f(self.acc_a),
            f(self.acc_b),
            f(self.bound_lhs),
            f(self.bound_rhs),
        ]
    }
}

/// Everything a run reports. The first network's accuracy is the headline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptationReport {
    pub method: String,
    pub warmup_epochs: usize,
    pub adaptation_epochs: usize,
    /// One row after warm-up, then one per adaptation epoch.
    pub rows: Vec<EpochMetrics>,
    pub acc_a: Option<f64>,
    pub acc_b: Option<f64>,
    pub source_only_acc: Option<f64>,
    pub black_box_queries: u64,
    pub config: BetaConfig,
}

impl AdaptationReport {
    pub fn headline_accuracy(&self) -> Option<f64> {
        self.acc_a
    }
}

pub fn write_metrics_csv(rows: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(METRIC_COLUMNS).map_err(wrap)?;
    for row in rows {
        w.write_record(row.cells()).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a metrics file written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() != METRIC_COLUMNS.len() {
            return Err(Error::Parse {
                line,
                message: format!("{} cells, expected {}", rec.len(), METRIC_COLUMNS.len()),
            });
        }
        let num = |j: usize| -> Result<Option<f64>> {
            let cell = &rec[j];
            if cell.is_empty() {
                return Ok(None);
            }
            cell.parse().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("column {} is not a number: {cell:?}", METRIC_COLUMNS[j]),
            })
        };
        out.push(EpochMetrics {
            epoch: rec[0].parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad epoch {:?}", &rec[0]),
            })?,
            l_kd: num(1)?,
            l_mi: num(2)?,
            l_dd: num(3)?,
            l_adv: num(4)?,
            rho_e: num(5)?,
            rho_h: num(6)?,
            acc_a: num(7)?,
            acc_b: num(8)?,
            bound_lhs: num(9)?,
            bound_rhs: num(10)?,
        });
    }
    Ok(out)
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn export_metrics(report: &AdaptationReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(&report.rows, dir.join("metrics.csv"))?;
    let summary = serde_json::json!({
        "headline_accuracy": report.headline_accuracy(),
        "method": report.method,
        "acc_a": report.acc_a,
        "acc_b": report.acc_b,
        "source_only_acc": report.source_only_acc,
        "warmup_epochs": report.warmup_epochs,
        "adaptation_epochs": report.adaptation_epochs,
        "black_box_queries": report.black_box_queries,
        "config": report.config,
    });
    let path = dir.join("summary.json");
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&summary).expect("serializable")).map_err(|e| Error::io(&path, e))
}
