#![allow(dead_code)]

pub mod bound;
pub mod twins;

use beta_core::blackbox::{train_source_model, BlackBoxHandle, SourceConfig};
use beta_core::data::{gen_gaussian_shift, two_moons_task, LabeledVectorSet};
use beta_core::nn::MlpClassifier;
use beta_core::tensor::DenseArray;
use beta_core::trainer::PreparedTarget;

pub const PINNED_SEED: u64 = 17;

pub struct Task {
    pub name: &'static str,
    pub source: LabeledVectorSet,
    pub target: LabeledVectorSet,
    pub classes: usize,
    pub model: MlpClassifier,
}

impl Task {
    pub fn black_box(&self) -> BlackBoxHandle {
        BlackBoxHandle::in_process(self.model.clone())
    }

    pub fn prepared(&self) -> PreparedTarget {
        PreparedTarget::new(&mut self.black_box(), &self.target).unwrap()
    }
}

fn source_model(source: &LabeledVectorSet, k: usize) -> MlpClassifier {
    let cfg = SourceConfig {
        seed: PINNED_SEED,
        ..SourceConfig::default()
    };
    train_source_model(source, k, &cfg).unwrap()
}

/// Two moons, target rotated 30 degrees, sigma 0.1, 400 samples.
pub fn moons() -> Task {
    let (source, target) = two_moons_task(400, 0.1, 30.0, PINNED_SEED).unwrap();
    let model = source_model(&source, 2);
    Task {
        name: "two-moons",
        source,
        target,
        classes: 2,
        model,
    }
}

/// Four 4-d blobs, target means moved by 3.5.
pub fn blobs() -> Task {
    let (source, target) = gen_gaussian_shift(600, 4, 4, 3.5, PINNED_SEED).unwrap();
    let model = source_model(&source, 4);
    Task {
        name: "gaussian-shift",
        source,
        target,
        classes: 4,
        model,
    }
}

pub fn on_simplex(a: &DenseArray, tol: f64) -> bool {
    a.row_iter()
        .all(|r| r.iter().all(|&p| p >= -tol && p <= 1.0 + tol) && (r.iter().sum::<f64>() - 1.0).abs() <= tol)
}

pub fn params_bits(net: &MlpClassifier) -> Vec<u64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weight.values().iter().chain(l.bias.values()))
        .map(|v| v.to_bits())
        .collect()
}

pub fn arr(rows: usize, cols: usize, values: Vec<f64>) -> DenseArray {
    DenseArray::new(vec![rows, cols], values).unwrap()
}
