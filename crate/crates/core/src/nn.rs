//! Multi-layer perceptron classifiers, momentum SGD and the checkpoint format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"BETA-CKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Anything whose trainable arrays can be handed to an optimizer.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&DenseArray>;
    fn parameters_mut(&mut self) -> Vec<&mut DenseArray>;
}

impl Parameterized for DenseArray {
    fn parameters(&self) -> Vec<&DenseArray> {
        vec![self]
    }

    fn parameters_mut(&mut self) -> Vec<&mut DenseArray> {
        vec![self]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weight: DenseArray,
    /// `1 x fan_out`
    pub bias: DenseArray,
}

/// Fully connected ReLU network ending in a softmax over `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

impl MlpClassifier {
    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let values = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    weight: DenseArray::from_raw(fan_in, fan_out, values),
                    bias: DenseArray::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: DenseArray::zeros(w[0], w[1]),
                bias: DenseArray::zeros(1, w[1]),
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut widths = Vec::with_capacity(layers.len() + 1);
        for (i, layer) in layers.iter().enumerate() {
            let (fan_in, fan_out) = layer.weight.dims();
            if layer.bias.dims() != (1, fan_out) {
                return Err(Error::LayerShape {
                    layer: i,
                    expected: (1, fan_out),
                    found: layer.bias.dims(),
                });
            }
            if let Some(&prev) = widths.last() {
                if prev != fan_in {
                    return Err(Error::LayerShape {
                        layer: i,
                        expected: (prev, fan_out),
                        found: (fan_in, fan_out),
                    });
                }
            } else {
                widths.push(fan_in);
            }
            widths.push(fan_out);
        }
        validate_widths(&widths)?;
        Ok(Self { widths, layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    /// Registers every weight and bias on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .map(|p| tape.param(p))
            .collect();
        BoundMlp { params }
    }

    /// Registers parameters as constants: a frozen snapshot on the tape.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .map(|p| tape.constant(p))
            .collect();
        BoundMlp { params }
    }

    pub fn logits(&self, batch: &DenseArray) -> Result<DenseArray> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let z = bound.logits(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Class probabilities, one simplex row per input row.
    pub fn forward(&self, batch: &DenseArray) -> Result<DenseArray> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let z = bound.logits(&mut tape, x)?;
        let p = tape.softmax(z);
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, batch: &DenseArray) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }

    fn check_input(&self, batch: &DenseArray) -> Result<()> {
        let (_, d) = batch.dims();
        if d != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch has {d} columns, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Euclidean distance between the flattened parameter vectors.
    pub fn parameter_distance(&self, other: &Self) -> f64 {
        self.parameters()
            .iter()
            .zip(other.parameters())
            .flat_map(|(a, b)| a.values().iter().zip(b.values()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it against the expected layer widths.
    pub fn load_expecting(path: impl AsRef<Path>, widths: &[usize]) -> Result<Self> {
        let net = Self::load(path)?;
        let expected: Vec<(usize, usize)> = widths.windows(2).map(|w| (w[0], w[1])).collect();
        for (i, layer) in net.layers.iter().enumerate() {
            let found = layer.weight.dims();
            match expected.get(i) {
                Some(&e) if e == found => {}
                Some(&e) => {
                    return Err(Error::LayerShape {
                        layer: i,
                        expected: e,
                        found,
                    })
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint has {} layers, expected {}",
                        net.layers.len(),
                        expected.len()
                    )))
                }
            }
        }
        if net.layers.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} layers, expected {}",
                net.layers.len(),
                expected.len()
            )));
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            let (r, c) = layer.weight.dims();
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weight.values().iter().chain(layer.bias.values()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cursor.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = cursor.u32()? as usize;
        if count == 0 {
            return Err(Error::Checkpoint("no layers".into()));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push((cursor.u32()? as usize, cursor.u32()? as usize));
        }
        let mut layers = Vec::with_capacity(count);
        for (rows, cols) in dims {
            let weight = DenseArray::new(vec![rows, cols], cursor.f64s(rows * cols)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = DenseArray::new(vec![1, cols], cursor.f64s(cols)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            layers.push(Layer { weight, bias });
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - cursor.pos
            )));
        }
        Self::from_layers(layers)
    }
}

impl Parameterized for MlpClassifier {
    fn parameters(&self) -> Vec<&DenseArray> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut DenseArray> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Config(format!(
            "layer widths {widths:?} need an input and an output width, all non-zero"
        )));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Tape handles for an [`MlpClassifier`]'s parameters, in `w0, b0, w1, b1, ...` order.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    params: Vec<Var>,
}

impl BoundMlp {
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n_layers = self.params.len() / 2;
        let mut h = x;
        for (i, pair) in self.params.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_bias(z, pair[1])?;
            h = if i + 1 < n_layers { tape.relu(z) } else { z };
        }
        Ok(h)
    }

    pub fn probs(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.logits(tape, x)?;
        Ok(tape.softmax(z))
    }
}

/// Momentum SGD with decoupled weight decay:
/// `v <- mu * v + g`, `w <- w - lr * v - lr * wd * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    lrs: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<DenseArray>,
}

impl SgdState {
    pub fn new(
        model: &impl Parameterized,
        lrs: Vec<f64>,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        let params = model.parameters();
        if lrs.len() != params.len() {
            return Err(Error::Config(format!(
                "{} learning rates for {} parameter arrays",
                lrs.len(),
                params.len()
            )));
        }
        if lrs.iter().chain([&momentum, &weight_decay]).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "optimizer hyper-parameters must be finite and non-negative".into(),
            ));
        }
        let velocity = params
            .iter()
            .map(|p| {
                let (r, c) = p.dims();
                DenseArray::zeros(r, c)
            })
            .collect();
        Ok(Self {
            lrs,
            momentum,
            weight_decay,
            velocity,
        })
    }

    /// Two parameter groups: every layer but the last uses `body_lr`, the
    /// output layer uses `head_lr`.
    pub fn for_mlp(
        net: &MlpClassifier,
        body_lr: f64,
        head_lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        let n_layers = net.layers().len();
        let lrs = (0..n_layers)
            .flat_map(|i| {
                let lr = if i + 1 == n_layers { head_lr } else { body_lr };
                [lr, lr]
            })
            .collect();
        Self::new(net, lrs, momentum, weight_decay)
    }

    pub fn learning_rates(&self) -> &[f64] {
        &self.lrs
    }

    pub fn scale_learning_rates(&mut self, factor: f64) {
        for lr in &mut self.lrs {
            *lr *= factor;
        }
    }

    pub fn step(&mut self, model: &mut impl Parameterized, grads: &[DenseArray]) -> Result<()> {
        let mut params = model.parameters_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, param) in params.iter_mut().enumerate() {
            if param.dims() != grads[i].dims() || param.dims() != self.velocity[i].dims() {
                return Err(Error::Dimension(format!(
                    "gradient {i} shape {:?} vs parameter {:?}",
                    grads[i].dims(),
                    param.dims()
                )));
            }
            let lr = self.lrs[i];
            let velocity = self.velocity[i].values_mut();
            for ((w, v), g) in param
                .values_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(grads[i].values())
            {
                *v = self.momentum * *v + g;
                *w -= lr * *v + lr * self.weight_decay * *w;
            }
        }
        Ok(())
    }

    /// Backpropagates `loss` and applies one update to `model`, whose
    /// parameters were bound on `tape` as `params`.
    pub fn backward_and_step(
        &mut self,
        model: &mut impl Parameterized,
        tape: &Tape,
        params: &[Var],
        loss: Var,
    ) -> Result<()> {
        if tape.is_empty() {
            return Err(Error::Usage("no operations recorded on the tape".into()));
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<DenseArray> = params.iter().map(|&v| grads.wrt(tape, v)).collect();
        self.step(model, &grads)
    }
}
