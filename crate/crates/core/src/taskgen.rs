//! Heterogeneous toy client models and synthetic linear-teacher tasks.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};
use crate::trilora::{init_trilora, TriLoraLayer};

/// Fraction of labels flipped to a different class.
pub const LABEL_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Identity => z.clone(),
        }
    }

    /// Derivative expressed through the activation output `h`.
    pub(crate) fn derivative_from_output(self, h: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => h.mapv(|v| 1.0 - v * v),
            Activation::Identity => Array2::ones(h.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// `(in, out)` per layer; consecutive layers must chain.
    pub layer_dims: Vec<(usize, usize)>,
    pub activation: Activation,
    pub num_classes: usize,
}

impl ArchSpec {
    /// A stack of `depth` layers of width `width` ending in a `num_classes` head.
    pub fn uniform(depth: usize, width: usize, num_classes: usize, activation: Activation) -> Self {
        let mut layer_dims = vec![(width, width); depth.saturating_sub(1)];
        layer_dims.push((width, num_classes));
        ArchSpec {
            layer_dims,
            activation,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(&(_, last_out)) = self.layer_dims.last() else {
            return Err(Error::Config(
                "architecture needs at least one layer".into(),
            ));
        };
        if self.layer_dims.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        for (l, pair) in self.layer_dims.windows(2).enumerate() {
            if pair[0].1 != pair[1].0 {
                return Err(Error::Config(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].1,
                    l + 1,
                    pair[1].0
                )));
            }
        }
        if last_out != self.num_classes {
            return Err(Error::Config(format!(
                "final layer outputs {last_out}, expected {} classes",
                self.num_classes
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].0
    }

    /// Smallest dimension of any layer, the upper bound on the shared rank.
    pub fn min_dim(&self) -> usize {
        self.layer_dims
            .iter()
            .map(|&(a, b)| a.min(b))
            .min()
            .unwrap_or(0)
    }
}

/// A client's adapted network: TriLoRA layers with an activation between them
/// and raw logits at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub(crate) layers: Vec<TriLoraLayer>,
    pub(crate) activation: Activation,
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Input to each layer (n×a).
    pub inputs: Vec<Array2<f64>>,
    /// `X·A` per layer (n×r).
    pub down: Vec<Array2<f64>>,
    /// `X·A·(I + Φ∘R)` per layer (n×r).
    pub mixed: Vec<Array2<f64>>,
    /// Output logits (n×C).
    pub logits: Array2<f64>,
}

pub fn build_toy_model(spec: &ArchSpec, rank: usize, beta: f64, seed: u64) -> Result<ClientModel> {
    spec.validate()?;
    if rank == 0 || rank > spec.min_dim() {
        return Err(Error::Config(format!(
            "rank {rank} exceeds the smallest layer dimension {}",
            spec.min_dim()
        )));
    }
    let layers = spec
        .layer_dims
        .iter()
        .enumerate()
        .map(|(l, &(a, b))| {
            let mut rng = rng_from(&[seed, l as u64, 0xBA5E]);
            let normal = Normal::new(0.0, 1.0 / (a as f64).sqrt()).expect("positive scale");
            let base = Array2::from_shape_simple_fn((a, b), || normal.sample(&mut rng));
            init_trilora(a, b, rank, beta, derive_seed(&[seed, l as u64]))?.with_base_weight(base)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientModel {
        layers,
        activation: spec.activation,
    })
}

impl ClientModel {
    pub fn new(layers: Vec<TriLoraLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let rank = layers[0].rank();
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layers {l} and {} do not chain",
                    l + 1
                )));
            }
        }
        if layers.iter().any(|layer| layer.rank() != rank) {
            return Err(Error::Config("all layers must share one rank".into()));
        }
        Ok(ClientModel { layers, activation })
    }

    pub fn layers(&self) -> &[TriLoraLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn rank(&self) -> usize {
        self.layers[0].rank()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Logits for one input row.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply_delta(h.view())?;
            h = if l + 1 < self.layers.len() && self.activation == Activation::Tanh {
                z.mapv(f64::tanh)
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Logits for every row of `inputs`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(inputs).logits
    }

    pub(crate) fn forward_cached(&self, inputs: ArrayView2<f64>) -> ForwardCache {
        let depth = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(depth),
            down: Vec::with_capacity(depth),
            mixed: Vec::with_capacity(depth),
            logits: Array2::zeros((0, 0)),
        };
        let mut h = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let down = h.dot(&layer.a);
            let mixed = down.dot(&layer.middle());
            let z = h.dot(&layer.base_weight) + mixed.dot(&layer.b);
            cache.inputs.push(h);
            cache.down.push(down);
            cache.mixed.push(mixed);
            h = if l + 1 < depth {
                self.activation.apply(&z)
            } else {
                z
            };
        }
        cache.logits = h;
        cache
    }

    pub fn predict(&self, inputs: ArrayView2<f64>) -> Vec<usize> {
        argmax_rows(&self.forward_batch(inputs))
    }

    pub fn accuracy(&self, split: &Split) -> f64 {
        if split.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(split.inputs.view())
            .iter()
            .zip(&split.labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / split.len() as f64
    }
}

pub(crate) fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub shared_seed: u64,
    pub private_seed: u64,
    /// Weight `s` of the shared teacher in the labeling function.
    pub shared_weight: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config(
                "train and test sizes must be positive".into(),
            ));
        }
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "need a positive input dimension and >= 2 classes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return Err(Error::Config(format!(
                "shared weight {} is outside [0, 1]",
                self.shared_weight
            )));
        }
        Ok(())
    }
}

/// Rows of inputs with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    /// The noiseless labeling matrix `s·M_shared + (1−s)·M_private` (d×C).
    pub teacher: Array2<f64>,
}

impl Dataset {
    /// Noise-free label of `x` under the task's teacher.
    pub fn clean_label(&self, x: ArrayView1<f64>) -> usize {
        argmax_rows(&x.dot(&self.teacher).insert_axis(Axis(0)))[0]
    }

    /// Writes `split,label,x0,..,x{d-1}` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.teacher.nrows();
        let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        writeln!(out, "split,label,{}", header.join(","))?;
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            for (row, label) in split.inputs.rows().into_iter().zip(&split.labels) {
                let xs: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{name},{label},{}", xs.join(","))?;
            }
        }
        Ok(())
    }
}

/// Row-major standard normal d×C matrix; a smaller `d` yields a prefix of the
/// rows drawn for a larger one.
fn teacher_matrix(d: usize, c: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(&[seed, 0x7EAC_4E12, c as u64]);
    Array2::from_shape_simple_fn((d, c), || StandardNormal.sample(&mut rng))
}

pub fn gen_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let (d, c, s) = (spec.input_dim, spec.num_classes, spec.shared_weight);
    let teacher = teacher_matrix(d, c, spec.shared_seed) * s
        + teacher_matrix(d, c, spec.private_seed ^ 0x5A5A_5A5A) * (1.0 - s);

    let mut rng = rng_from(&[
        spec.shared_seed,
        spec.private_seed,
        d as u64,
        c as u64,
        0xDA7A,
    ]);
    let mut draw = |n: usize| {
        let inputs: Array2<f64> =
            Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let mut labels = argmax_rows(&inputs.dot(&teacher));
        for y in &mut labels {
            if rng.random_bool(LABEL_NOISE) {
                *y = (*y + rng.random_range(1..c)) % c;
            }
        }
        Split { inputs, labels }
    };
    let train = draw(spec.n_train);
    let test = draw(spec.n_test);
    Ok(Dataset {
        train,
        test,
        teacher,
    })
}
