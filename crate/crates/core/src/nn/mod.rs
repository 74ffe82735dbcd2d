//! Model family, initialization, forward pass and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::{self, tag};
use crate::tensor::{ops, Padding, Tape, Tensor, Var};
use crate::{Error, Result};

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// conv(32)-pool-conv(64)-pool-fc(1024)-fc(10) at scale 1.
    MnistEval,
    /// conv(2s)-pool-conv(4s)-pool-fc(64s)-fc(10).
    MnistCapacity,
    /// Plain 4-conv / 2-fc network for 32×32×3 inputs.
    CifarSimple,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_eval" => Ok(Preset::MnistEval),
            "mnist_capacity" => Ok(Preset::MnistCapacity),
            "cifar_simple" => Ok(Preset::CifarSimple),
            other => Err(Error::InvalidSpec(format!("unknown preset `{other}`"))),
        }
    }
}

/// One layer descriptor. Widths are base widths; the model's
/// `capacity_scale` multiplies them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    /// Fixed per-image standardization (no parameters).
    Standardize,
    Conv { filters: usize },
    MaxPool2,
    Relu,
    Flatten,
    Affine { width: usize },
    /// Final affine layer producing `num_classes` logits (never scaled).
    Logits,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input image shape `[h, w, c]`.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub capacity_scale: usize,
    pub num_classes: usize,
    /// Square convolution kernel size (odd; `same` padding).
    pub kernel: usize,
}

impl ModelSpec {
    pub fn new(input: [usize; 3], layers: Vec<Layer>, capacity_scale: usize, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input,
            layers,
            capacity_scale,
            num_classes,
            kernel: 5,
        };
        spec.param_shapes()?;
        Ok(spec)
    }

    /// A single affine layer on a flat `d`-dimensional input (linear softmax).
    pub fn linear(d: usize, num_classes: usize) -> Result<Self> {
        Self::new([1, 1, d], vec![Layer::Flatten, Layer::Logits], 1, num_classes)
    }

    /// Scaled filter count / width of a layer, if it has one.
    fn scaled(&self, layer: &Layer) -> Option<usize> {
        match layer {
            Layer::Conv { filters } => Some(filters * self.capacity_scale),
            Layer::Affine { width } => Some(width * self.capacity_scale),
            Layer::Logits => Some(self.num_classes),
            _ => None,
        }
    }

    pub fn conv_filters(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .filter_map(|l| self.scaled(l))
            .collect()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Affine { .. }))
            .filter_map(|l| self.scaled(l))
            .collect()
    }

    /// Walks the layer list and returns every parameter tensor shape in
    /// order (weight then bias per parametric layer). Fails on any
    /// inconsistency.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.capacity_scale == 0 {
            return Err(Error::InvalidSpec("capacity_scale must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidSpec("kernel size must be odd".into()));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("zero input extent".into()));
        }
        let [mut h, mut w, mut c] = self.input;
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Standardize | Layer::Relu => {}
                Layer::Conv { .. } => {
                    if flat.is_some() {
                        return Err(Error::InvalidSpec(format!("layer {i}: conv after flatten")));
                    }
                    let co = self.scaled(layer).unwrap_or(0);
                    if co == 0 {
                        return Err(Error::InvalidSpec(format!("layer {i}: zero filters")));
                    }
                    shapes.push(vec![self.kernel, self.kernel, c, co]);
                    shapes.push(vec![co]);
                    c = co;
                }
                Layer::MaxPool2 => {
                    if flat.is_some() || h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: maxpool2 needs even spatial dims, got {h}x{w}"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                Layer::Flatten => {
                    flat = Some(h * w * c);
                }
                Layer::Affine { .. } | Layer::Logits => {
                    let din = flat.ok_or_else(|| {
                        Error::InvalidSpec(format!("layer {i}: affine before flatten"))
                    })?;
                    let dout = self.scaled(layer).unwrap_or(0);
                    if dout == 0 {
                        return Err(Error::InvalidSpec(format!("layer {i}: zero width")));
                    }
                    shapes.push(vec![din, dout]);
                    shapes.push(vec![dout]);
                    flat = Some(dout);
                }
            }
        }
        if self.layers.last() != Some(&Layer::Logits) {
            return Err(Error::InvalidSpec("final layer must be `logits`".into()));
        }
        if self.layers.iter().filter(|l| **l == Layer::Logits).count() != 1 {
            return Err(Error::InvalidSpec("exactly one `logits` layer allowed".into()));
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

/// Builds one of the named architectures at a capacity scale.
pub fn build_spec(preset: Preset, capacity_scale: usize) -> Result<ModelSpec> {
    use Layer::*;
    let (input, layers) = match preset {
        Preset::MnistEval => (
            [28, 28, 1],
            vec![
                Conv { filters: 32 },
                Relu,
                MaxPool2,
                Conv { filters: 64 },
                Relu,
                MaxPool2,
                Flatten,
                Affine { width: 1024 },
                Relu,
                Logits,
            ],
        ),
        Preset::MnistCapacity => (
            [28, 28, 1],
            vec![
                Conv { filters: 2 },
                Relu,
                MaxPool2,
                Conv { filters: 4 },
                Relu,
                MaxPool2,
                Flatten,
                Affine { width: 64 },
                Relu,
                Logits,
            ],
        ),
        Preset::CifarSimple => (
            [32, 32, 3],
            vec![
                Standardize,
                Conv { filters: 16 },
                Relu,
                Conv { filters: 16 },
                Relu,
                MaxPool2,
                Conv { filters: 32 },
                Relu,
                Conv { filters: 32 },
                Relu,
                MaxPool2,
                Flatten,
                Affine { width: 128 },
                Relu,
                Logits,
            ],
        ),
    };
    ModelSpec::new(input, layers, capacity_scale, 10)
}

/// The parameter set θ: weight and bias tensors in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros_like(spec: &ModelSpec) -> Result<Self> {
        Ok(Self {
            tensors: spec.param_shapes()?.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != self.tensors.len() {
            return Err(Error::shape(
                "params",
                format!("{} tensors for {} expected", self.tensors.len(), shapes.len()),
            ));
        }
        for (i, (s, t)) in shapes.iter().zip(&self.tensors).enumerate() {
            if s.as_slice() != t.shape() {
                return Err(Error::shape(
                    "params",
                    format!("tensor {i}: {:?} vs expected {s:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Flat copy of all parameter values (for diagnostics and hashing).
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Weights uniform in `±sqrt(6 / fan_in)`, biases 0.1; deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let shapes = spec.param_shapes()?;
    let tensors = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.len() == 1 {
                return Tensor::full(s, 0.1);
            }
            let fan_in: usize = s[..s.len() - 1].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = seed::stream(seed, &[tag::INIT, i as u64]);
            let n = s.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(s.clone(), data)
        })
        .collect();
    Ok(ModelParams { tensors })
}

/// A spec paired with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        params.check(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::shape(
                "forward",
                format!("batch {s:?} vs model input {:?}", self.spec.input),
            ));
        }
        Ok(())
    }

    /// Logits `[n, k]` without recording a tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut p = self.params.tensors.iter();
        for layer in &self.spec.layers {
            h = match layer {
                Layer::Standardize => ops::standardize(&h)?,
                Layer::Conv { .. } => {
                    let (k, b) = (p.next().unwrap(), p.next().unwrap());
                    ops::conv2d(&h, k, b, Padding::Same)?
                }
                Layer::MaxPool2 => ops::maxpool2(&h)?,
                Layer::Relu => ops::relu(&h),
                Layer::Flatten => {
                    let n = h.shape()[0];
                    h.reshape(&[n, h.row_len()])?
                }
                Layer::Affine { .. } | Layer::Logits => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    ops::affine(&h, w, b)?
                }
            };
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`. `params` must hold one var per
    /// parameter tensor (constants or variables).
    pub fn record(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        let mut p = params.iter().copied();
        for layer in &self.spec.layers {
            h = match layer {
                Layer::Standardize => tape.standardize(h)?,
                Layer::Conv { .. } => {
                    let (k, b) = (p.next().unwrap(), p.next().unwrap());
                    tape.conv2d(h, k, b, Padding::Same)?
                }
                Layer::MaxPool2 => tape.maxpool2(h)?,
                Layer::Relu => tape.relu(h),
                Layer::Flatten => tape.flatten(h)?,
                Layer::Affine { .. } | Layer::Logits => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    tape.affine(h, w, b)?
                }
            };
        }
        Ok(h)
    }

    /// Pushes all parameters onto `tape`, as variables or constants.
    pub fn params_on(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| {
                if track {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.shape()[0]).map(|i| ops::argmax(logits.row(i))).collect())
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn param_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = self.params_on(&mut tape, true);
        let logits = self.record(&mut tape, xv, &pv)?;
        let loss = tape.softmax_xent(logits, labels)?;
        let value = tape.value(loss).item();
        let mut g = tape.backward(loss)?;
        let grads = pv
            .iter()
            .map(|&v| g.take(v).expect("parameter gradient"))
            .collect();
        Ok((value, grads))
    }

    /// Mean cross-entropy on a batch.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(ops::softmax_xent(&self.forward(x)?, labels)?.item())
    }
}
