use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::*;
use super::{NnError, Tensor};

/// Number of output classes of every model.
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { out_channels: usize },
    Relu,
    MaxPool2,
    Flatten,
    Dense { out_features: usize },
    SoftmaxXent,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv3x3 { out_channels } => write!(f, "conv3x3({out_channels})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2 => f.write_str("maxpool2"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dense { out_features } => write!(f, "dense({out_features})"),
            LayerSpec::SoftmaxXent => f.write_str("softmax_xent"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let arg = |prefix: &str| -> Option<Result<usize, NnError>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                inner
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| NnError::Spec(format!("bad layer size in {s:?}"))),
            )
        };
        if let Some(c) = arg("conv3x3") {
            return Ok(LayerSpec::Conv3x3 { out_channels: c? });
        }
        if let Some(c) = arg("dense") {
            return Ok(LayerSpec::Dense { out_features: c? });
        }
        match s {
            "relu" => Ok(LayerSpec::Relu),
            "maxpool2" => Ok(LayerSpec::MaxPool2),
            "flatten" => Ok(LayerSpec::Flatten),
            "softmax_xent" => Ok(LayerSpec::SoftmaxXent),
            _ => Err(NnError::Spec(format!("unknown layer {s:?}"))),
        }
    }
}

/// Layer graph for a single-channel `side x side` input and a 2-class output.
///
/// Text form: `side=<S>;<layer>,<layer>,...`, e.g.
/// `side=8;flatten,dense(2),softmax_xent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub side: usize,
    pub layers: Vec<LayerSpec>,
}

/// Per-sample activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

impl ModelSpec {
    /// Three blocks of `[conv3x3, relu, conv3x3, relu, maxpool2]` with widths
    /// 8, 16, 32, then `dense(64), relu, dense(2)`.
    pub fn minivgg(side: usize) -> Self {
        let mut layers = Vec::new();
        for width in [8, 16, 32] {
            layers.extend([
                LayerSpec::Conv3x3 { out_channels: width },
                LayerSpec::Relu,
                LayerSpec::Conv3x3 { out_channels: width },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
            ]);
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 64 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: NUM_CLASSES },
            LayerSpec::SoftmaxXent,
        ]);
        Self { side, layers }
    }

    /// A linear classifier: `flatten, dense(2), softmax_xent`.
    pub fn linear(side: usize) -> Self {
        Self {
            side,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: NUM_CLASSES },
                LayerSpec::SoftmaxXent,
            ],
        }
    }

    /// Named architectures (`minivgg`, `linear`) or an explicit layer list.
    pub fn from_arch(arch: &str, side: usize) -> Result<Self, NnError> {
        let spec = match arch {
            "minivgg" => Self::minivgg(side),
            "linear" => Self::linear(side),
            list => Self {
                side,
                layers: list.split(',').map(str::parse).collect::<Result<_, _>>()?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the layer chain and returns the activation shape after each
    /// layer (input shape first).
    pub fn validate(&self) -> Result<Vec<ActShape>, NnError> {
        let err = |i: usize, msg: &str| NnError::Spec(format!("layer {i} ({}): {msg}", self.layers[i]));
        if self.side == 0 {
            return Err(NnError::Spec("input side must be positive".into()));
        }
        let mut shape = ActShape::Image {
            c: 1,
            h: self.side,
            w: self.side,
        };
        let mut shapes = vec![shape];
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::SoftmaxXent) {
                if i + 1 != self.layers.len() {
                    return Err(err(i, "softmax_xent must be the last layer"));
                }
                if shape != ActShape::Flat(NUM_CLASSES) {
                    return Err(err(i, "softmax_xent needs a 2-class flat input"));
                }
                shapes.push(shape);
                continue;
            }
            shape = match (*layer, shape) {
                (LayerSpec::Conv3x3 { out_channels }, ActShape::Image { h, w, .. }) => ActShape::Image {
                    c: out_channels,
                    h,
                    w,
                },
                (LayerSpec::Conv3x3 { .. }, _) => return Err(err(i, "conv3x3 needs an image input")),
                (LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool2, ActShape::Image { c, h, w }) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(err(i, &format!("maxpool2 needs even spatial dims, got {h}x{w}")));
                    }
                    ActShape::Image { c, h: h / 2, w: w / 2 }
                }
                (LayerSpec::MaxPool2, _) => return Err(err(i, "maxpool2 needs an image input")),
                (LayerSpec::Flatten, s) => ActShape::Flat(s.numel()),
                (LayerSpec::Dense { out_features }, ActShape::Flat(_)) => ActShape::Flat(out_features),
                (LayerSpec::Dense { .. }, _) => return Err(err(i, "dense needs a flat input (add flatten)")),
                (LayerSpec::SoftmaxXent, _) => unreachable!(),
            };
            shapes.push(shape);
        }
        if self.layers.last() != Some(&LayerSpec::SoftmaxXent) {
            return Err(NnError::Spec("the last layer must be softmax_xent".into()));
        }
        Ok(shapes)
    }

    /// Parameter array sizes in storage order (weights then bias per layer).
    pub fn param_sizes(&self) -> Result<Vec<usize>, NnError> {
        let shapes = self.validate()?;
        let mut sizes = Vec::new();
        for (layer, input) in self.layers.iter().zip(&shapes) {
            match (*layer, *input) {
                (LayerSpec::Conv3x3 { out_channels }, ActShape::Image { c, .. }) => {
                    sizes.extend([out_channels * c * 9, out_channels]);
                }
                (LayerSpec::Dense { out_features }, ActShape::Flat(n)) => {
                    sizes.extend([out_features * n, out_features]);
                }
                _ => {}
            }
        }
        Ok(sizes)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "side={};", self.side)?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, body) = s
            .split_once(';')
            .ok_or_else(|| NnError::Spec(format!("expected \"side=<S>;<layers>\", got {s:?}")))?;
        let side = head
            .trim()
            .strip_prefix("side=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NnError::Spec(format!("bad side in {head:?}")))?;
        let layers = body.split(',').map(str::parse).collect::<Result<_, _>>()?;
        let spec = Self { side, layers };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { w: Tensor, b: Vec<f64> },
    Relu,
    MaxPool,
    Flatten,
    Dense { w: Tensor, b: Vec<f64> },
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    /// Layer input (conv, relu, dense).
    Input(Tensor),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

/// A network built from a [`ModelSpec`]. The softmax head is applied by
/// [`Model::loss_and_grads`]; [`Model::forward`] returns logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, NnError> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| normal.sample(&mut rng)).collect()).unwrap()
        };
        let mut layers = Vec::new();
        for (layer, input) in spec.layers.iter().zip(&shapes) {
            layers.push(match (*layer, *input) {
                (LayerSpec::Conv3x3 { out_channels }, ActShape::Image { c, .. }) => Layer::Conv {
                    w: draw(&[out_channels, c, 3, 3], c * 9),
                    b: vec![0.0; out_channels],
                },
                (LayerSpec::Dense { out_features }, ActShape::Flat(n)) => Layer::Dense {
                    w: draw(&[out_features, n], n),
                    b: vec![0.0; out_features],
                },
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::MaxPool2, _) => Layer::MaxPool,
                (LayerSpec::Flatten, _) => Layer::Flatten,
                (LayerSpec::SoftmaxXent, _) => continue,
                _ => unreachable!("validated"),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Parameter arrays in storage order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv { w, b } | Layer::Dense { w, b } = l {
                out.push(w.data());
                out.push(b.as_slice());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv { w, b } | Layer::Dense { w, b } = l {
                out.push(w.data_mut());
                out.push(b.as_mut_slice());
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        let (_, c, h, w) = x.nchw()?;
        if (c, h, w) != (1, self.spec.side, self.spec.side) {
            return Err(NnError::Shape(format!(
                "model expects (N, 1, {s}, {s}) input, got {:?}",
                x.shape(),
                s = self.spec.side
            )));
        }
        Ok(())
    }

    /// Logits of shape `(n, 2)` plus the per-layer caches.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<Cache>), NnError> {
        self.check_input(x)?;
        let mut act = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            act = match layer {
                Layer::Conv { w, b } => {
                    let out = conv3x3_forward(&act, w, b)?;
                    caches.push(Cache::Input(act));
                    out
                }
                Layer::Relu => {
                    let out = relu_forward(&act);
                    caches.push(Cache::Input(act));
                    out
                }
                Layer::MaxPool => {
                    let (out, argmax) = maxpool2_forward(&act)?;
                    caches.push(Cache::Pool {
                        input_shape: act.shape().to_vec(),
                        argmax,
                    });
                    out
                }
                Layer::Flatten => {
                    let input_shape = act.shape().to_vec();
                    let n = act.batch();
                    let per = act.len() / n.max(1);
                    caches.push(Cache::Flatten { input_shape });
                    act.reshape(&[n, per])?
                }
                Layer::Dense { w, b } => {
                    let out = dense_forward(&act, w, b)?;
                    caches.push(Cache::Input(act));
                    out
                }
            };
        }
        act.debug_check_finite("logits");
        Ok((act, caches))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Gradients of every parameter array, in [`Model::params`] order.
    pub fn backward(&self, caches: &[Cache], grad_logits: Tensor) -> Result<Vec<Vec<f64>>, NnError> {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g = grad_logits;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = match (layer, cache) {
                (Layer::Conv { w, .. }, Cache::Input(x)) => {
                    let (gx, gw, gb) = conv3x3_backward(x, w, &g)?;
                    grads.push(gb);
                    grads.push(gw.into_data());
                    gx
                }
                (Layer::Dense { w, .. }, Cache::Input(x)) => {
                    let (gx, gw, gb) = dense_backward(x, w, &g)?;
                    grads.push(gb);
                    grads.push(gw.into_data());
                    gx
                }
                (Layer::Relu, Cache::Input(x)) => relu_backward(x, &g)?,
                (Layer::MaxPool, Cache::Pool { input_shape, argmax }) => maxpool2_backward(input_shape, argmax, &g)?,
                (Layer::Flatten, Cache::Flatten { input_shape }) => g.reshape(input_shape)?,
                _ => return Err(NnError::Shape("cache does not match layer".into())),
            };
            g.debug_check_finite("backward activation gradient");
        }
        grads.reverse();
        Ok(grads)
    }

    /// Mean cross-entropy over the batch and the parameter gradients.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>), NnError> {
        let (logits, caches) = self.forward_cached(x)?;
        let (loss, grad) = softmax_xent(&logits, labels)?;
        Ok((loss, self.backward(&caches, grad)?))
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
        Ok(softmax_xent(&self.forward(x)?, labels)?.0)
    }

    /// Argmax class per sample (ties go to class 0).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, NnError> {
        let logits = self.forward(x)?;
        Ok(logits
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| if row[1] > row[0] { 1 } else { 0 })
            .collect())
    }

    /// Serializes to the checkpoint format described in [`super::checkpoint`].
    pub fn save(&self) -> Vec<u8> {
        super::checkpoint::encode(&self.spec, &self.params())
    }

    pub fn load(bytes: &[u8]) -> Result<Self, NnError> {
        let (spec, values) = super::checkpoint::decode(bytes)?;
        let mut model = Self::init(&spec, 0)?;
        let mut it = values.into_iter();
        for p in model.params_mut() {
            for v in p.iter_mut() {
                *v = it.next().expect("length checked by decode");
            }
        }
        Ok(model)
    }
}
