//! Compact CNN classifier: a stack of conv blocks followed by global average
//! pooling and a single affine layer.
//!
//! Layers are named `conv1`, `conv2`, … and `head`. The activation exposed
//! for a conv layer is the output of its whole block (convolution, ReLU and,
//! when enabled, the 2×2 max-pool), i.e. exactly the tensor consumed by the
//! next block or by the pooling head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

pub const POOL_WINDOW: usize = 2;
pub const POOL_STRIDE: usize = 2;
pub const HEAD_LAYER: &str = "head";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub use_pool: bool,
}

fn one() -> usize {
    1
}

impl BlockConfig {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize, use_pool: bool) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
            use_pool,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pool followed by one affine layer.
    #[default]
    GapAffine,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    #[serde(default)]
    pub kind: HeadKind,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub head: HeadConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: three 3×3 blocks (16/32/64 channels, pad 1,
    /// 2×2 max-pool) on 64×64 RGB input, leaving an 8×8 final feature map.
    pub fn desk_default(num_classes: usize, seed: u64) -> Self {
        Self {
            input_size: 64,
            input_channels: 3,
            blocks: vec![
                BlockConfig::new(16, 3, 1, 1, true),
                BlockConfig::new(32, 3, 1, 1, true),
                BlockConfig::new(64, 3, 1, 1, true),
            ],
            head: HeadConfig {
                kind: HeadKind::GapAffine,
                num_classes,
            },
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    /// Checks the config and returns per-block geometry.
    pub fn geometry(&self) -> Result<Vec<BlockGeometry>> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("at least one conv block is required".into()));
        }
        if self.head.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be at least 2, got {}",
                self.head.num_classes
            )));
        }
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::InvalidConfig("input size and channels must be positive".into()));
        }
        let mut geoms = Vec::with_capacity(self.blocks.len());
        let (mut c, mut s) = (self.input_channels, self.input_size);
        for (i, b) in self.blocks.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name}: channels, kernel and stride must be positive"
                )));
            }
            if s + 2 * b.padding < b.kernel {
                return Err(Error::InvalidConfig(format!(
                    "{name}: kernel {} does not fit {s}×{s} input with padding {}",
                    b.kernel, b.padding
                )));
            }
            let conv_size = (s + 2 * b.padding - b.kernel) / b.stride + 1;
            let out_size = if b.use_pool {
                if conv_size < POOL_WINDOW {
                    return Err(Error::InvalidConfig(format!(
                        "{name}: {conv_size}×{conv_size} map collapses under {POOL_WINDOW}×{POOL_WINDOW} pooling"
                    )));
                }
                (conv_size - POOL_WINDOW) / POOL_STRIDE + 1
            } else {
                conv_size
            };
            geoms.push(BlockGeometry {
                name,
                in_channels: c,
                in_size: s,
                conv_size,
                out_channels: b.out_channels,
                out_size,
            });
            c = b.out_channels;
            s = out_size;
        }
        Ok(geoms)
    }

    /// Number of scalar parameters, a pure function of the config.
    pub fn parameter_count(&self) -> Result<usize> {
        let geoms = self.geometry()?;
        let convs: usize = self
            .blocks
            .iter()
            .zip(&geoms)
            .map(|(b, g)| g.in_channels * b.out_channels * b.kernel * b.kernel + b.out_channels)
            .sum();
        let feat = geoms.last().map(|g| g.out_channels).unwrap_or(0);
        Ok(convs + feat * self.head.num_classes + self.head.num_classes)
    }
}

/// Spatial bookkeeping for one conv block (square maps).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub name: String,
    pub in_channels: usize,
    pub in_size: usize,
    pub conv_size: usize,
    pub out_channels: usize,
    pub out_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Activation of a named layer, plus `∂s_c/∂A` once a backward pass has run.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord<T: Scalar> {
    pub layer: String,
    pub activation: Tensor<T>,
    pub gradient: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Prediction<T: Scalar> {
    pub logits: Tensor<T>,
    pub records: Vec<ActivationRecord<T>>,
}

/// Handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: TensorId,
    pub captured: Vec<(String, TensorId)>,
}

/// Inclusive pixel rectangle in input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    geometry: Vec<BlockGeometry>,
    labels: Vec<String>,
    params: Vec<Param<T>>,
    trained_epochs: usize,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with He-style (fan-in) normal initialization from
    /// `config.seed`. Biases start at zero. Labels default to `class0..`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let geometry = config.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(2 * geometry.len() + 2);
        for (b, g) in config.blocks.iter().zip(&geometry) {
            let fan_in = g.in_channels * b.kernel * b.kernel;
            let shape = vec![b.out_channels, g.in_channels, b.kernel, b.kernel];
            params.push(Param {
                name: format!("{}.weight", g.name),
                tensor: he_normal(&mut rng, shape, fan_in)?,
            });
            params.push(Param {
                name: format!("{}.bias", g.name),
                tensor: Tensor::zeros(vec![b.out_channels])?,
            });
        }
        let feat = geometry.last().expect("validated non-empty").out_channels;
        let classes = config.head.num_classes;
        params.push(Param {
            name: format!("{HEAD_LAYER}.weight"),
            tensor: he_normal(&mut rng, vec![classes, feat], feat)?,
        });
        params.push(Param {
            name: format!("{HEAD_LAYER}.bias"),
            tensor: Tensor::zeros(vec![classes])?,
        });
        let labels = (0..classes).map(|c| format!("class{c}")).collect();
        Ok(Self {
            config,
            geometry,
            labels,
            params,
            trained_epochs: 0,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        self.set_labels(labels)?;
        Ok(self)
    }

    pub fn set_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if labels.len() != self.config.head.num_classes {
            return Err(Error::LabelMap(format!(
                "{} labels for {} classes",
                labels.len(),
                self.config.head.num_classes
            )));
        }
        self.labels = labels;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &[BlockGeometry] {
        &self.geometry
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.config.head.num_classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn set_trained_epochs(&mut self, epochs: usize) {
        self.trained_epochs = epochs;
    }

    /// All layer names in execution order, `head` last.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = self.conv_layer_names();
        names.push(HEAD_LAYER.to_string());
        names
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        self.geometry.iter().map(|g| g.name.clone()).collect()
    }

    pub fn last_conv_layer(&self) -> &str {
        &self.geometry.last().expect("at least one block").name
    }

    fn conv_index(&self, layer: &str) -> Result<usize> {
        self.geometry
            .iter()
            .position(|g| g.name == layer)
            .ok_or_else(|| Error::UnknownLayer {
                name: layer.to_string(),
                valid: self.conv_layer_names(),
            })
    }

    pub fn layer_geometry(&self, layer: &str) -> Result<&BlockGeometry> {
        Ok(&self.geometry[self.conv_index(layer)?])
    }

    pub fn head_weight(&self) -> &Tensor<T> {
        &self.params[self.params.len() - 2].tensor
    }

    pub fn head_bias(&self) -> &Tensor<T> {
        &self.params[self.params.len() - 1].tensor
    }

    /// Records every parameter on `tape` in model order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    /// Records the forward pass for an NCHW batch already on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: TensorId,
        params: &[TensorId],
        capture: &[&str],
    ) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut wanted = Vec::with_capacity(capture.len());
        for &name in capture {
            wanted.push(self.conv_index(name)?);
        }
        let shape = tape.value(input)?.shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "predict",
                format!(
                    "batch {shape:?} does not match N×{}×{s}×{s}",
                    self.config.input_channels
                ),
            ));
        }

        let mut x = input;
        let mut outputs = Vec::with_capacity(self.geometry.len());
        for (i, b) in self.config.blocks.iter().enumerate() {
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], b.stride, b.padding)?;
            x = tape.relu(x)?;
            if b.use_pool {
                x = tape.max_pool2d(x, POOL_WINDOW, POOL_STRIDE)?;
            }
            outputs.push(x);
        }
        let pooled = tape.global_avg_pool(x)?;
        let n = params.len();
        let logits = tape.affine(pooled, params[n - 2], params[n - 1])?;
        let captured = capture
            .iter()
            .zip(wanted)
            .map(|(&name, i)| (name.to_string(), outputs[i]))
            .collect();
        Ok(ForwardPass { logits, captured })
    }

    /// Inference on an NCHW batch, optionally capturing named conv layers.
    /// Recorded gradients stay empty.
    pub fn predict(&self, batch: &Tensor<T>, capture: &[&str]) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let input = tape.constant(batch.clone());
        let pass = self.forward(&mut tape, input, &params, capture)?;
        let logits = tape.value(pass.logits)?.clone();
        let records = pass
            .captured
            .iter()
            .map(|(layer, id)| {
                Ok(ActivationRecord {
                    layer: layer.clone(),
                    activation: tape.value(*id)?.clone(),
                    gradient: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Prediction { logits, records })
    }

    /// Input pixels that can influence cell `(y, x)` of a conv layer output.
    pub fn receptive_field(&self, layer: &str, y: usize, x: usize) -> Result<PixelRect> {
        let idx = self.conv_index(layer)?;
        let g = &self.geometry[idx];
        if y >= g.out_size || x >= g.out_size {
            return Err(Error::InvalidArgument(format!(
                "cell ({y}, {x}) outside {}×{} map of {layer}",
                g.out_size, g.out_size
            )));
        }
        let (mut ya, mut yb, mut xa, mut xb) = (y as isize, y as isize, x as isize, x as isize);
        for i in (0..=idx).rev() {
            let b = &self.config.blocks[i];
            let g = &self.geometry[i];
            if b.use_pool {
                let (s, w) = (POOL_STRIDE as isize, POOL_WINDOW as isize);
                ya *= s;
                xa *= s;
                yb = yb * s + w - 1;
                xb = xb * s + w - 1;
                let hi = g.conv_size as isize - 1;
                (ya, yb, xa, xb) = (ya.max(0), yb.min(hi), xa.max(0), xb.min(hi));
            }
            let (s, p, k) = (b.stride as isize, b.padding as isize, b.kernel as isize);
            ya = ya * s - p;
            xa = xa * s - p;
            yb = yb * s - p + k - 1;
            xb = xb * s - p + k - 1;
            let hi = g.in_size as isize - 1;
            (ya, yb, xa, xb) = (ya.max(0), yb.min(hi), xa.max(0), xb.min(hi));
        }
        Ok(PixelRect {
            y0: ya as usize,
            y1: yb as usize,
            x0: xa as usize,
            x1: xb as usize,
        })
    }
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data)
}
