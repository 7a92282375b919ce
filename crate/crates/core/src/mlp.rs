//! Encoder + regressor network with exact manual backpropagation.
//!
//! The encoder is a stack of dense layers producing the feature matrix `Z`;
//! the regressor is a single affine layer mapping `Z` to predictions. Both
//! outputs are exposed so the contrastive loss can act on `Z` while the
//! regression loss acts on the predictions.
//!
//! Weights are stored `(in_dim, out_dim)` so a layer computes `X·W + b`.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConrError, Result};
use crate::tensor::Matrix;

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

fn fresh_token() -> u64 {
    NEXT_TOKEN.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(ConrError::DimensionMismatch {
                context: "Dense::new bias",
                expected: weights.cols().to_string(),
                actual: bias.len().to_string(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) || !weights.is_finite() {
            return Err(ConrError::invalid("non-finite layer parameter"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weights: Matrix::from_vec(in_dim, out_dim, data).expect("sized above"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weights)?;
        out.add_row_vector(&self.bias)?;
        if self.activation != Activation::Identity {
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = self.activation.apply(*v));
        }
        Ok(out)
    }
}

/// Layer sizes for [`Mlp::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default = "default_feature_activation")]
    pub feature_activation: Activation,
}

fn default_feature_activation() -> Activation {
    Activation::Identity
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            feature_dim: 16,
            feature_activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    encoder: Vec<Dense>,
    regressor: Dense,
    /// Identifies the parameter state a [`ForwardCache`] was produced from.
    #[serde(skip, default = "fresh_token")]
    token: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder && self.regressor == other.regressor
    }
}

/// Activations recorded by [`Mlp::forward`], enough for an exact backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    token: u64,
    /// `layer_inputs[i]` is the input of encoder layer `i`; the last entry is
    /// the feature matrix fed to the regressor.
    layer_inputs: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Matrix,
    pub predictions: Matrix,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LayerGrad>,
    pub regressor: LayerGrad,
    pub input: Matrix,
}

impl Gradients {
    /// Flat views in the same order as [`Mlp::parameters_mut`].
    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.regressor))
            .flat_map(|g| [g.weights.data(), g.bias.as_slice()])
            .collect()
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        arch: &Architecture,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || arch.feature_dim == 0 || output_dim == 0 {
            return Err(ConrError::invalid("layer widths must be positive"));
        }
        if arch.hidden.contains(&0) {
            return Err(ConrError::invalid("hidden widths must be positive"));
        }
        let mut encoder = Vec::with_capacity(arch.hidden.len() + 1);
        let mut width = input_dim;
        for &h in &arch.hidden {
            encoder.push(Dense::glorot(width, h, Activation::Relu, rng));
            width = h;
        }
        encoder.push(Dense::glorot(
            width,
            arch.feature_dim,
            arch.feature_activation,
            rng,
        ));
        let regressor = Dense::glorot(arch.feature_dim, output_dim, Activation::Identity, rng);
        Self::from_layers(encoder, regressor)
    }

    pub fn from_layers(encoder: Vec<Dense>, regressor: Dense) -> Result<Self> {
        if encoder.is_empty() {
            return Err(ConrError::invalid("encoder needs at least one layer"));
        }
        for pair in encoder.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(ConrError::DimensionMismatch {
                    context: "encoder layer chain",
                    expected: pair[0].out_dim().to_string(),
                    actual: pair[1].in_dim().to_string(),
                });
            }
        }
        let feature_dim = encoder.last().map(Dense::out_dim).unwrap_or_default();
        if regressor.in_dim() != feature_dim {
            return Err(ConrError::DimensionMismatch {
                context: "regressor input",
                expected: feature_dim.to_string(),
                actual: regressor.in_dim().to_string(),
            });
        }
        if regressor.activation != Activation::Identity {
            return Err(ConrError::invalid("regressor must be affine"));
        }
        Ok(Self {
            encoder,
            regressor,
            token: fresh_token(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.regressor.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.regressor.out_dim()
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn regressor(&self) -> &Dense {
        &self.regressor
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.regressor))
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Mutable flat views of every parameter: `(W, b)` per encoder layer,
    /// then the regressor's `(W, b)`. Invalidates outstanding caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.token = fresh_token();
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.regressor))
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.regressor))
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        if x.cols() != self.input_dim() {
            return Err(ConrError::DimensionMismatch {
                context: "Mlp::forward input width",
                expected: self.input_dim().to_string(),
                actual: x.cols().to_string(),
            });
        }
        let mut layer_inputs = Vec::with_capacity(self.encoder.len() + 1);
        let mut h = x.clone();
        for layer in &self.encoder {
            let next = layer.forward(&h)?;
            layer_inputs.push(h);
            h = next;
        }
        let predictions = self.regressor.forward(&h)?;
        layer_inputs.push(h.clone());
        Ok(ForwardOutput {
            features: h,
            predictions,
            cache: ForwardCache {
                token: self.token,
                layer_inputs,
            },
        })
    }

    /// Features only; skips building a cache.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.encoder {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Gradients of `⟨dZ, Z⟩ + ⟨dŶ, Ŷ⟩` with respect to every parameter and
    /// the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_features: &Matrix,
        d_predictions: &Matrix,
    ) -> Result<Gradients> {
        if cache.token != self.token || cache.layer_inputs.len() != self.encoder.len() + 1 {
            return Err(ConrError::invalid(
                "forward cache does not belong to this model state",
            ));
        }
        let features = cache.layer_inputs.last().expect("non-empty");
        let n = features.rows();
        if d_features.shape() != (n, self.feature_dim()) {
            return Err(ConrError::DimensionMismatch {
                context: "Mlp::backward dZ",
                expected: format!("{:?}", (n, self.feature_dim())),
                actual: format!("{:?}", d_features.shape()),
            });
        }
        if d_predictions.shape() != (n, self.output_dim()) {
            return Err(ConrError::DimensionMismatch {
                context: "Mlp::backward dYhat",
                expected: format!("{:?}", (n, self.output_dim())),
                actual: format!("{:?}", d_predictions.shape()),
            });
        }

        let regressor = LayerGrad {
            weights: features.t_matmul(d_predictions)?,
            bias: d_predictions.column_sums(),
        };
        let mut upstream = d_predictions.matmul_t(&self.regressor.weights)?;
        for (u, d) in upstream.data_mut().iter_mut().zip(d_features.data()) {
            *u += d;
        }

        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (i, layer) in self.encoder.iter().enumerate().rev() {
            // upstream is d(output of layer i); the output is layer_inputs[i + 1].
            if layer.activation == Activation::Relu {
                let out = &cache.layer_inputs[i + 1];
                for (u, &o) in upstream.data_mut().iter_mut().zip(out.data()) {
                    if o <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            let input = &cache.layer_inputs[i];
            encoder.push(LayerGrad {
                weights: input.t_matmul(&upstream)?,
                bias: upstream.column_sums(),
            });
            upstream = upstream.matmul_t(&layer.weights)?;
        }
        encoder.reverse();

        Ok(Gradients {
            encoder,
            regressor,
            input: upstream,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?;
        std::fs::write(path, text).map_err(|e| ConrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConrError::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ConrError::invalid(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        // Re-validate shapes and finiteness of untrusted input.
        let encoder = ck
            .model
            .encoder
            .into_iter()
            .map(|l| Dense::new(l.weights, l.bias, l.activation))
            .collect::<Result<Vec<_>>>()?;
        let r = ck.model.regressor;
        Self::from_layers(encoder, Dense::new(r.weights, r.bias, r.activation)?)
    }
}

const CHECKPOINT_FORMAT: &str = "conr-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: pretty-printed JSON with shortest round-trip floats.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Mlp,
}
