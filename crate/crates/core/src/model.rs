//! Network description: layer records and the linear graph that owns them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer kind plus its kind-specific hyperparameters.
///
/// Serializes as `{"kind": "...", "hyper": {...}}`, matching the manifest
/// layout; kinds without hyperparameters carry only the tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hyper", rename_all = "snake_case")]
pub enum LayerOp {
    Dense { in_features: usize, out_features: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Maxpool2d { kernel: usize, stride: usize },
    Flatten,
    Softmax,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Dense { .. } => "dense",
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::Relu => "relu",
            LayerOp::Maxpool2d { .. } => "maxpool2d",
            LayerOp::Flatten => "flatten",
            LayerOp::Softmax => "softmax",
        }
    }

    /// Layers that carry a weight tensor and take part in bit allocation.
    pub fn is_quantizable(&self) -> bool {
        matches!(self, LayerOp::Dense { .. } | LayerOp::Conv2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub op: LayerOp,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerRecord {
    pub fn weightless(name: impl Into<String>, op: LayerOp) -> Self {
        LayerRecord { name: name.into(), op, weights: None, bias: None }
    }

    /// Number of weight elements (bias excluded; it stays in float).
    pub fn weight_count(&self) -> usize {
        self.weights.as_ref().map_or(0, Tensor::len)
    }
}

/// A linear chain of layers. `input_shape` excludes the batch dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerRecord>,
}

impl ModelGraph {
    /// Walks the chain from `input_shape`, checking that every layer's
    /// tensors match its hyperparameters and that consecutive shapes compose.
    /// Returns the per-layer output shapes (without batch dimension).
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer_output_shape(layer, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Shape feeding each layer, index-aligned with `layers`.
    pub fn input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let outs = self.infer_shapes()?;
        let mut ins = Vec::with_capacity(outs.len());
        let mut prev = self.input_shape.clone();
        for (i, _) in self.layers.iter().enumerate() {
            ins.push(prev.clone());
            prev = outs[i].clone();
        }
        Ok(ins)
    }

    pub fn validate(&self) -> Result<()> {
        self.infer_shapes().map(|_| ())
    }

    /// Indices of the weight-bearing layers, in graph order.
    pub fn quantizable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.op.is_quantizable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Output class count: width of the last dense layer, if any.
    pub fn output_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.op {
            LayerOp::Dense { out_features, .. } => Some(out_features),
            _ => None,
        })
    }
}

fn shape_err(layer: &LayerRecord, detail: String) -> Error {
    Error::Shape { layer: layer.name.clone(), detail }
}

/// Output shape of one layer given its input shape; checks tensor dims.
pub fn layer_output_shape(layer: &LayerRecord, input: &[usize]) -> Result<Vec<usize>> {
    match &layer.op {
        LayerOp::Dense { in_features, out_features } => {
            if input != [*in_features] {
                return Err(shape_err(
                    layer,
                    format!("dense expects input [{in_features}], got {input:?}"),
                ));
            }
            let w = layer
                .weights
                .as_ref()
                .ok_or_else(|| shape_err(layer, "dense layer has no weights".into()))?;
            if w.dims() != [*out_features, *in_features] {
                return Err(shape_err(
                    layer,
                    format!(
                        "dense weights must be [{out_features}, {in_features}], got {:?}",
                        w.dims()
                    ),
                ));
            }
            if let Some(b) = &layer.bias {
                if b.dims() != [*out_features] {
                    return Err(shape_err(
                        layer,
                        format!("dense bias must be [{out_features}], got {:?}", b.dims()),
                    ));
                }
            }
            Ok(vec![*out_features])
        }
        LayerOp::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let [c, h, w] = *input else {
                return Err(shape_err(layer, format!("conv2d expects [C,H,W] input, got {input:?}")));
            };
            if c != *in_channels {
                return Err(shape_err(
                    layer,
                    format!("conv2d expects {in_channels} input channels, got {c}"),
                ));
            }
            if *stride == 0 || *kernel == 0 {
                return Err(shape_err(layer, "conv2d kernel and stride must be positive".into()));
            }
            let wt = layer
                .weights
                .as_ref()
                .ok_or_else(|| shape_err(layer, "conv2d layer has no weights".into()))?;
            if wt.dims() != [*out_channels, *in_channels, *kernel, *kernel] {
                return Err(shape_err(
                    layer,
                    format!(
                        "conv2d weights must be [{out_channels}, {in_channels}, {kernel}, {kernel}], got {:?}",
                        wt.dims()
                    ),
                ));
            }
            if let Some(b) = &layer.bias {
                if b.dims() != [*out_channels] {
                    return Err(shape_err(
                        layer,
                        format!("conv2d bias must be [{out_channels}], got {:?}", b.dims()),
                    ));
                }
            }
            let h_pad = h + 2 * padding;
            let w_pad = w + 2 * padding;
            if h_pad < *kernel || w_pad < *kernel {
                return Err(shape_err(layer, format!("kernel {kernel} exceeds padded input {h_pad}x{w_pad}")));
            }
            let oh = (h_pad - kernel) / stride + 1;
            let ow = (w_pad - kernel) / stride + 1;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerOp::Relu | LayerOp::Softmax => Ok(input.to_vec()),
        LayerOp::Maxpool2d { kernel, stride } => {
            let [c, h, w] = *input else {
                return Err(shape_err(layer, format!("maxpool2d expects [C,H,W] input, got {input:?}")));
            };
            if *stride == 0 || *kernel == 0 {
                return Err(shape_err(layer, "maxpool2d kernel and stride must be positive".into()));
            }
            if h < *kernel || w < *kernel {
                return Err(shape_err(layer, format!("pool kernel {kernel} exceeds input {h}x{w}")));
            }
            Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
        }
        LayerOp::Flatten => Ok(vec![input.iter().product()]),
    }
}
