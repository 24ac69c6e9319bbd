//! CNN definition, training, evaluation, checkpoints, and the accessors the
//! explanation code needs (captured feature maps, logit gradients, suffix
//! re-evaluation).
//!
//! Every conv layer exposes two capture points: `<name>` is the linear
//! convolution output (bias included) and `<name>_act` is the same map after
//! the layer's activation. Max-pool layers expose `<name>`.

pub(crate) mod checkpoint;
mod train;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, TrainConfig};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{ComputeGraph, NodeId, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Gap,
    Dense {
        units: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// `[H, W, C]`
    pub input_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub layers: Vec<LayerSpec>,
}

/// Static description of one capture point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturePoint {
    pub name: String,
    pub shape: Vec<usize>,
    /// Produces an `HxWxK` feature map.
    pub explainable: bool,
}

impl ArchitectureSpec {
    /// Six 3x3 conv layers in pairs of 16, 32 and 64 filters, max-pooling
    /// after the first two pairs, global average pooling and a dense head.
    pub fn validation(input_side: usize, class_names: Vec<String>) -> Self {
        Self::validation_with_widths(input_side, class_names, [16, 32, 64])
    }

    pub fn validation_with_widths(
        input_side: usize,
        class_names: Vec<String>,
        widths: [usize; 3],
    ) -> Self {
        let conv = |i: usize, filters: usize| LayerSpec {
            name: format!("conv{i}"),
            kind: LayerKind::Conv {
                filters,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
                activation: Activation::Relu,
            },
        };
        let pool = |i: usize| LayerSpec {
            name: format!("pool{i}"),
            kind: LayerKind::MaxPool { size: 2, stride: 2 },
        };
        let units = class_names.len();
        Self {
            input_shape: [input_side, input_side, 3],
            class_names,
            layers: vec![
                conv(1, widths[0]),
                conv(2, widths[0]),
                pool(1),
                conv(3, widths[1]),
                conv(4, widths[1]),
                pool(2),
                conv(5, widths[2]),
                conv(6, widths[2]),
                LayerSpec {
                    name: "gap".into(),
                    kind: LayerKind::Gap,
                },
                LayerSpec {
                    name: "logits".into(),
                    kind: LayerKind::Dense {
                        units,
                        activation: Activation::None,
                    },
                },
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Capture points with their output shapes, in network order. Also
    /// validates the architecture.
    pub fn capture_points(&self) -> Result<Vec<CapturePoint>> {
        let mut names = std::collections::HashSet::new();
        let mut shape = self.input_shape.to_vec();
        if shape.contains(&0) {
            return Err(Error::Architecture(format!("input shape {shape:?}")));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Architecture("need at least two classes".into()));
        }
        let mut points = Vec::new();
        let mut flat = false;
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Architecture(format!("duplicate layer name `{}`", layer.name)));
            }
            let spatial = |shape: &[usize], what: &str| -> Result<(usize, usize, usize)> {
                match *shape {
                    [h, w, c] if !flat => Ok((h, w, c)),
                    _ => Err(Error::Architecture(format!(
                        "`{}` ({what}) needs an HxWxC input, got {shape:?}",
                        layer.name
                    ))),
                }
            };
            match layer.kind {
                LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => {
                    let (h, w, c) = spatial(&shape, "conv")?;
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Architecture(format!("`{}` has a zero hyperparameter", layer.name)));
                    }
                    let g = crate::tensor::ops::ConvGeometry::new(
                        &[h, w, c],
                        &[kernel, kernel, c, filters],
                        stride,
                        padding,
                    )
                    .map_err(|e| Error::Architecture(format!("`{}`: {e}", layer.name)))?;
                    shape = vec![g.out_h, g.out_w, filters];
                    points.push(CapturePoint {
                        name: layer.name.clone(),
                        shape: shape.clone(),
                        explainable: true,
                    });
                    if activation != Activation::None {
                        points.push(CapturePoint {
                            name: format!("{}_act", layer.name),
                            shape: shape.clone(),
                            explainable: true,
                        });
                    }
                }
                LayerKind::MaxPool { size, stride } => {
                    let (h, w, c) = spatial(&shape, "max-pool")?;
                    if size == 0 || stride == 0 || size > h || size > w {
                        return Err(Error::Architecture(format!(
                            "`{}`: window {size}/{stride} on {h}x{w}",
                            layer.name
                        )));
                    }
                    shape = vec![(h - size) / stride + 1, (w - size) / stride + 1, c];
                    points.push(CapturePoint {
                        name: layer.name.clone(),
                        shape: shape.clone(),
                        explainable: true,
                    });
                }
                LayerKind::Gap => {
                    let (_, _, c) = spatial(&shape, "gap")?;
                    shape = vec![c];
                    flat = true;
                    points.push(CapturePoint {
                        name: layer.name.clone(),
                        shape: shape.clone(),
                        explainable: false,
                    });
                }
                LayerKind::Dense { units, .. } => {
                    if units == 0 {
                        return Err(Error::Architecture(format!("`{}` has zero units", layer.name)));
                    }
                    shape = vec![units];
                    flat = true;
                    points.push(CapturePoint {
                        name: layer.name.clone(),
                        shape: shape.clone(),
                        explainable: false,
                    });
                }
            }
        }
        if shape != [self.num_classes()] {
            return Err(Error::Architecture(format!(
                "network output {shape:?} does not match {} classes",
                self.num_classes()
            )));
        }
        Ok(points)
    }

    /// Names of all layers producing `HxWxK` maps, in network order.
    pub fn explainable_layers(&self) -> Result<Vec<String>> {
        Ok(self
            .capture_points()?
            .into_iter()
            .filter(|p| p.explainable)
            .map(|p| p.name)
            .collect())
    }

    /// The linear output of the deepest conv layer.
    pub fn last_conv_layer(&self) -> Option<&str> {
        self.layers
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.as_str())
    }

    /// `(shape, fan_in)` of every parameter tensor in storage order.
    fn parameter_shapes(&self) -> Result<Vec<(Vec<usize>, usize)>> {
        self.capture_points()?;
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let c = shape[2];
                    let g = crate::tensor::ops::ConvGeometry::new(
                        &shape,
                        &[kernel, kernel, c, filters],
                        stride,
                        padding,
                    )?;
                    out.push((vec![kernel, kernel, c, filters], kernel * kernel * c));
                    out.push((vec![filters], 0));
                    shape = vec![g.out_h, g.out_w, filters];
                }
                LayerKind::MaxPool { size, stride } => {
                    shape = vec![(shape[0] - size) / stride + 1, (shape[1] - size) / stride + 1, shape[2]];
                }
                LayerKind::Gap => shape = vec![shape[2]],
                LayerKind::Dense { units, .. } => {
                    let n: usize = shape.iter().product();
                    out.push((vec![n, units], n));
                    out.push((vec![units], 0));
                    shape = vec![units];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// A network: architecture, parameters and how it was trained.
///
/// Parameters are immutable and reference counted; cloning a model is cheap
/// and every forward pass builds its own private graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchitectureSpec,
    params: Vec<Arc<Tensor>>,
    pub metadata: TrainingMetadata,
}

/// One recorded forward pass.
pub struct Trace {
    pub graph: ComputeGraph,
    pub input: NodeId,
    pub logits: NodeId,
    points: BTreeMap<String, NodeId>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    pub fn node(&self, layer: &str) -> Result<NodeId> {
        self.points
            .get(layer)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    pub fn activation(&self, layer: &str) -> Result<&Tensor> {
        Ok(self.graph.value(self.node(layer)?))
    }
}

/// Per-class accuracy and confusion matrix (`confusion[true][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl Model {
    /// He-normal kernels and zero biases, deterministic in `seed`.
    pub fn init(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        let shapes = arch.parameter_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            params,
            metadata: TrainingMetadata {
                seed,
                epochs: 0,
                epoch_losses: vec![],
                train_accuracy: 0.0,
                val_accuracy: 0.0,
            },
        })
    }

    pub fn from_parts(arch: ArchitectureSpec, params: Vec<Tensor>, metadata: TrainingMetadata) -> Result<Self> {
        let shapes = arch.parameter_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Architecture(format!(
                "architecture needs {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, ((shape, _), p)) in shapes.iter().zip(&params).enumerate() {
            if p.shape() != &shape[..] {
                return Err(Error::Architecture(format!(
                    "parameter {i} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            arch,
            params: params.into_iter().map(Arc::new).collect(),
            metadata,
        })
    }

    pub fn architecture(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub(crate) fn set_params(&mut self, params: Vec<Tensor>) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params.into_iter().map(Arc::new).collect();
    }

    pub fn check_class(&self, class_index: usize) -> Result<()> {
        if class_index >= self.num_classes() {
            return Err(Error::UnknownClass {
                index: class_index,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Checks that `layer` exists and produces an `HxWxK` map.
    pub fn check_explainable(&self, layer: &str) -> Result<()> {
        let points = self.arch.capture_points()?;
        match points.iter().find(|p| p.name == layer) {
            None => Err(Error::UnknownLayer(layer.to_string())),
            Some(p) if !p.explainable => Err(Error::NotExplainable(layer.to_string())),
            Some(_) => Ok(()),
        }
    }

    /// Records a full forward pass with every capture point named. Returns
    /// the trace and the parameter node ids (in storage order).
    pub(crate) fn trace_with_params(&self, image: &Tensor) -> Result<(Trace, Vec<NodeId>)> {
        if image.shape() != self.arch.input_shape {
            return Err(Error::shape(
                "forward",
                format!("image {:?} vs model input {:?}", image.shape(), self.arch.input_shape),
            ));
        }
        let mut g = ComputeGraph::new();
        let mut points = BTreeMap::new();
        let mut param_nodes = Vec::with_capacity(self.params.len());
        let mut next_param = self.params.iter();
        let mut param = |g: &mut ComputeGraph| {
            let id = g.param(Arc::clone(next_param.next().expect("validated parameter count")));
            param_nodes.push(id);
            id
        };
        let input = g.input(image.clone());
        let mut x = input;
        for layer in &self.arch.layers {
            match layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let k = param(&mut g);
                    let b = param(&mut g);
                    x = g.conv2d(x, k, Some(b), stride, padding)?;
                    g.mark(x, layer.name.clone());
                    points.insert(layer.name.clone(), x);
                    if activation == Activation::Relu {
                        x = g.relu(x)?;
                        let name = format!("{}_act", layer.name);
                        g.mark(x, name.clone());
                        points.insert(name, x);
                    }
                }
                LayerKind::MaxPool { size, stride } => {
                    x = g.maxpool(x, size, stride)?;
                    g.mark(x, layer.name.clone());
                    points.insert(layer.name.clone(), x);
                }
                LayerKind::Gap => {
                    x = g.gap(x)?;
                    g.mark(x, layer.name.clone());
                    points.insert(layer.name.clone(), x);
                }
                LayerKind::Dense { activation, .. } => {
                    let w = param(&mut g);
                    let b = param(&mut g);
                    x = g.dense(x, w, b)?;
                    if activation == Activation::Relu {
                        x = g.relu(x)?;
                    }
                    g.mark(x, layer.name.clone());
                    points.insert(layer.name.clone(), x);
                }
            }
        }
        g.set_output(x);
        Ok((
            Trace {
                graph: g,
                input,
                logits: x,
                points,
            },
            param_nodes,
        ))
    }

    pub fn trace(&self, image: &Tensor) -> Result<Trace> {
        Ok(self.trace_with_params(image)?.0)
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.trace(image)?.logits().clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.logits(image)?.argmax())
    }

    /// Logits plus the activations of the requested explainable layers.
    pub fn forward_with_capture(
        &self,
        image: &Tensor,
        layers: &[&str],
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        for layer in layers {
            self.check_explainable(layer)?;
        }
        let trace = self.trace(image)?;
        let captured = layers
            .iter()
            .map(|&l| Ok((l.to_string(), trace.activation(l)?.clone())))
            .collect::<Result<_>>()?;
        Ok((trace.logits().clone(), captured))
    }

    /// Gradient of the pre-softmax logit of `class_index` w.r.t. the output
    /// of `layer`.
    pub fn logit_gradients(&self, image: &Tensor, layer: &str, class_index: usize) -> Result<Tensor> {
        self.check_class(class_index)?;
        self.check_explainable(layer)?;
        let trace = self.trace(image)?;
        trace_logit_gradient(&trace, layer, class_index)
    }

    /// Gradient of the logit of `class_index` w.r.t. the input image.
    pub fn input_gradient(&self, image: &Tensor, class_index: usize) -> Result<Tensor> {
        self.check_class(class_index)?;
        let mut trace = self.trace(image)?;
        let s = trace.graph.select(trace.logits, class_index)?;
        trace.graph.backward(s, trace.input)
    }

    /// Softmax cross-entropy of one labelled image.
    pub fn loss(&self, image: &Tensor, label: usize) -> Result<f64> {
        self.check_class(label)?;
        let mut trace = self.trace(image)?;
        let l = trace.graph.cross_entropy(trace.logits, label)?;
        Ok(trace.graph.value(l).data()[0])
    }

    /// Cross-entropy of one labelled image and its gradient w.r.t. every
    /// parameter tensor, in storage order.
    pub fn loss_gradients(&self, image: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
        self.check_class(label)?;
        let (mut trace, params) = self.trace_with_params(image)?;
        let loss = trace.graph.cross_entropy(trace.logits, label)?;
        let grads = trace.graph.backward_many(loss, &params)?;
        Ok((trace.graph.value(loss).data()[0], grads))
    }

    /// Logits when `layer`'s output is replaced by `substituted`.
    pub fn forward_from(&self, trace: &Trace, layer: &str, substituted: Tensor) -> Result<Tensor> {
        trace.graph.forward_from(trace.node(layer)?, substituted)
    }

    pub fn evaluate(&self, images: &[Tensor], labels: &[usize]) -> Result<Evaluation> {
        if images.len() != labels.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} images, {} labels", images.len(), labels.len()),
            ));
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::UnknownClass { index: bad, classes: k });
        }
        let predictions = exec::try_map_slice(images, |img| self.predict(img))?;
        let mut confusion = vec![vec![0usize; k]; k];
        for (&truth, &pred) in labels.iter().zip(&predictions) {
            confusion[truth][pred] += 1;
        }
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[c] as f64 / total as f64
                }
            })
            .collect();
        Ok(Evaluation {
            accuracy: if labels.is_empty() {
                0.0
            } else {
                correct as f64 / labels.len() as f64
            },
            per_class_accuracy,
            confusion,
        })
    }
}

/// Gradient of logit `class_index` w.r.t. a traced layer, using a scalar
/// selection node appended to a clone of the trace.
pub(crate) fn trace_logit_gradient(trace: &Trace, layer: &str, class_index: usize) -> Result<Tensor> {
    let node = trace.node(layer)?;
    let mut g = trace.graph.clone();
    let s = g.select(trace.logits, class_index)?;
    g.backward(s, node)
}
