use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::{AggregationMode, ArchGraph, LayerKind, LayerSpec};
use crate::scalar::Scalar;

use super::ops::{self, ConvGeom, NormCache};
use super::{Tensor, TensorError};

/// Momentum applied to running normalization statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Whether decoupled weight decay applies (conv and linear weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

/// Trainable parameters, normalization buffers and optimizer moments of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub params: BTreeMap<String, Param<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
    pub moments: BTreeMap<String, Moments<T>>,
    pub seed: u64,
    /// Optimizer updates applied so far.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InitOptions {
    /// Copy path 0's initial weights into every other path (analysis only).
    pub identical_paths: bool,
}

pub fn weight_key(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_key(layer: &str) -> String {
    format!("{layer}.bias")
}

fn weight_shape(layer: &LayerSpec) -> Vec<usize> {
    let cin_g = layer.in_channels / layer.groups;
    if layer.kind.is_conv() {
        vec![layer.out_channels, cin_g, layer.kernel, layer.kernel]
    } else {
        vec![layer.out_channels, cin_g]
    }
}

impl<T: Scalar> ModelState<T> {
    /// Fan-in scaled normal weights (ReLU gain for convs and hidden dense
    /// layers, unit gain for the classifier), zero biases, unit norm scales.
    /// Every path draws its own weights unless `identical_paths` is set.
    pub fn init(g: &ArchGraph, seed: u64, opts: InitOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let paths = g.path_multiplicity;
        for layer in &g.layers {
            match layer.kind {
                LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Dense | LayerKind::ClassifierHead => {
                    let shape = weight_shape(layer);
                    let row: usize = shape[1..].iter().product();
                    let gain = if layer.kind == LayerKind::ClassifierHead {
                        1.0
                    } else {
                        2.0
                    };
                    let std = (gain / row as f64).sqrt();
                    let rows = if opts.identical_paths {
                        layer.out_channels / paths
                    } else {
                        layer.out_channels
                    };
                    let mut data: Vec<T> = (0..rows * row)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::of(z * std)
                        })
                        .collect();
                    if opts.identical_paths {
                        let block = data.clone();
                        for _ in 1..paths {
                            data.extend_from_slice(&block);
                        }
                    }
                    params.insert(
                        weight_key(&layer.id),
                        Param {
                            value: Tensor::from_vec(&shape, data).expect("init shape"),
                            grad: None,
                            decay: true,
                        },
                    );
                    if layer.has_bias {
                        params.insert(
                            bias_key(&layer.id),
                            Param {
                                value: Tensor::zeros(&[layer.out_channels]),
                                grad: None,
                                decay: false,
                            },
                        );
                    }
                }
                LayerKind::Norm => {
                    let c = layer.out_channels;
                    params.insert(
                        weight_key(&layer.id),
                        Param {
                            value: Tensor::filled(&[c], T::one()),
                            grad: None,
                            decay: false,
                        },
                    );
                    params.insert(
                        bias_key(&layer.id),
                        Param {
                            value: Tensor::zeros(&[c]),
                            grad: None,
                            decay: false,
                        },
                    );
                    buffers.insert(format!("{}.running_mean", layer.id), Tensor::zeros(&[layer.groups]));
                    buffers.insert(
                        format!("{}.running_var", layer.id),
                        Tensor::filled(&[layer.groups], T::one()),
                    );
                }
                _ => {}
            }
        }
        ModelState {
            params,
            buffers,
            moments: BTreeMap::new(),
            seed,
            step: 0,
        }
    }

    pub fn param(&self, key: &str) -> Result<&Tensor<T>, TensorError> {
        self.params
            .get(key)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::MissingParam(key.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Checks every parameter against the shape its layer implies.
    pub fn check_shapes(&self, g: &ArchGraph) -> Result<(), TensorError> {
        for layer in &g.layers {
            if !layer.kind.has_params() {
                continue;
            }
            let expect = if layer.kind == LayerKind::Norm {
                vec![layer.out_channels]
            } else {
                weight_shape(layer)
            };
            let w = self.param(&weight_key(&layer.id))?;
            if w.shape() != expect.as_slice() {
                return Err(TensorError::Layer {
                    layer: layer.id.clone(),
                    msg: format!("weight shape {:?}, expected {:?}", w.shape(), expect),
                });
            }
            if layer.has_bias || layer.kind == LayerKind::Norm {
                let b = self.param(&bias_key(&layer.id))?;
                if b.shape() != [layer.out_channels] {
                    return Err(TensorError::Layer {
                        layer: layer.id.clone(),
                        msg: format!("bias shape {:?}", b.shape()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Zeroes every trainable parameter belonging to `path`.
    pub fn zero_path(&mut self, g: &ArchGraph, path: usize) {
        for layer in &g.layers {
            if !layer.kind.has_params() {
                continue;
            }
            let range = g.path_channels(layer.out_channels, path);
            for key in [weight_key(&layer.id), bias_key(&layer.id)] {
                if let Some(p) = self.params.get_mut(&key) {
                    let row: usize = p.value.shape()[1..].iter().product();
                    p.value.data_mut()[range.start * row..range.end * row]
                        .iter_mut()
                        .for_each(|v| *v = T::zero());
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Folds the batch statistics recorded by a train-mode pass into the running buffers.
    pub fn update_running_stats(&mut self, g: &ArchGraph, pass: &ForwardPass<T>) {
        let mom = T::of(RUNNING_MOMENTUM);
        for (i, cache) in pass.norm_caches.iter().enumerate() {
            let Some(cache) = cache.as_ref().filter(|c| c.train) else {
                continue;
            };
            let layer = &g.layers[i];
            let count = pass.batch_size * (layer.out_channels / layer.groups) * pass.positions[i];
            let unbias = if count > 1 {
                T::of_usize(count) / T::of_usize(count - 1)
            } else {
                T::one()
            };
            if let Some(rm) = self.buffers.get_mut(&format!("{}.running_mean", layer.id)) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&cache.batch_mean) {
                    *r = (T::one() - mom) * *r + mom * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{}.running_var", layer.id)) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&cache.batch_var) {
                    *r = (T::one() - mom) * *r + mom * b * unbias;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of running a graph on one batch.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// `[N, classes]` output seen by the loss.
    pub aggregated: Tensor<T>,
    /// `[N, M, classes]` per-path classifier outputs.
    pub path_logits: Tensor<T>,
    pub mode: Mode,
    pub batch_size: usize,
    outputs: Option<Vec<Tensor<T>>>,
    norm_caches: Vec<Option<NormCache<T>>>,
    positions: Vec<usize>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Output of a layer, when taps were retained.
    pub fn tap(&self, g: &ArchGraph, id: &str) -> Option<&Tensor<T>> {
        let i = g.index_of(id)?;
        self.outputs.as_ref().map(|o| &o[i])
    }

    pub fn taps(&self) -> Option<&[Tensor<T>]> {
        self.outputs.as_deref()
    }
}

fn conv_geom(layer: &LayerSpec) -> ConvGeom {
    ConvGeom {
        kernel: layer.kernel,
        stride: layer.stride,
        padding: layer.padding(),
        groups: layer.groups,
    }
}

fn in_layer(layer: &LayerSpec, e: TensorError) -> TensorError {
    match e {
        TensorError::Layer { .. } => e,
        other => TensorError::Layer {
            layer: layer.id.clone(),
            msg: other.to_string(),
        },
    }
}

/// Runs `batch` (`[N, C, H, W]`) through the graph.
///
/// Forward never mutates `state`; in train mode the pass carries batch
/// statistics that [`ModelState::update_running_stats`] applies. Set
/// `retain` to keep every layer output (required for [`backward`] and for
/// activation taps).
pub fn forward<T: Scalar>(
    g: &ArchGraph,
    state: &ModelState<T>,
    batch: &Tensor<T>,
    mode: Mode,
    retain: bool,
) -> Result<ForwardPass<T>, TensorError> {
    let [n, c, _, _] = batch.dims4();
    if batch.shape().len() != 4 || c != g.input_channels() {
        return Err(TensorError::Layer {
            layer: g.input().id.clone(),
            msg: format!("batch shape {:?} does not match {} input channels", batch.shape(), c),
        });
    }
    let preds = g.predecessor_indices();
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(g.layers.len());
    let mut norm_caches: Vec<Option<NormCache<T>>> = Vec::with_capacity(g.layers.len());
    let mut positions = Vec::with_capacity(g.layers.len());
    for (i, layer) in g.layers.iter().enumerate() {
        let input = preds[i].first().map(|&p| &outputs[p]);
        let mut cache = None;
        let out = match layer.kind {
            LayerKind::Input => batch.clone(),
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                let w = state.param(&weight_key(&layer.id))?;
                let b = if layer.has_bias {
                    Some(state.param(&bias_key(&layer.id))?)
                } else {
                    None
                };
                ops::conv2d_forward(input.unwrap(), w, b, &conv_geom(layer)).map_err(|e| in_layer(layer, e))?
            }
            LayerKind::Dense | LayerKind::ClassifierHead => {
                let w = state.param(&weight_key(&layer.id))?;
                let b = if layer.has_bias {
                    Some(state.param(&bias_key(&layer.id))?)
                } else {
                    None
                };
                ops::dense_forward(input.unwrap(), w, b, layer.groups).map_err(|e| in_layer(layer, e))?
            }
            LayerKind::Norm => {
                let gamma = state.param(&weight_key(&layer.id))?;
                let beta = state.param(&bias_key(&layer.id))?;
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => {
                        let rm = state.buffers.get(&format!("{}.running_mean", layer.id));
                        let rv = state.buffers.get(&format!("{}.running_var", layer.id));
                        match (rm, rv) {
                            (Some(rm), Some(rv)) => Some((rm.data(), rv.data())),
                            _ => return Err(TensorError::MissingParam(format!("{}.running_*", layer.id))),
                        }
                    }
                };
                let (y, c) = ops::norm_forward(input.unwrap(), gamma, beta, layer.groups, running)
                    .map_err(|e| in_layer(layer, e))?;
                cache = Some(c);
                y
            }
            LayerKind::ReLU => ops::relu_forward(input.unwrap()),
            LayerKind::Pool => ops::avg_pool_forward(input.unwrap(), layer.kernel).map_err(|e| in_layer(layer, e))?,
            LayerKind::GlobalPool => ops::global_pool_forward(input.unwrap()),
            LayerKind::Add => {
                let ins: Vec<&Tensor<T>> = preds[i].iter().map(|&p| &outputs[p]).collect();
                ops::add_forward(&ins).map_err(|e| in_layer(layer, e))?
            }
            LayerKind::Aggregate => {
                let x = input.unwrap();
                let y = match g.aggregation {
                    AggregationMode::Logits => ops::aggregate_logits_forward(x, layer.groups),
                    AggregationMode::Probabilities => ops::aggregate_probs_forward(x, layer.groups),
                }
                .map_err(|e| in_layer(layer, e))?;
                y.reshaped(&[n, layer.out_channels, 1, 1])?
            }
        };
        if out.dims4()[1] != layer.out_channels {
            return Err(TensorError::Layer {
                layer: layer.id.clone(),
                msg: format!("produced {} channels, expected {}", out.dims4()[1], layer.out_channels),
            });
        }
        let [_, _, h, w] = out.dims4();
        positions.push(h * w);
        norm_caches.push(cache);
        outputs.push(out);
    }
    let sink = g.sink();
    let classes = sink.out_channels;
    let aggregated = outputs.last().unwrap().clone().reshaped(&[n, classes])?;
    let path_logits = if sink.kind == LayerKind::Aggregate {
        let head = &outputs[preds[g.layers.len() - 1][0]];
        head.clone().reshaped(&[n, sink.groups, classes])?
    } else {
        aggregated.clone().reshaped(&[n, 1, classes])?
    };
    let input = retain.then(|| batch.clone());
    Ok(ForwardPass {
        aggregated,
        path_logits,
        mode,
        batch_size: n,
        outputs: retain.then_some(outputs),
        norm_caches,
        positions,
        input,
    })
}

/// Reverse pass from `loss_grad` (gradient w.r.t. `pass.aggregated`),
/// storing a fresh gradient on every trainable parameter.
pub fn backward<T: Scalar>(
    g: &ArchGraph,
    state: &mut ModelState<T>,
    pass: &ForwardPass<T>,
    loss_grad: &Tensor<T>,
) -> Result<(), TensorError> {
    let outputs = pass.outputs.as_ref().ok_or(TensorError::NoTrace)?;
    let _ = pass.input.as_ref().ok_or(TensorError::NoTrace)?;
    let preds = g.predecessor_indices();
    let last = g.layers.len() - 1;
    if loss_grad.len() != outputs[last].len() {
        return Err(TensorError::Shape(format!(
            "loss gradient has {} elements, output has {}",
            loss_grad.len(),
            outputs[last].len()
        )));
    }
    state.clear_grads();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; g.layers.len()];
    grads[last] = Some(loss_grad.clone().reshaped(outputs[last].shape())?);
    let mut param_grads: Vec<(String, Tensor<T>)> = Vec::new();

    fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
        match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    for i in (1..=last).rev() {
        let Some(dy) = grads[i].take() else { continue };
        let layer = &g.layers[i];
        let x = preds[i].first().map(|&p| &outputs[p]);
        let dx = match layer.kind {
            LayerKind::Input => continue,
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                let w = state.param(&weight_key(&layer.id))?;
                let gr = ops::conv2d_backward(x.unwrap(), w, layer.has_bias, &dy, &conv_geom(layer))
                    .map_err(|e| in_layer(layer, e))?;
                param_grads.push((weight_key(&layer.id), gr.weight));
                if let Some(b) = gr.bias {
                    param_grads.push((bias_key(&layer.id), b));
                }
                gr.input
            }
            LayerKind::Dense | LayerKind::ClassifierHead => {
                let w = state.param(&weight_key(&layer.id))?;
                let gr = ops::dense_backward(x.unwrap(), w, layer.has_bias, &dy, layer.groups)
                    .map_err(|e| in_layer(layer, e))?;
                param_grads.push((weight_key(&layer.id), gr.weight));
                if let Some(b) = gr.bias {
                    param_grads.push((bias_key(&layer.id), b));
                }
                gr.input
            }
            LayerKind::Norm => {
                let gamma = state.param(&weight_key(&layer.id))?;
                let cache = pass.norm_caches[i].as_ref().ok_or(TensorError::NoTrace)?;
                let gr = ops::norm_backward(cache, gamma, layer.groups, &dy).map_err(|e| in_layer(layer, e))?;
                param_grads.push((weight_key(&layer.id), gr.gamma));
                param_grads.push((bias_key(&layer.id), gr.beta));
                gr.input
            }
            LayerKind::ReLU => ops::relu_backward(&outputs[i], &dy),
            LayerKind::Pool => ops::avg_pool_backward(x.unwrap().shape(), layer.kernel, &dy),
            LayerKind::GlobalPool => ops::global_pool_backward(x.unwrap().shape(), &dy),
            LayerKind::Add => {
                for &p in &preds[i] {
                    accumulate(&mut grads[p], dy.clone());
                }
                continue;
            }
            LayerKind::Aggregate => {
                let x = x.unwrap();
                match g.aggregation {
                    AggregationMode::Logits => ops::aggregate_logits_backward(x.shape(), layer.groups, &dy),
                    AggregationMode::Probabilities => ops::aggregate_probs_backward(x, layer.groups, &dy)?,
                }
            }
        };
        let p = preds[i][0];
        if g.layers[p].kind != LayerKind::Input {
            accumulate(&mut grads[p], dx);
        }
    }
    for (key, grad) in param_grads {
        if let Some(p) = state.params.get_mut(&key) {
            p.grad = Some(grad);
        }
    }
    // parameters outside the loss's dependency cone
    for p in state.params.values_mut() {
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }
    Ok(())
}
