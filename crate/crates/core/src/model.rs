//! Forward/backward evaluation of a [`LayerGraph`] with softmax cross-entropy.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{LayerGraph, LayerKind};
use crate::layers;
use crate::tensor::Tensor;

/// Samples evaluated together on one worker; gradient sums are always
/// combined chunk by chunk in index order.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[n, c, h, w]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() < 2 || images.dims()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!(
                "batch of {} labels does not match images {:?}",
                labels.len(),
                images.dims()
            )));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        let per: usize = self.images.dims()[1..].iter().product();
        let mut dims = self.images.dims().to_vec();
        dims[0] = range.len();
        let data = self.images.data()[range.start * per..range.end * per].to_vec();
        Batch {
            images: Tensor::new(dims, data).expect("slice of a valid batch"),
            labels: self.labels[range].to_vec(),
        }
    }
}

/// Weight and bias gradients for one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

pub type Gradients = BTreeMap<String, LayerGrad>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradients: Gradients,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct ForwardCache {
    acts: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().expect("non-empty graph")
    }
}

fn edge_err(graph: &LayerGraph, from: usize, to: usize, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!(
            "edge {} -> {}: {msg}",
            graph.node(from).name,
            graph.node(to).name
        )),
        other => other,
    }
}

impl LayerGraph {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_dims().len() + 1 || &x.dims()[1..] != self.input_dims() {
            return Err(Error::Shape(format!(
                "edge batch -> {}: expected per-sample dims {:?}, got {:?}",
                self.node(self.input_id()).name,
                self.input_dims(),
                x.dims()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n = x.dims()[0];
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.nodes().len());
        let mut argmax = vec![None; self.nodes().len()];
        for (id, node) in self.nodes().iter().enumerate() {
            let src = node.inputs.first().copied();
            let out = match node.kind {
                LayerKind::Input => x.clone(),
                LayerKind::Conv => {
                    let s = src.unwrap();
                    layers::conv2d_forward(&acts[s], node.weights(), node.bias())
                        .map_err(|e| edge_err(self, s, id, e))?
                }
                LayerKind::Fc => {
                    let s = src.unwrap();
                    layers::fc_forward(&acts[s], node.weights(), node.bias()).map_err(|e| edge_err(self, s, id, e))?
                }
                LayerKind::Relu => layers::relu_forward(&acts[src.unwrap()]),
                LayerKind::MaxPool => {
                    let s = src.unwrap();
                    let (y, idx) = layers::maxpool2_forward(&acts[s]).map_err(|e| edge_err(self, s, id, e))?;
                    argmax[id] = Some(idx);
                    y
                }
                LayerKind::Flatten => {
                    let a = &acts[src.unwrap()];
                    let per = a.len() / n;
                    a.clone().reshape(vec![n, per])?
                }
                LayerKind::ResidualAdd => {
                    let mut sum = acts[node.inputs[0]].clone();
                    for &other in &node.inputs[1..] {
                        if !sum.same_dims(&acts[other]) {
                            return Err(edge_err(self, other, id, Error::shape("residual branch dims differ")));
                        }
                        sum.axpy(1.0, &acts[other]);
                    }
                    sum
                }
                LayerKind::Output => acts[src.unwrap()].clone(),
            };
            acts.push(out);
        }
        Ok(ForwardCache { acts, argmax })
    }

    /// Logits `[n, classes]` for a batch of inputs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cache = self.forward_cached(x)?;
        Ok(cache.acts.pop().expect("non-empty graph"))
    }

    /// Reverse-mode pass from a logits gradient to per-layer parameter
    /// gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: Tensor) -> Result<Gradients> {
        let nodes = self.nodes();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.output_id()] = Some(grad_logits);
        let mut out = Gradients::new();
        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            Some(acc) => acc.axpy(1.0, &g),
            None => *slot = Some(g),
        };
        for id in (1..nodes.len()).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else {
                continue;
            };
            let src = node.inputs[0];
            // the input layer never needs a gradient
            let need_in = src != self.input_id();
            match node.kind {
                LayerKind::Conv => {
                    let r = layers::conv2d_backward(&cache.acts[src], node.weights(), &g, need_in)?;
                    out.insert(
                        node.name.clone(),
                        LayerGrad {
                            weights: r.weights,
                            bias: r.bias,
                        },
                    );
                    if let Some(gi) = r.input {
                        accumulate(&mut grads[src], gi);
                    }
                }
                LayerKind::Fc => {
                    let r = layers::fc_backward(&cache.acts[src], node.weights(), &g, need_in)?;
                    out.insert(
                        node.name.clone(),
                        LayerGrad {
                            weights: r.weights,
                            bias: r.bias,
                        },
                    );
                    if let Some(gi) = r.input {
                        let dims = cache.acts[src].dims().to_vec();
                        accumulate(&mut grads[src], gi.reshape(dims)?);
                    }
                }
                LayerKind::Relu => {
                    if need_in {
                        accumulate(&mut grads[src], layers::relu_backward(&cache.acts[src], &g));
                    }
                }
                LayerKind::MaxPool => {
                    if need_in {
                        let idx = cache.argmax[id].as_ref().expect("max-pool cache");
                        accumulate(
                            &mut grads[src],
                            layers::maxpool2_backward(cache.acts[src].dims(), idx, &g),
                        );
                    }
                }
                LayerKind::Flatten => {
                    if need_in {
                        let dims = cache.acts[src].dims().to_vec();
                        accumulate(&mut grads[src], g.reshape(dims)?);
                    }
                }
                LayerKind::ResidualAdd => {
                    for &s in &node.inputs {
                        if s != self.input_id() {
                            accumulate(&mut grads[s], g.clone());
                        }
                    }
                }
                LayerKind::Output => accumulate(&mut grads[src], g),
                LayerKind::Input => unreachable!(),
            }
        }
        Ok(out)
    }
}

struct ChunkResult {
    loss_sum: f64,
    logits: Tensor,
    grads: Gradients,
}

fn chunk_pass(model: &LayerGraph, batch: &Batch, range: std::ops::Range<usize>, total: usize) -> Result<ChunkResult> {
    let chunk = batch.slice(range);
    let cache = model.forward_cached(&chunk.images)?;
    let (mean, dlogits) = layers::softmax_cross_entropy(cache.logits(), &chunk.labels, total)?;
    let grads = model.backward(&cache, dlogits)?;
    Ok(ChunkResult {
        loss_sum: mean * total as f64,
        logits: cache.logits().clone(),
        grads,
    })
}

fn add_grads(acc: &mut Gradients, other: Gradients) {
    for (name, g) in other {
        match acc.get_mut(&name) {
            Some(a) => {
                a.weights.axpy(1.0, &g.weights);
                a.bias.axpy(1.0, &g.bias);
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Logits and mean softmax cross-entropy over a batch, with gradients for
/// every weighted layer summed over the batch and divided by its size.
///
/// The batch is processed in fixed chunks of [`CHUNK`] samples that may run
/// on several threads; partial sums are always merged in chunk order, so the
/// result is bit-identical for any thread count.
pub fn model_forward(model: &LayerGraph, batch: &Batch) -> Result<(Tensor, LossValue)> {
    let n = batch.len();
    let ranges: Vec<_> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let parts: Vec<ChunkResult> = if ranges.len() == 1 {
        vec![chunk_pass(model, batch, 0..n, n)?]
    } else {
        ranges
            .into_par_iter()
            .map(|r| chunk_pass(model, batch, r, n))
            .collect::<Result<_>>()?
    };
    let classes = parts[0].logits.dims()[1];
    let mut logits = Vec::with_capacity(n * classes);
    let mut loss = 0.0;
    let mut grads = Gradients::new();
    for p in parts {
        loss += p.loss_sum;
        logits.extend_from_slice(p.logits.data());
        add_grads(&mut grads, p.grads);
    }
    let value = loss / n as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok((
        Tensor::new(vec![n, classes], logits)?,
        LossValue {
            value,
            gradients: grads,
        },
    ))
}

/// Logits only, chunked like [`model_forward`].
pub fn predict(model: &LayerGraph, images: &Tensor) -> Result<Tensor> {
    let n = images.dims()[0];
    let per: usize = images.dims()[1..].iter().product();
    let ranges: Vec<_> = (0..n).step_by(CHUNK * 4).map(|s| s..(s + CHUNK * 4).min(n)).collect();
    let parts: Vec<Tensor> = ranges
        .into_par_iter()
        .map(|r| {
            let mut dims = images.dims().to_vec();
            dims[0] = r.len();
            let x = Tensor::new(dims, images.data()[r.start * per..r.end * per].to_vec())?;
            model.forward(&x)
        })
        .collect::<Result<_>>()?;
    let classes = parts[0].dims()[1];
    let data: Vec<f64> = parts.into_iter().flat_map(|t| t.into_data()).collect();
    Tensor::new(vec![n, classes], data)
}
