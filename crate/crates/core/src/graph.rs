//! Layer graphs with explicit filter/channel wiring.
//!
//! Nodes are stored in topological order: every node's inputs precede it.
//! Weighted nodes (conv, fc) own a weight tensor whose GEMM lowering has one
//! row per filter and one contiguous block of `delta` columns per input
//! channel. Non-weighted nodes (relu, maxpool, flatten, residual add) keep
//! channel indices intact, which is what makes the wiring table a pure
//! per-layer relation: filter `m` of a producer always feeds channel `m` of
//! each consumer.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv,
    Fc,
    Relu,
    MaxPool,
    Flatten,
    ResidualAdd,
    Output,
}

impl LayerKind {
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

impl LayerNode {
    pub fn weights(&self) -> &Tensor {
        self.weights.as_ref().expect("weighted layer without weights")
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.as_ref().expect("weighted layer without bias")
    }

    pub fn filters(&self) -> usize {
        self.weights().dims()[0]
    }
}

/// One side of a wiring relation: a weighted layer, or the graph boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Input,
    Output,
    Layer(usize),
}

/// Column grouping of a weighted layer's lowered matrix: group `j` holds the
/// `delta` consecutive columns fed by input channel `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelColumnMap {
    pub layer: String,
    pub channels: usize,
    pub delta: usize,
}

impl ChannelColumnMap {
    pub fn group(&self, j: usize) -> Range<usize> {
        j * self.delta..(j + 1) * self.delta
    }

    pub fn groups(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.channels).map(move |j| self.group(j))
    }

    pub fn total_columns(&self) -> usize {
        self.channels * self.delta
    }
}

/// Per weighted layer: which layers' filters feed its channels (upstream) and
/// which layers' channels consume its filters (downstream), traced through
/// the non-weighted nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WiringTable {
    pub upstream: BTreeMap<usize, Vec<Endpoint>>,
    pub downstream: BTreeMap<usize, Vec<Endpoint>>,
}

impl WiringTable {
    pub fn upstream(&self, layer: usize) -> &[Endpoint] {
        &self.upstream[&layer]
    }

    pub fn downstream(&self, layer: usize) -> &[Endpoint] {
        &self.downstream[&layer]
    }
}

/// A shared channel index space: every producer's filter `j` and every
/// consumer's channel `j` refer to the same feature map index. Compaction
/// removes indices junction-wide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Junction {
    pub width: usize,
    pub producers: Vec<Endpoint>,
    pub consumers: Vec<Endpoint>,
}

/// Serializable topology, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub input: Vec<usize>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    nodes: Vec<LayerNode>,
    /// Per-sample input dims `[C, H, W]`.
    input_dims: Vec<usize>,
}

impl LayerGraph {
    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn find_weighted(&self, name: &str) -> Result<usize> {
        match self.find(name) {
            Some(id) if self.nodes[id].kind.is_weighted() => Ok(id),
            Some(_) => Err(Error::usage(format!("layer `{name}` has no weights"))),
            None => Err(Error::usage(format!("no layer named `{name}`"))),
        }
    }

    pub fn input_id(&self) -> usize {
        0
    }

    pub fn output_id(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Weighted layer ids in topological order.
    pub fn weighted_ids(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind.is_weighted())
            .collect()
    }

    pub fn weighted_names(&self) -> Vec<String> {
        self.weighted_ids()
            .into_iter()
            .map(|i| self.nodes[i].name.clone())
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape()[0]
    }

    /// Total number of prunable weights (biases excluded).
    pub fn prunable_weights(&self) -> usize {
        self.weighted_ids().iter().map(|&i| self.nodes[i].weights().len()).sum()
    }

    pub fn weights_mut(&mut self, id: usize) -> &mut Tensor {
        self.nodes[id].weights.as_mut().expect("weighted layer without weights")
    }

    pub fn bias_mut(&mut self, id: usize) -> &mut Tensor {
        self.nodes[id].bias.as_mut().expect("weighted layer without bias")
    }

    pub fn params_mut(&mut self, id: usize) -> (&mut Tensor, &mut Tensor) {
        let node = &mut self.nodes[id];
        (
            node.weights.as_mut().expect("weighted layer without weights"),
            node.bias.as_mut().expect("weighted layer without bias"),
        )
    }

    /// Per-sample activation dims of every node.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        // validated at construction, so this cannot fail
        infer_shapes(&self.nodes, &self.input_dims).expect("graph validated at construction")
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().pop().unwrap_or_default()
    }

    /// Number of channels carried by a node's output. Flatten keeps the
    /// channel count of its input; its features are `channels * h * w`.
    pub fn channels_of(&self, id: usize) -> usize {
        channels_of(&self.nodes, &self.shapes(), id)
    }

    pub fn channel_column_map(&self, id: usize) -> Result<ChannelColumnMap> {
        let node = &self.nodes[id];
        if !node.kind.is_weighted() {
            return Err(Error::usage(format!(
                "channel/column map requested for unweighted layer `{}` ({})",
                node.name, node.kind
            )));
        }
        let (_, cols) = node.weights().lowered_shape();
        let channels = match node.kind {
            LayerKind::Conv => node.weights().dims()[1],
            _ => self.channels_of(node.inputs[0]),
        };
        Ok(ChannelColumnMap {
            layer: node.name.clone(),
            channels,
            delta: cols / channels,
        })
    }

    /// Weighted layers (or the input boundary) whose filters feed the channels
    /// of `id`.
    pub fn producers(&self, id: usize) -> Vec<Endpoint> {
        let mut out = Vec::new();
        for &src in &self.nodes[id].inputs {
            self.trace_back(src, &mut out);
        }
        out.sort();
        out.dedup();
        out
    }

    fn trace_back(&self, id: usize, out: &mut Vec<Endpoint>) {
        let node = &self.nodes[id];
        match node.kind {
            LayerKind::Input => out.push(Endpoint::Input),
            k if k.is_weighted() => out.push(Endpoint::Layer(id)),
            _ => {
                for &src in &node.inputs {
                    self.trace_back(src, out);
                }
            }
        }
    }

    /// Weighted layers (or the output boundary) whose channels consume the
    /// filters of `id`.
    pub fn consumers(&self, id: usize) -> Vec<Endpoint> {
        let mut out = Vec::new();
        for &dst in &self.nodes[id].outputs {
            self.trace_forward(dst, &mut out);
        }
        out.sort();
        out.dedup();
        out
    }

    fn trace_forward(&self, id: usize, out: &mut Vec<Endpoint>) {
        let node = &self.nodes[id];
        match node.kind {
            LayerKind::Output => out.push(Endpoint::Output),
            k if k.is_weighted() => out.push(Endpoint::Layer(id)),
            _ => {
                for &dst in &node.outputs {
                    self.trace_forward(dst, out);
                }
            }
        }
    }

    pub fn wiring(&self) -> WiringTable {
        let mut upstream = BTreeMap::new();
        let mut downstream = BTreeMap::new();
        for id in self.weighted_ids() {
            upstream.insert(id, self.producers(id));
            downstream.insert(id, self.consumers(id));
        }
        WiringTable { upstream, downstream }
    }

    /// Lowered-column ranges fed by filter `filter` of layer `id`, one entry
    /// per downstream weighted layer.
    pub fn downstream_columns(&self, id: usize, filter: usize) -> Result<Vec<(String, Range<usize>)>> {
        let mut out = Vec::new();
        for ep in self.consumers(id) {
            if let Endpoint::Layer(c) = ep {
                let map = self.channel_column_map(c)?;
                out.push((map.layer.clone(), map.group(filter)));
            }
        }
        Ok(out)
    }

    /// Partitions all filter/channel index spaces into junctions.
    pub fn junctions(&self) -> Vec<Junction> {
        let mut consumers: Vec<(Endpoint, Vec<Endpoint>)> = self
            .weighted_ids()
            .into_iter()
            .map(|id| (Endpoint::Layer(id), self.producers(id)))
            .collect();
        consumers.push((Endpoint::Output, self.producers(self.output_id())));

        let mut parent: BTreeMap<Endpoint, Endpoint> = BTreeMap::new();
        fn root(parent: &mut BTreeMap<Endpoint, Endpoint>, e: Endpoint) -> Endpoint {
            let p = *parent.entry(e).or_insert(e);
            if p == e {
                return e;
            }
            let r = root(parent, p);
            parent.insert(e, r);
            r
        }
        for (_, prods) in &consumers {
            let first = root(&mut parent, prods[0]);
            for &p in &prods[1..] {
                let r = root(&mut parent, p);
                if r != first {
                    parent.insert(r, first);
                }
            }
        }
        let mut groups: BTreeMap<Endpoint, Junction> = BTreeMap::new();
        let all: Vec<Endpoint> = parent.keys().copied().collect();
        for p in all {
            let r = root(&mut parent, p);
            let width = match p {
                Endpoint::Input => self.input_dims[0],
                Endpoint::Layer(id) => self.nodes[id].filters(),
                Endpoint::Output => unreachable!("output is never a producer"),
            };
            groups
                .entry(r)
                .or_insert_with(|| Junction {
                    width,
                    producers: Vec::new(),
                    consumers: Vec::new(),
                })
                .producers
                .push(p);
        }
        for (c, prods) in consumers {
            let r = root(&mut parent, prods[0]);
            groups.get_mut(&r).expect("junction exists").consumers.push(c);
        }
        groups.into_values().collect()
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            input: self.input_dims.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    name: n.name.clone(),
                    kind: n.kind,
                    inputs: n.inputs.iter().map(|&i| self.nodes[i].name.clone()).collect(),
                    dims: n.weights.as_ref().map(|w| w.dims().to_vec()),
                })
                .collect(),
        }
    }

    /// Rebuilds a graph from its topology with zero-initialized parameters.
    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        let mut b = GraphBuilder::new(&spec.input);
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        for ns in &spec.nodes {
            let inputs: Vec<usize> = ns
                .inputs
                .iter()
                .map(|n| {
                    ids.get(n.as_str())
                        .copied()
                        .ok_or_else(|| Error::Shape(format!("node `{}` references unknown input `{n}`", ns.name)))
                })
                .collect::<Result<_>>()?;
            let id = match ns.kind {
                LayerKind::Input => {
                    if !inputs.is_empty() || b.nodes.len() != 1 {
                        return Err(Error::shape("input node must come first and have no inputs"));
                    }
                    b.nodes[0].name = ns.name.clone();
                    0
                }
                _ => {
                    let dims = ns.dims.clone();
                    b.push(&ns.name, ns.kind, inputs, dims)?
                }
            };
            ids.insert(&ns.name, id);
        }
        b.finish()
    }

    /// Replaces all parameters with seeded uniform fan-in scaled values and
    /// zero biases.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.weighted_ids() {
            let (w, b) = self.params_mut(id);
            let (_, fan_in) = w.lowered_shape();
            let bound = (3.0 / fan_in as f64).sqrt();
            w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            b.fill(0.0);
        }
    }

    /// Replaces the parameters of a weighted layer, checking dims.
    pub fn set_params(&mut self, id: usize, weights: Tensor, bias: Tensor) -> Result<()> {
        let node = &self.nodes[id];
        if !node.kind.is_weighted() {
            return Err(Error::usage(format!("layer `{}` has no weights", node.name)));
        }
        if weights.dims() != node.weights().dims() || bias.dims() != node.bias().dims() {
            return Err(Error::shape(format!(
                "parameters for `{}` have dims {:?}/{:?}, expected {:?}/{:?}",
                node.name,
                weights.dims(),
                bias.dims(),
                node.weights().dims(),
                node.bias().dims()
            )));
        }
        self.nodes[id].weights = Some(weights);
        self.nodes[id].bias = Some(bias);
        Ok(())
    }

    /// Rebuilds the graph with new weight/bias tensors for some layers, which
    /// may change their dims; the result is re-validated.
    pub(crate) fn with_resized_params(&self, params: BTreeMap<usize, (Tensor, Tensor)>) -> Result<Self> {
        let mut nodes = self.nodes.clone();
        for (id, (w, b)) in params {
            nodes[id].weights = Some(w);
            nodes[id].bias = Some(b);
        }
        infer_shapes(&nodes, &self.input_dims)?;
        Ok(LayerGraph {
            nodes,
            input_dims: self.input_dims.clone(),
        })
    }
}

/// Incremental graph construction; nodes may only reference earlier nodes, so
/// every built graph is acyclic.
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    input_dims: Vec<usize>,
}

impl GraphBuilder {
    pub fn new(input_dims: &[usize]) -> Self {
        GraphBuilder {
            nodes: vec![LayerNode {
                name: "input".into(),
                kind: LayerKind::Input,
                weights: None,
                bias: None,
                inputs: vec![],
                outputs: vec![],
            }],
            input_dims: input_dims.to_vec(),
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>, dims: Option<Vec<usize>>) -> Result<usize> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::shape(format!("duplicate node name `{name}`")));
        }
        let id = self.nodes.len();
        if inputs.iter().any(|&i| i >= id) {
            return Err(Error::shape(format!("node `{name}` references a later node")));
        }
        let expected_inputs = match kind {
            LayerKind::Input => 0,
            LayerKind::ResidualAdd => 2,
            _ => 1,
        };
        if kind == LayerKind::ResidualAdd {
            if inputs.len() < 2 {
                return Err(Error::shape(format!("residual add `{name}` needs at least two inputs")));
            }
        } else if inputs.len() != expected_inputs {
            return Err(Error::shape(format!(
                "node `{name}` needs exactly {expected_inputs} input(s)"
            )));
        }
        let (weights, bias) = if kind.is_weighted() {
            let dims = dims.ok_or_else(|| Error::shape(format!("weighted node `{name}` needs dims")))?;
            let want_rank = if kind == LayerKind::Conv { 4 } else { 2 };
            if dims.len() != want_rank || dims.contains(&0) {
                return Err(Error::shape(format!("node `{name}` has invalid weight dims {dims:?}")));
            }
            let f = dims[0];
            (Some(Tensor::zeros(&dims)), Some(Tensor::zeros(&[f])))
        } else {
            (None, None)
        };
        for &i in &inputs {
            self.nodes[i].outputs.push(id);
        }
        self.nodes.push(LayerNode {
            name: name.to_string(),
            kind,
            weights,
            bias,
            inputs: inputs.clone(),
            outputs: vec![],
        });
        if let Err(e) = infer_shapes(&self.nodes, &self.input_dims) {
            self.nodes.pop();
            for &i in &inputs {
                self.nodes[i].outputs.pop();
            }
            return Err(e);
        }
        Ok(id)
    }

    pub fn conv(&mut self, name: &str, from: usize, filters: usize, kh: usize, kw: usize) -> Result<usize> {
        let shapes = infer_shapes(&self.nodes, &self.input_dims)?;
        let c = shapes[from][0];
        self.push(name, LayerKind::Conv, vec![from], Some(vec![filters, c, kh, kw]))
    }

    pub fn fc(&mut self, name: &str, from: usize, outputs: usize) -> Result<usize> {
        let shapes = infer_shapes(&self.nodes, &self.input_dims)?;
        let features = shapes[from].iter().product();
        self.push(name, LayerKind::Fc, vec![from], Some(vec![outputs, features]))
    }

    pub fn relu(&mut self, name: &str, from: usize) -> Result<usize> {
        self.push(name, LayerKind::Relu, vec![from], None)
    }

    pub fn maxpool(&mut self, name: &str, from: usize) -> Result<usize> {
        self.push(name, LayerKind::MaxPool, vec![from], None)
    }

    pub fn flatten(&mut self, name: &str, from: usize) -> Result<usize> {
        self.push(name, LayerKind::Flatten, vec![from], None)
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> Result<usize> {
        self.push(name, LayerKind::ResidualAdd, vec![a, b], None)
    }

    pub fn finish_with_output(mut self, from: usize) -> Result<LayerGraph> {
        self.push("output", LayerKind::Output, vec![from], None)?;
        self.finish()
    }

    fn finish(self) -> Result<LayerGraph> {
        validate(&self.nodes)?;
        infer_shapes(&self.nodes, &self.input_dims)?;
        Ok(LayerGraph {
            nodes: self.nodes,
            input_dims: self.input_dims,
        })
    }
}

fn validate(nodes: &[LayerNode]) -> Result<()> {
    let inputs = nodes.iter().filter(|n| n.kind == LayerKind::Input).count();
    let outputs = nodes.iter().filter(|n| n.kind == LayerKind::Output).count();
    if inputs != 1 || nodes[0].kind != LayerKind::Input {
        return Err(Error::shape("graph needs exactly one input node, stored first"));
    }
    if outputs != 1 || nodes.last().map(|n| n.kind) != Some(LayerKind::Output) {
        return Err(Error::shape("graph needs exactly one output node, stored last"));
    }
    for (id, n) in nodes.iter().enumerate() {
        if n.inputs.iter().any(|&i| i >= id) {
            return Err(Error::shape(format!("node `{}` is not in topological order", n.name)));
        }
        if n.kind != LayerKind::Output && n.outputs.is_empty() {
            return Err(Error::shape(format!("node `{}` has no consumers", n.name)));
        }
        if n.kind.is_weighted() != n.weights.is_some() {
            return Err(Error::shape(format!(
                "node `{}` weight presence does not match its kind",
                n.name
            )));
        }
    }
    Ok(())
}

fn channels_of(nodes: &[LayerNode], shapes: &[Vec<usize>], id: usize) -> usize {
    let node = &nodes[id];
    match node.kind {
        LayerKind::Flatten => channels_of(nodes, shapes, node.inputs[0]),
        _ => shapes[id][0],
    }
}

fn infer_shapes(nodes: &[LayerNode], input_dims: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    for n in nodes {
        let edge = |src: usize| format!("edge {} -> {}", nodes[src].name, n.name);
        let s = match n.kind {
            LayerKind::Input => input_dims.to_vec(),
            LayerKind::Conv => {
                let x = &shapes[n.inputs[0]];
                let w = n.weights().dims();
                if x.len() != 3 {
                    return Err(Error::Shape(format!(
                        "{}: conv needs a [C,H,W] input, got {x:?}",
                        edge(n.inputs[0])
                    )));
                }
                if x[0] != w[1] {
                    return Err(Error::Shape(format!(
                        "{}: {} channels arrive but filters expect {}",
                        edge(n.inputs[0]),
                        x[0],
                        w[1]
                    )));
                }
                if w[2] > x[1] || w[3] > x[2] {
                    return Err(Error::Shape(format!("{}: kernel larger than input", edge(n.inputs[0]))));
                }
                vec![w[0], x[1] - w[2] + 1, x[2] - w[3] + 1]
            }
            LayerKind::Fc => {
                let features: usize = shapes[n.inputs[0]].iter().product();
                let w = n.weights().dims();
                if features != w[1] {
                    return Err(Error::Shape(format!(
                        "{}: {features} features arrive but weights expect {}",
                        edge(n.inputs[0]),
                        w[1]
                    )));
                }
                vec![w[0]]
            }
            LayerKind::Relu | LayerKind::Output => shapes[n.inputs[0]].clone(),
            LayerKind::MaxPool => {
                let x = &shapes[n.inputs[0]];
                if x.len() != 3 || x[1] < 2 || x[2] < 2 {
                    return Err(Error::Shape(format!(
                        "{}: max-pool needs a [C,H>=2,W>=2] input",
                        edge(n.inputs[0])
                    )));
                }
                vec![x[0], x[1] / 2, x[2] / 2]
            }
            LayerKind::Flatten => vec![shapes[n.inputs[0]].iter().product()],
            LayerKind::ResidualAdd => {
                let first = shapes[n.inputs[0]].clone();
                for &i in &n.inputs[1..] {
                    if shapes[i] != first {
                        return Err(Error::Shape(format!(
                            "{}: residual branches disagree ({:?} vs {first:?})",
                            edge(i),
                            shapes[i]
                        )));
                    }
                }
                first
            }
        };
        shapes.push(s);
    }
    // flatten blocks must split evenly into channels for fc grouping
    for (id, n) in nodes.iter().enumerate() {
        if n.kind == LayerKind::Fc {
            let c = channels_of(nodes, &shapes, n.inputs[0]);
            if n.weights().dims()[1] % c != 0 {
                return Err(Error::Shape(format!(
                    "fc `{}` inputs do not split into {c} channel blocks",
                    n.name
                )));
            }
        }
        let _ = id;
    }
    Ok(shapes)
}

/// Caffe-style LeNet-5: conv(1->20, 5x5) -> maxpool -> conv(20->50, 5x5) ->
/// maxpool -> flatten -> fc(800->500) -> relu -> fc(500->10).
pub fn build_lenet5() -> LayerGraph {
    let mut b = GraphBuilder::new(&[1, 28, 28]);
    let x = b.input();
    let build = |b: &mut GraphBuilder| -> Result<usize> {
        let c1 = b.conv("conv1", x, 20, 5, 5)?;
        let p1 = b.maxpool("pool1", c1)?;
        let c2 = b.conv("conv2", p1, 50, 5, 5)?;
        let p2 = b.maxpool("pool2", c2)?;
        let fl = b.flatten("flatten", p2)?;
        let f1 = b.fc("fc1", fl, 500)?;
        let r1 = b.relu("relu1", f1)?;
        b.fc("fc2", r1, 10)
    };
    let last = build(&mut b).expect("static LeNet-5 topology");
    b.finish_with_output(last).expect("static LeNet-5 topology")
}

/// Small residual network on 3x16x16 inputs with 10 classes.
pub fn build_tiny_resnet() -> LayerGraph {
    build_tiny_resnet_for(&[3, 16, 16], 10).expect("static tiny-resnet topology")
}

/// conv1(3x3) -> relu -> [conv2a(1x1) -> relu -> conv2b(1x1)] + skip -> relu
/// -> maxpool -> conv3(3x3) -> relu -> maxpool -> flatten -> fc.
pub fn build_tiny_resnet_for(input: &[usize], classes: usize) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new(input);
    let x = b.input();
    let c1 = b.conv("conv1", x, 8, 3, 3)?;
    let r1 = b.relu("relu1", c1)?;
    let c2a = b.conv("conv2a", r1, 8, 1, 1)?;
    let r2a = b.relu("relu2a", c2a)?;
    let c2b = b.conv("conv2b", r2a, 8, 1, 1)?;
    let add = b.add("add", r1, c2b)?;
    let r2 = b.relu("relu2", add)?;
    let p1 = b.maxpool("pool1", r2)?;
    let c3 = b.conv("conv3", p1, 16, 3, 3)?;
    let r3 = b.relu("relu3", c3)?;
    let p2 = b.maxpool("pool2", r3)?;
    let fl = b.flatten("flatten", p2)?;
    let fc = b.fc("fc", fl, classes)?;
    b.finish_with_output(fc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_parameter_count() {
        let g = build_lenet5();
        assert_eq!(g.prunable_weights(), 500 + 25_000 + 400_000 + 5_000);
        assert_eq!(g.prunable_weights(), 430_500);
        assert_eq!(g.output_shape(), vec![10]);
    }

    #[test]
    fn lenet_channel_maps() {
        let g = build_lenet5();
        let m1 = g.channel_column_map(g.find("conv1").unwrap()).unwrap();
        assert_eq!((m1.channels, m1.delta), (1, 25));
        let m2 = g.channel_column_map(g.find("conv2").unwrap()).unwrap();
        assert_eq!((m2.channels, m2.delta), (20, 25));
        assert_eq!(m2.group(3), 75..100);
        let m3 = g.channel_column_map(g.find("fc1").unwrap()).unwrap();
        assert_eq!((m3.channels, m3.delta), (50, 16));
        let m4 = g.channel_column_map(g.find("fc2").unwrap()).unwrap();
        assert_eq!((m4.channels, m4.delta), (500, 1));
        assert!(g.channel_column_map(g.find("pool1").unwrap()).is_err());
    }

    #[test]
    fn conv2_filter_feeds_fc1_block() {
        let g = build_lenet5();
        let cols = g.downstream_columns(g.find("conv2").unwrap(), 7).unwrap();
        assert_eq!(cols, vec![("fc1".to_string(), 112..128)]);
    }

    #[test]
    fn resnet_wiring_and_junctions() {
        let g = build_tiny_resnet();
        let id = |n: &str| g.find(n).unwrap();
        assert_eq!(
            g.producers(id("conv3")),
            vec![Endpoint::Layer(id("conv1")), Endpoint::Layer(id("conv2b"))]
        );
        assert_eq!(
            g.consumers(id("conv1")),
            vec![Endpoint::Layer(id("conv2a")), Endpoint::Layer(id("conv3"))]
        );
        let js = g.junctions();
        let shared = js
            .iter()
            .find(|j| j.producers.contains(&Endpoint::Layer(id("conv1"))))
            .unwrap();
        assert_eq!(
            shared.producers,
            vec![Endpoint::Layer(id("conv1")), Endpoint::Layer(id("conv2b"))]
        );
        assert_eq!(
            shared.consumers,
            vec![Endpoint::Layer(id("conv2a")), Endpoint::Layer(id("conv3"))]
        );
        assert!(js.iter().any(|j| j.producers == vec![Endpoint::Input]));
        assert!(js.iter().any(|j| j.consumers == vec![Endpoint::Output]));
        assert_eq!(g.output_shape(), vec![10]);
    }

    #[test]
    fn spec_round_trip() {
        for g in [build_lenet5(), build_tiny_resnet()] {
            let back = LayerGraph::from_spec(&g.to_spec()).unwrap();
            assert_eq!(back, g);
        }
    }

    #[test]
    fn rejects_bad_edges() {
        let mut b = GraphBuilder::new(&[1, 8, 8]);
        let c = b.conv("c", 0, 2, 3, 3).unwrap();
        assert!(b.conv("c", c, 2, 3, 3).is_err());
        assert!(b.conv("big", c, 2, 9, 9).is_err());
        let mut b = GraphBuilder::new(&[1, 8, 8]);
        let a = b.conv("a", 0, 2, 3, 3).unwrap();
        let c = b.conv("b", 0, 2, 1, 1).unwrap();
        assert!(b.add("sum", a, c).is_err());
    }
}
