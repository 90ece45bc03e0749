//! Batched forward and reverse-mode execution of a [`ModelGraph`].
//!
//! [`forward`] records every reachable activation on a [`Tape`]; [`backprop`]
//! walks the graph in reverse topological order from arbitrary seeds, and
//! [`backward`] specializes it to softmax + cross-entropy.

mod kernels;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{LayerSpec, ModelGraph, NodeId};
use crate::loss::{self, LossError};
use crate::params::{ParamError, ParamStore};
use crate::tensor::{Shape, Tensor};
use kernels::Window;

/// Keras' default moving-average momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("node `{node}`: expected input {expected}, got {actual}")]
    Shape {
        node: String,
        expected: Shape,
        actual: Shape,
    },
    #[error("graph must have exactly one Input node, found {0}")]
    InputCount(usize),
    #[error("tape was recorded on a different graph")]
    StaleTape,
    #[error("node `{0}` was not evaluated on this tape")]
    NotOnTape(String),
    #[error("output node `{0}` is not a softmax")]
    NotSoftmax(String),
    #[error("seed for `{node}` has shape {actual}, expected {expected}")]
    Seed {
        node: String,
        expected: Shape,
        actual: Shape,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Controls the stochastic and statistics-dependent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardMode {
    /// Batch norm on trainable nodes normalizes with batch statistics and
    /// records them for the moving-average update.
    pub batch_stats: bool,
    /// Dropout is active only when a seed is given.
    pub dropout_seed: Option<u64>,
}

impl ForwardMode {
    pub const INFERENCE: ForwardMode = ForwardMode {
        batch_stats: false,
        dropout_seed: None,
    };

    pub fn training(seed: u64) -> ForwardMode {
        ForwardMode {
            batch_stats: true,
            dropout_seed: Some(seed),
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    MaxPool(Vec<usize>),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Dropout(Vec<f64>),
}

/// Batch statistics observed by one batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub node: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Activations of one forward pass, plus what backward needs.
#[derive(Debug, Clone)]
pub struct Tape {
    graph_id: u64,
    batch: usize,
    mode: ForwardMode,
    values: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
    bn_updates: Vec<BnUpdate>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Number of nodes that were evaluated.
    pub fn len(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first graph output.
    pub fn output(&self, graph: &ModelGraph) -> &Tensor {
        self.get(graph.output()).expect("outputs are always evaluated")
    }

    pub fn outputs(&self, graph: &ModelGraph) -> Vec<&Tensor> {
        graph
            .outputs()
            .iter()
            .map(|&o| self.get(o).expect("outputs are always evaluated"))
            .collect()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn check(&self, graph: &ModelGraph) -> Result<(), ExecError> {
        if self.graph_id != graph.id() {
            return Err(ExecError::StaleTape);
        }
        Ok(())
    }
}

/// True when both tapes took the same branch at every piecewise-linear
/// node: identical ReLU input signs and identical max-pool argmax indices.
/// Between two such points the network is smooth along the segment joining
/// them only if no switch happens in between, so this is a necessary
/// check, used to detect finite differences that straddle a kink.
pub fn same_branches(graph: &ModelGraph, a: &Tape, b: &Tape) -> bool {
    for &id in graph.order() {
        match (&graph.node(id).layer, &a.caches[id.0], &b.caches[id.0]) {
            (LayerSpec::MaxPool2D { .. }, Cache::MaxPool(x), Cache::MaxPool(y)) if x != y => return false,
            (LayerSpec::ReLU, _, _) => {
                let input = graph.node(id).inputs[0];
                if let (Some(x), Some(y)) = (a.get(input), b.get(input)) {
                    if x.data().iter().zip(y.data()).any(|(p, q)| (*p > 0.0) != (*q > 0.0)) {
                        return false;
                    }
                }
            }
            _ => {}
        }
    }
    true
}

/// Nodes that some graph output depends on.
pub fn reachable(graph: &ModelGraph) -> Vec<bool> {
    let mut seen = vec![false; graph.len()];
    let mut stack: Vec<NodeId> = graph.outputs().to_vec();
    while let Some(id) = stack.pop() {
        if std::mem::replace(&mut seen[id.0], true) {
            continue;
        }
        stack.extend(graph.node(id).inputs.iter().copied());
    }
    seen
}

fn tensor(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(Shape::new(dims).expect("kernel output dims"), data).expect("kernel output length")
}

fn param<'a>(params: &'a ParamStore, node: &str, kind: &str) -> Result<&'a Tensor, ExecError> {
    Ok(params.require(&format!("{node}/{kind}"))?)
}

/// Runs the graph on a batch shaped `(N, ..input shape)`.
pub fn forward(graph: &ModelGraph, params: &ParamStore, batch: &Tensor, mode: ForwardMode) -> Result<Tape, ExecError> {
    let inputs = graph.inputs();
    let &[input] = &inputs[..] else {
        return Err(ExecError::InputCount(inputs.len()));
    };
    let expected_sample = graph.shape(input);
    let n = batch.dims()[0];
    let expected = expected_sample
        .batched(n)
        .ok()
        .filter(|_| batch.shape().rank() == expected_sample.rank() + 1);
    if expected.as_ref() != Some(batch.shape()) {
        return Err(ExecError::Shape {
            node: graph.node(input).name.clone(),
            expected: expected_sample.clone(),
            actual: batch.shape().clone(),
        });
    }

    let live = reachable(graph);
    let mut tape = Tape {
        graph_id: graph.id(),
        batch: n,
        mode,
        values: vec![None; graph.len()],
        caches: vec![Cache::None; graph.len()],
        bn_updates: Vec::new(),
    };
    for &id in graph.order() {
        if !live[id.0] {
            continue;
        }
        let node = graph.node(id);
        let xs: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|i| tape.values[i.0].as_ref().expect("inputs precede consumers"))
            .collect();
        let out_dims: Vec<usize> = graph.shape(id).batched(n).expect("validated shape").dims().to_vec();
        let (out, cache) = eval_node(graph, id, params, &xs, batch, &out_dims, mode, &mut tape.bn_updates)?;
        tape.values[id.0] = Some(tensor(out_dims, out));
        tape.caches[id.0] = cache;
    }
    Ok(tape)
}

#[allow(clippy::too_many_arguments)]
fn eval_node(
    graph: &ModelGraph,
    id: NodeId,
    params: &ParamStore,
    xs: &[&Tensor],
    batch: &Tensor,
    out_dims: &[usize],
    mode: ForwardMode,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<(Vec<f64>, Cache), ExecError> {
    let node = graph.node(id);
    let name = node.name.as_str();
    let n = out_dims[0];
    Ok(match node.layer {
        LayerSpec::Input { .. } => (batch.data().to_vec(), Cache::None),
        LayerSpec::Conv2D {
            filters,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let g = Window::new(xs[0].dims(), kernel, stride, padding);
            let k = param(params, name, "kernel")?;
            let b = if bias {
                Some(param(params, name, "bias")?.data())
            } else {
                None
            };
            (
                kernels::conv2d_forward(xs[0].data(), &g, k.data(), b, filters),
                Cache::None,
            )
        }
        LayerSpec::MaxPool2D { pool, stride, padding } => {
            let g = Window::new(xs[0].dims(), pool, stride, padding);
            let (out, arg) = kernels::max_pool_forward(xs[0].data(), &g);
            (out, Cache::MaxPool(arg))
        }
        LayerSpec::AvgPool2D { pool, stride, padding } => {
            let g = Window::new(xs[0].dims(), pool, stride, padding);
            (kernels::avg_pool_forward(xs[0].data(), &g), Cache::None)
        }
        LayerSpec::ZeroPad2D { pad } => (kernels::zero_pad_forward(xs[0].data(), xs[0].dims(), pad), Cache::None),
        LayerSpec::BatchNorm { scale, center, epsilon } => {
            let x = xs[0].data();
            let c = xs[0].shape().channels();
            let use_batch = mode.batch_stats && !node.frozen;
            let (mean, var) = if use_batch {
                let (mean, var) = kernels::channel_stats(x, c);
                bn_updates.push(BnUpdate {
                    node: name.to_string(),
                    mean: mean.clone(),
                    var: var.clone(),
                });
                (mean, var)
            } else {
                (
                    param(params, name, "moving_mean")?.data().to_vec(),
                    param(params, name, "moving_variance")?.data().to_vec(),
                )
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
            let gamma = if scale {
                Some(param(params, name, "gamma")?.data())
            } else {
                None
            };
            let beta = if center {
                Some(param(params, name, "beta")?.data())
            } else {
                None
            };
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            for ((orow, hrow), xrow) in out
                .chunks_exact_mut(c)
                .zip(xhat.chunks_exact_mut(c))
                .zip(x.chunks_exact(c))
            {
                for ch in 0..c {
                    let h = (xrow[ch] - mean[ch]) * inv_std[ch];
                    hrow[ch] = h;
                    orow[ch] = h * gamma.map_or(1.0, |g| g[ch]) + beta.map_or(0.0, |b| b[ch]);
                }
            }
            (
                out,
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch: use_batch,
                },
            )
        }
        LayerSpec::Dense { units, bias } => {
            let k = param(params, name, "kernel")?;
            let b = if bias {
                Some(param(params, name, "bias")?.data())
            } else {
                None
            };
            (kernels::dense_forward(xs[0].data(), n, k.data(), b, units), Cache::None)
        }
        LayerSpec::GlobalAvgPool2D => (kernels::gap_forward(xs[0].data(), xs[0].dims()), Cache::None),
        LayerSpec::Concat => {
            let total_c = *out_dims.last().expect("rank >= 1");
            let rows = out_dims.iter().product::<usize>() / total_c;
            let mut out = Vec::with_capacity(rows * total_c);
            for r in 0..rows {
                for x in xs {
                    let c = x.shape().channels();
                    out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
                }
            }
            (out, Cache::None)
        }
        LayerSpec::Add => {
            let mut out = xs[0].data().to_vec();
            for x in &xs[1..] {
                for (o, v) in out.iter_mut().zip(x.data()) {
                    *o += v;
                }
            }
            (out, Cache::None)
        }
        LayerSpec::ReLU => (xs[0].data().iter().map(|&v| v.max(0.0)).collect(), Cache::None),
        LayerSpec::Dropout { rate } => match mode.dropout_seed {
            Some(seed) if rate > 0.0 => {
                // One independent stream per node keeps masks stable when
                // unrelated parts of the graph change.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(id.0 as u64);
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..xs[0].len())
                    .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
                    .collect();
                let out = xs[0].data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                (out, Cache::Dropout(mask))
            }
            _ => (xs[0].data().to_vec(), Cache::None),
        },
        LayerSpec::Softmax => (loss::softmax(xs[0]).into_data(), Cache::None),
    })
}

/// Gradients produced by [`backprop`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Trainable parameter gradients keyed by parameter name.
    pub params: BTreeMap<String, Tensor>,
    /// Gradients of the requested keep nodes' outputs.
    pub nodes: BTreeMap<NodeId, Tensor>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes match"),
        None => *slot = Some(g),
    }
}

/// Reverse pass from explicit output-gradient seeds. Gradients flow only
/// where they can reach a trainable parameter or a node listed in `keep`.
pub fn backprop(
    graph: &ModelGraph,
    params: &ParamStore,
    tape: &Tape,
    seeds: Vec<(NodeId, Tensor)>,
    keep: &[NodeId],
) -> Result<Gradients, ExecError> {
    tape.check(graph)?;
    let len = graph.len();
    // needed[i]: the gradient of node i's output is useful to someone
    let mut needed = vec![false; len];
    for &id in graph.order() {
        let node = graph.node(id);
        let own = keep.contains(&id) || graph.node_params(id).iter().any(|p| p.trainable);
        needed[id.0] = own || node.inputs.iter().any(|i| needed[i.0]);
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; len];
    for (id, g) in seeds {
        let v = tape
            .get(id)
            .ok_or_else(|| ExecError::NotOnTape(graph.node(id).name.clone()))?;
        if v.shape() != g.shape() {
            return Err(ExecError::Seed {
                node: graph.node(id).name.clone(),
                expected: v.shape().clone(),
                actual: g.shape().clone(),
            });
        }
        accumulate(&mut grads[id.0], g);
    }

    let mut out = Gradients::default();
    for &id in graph.order().iter().rev() {
        let Some(dy) = grads[id.0].take() else { continue };
        if keep.contains(&id) {
            out.nodes.insert(id, dy.clone());
        }
        if !needed[id.0] {
            continue;
        }
        let node = graph.node(id);
        let want: Vec<bool> = node.inputs.iter().map(|i| needed[i.0]).collect();
        let dxs = backprop_node(graph, id, params, tape, &dy, &want, &mut out.params)?;
        for ((input, w), dx) in node.inputs.iter().zip(want).zip(dxs) {
            if let (true, Some(dx)) = (w, dx) {
                let dims = tape.get(*input).expect("inputs were evaluated").dims().to_vec();
                accumulate(&mut grads[input.0], tensor(dims, dx));
            }
        }
    }
    Ok(out)
}

fn param_grad<'a>(
    graph: &ModelGraph,
    id: NodeId,
    grads: &'a mut BTreeMap<String, Tensor>,
    kind: &str,
) -> Option<&'a mut [f64]> {
    let spec = graph
        .node_params(id)
        .into_iter()
        .find(|p| p.trainable && p.kind.suffix() == kind)?;
    Some(
        grads
            .entry(spec.name)
            .or_insert_with(|| Tensor::zeros(spec.shape))
            .data_mut(),
    )
}

/// Returns one optional input gradient per node input.
fn backprop_node(
    graph: &ModelGraph,
    id: NodeId,
    params: &ParamStore,
    tape: &Tape,
    dy: &Tensor,
    want: &[bool],
    pgrads: &mut BTreeMap<String, Tensor>,
) -> Result<Vec<Option<Vec<f64>>>, ExecError> {
    let node = graph.node(id);
    let name = node.name.as_str();
    let x = |i: usize| tape.get(node.inputs[i]).expect("inputs were evaluated");
    let dyd = dy.data();
    let want0 = want.first().copied().unwrap_or(false);
    Ok(match node.layer {
        LayerSpec::Input { .. } => vec![],
        LayerSpec::Conv2D {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            let x0 = x(0);
            let g = Window::new(x0.dims(), kernel, stride, padding);
            let k = param(params, name, "kernel")?;
            if let Some(db) = param_grad(graph, id, pgrads, "bias") {
                kernels::conv2d_backward(x0.data(), &g, k.data(), filters, dyd, None, Some(db), false);
            }
            let dk = param_grad(graph, id, pgrads, "kernel");
            vec![kernels::conv2d_backward(
                x0.data(),
                &g,
                k.data(),
                filters,
                dyd,
                dk,
                None,
                want0,
            )]
        }
        LayerSpec::MaxPool2D { .. } => {
            let Cache::MaxPool(arg) = &tape.caches[id.0] else {
                unreachable!("max pool cache")
            };
            vec![Some(kernels::max_pool_backward(x(0).len(), arg, dyd))]
        }
        LayerSpec::AvgPool2D { pool, stride, padding } => {
            let g = Window::new(x(0).dims(), pool, stride, padding);
            vec![Some(kernels::avg_pool_backward(x(0).len(), &g, dyd))]
        }
        LayerSpec::ZeroPad2D { pad } => vec![Some(kernels::zero_pad_backward(dyd, x(0).dims(), pad))],
        LayerSpec::BatchNorm { scale, .. } => {
            let Cache::BatchNorm { xhat, inv_std, batch } = &tape.caches[id.0] else {
                unreachable!("batch norm cache")
            };
            let c = inv_std.len();
            if let Some(dgamma) = param_grad(graph, id, pgrads, "gamma") {
                for (drow, hrow) in dyd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += drow[ch] * hrow[ch];
                    }
                }
            }
            if let Some(dbeta) = param_grad(graph, id, pgrads, "beta") {
                for drow in dyd.chunks_exact(c) {
                    for ch in 0..c {
                        dbeta[ch] += drow[ch];
                    }
                }
            }
            if !want0 {
                vec![None]
            } else {
                let gamma = if scale {
                    Some(param(params, name, "gamma")?.data())
                } else {
                    None
                };
                let mut dxhat = dyd.to_vec();
                if let Some(gamma) = gamma {
                    for row in dxhat.chunks_exact_mut(c) {
                        for ch in 0..c {
                            row[ch] *= gamma[ch];
                        }
                    }
                }
                if *batch {
                    vec![Some(kernels::batch_norm_backward_batch(&dxhat, xhat, inv_std))]
                } else {
                    for row in dxhat.chunks_exact_mut(c) {
                        for ch in 0..c {
                            row[ch] *= inv_std[ch];
                        }
                    }
                    vec![Some(dxhat)]
                }
            }
        }
        LayerSpec::Dense { units, .. } => {
            let x0 = x(0);
            let n = x0.dims()[0];
            let k = param(params, name, "kernel")?;
            if let Some(db) = param_grad(graph, id, pgrads, "bias") {
                kernels::dense_backward(x0.data(), n, k.data(), units, dyd, None, Some(db), false);
            }
            let dk = param_grad(graph, id, pgrads, "kernel");
            vec![kernels::dense_backward(
                x0.data(),
                n,
                k.data(),
                units,
                dyd,
                dk,
                None,
                want0,
            )]
        }
        LayerSpec::GlobalAvgPool2D => vec![Some(kernels::gap_backward(dyd, x(0).dims()))],
        LayerSpec::Concat => {
            let total_c = dy.shape().channels();
            let rows = dy.len() / total_c;
            let widths: Vec<usize> = (0..node.inputs.len()).map(|i| x(i).shape().channels()).collect();
            let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = r * total_c;
                for (o, &w) in outs.iter_mut().zip(&widths) {
                    o.extend_from_slice(&dyd[off..off + w]);
                    off += w;
                }
            }
            outs.into_iter().zip(want).map(|(o, &w)| w.then_some(o)).collect()
        }
        // The upstream gradient is passed to every addend unchanged.
        LayerSpec::Add => want.iter().map(|&w| w.then(|| dyd.to_vec())).collect(),
        LayerSpec::ReLU => {
            let x0 = x(0).data();
            vec![Some(
                dyd.iter()
                    .zip(x0)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
            )]
        }
        LayerSpec::Dropout { .. } => match &tape.caches[id.0] {
            Cache::Dropout(mask) => vec![Some(dyd.iter().zip(mask).map(|(g, m)| g * m).collect())],
            _ => vec![Some(dyd.to_vec())],
        },
        LayerSpec::Softmax => {
            let p = tape.get(id).expect("evaluated");
            let k = p.shape().channels();
            let mut dx = vec![0.0; p.len()];
            for ((drow, prow), grow) in dx
                .chunks_exact_mut(k)
                .zip(p.data().chunks_exact(k))
                .zip(dyd.chunks_exact(k))
            {
                let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                for j in 0..k {
                    drow[j] = prow[j] * (grow[j] - dot);
                }
            }
            vec![Some(dx)]
        }
    })
}

/// Mean cross-entropy of the graph's softmax output.
pub fn tape_loss(graph: &ModelGraph, tape: &Tape, labels: &[usize]) -> Result<f64, ExecError> {
    tape.check(graph)?;
    Ok(loss::cce_loss(tape.output(graph), labels)?)
}

/// Gradient of the mean cross-entropy of the softmax output with respect to
/// every trainable parameter. Frozen parameters get no entry.
pub fn backward(
    graph: &ModelGraph,
    params: &ParamStore,
    tape: &Tape,
    labels: &[usize],
) -> Result<BTreeMap<String, Tensor>, ExecError> {
    tape.check(graph)?;
    let out = graph.output();
    let node = graph.node(out);
    if !matches!(node.layer, LayerSpec::Softmax) {
        return Err(ExecError::NotSoftmax(node.name.clone()));
    }
    let logits = node.inputs[0];
    let seed = loss::softmax_cce_grad(tape.output(graph), labels)?;
    let seed = seed
        .reshape(tape.get(logits).expect("evaluated").shape().clone())
        .expect("same size");
    Ok(backprop(graph, params, tape, vec![(logits, seed)], &[])?.params)
}

/// Folds a tape's batch statistics into the moving averages:
/// `moving = momentum * moving + (1 - momentum) * batch`.
pub fn apply_bn_updates(params: &mut ParamStore, tape: &Tape, momentum: f64) -> Result<(), ExecError> {
    for u in &tape.bn_updates {
        for (kind, vals) in [("moving_mean", &u.mean), ("moving_variance", &u.var)] {
            let name = format!("{}/{kind}", u.node);
            let t = params.get_mut(&name).ok_or(ParamError::Missing(name))?;
            for (m, &b) in t.data_mut().iter_mut().zip(vals.iter()) {
                *m = momentum * *m + (1.0 - momentum) * b;
            }
        }
    }
    Ok(())
}
