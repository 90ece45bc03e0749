//! Layer graphs: construction, validation, shape inference and parameter
//! accounting.

mod layer;
mod ledger;
mod summary;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use layer::{
    count_params, infer_output_shape, param_specs, same_padding, window_output_len, Arity, LayerSpec, Padding,
    ParamCount, ParamKind, ParamSpec, DEFAULT_BN_EPSILON,
};
pub use ledger::{
    verify_against_expected, ExpectedCell, ExpectedRow, RowCheck, VerificationReport, M4_REFERENCE_LEDGER,
};
pub use summary::{summarize, Summary, SummaryRow};

use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("node `{node}` references unknown input #{input}")]
    UnknownInput { node: String, input: usize },
    #[error("graph contains a cycle through `{0}`")]
    Cycle(String),
    #[error("shape inference failed at `{node}`: {reason}")]
    Shape { node: String, reason: String },
    #[error("invalid layer `{node}`: {reason}")]
    InvalidLayer { node: String, reason: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("graph has no output")]
    NoOutput,
    #[error("ledger parse error: {0}")]
    Ledger(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<NodeId>,
    #[serde(default)]
    pub frozen: bool,
}

/// A validated DAG of layers.
///
/// Construction checks name uniqueness, acyclicity and shapes, so every
/// `ModelGraph` value can be executed or summarized without further
/// validation. Parameters live outside the graph (see [`crate::params`]).
#[derive(Debug, Clone)]
pub struct ModelGraph {
    id: u64,
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
    aliases: BTreeMap<String, NodeId>,
    order: Vec<NodeId>,
    shapes: Vec<Shape>,
    by_name: HashMap<String, NodeId>,
}

impl ModelGraph {
    /// Validates an arbitrary node list. Inputs may reference any index, so
    /// this is where cycles are caught.
    pub fn from_parts(
        nodes: Vec<Node>,
        outputs: Vec<NodeId>,
        aliases: BTreeMap<String, NodeId>,
    ) -> Result<ModelGraph, GraphError> {
        let mut by_name = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if by_name.insert(n.name.clone(), NodeId(i)).is_some() {
                return Err(GraphError::DuplicateName(n.name.clone()));
            }
            n.layer.validate().map_err(|reason| GraphError::InvalidLayer {
                node: n.name.clone(),
                reason,
            })?;
            for input in &n.inputs {
                if input.0 >= nodes.len() {
                    return Err(GraphError::UnknownInput {
                        node: n.name.clone(),
                        input: input.0,
                    });
                }
            }
        }
        if outputs.is_empty() {
            return Err(GraphError::NoOutput);
        }
        for id in outputs.iter().chain(aliases.values()) {
            if id.0 >= nodes.len() {
                return Err(GraphError::UnknownNode(format!("#{}", id.0)));
            }
        }
        let order = topo_order(&nodes)?;
        let mut shapes: Vec<Option<Shape>> = vec![None; nodes.len()];
        for &id in &order {
            let node = &nodes[id.0];
            let ins: Vec<Shape> = node
                .inputs
                .iter()
                .map(|i| shapes[i.0].clone().expect("inputs precede in topological order"))
                .collect();
            let s = infer_output_shape(&node.layer, &ins).map_err(|reason| GraphError::Shape {
                node: node.name.clone(),
                reason,
            })?;
            shapes[id.0] = Some(s);
        }
        static NEXT_ID: AtomicU64 = AtomicU64::new(1);
        Ok(ModelGraph {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            nodes,
            outputs,
            aliases,
            order,
            shapes: shapes.into_iter().map(|s| s.expect("all nodes visited")).collect(),
            by_name,
        })
    }

    /// Identity token; activation tapes remember which graph produced them.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn output(&self) -> NodeId {
        self.outputs[0]
    }

    pub fn aliases(&self) -> &BTreeMap<String, NodeId> {
        &self.aliases
    }

    /// Nodes in a topological order; ties broken by insertion index.
    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.shapes[id.0]
    }

    /// Looks a node up by name or alias.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name
            .get(name)
            .copied()
            .or_else(|| self.aliases.get(name).copied())
    }

    pub fn require(&self, name: &str) -> Result<NodeId, GraphError> {
        self.find(name).ok_or_else(|| GraphError::UnknownNode(name.to_string()))
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        self.order
            .iter()
            .copied()
            .filter(|&id| matches!(self.nodes[id.0].layer, LayerSpec::Input { .. }))
            .collect()
    }

    pub fn input_shapes(&self, id: NodeId) -> Vec<&Shape> {
        self.nodes[id.0].inputs.iter().map(|&i| self.shape(i)).collect()
    }

    /// Parameter declarations for one node.
    pub fn node_params(&self, id: NodeId) -> Vec<ParamSpec> {
        let node = &self.nodes[id.0];
        let input = node.inputs.first().map(|&i| self.shape(i));
        param_specs(&node.name, &node.layer, input, node.frozen)
    }

    /// All parameter declarations in topological order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.order.iter().flat_map(|&id| self.node_params(id)).collect()
    }

    pub fn param_count(&self) -> ParamCount {
        summarize(self).totals
    }

    /// Returns a copy with the frozen flag of every node set by `pred`.
    pub fn with_frozen(&self, pred: impl Fn(&Node) -> bool) -> ModelGraph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            n.frozen = pred(n);
        }
        g
    }
}

fn topo_order(nodes: &[Node]) -> Result<Vec<NodeId>, GraphError> {
    let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for input in &n.inputs {
            consumers[input.0].push(i);
        }
    }
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| std::cmp::Reverse(i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(std::cmp::Reverse(i)) = ready.pop() {
        order.push(NodeId(i));
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(std::cmp::Reverse(c));
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = indegree.iter().position(|&d| d > 0).expect("some node left");
        return Err(GraphError::Cycle(nodes[stuck].name.clone()));
    }
    Ok(order)
}

/// Incremental graph construction. Inputs must already exist, so cycles are
/// impossible; shapes are checked as nodes are added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    shapes: Vec<Shape>,
    names: HashMap<String, NodeId>,
    aliases: BTreeMap<String, NodeId>,
    frozen: bool,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the frozen flag applied to subsequently added nodes.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn add(&mut self, name: impl Into<String>, layer: LayerSpec, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(GraphError::DuplicateName(name));
        }
        let mut in_shapes = Vec::with_capacity(inputs.len());
        for i in inputs {
            let s = self.shapes.get(i.0).ok_or_else(|| GraphError::UnknownInput {
                node: name.clone(),
                input: i.0,
            })?;
            in_shapes.push(s.clone());
        }
        let shape = infer_output_shape(&layer, &in_shapes).map_err(|reason| GraphError::Shape {
            node: name.clone(),
            reason,
        })?;
        let id = NodeId(self.nodes.len());
        self.names.insert(name.clone(), id);
        self.nodes.push(Node {
            name,
            layer,
            inputs: inputs.to_vec(),
            frozen: self.frozen,
        });
        self.shapes.push(shape);
        Ok(id)
    }

    pub fn input(&mut self, name: impl Into<String>, shape: Shape) -> Result<NodeId, GraphError> {
        self.add(name, LayerSpec::Input { shape }, &[])
    }

    pub fn alias(&mut self, alias: impl Into<String>, id: NodeId) {
        self.aliases.insert(alias.into(), id);
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.shapes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.names
            .get(name)
            .copied()
            .or_else(|| self.aliases.get(name).copied())
    }

    pub fn require(&self, name: &str) -> Result<NodeId, GraphError> {
        self.find(name).ok_or_else(|| GraphError::UnknownNode(name.to_string()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Number of nodes added so far; the next node gets `NodeId(len)`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn finish(self, outputs: &[NodeId]) -> Result<ModelGraph, GraphError> {
        ModelGraph::from_parts(self.nodes, outputs.to_vec(), self.aliases)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;

    #[test]
    fn cycle_is_detected() {
        let nodes = vec![
            Node {
                name: "in".into(),
                layer: LayerSpec::Input { shape: shape![4] },
                inputs: vec![],
                frozen: false,
            },
            Node {
                name: "a".into(),
                layer: LayerSpec::Add,
                inputs: vec![NodeId(0), NodeId(2)],
                frozen: false,
            },
            Node {
                name: "b".into(),
                layer: LayerSpec::ReLU,
                inputs: vec![NodeId(1)],
                frozen: false,
            },
        ];
        let err = ModelGraph::from_parts(nodes, vec![NodeId(2)], BTreeMap::new()).unwrap_err();
        assert!(matches!(err, GraphError::Cycle(_)));
    }

    #[test]
    fn shape_failure_names_node() {
        let mut b = GraphBuilder::new();
        let i = b.input("in", shape![8, 8, 3]).unwrap();
        let err = b
            .add("too_big", LayerSpec::max_pool(9, 1, Padding::Valid), &[i])
            .unwrap_err();
        match err {
            GraphError::Shape { node, .. } => assert_eq!(node, "too_big"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = GraphBuilder::new();
        let i = b.input("x", shape![3]).unwrap();
        assert!(matches!(
            b.add("x", LayerSpec::ReLU, &[i]),
            Err(GraphError::DuplicateName(_))
        ));
    }

    #[test]
    fn out_of_order_nodes_are_sorted() {
        let nodes = vec![
            Node {
                name: "out".into(),
                layer: LayerSpec::dense(2),
                inputs: vec![NodeId(1)],
                frozen: false,
            },
            Node {
                name: "in".into(),
                layer: LayerSpec::Input { shape: shape![4] },
                inputs: vec![],
                frozen: false,
            },
        ];
        let g = ModelGraph::from_parts(nodes, vec![NodeId(0)], BTreeMap::new()).unwrap();
        assert_eq!(g.order(), &[NodeId(1), NodeId(0)]);
        assert_eq!(g.shape(NodeId(0)), &shape![2]);
    }
}
