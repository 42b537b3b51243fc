//! Dependency graph over prunable parameter slices and coupled-group
//! discovery by trigger propagation.
//!
//! Nodes are (layer, role, unit) slices: one per attention head for each of
//! q/k/v/o, one per FFN channel for each of gate/up/down. Edges follow the
//! dataflow inside a layer: a head's q/k/v rows feed its o columns, and a
//! channel's gate/up rows feed its down column. Embeddings, normalization
//! gains and the output head are deliberately absent — pruning them would
//! cascade through every residual connection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{LayerDims, TransformerModel};
use crate::tensor::{ParamId, Scalar};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("trigger {0} is not a node of this graph")]
    UnknownTrigger(ParamNode),
}

/// Which projection a node slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

/// Axis the slice removes: rows feed the unit, columns consume it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SliceAxis {
    Rows,
    Columns,
}

/// What a whole coupled group removes from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum StructureKind {
    Head,
    Channel,
}

impl Role {
    pub fn param_suffix(self) -> &'static str {
        match self {
            Role::Query => "q_proj",
            Role::Key => "k_proj",
            Role::Value => "v_proj",
            Role::Output => "o_proj",
            Role::Gate => "gate_proj",
            Role::Up => "up_proj",
            Role::Down => "down_proj",
        }
    }

    pub fn axis(self) -> SliceAxis {
        match self {
            Role::Query | Role::Key | Role::Value | Role::Gate | Role::Up => SliceAxis::Rows,
            Role::Output | Role::Down => SliceAxis::Columns,
        }
    }

    pub fn kind(self) -> StructureKind {
        match self {
            Role::Query | Role::Key | Role::Value | Role::Output => StructureKind::Head,
            Role::Gate | Role::Up | Role::Down => StructureKind::Channel,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.param_suffix())
    }
}

/// One prunable slice: a head's share of an attention projection, or a
/// channel's share of an FFN projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ParamNode {
    pub layer: usize,
    pub role: Role,
    pub unit: usize,
}

impl ParamNode {
    pub fn new(layer: usize, role: Role, unit: usize) -> Self {
        ParamNode { layer, role, unit }
    }

    pub fn param_id(&self) -> ParamId {
        ParamId::layer(self.layer, self.role.param_suffix())
    }
}

impl fmt::Display for ParamNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match self.role.kind() {
            StructureKind::Head => "head",
            StructureKind::Channel => "channel",
        };
        write!(f, "layers.{}.{} {} {}", self.layer, self.role, unit, self.unit)
    }
}

/// A maximal set of slices that must be removed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruningGroup {
    pub trigger: ParamNode,
    pub members: Vec<ParamNode>,
    pub label: String,
}

impl PruningGroup {
    pub fn layer(&self) -> usize {
        self.trigger.layer
    }

    pub fn kind(&self) -> StructureKind {
        self.trigger.role.kind()
    }

    /// Head or channel index shared by every member.
    pub fn unit(&self) -> usize {
        self.trigger.unit
    }

    pub fn member_set(&self) -> BTreeSet<ParamNode> {
        self.members.iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct DependencyGraph {
    nodes: BTreeSet<ParamNode>,
    out_edges: BTreeMap<ParamNode, BTreeSet<ParamNode>>,
    in_edges: BTreeMap<ParamNode, BTreeSet<ParamNode>>,
}

impl DependencyGraph {
    /// Build the graph for the given per-layer widths.
    pub fn build(layer_dims: &[LayerDims]) -> Self {
        let mut g = DependencyGraph {
            nodes: BTreeSet::new(),
            out_edges: BTreeMap::new(),
            in_edges: BTreeMap::new(),
        };
        for (l, dims) in layer_dims.iter().enumerate() {
            for h in 0..dims.n_heads {
                let o = ParamNode::new(l, Role::Output, h);
                for role in [Role::Query, Role::Key, Role::Value] {
                    g.add_edge(ParamNode::new(l, role, h), o);
                }
            }
            for c in 0..dims.ffn_dim {
                let down = ParamNode::new(l, Role::Down, c);
                for role in [Role::Gate, Role::Up] {
                    g.add_edge(ParamNode::new(l, role, c), down);
                }
            }
        }
        g
    }

    pub fn for_model<E: Scalar>(model: &TransformerModel<E>) -> Self {
        Self::build(model.layer_dims())
    }

    fn add_edge(&mut self, from: ParamNode, to: ParamNode) {
        self.nodes.insert(from);
        self.nodes.insert(to);
        self.out_edges.entry(from).or_default().insert(to);
        self.in_edges.entry(to).or_default().insert(from);
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ParamNode> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out_edges.values().map(BTreeSet::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (ParamNode, ParamNode)> + '_ {
        self.out_edges
            .iter()
            .flat_map(|(from, tos)| tos.iter().map(move |to| (*from, *to)))
    }

    pub fn contains(&self, node: &ParamNode) -> bool {
        self.nodes.contains(node)
    }

    pub fn out_neighbors(&self, node: &ParamNode) -> impl Iterator<Item = &ParamNode> {
        self.out_edges.get(node).into_iter().flatten()
    }

    pub fn in_neighbors(&self, node: &ParamNode) -> impl Iterator<Item = &ParamNode> {
        self.in_edges.get(node).into_iter().flatten()
    }

    pub fn out_degree(&self, node: &ParamNode) -> usize {
        self.out_edges.get(node).map_or(0, BTreeSet::len)
    }

    pub fn in_degree(&self, node: &ParamNode) -> usize {
        self.in_edges.get(node).map_or(0, BTreeSet::len)
    }

    /// Activate `trigger` and propagate until no new slice is implicated.
    ///
    /// From an active node `a`, four rules fire: out-neighbors whose only
    /// input is `a`'s edge; in-neighbors whose only output feeds `a`; and,
    /// when `a` itself has a single input or single output, the node on the
    /// other end of it. Together they close over exactly one head or one
    /// channel cluster regardless of which member triggered.
    pub fn propagate_from_trigger(&self, trigger: ParamNode) -> Result<PruningGroup, GraphError> {
        if !self.contains(&trigger) {
            return Err(GraphError::UnknownTrigger(trigger));
        }
        let mut active: BTreeSet<ParamNode> = BTreeSet::new();
        let mut queue: VecDeque<ParamNode> = VecDeque::new();
        active.insert(trigger);
        queue.push_back(trigger);
        while let Some(a) = queue.pop_front() {
            let mut found: Vec<ParamNode> = Vec::new();
            for j in self.out_neighbors(&a) {
                if self.in_degree(j) == 1 {
                    found.push(*j);
                }
            }
            for i in self.in_neighbors(&a) {
                if self.out_degree(i) == 1 {
                    found.push(*i);
                }
            }
            if self.in_degree(&a) == 1 {
                found.extend(self.in_neighbors(&a).copied());
            }
            if self.out_degree(&a) == 1 {
                found.extend(self.out_neighbors(&a).copied());
            }
            for n in found {
                if active.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        let members: Vec<ParamNode> = active.into_iter().collect();
        let label = group_label(&trigger);
        Ok(PruningGroup {
            trigger,
            members,
            label,
        })
    }

    /// One group per head and per FFN channel, discovered by triggering every
    /// node and deduplicating; disjoint and covering all nodes.
    pub fn enumerate_groups(&self) -> Vec<PruningGroup> {
        let mut seen: BTreeSet<ParamNode> = BTreeSet::new();
        let mut groups = Vec::new();
        for &node in &self.nodes {
            if seen.contains(&node) {
                continue;
            }
            let group = self
                .propagate_from_trigger(node)
                .expect("enumerating over own nodes");
            seen.extend(group.members.iter().copied());
            groups.push(group);
        }
        groups
    }

    /// Serializable dump for `graph --dump`.
    pub fn dump(&self) -> GraphDump {
        GraphDump {
            nodes: self.nodes.iter().copied().collect(),
            edges: self.edges().collect(),
            groups: self.enumerate_groups(),
        }
    }
}

fn group_label(trigger: &ParamNode) -> String {
    match trigger.role.kind() {
        StructureKind::Head => format!("layer {} head {}", trigger.layer, trigger.unit),
        StructureKind::Channel => format!("layer {} ffn channel {}", trigger.layer, trigger.unit),
    }
}

#[derive(Debug, Serialize)]
pub struct GraphDump {
    pub nodes: Vec<ParamNode>,
    pub edges: Vec<(ParamNode, ParamNode)>,
    pub groups: Vec<PruningGroup>,
}
