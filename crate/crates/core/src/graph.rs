//! Candidate communication graph, edge costs, reverse-Dijkstra shortest-path
//! tree and training-exchange accounting.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference ten-node topology: six sensors, three relays, one fusion node.
pub const PAPER_TOPOLOGY: &str = include_str!("../data/paper_topology.json");

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("topology parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("edge {from}->{to}: invalid {field}: {reason}")]
    InvalidEdge {
        from: NodeId,
        to: NodeId,
        field: &'static str,
        reason: String,
    },
    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),
    #[error("node ids must be exactly 0..{count} (problem with id {id})")]
    BadNodeIds { id: usize, count: usize },
    #[error("edge {from}->{to} references a node outside 0..{count}")]
    NodeOutOfRange {
        from: NodeId,
        to: NodeId,
        count: usize,
    },
    #[error("duplicate edge {from}->{to}")]
    DuplicateEdge { from: NodeId, to: NodeId },
    #[error("graph contains a directed cycle through node {0}")]
    Cycle(NodeId),
    #[error("expected exactly one fusion node, found {0}")]
    FusionCount(usize),
    #[error("fusion node {0} must not have outgoing edges")]
    FusionHasSuccessor(NodeId),
    #[error("data node {0} has no directed path to the fusion node")]
    Unreachable(NodeId),
    #[error("dense topology has zero total width")]
    ZeroWidth,
}

/// Index of a node in a [`NetworkGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Sensor,
    Relay,
    Fusion,
}

/// Physical attributes of a directed link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttr {
    pub capacity: f64,
    pub latency: f64,
    pub reliability: f64,
    /// Real scalars carried per message.
    pub width: u32,
}

impl EdgeAttr {
    fn check(&self, from: NodeId, to: NodeId) -> Result<(), GraphError> {
        let bad = |field, reason: String| GraphError::InvalidEdge {
            from,
            to,
            field,
            reason,
        };
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(bad("capacity", format!("{} is not > 0", self.capacity)));
        }
        if !(self.latency.is_finite() && self.latency >= 0.0) {
            return Err(bad("latency", format!("{} is not >= 0", self.latency)));
        }
        if !(0.0..=1.0).contains(&self.reliability) {
            return Err(bad(
                "reliability",
                format!("{} is outside [0, 1]", self.reliability),
            ));
        }
        if self.width == 0 {
            return Err(bad("width", "must be at least 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    #[serde(flatten)]
    pub attr: EdgeAttr,
}

/// Weights of the additive link cost
/// `alpha * s * d / (C + eps) + beta * latency + gamma * (1 - reliability)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default = "CostWeights::default_epsilon")]
    pub epsilon: f64,
    pub bits_per_scalar: u32,
}

impl CostWeights {
    pub const DEFAULT_EPSILON: f64 = 1e-9;

    fn default_epsilon() -> f64 {
        Self::DEFAULT_EPSILON
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GraphError::InvalidWeights(format!(
                    "{name} = {v} is not >= 0"
                )));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(GraphError::InvalidWeights(format!(
                "epsilon = {} is not >= 0",
                self.epsilon
            )));
        }
        if self.bits_per_scalar == 0 {
            return Err(GraphError::InvalidWeights(
                "bits_per_scalar must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            epsilon: Self::DEFAULT_EPSILON,
            bits_per_scalar: 32,
        }
    }
}

/// Additive cost of one link. Nonnegative for valid attributes and weights.
pub fn edge_cost(attr: &EdgeAttr, w: &CostWeights) -> f64 {
    let s = f64::from(w.bits_per_scalar);
    let d = f64::from(attr.width);
    w.alpha * s * d / (attr.capacity + w.epsilon)
        + w.beta * attr.latency
        + w.gamma * (1.0 - attr.reliability)
}

/// Directed acyclic candidate graph with a single fusion node.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    roles: Vec<NodeRole>,
    edges: Vec<Edge>,
    fusion: NodeId,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl NetworkGraph {
    /// Builds a graph and checks its structural invariants: valid attributes,
    /// no duplicate edges, exactly one fusion node without successors, and
    /// acyclicity. Source-to-fusion connectivity is checked separately by
    /// [`NetworkGraph::check_connected`].
    pub fn new(roles: Vec<NodeRole>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let count = roles.len();
        let fusions: Vec<usize> = roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == NodeRole::Fusion)
            .map(|(i, _)| i)
            .collect();
        if fusions.len() != 1 {
            return Err(GraphError::FusionCount(fusions.len()));
        }
        let fusion = NodeId(fusions[0]);

        let mut out_edges = vec![Vec::new(); count];
        let mut in_edges = vec![Vec::new(); count];
        for (i, e) in edges.iter().enumerate() {
            if e.from.0 >= count || e.to.0 >= count {
                return Err(GraphError::NodeOutOfRange {
                    from: e.from,
                    to: e.to,
                    count,
                });
            }
            if e.from == e.to {
                return Err(GraphError::Cycle(e.from));
            }
            e.attr.check(e.from, e.to)?;
            if out_edges[e.from.0]
                .iter()
                .any(|&j: &usize| edges[j].to == e.to)
            {
                return Err(GraphError::DuplicateEdge {
                    from: e.from,
                    to: e.to,
                });
            }
            out_edges[e.from.0].push(i);
            in_edges[e.to.0].push(i);
        }
        if !out_edges[fusion.0].is_empty() {
            return Err(GraphError::FusionHasSuccessor(fusion));
        }

        let graph = Self {
            roles,
            edges,
            fusion,
            out_edges,
            in_edges,
        };
        graph.topological_order()?;
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, v: NodeId) -> NodeRole {
        self.roles[v.0]
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn fusion(&self) -> NodeId {
        self.fusion
    }

    /// Nodes that observe data (the sensors), in ascending id order.
    pub fn data_nodes(&self) -> Vec<NodeId> {
        self.nodes_with_role(NodeRole::Sensor)
    }

    pub fn nodes_with_role(&self, role: NodeRole) -> Vec<NodeId> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn out_edges(&self, v: NodeId) -> impl Iterator<Item = &Edge> {
        self.out_edges[v.0].iter().map(move |&i| &self.edges[i])
    }

    pub fn in_edges(&self, v: NodeId) -> impl Iterator<Item = &Edge> {
        self.in_edges[v.0].iter().map(move |&i| &self.edges[i])
    }

    pub fn find_edge(&self, from: NodeId, to: NodeId) -> Option<&Edge> {
        self.out_edges(from).find(|e| e.to == to)
    }

    /// Kahn's algorithm; ties broken by smallest id.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let n = self.node_count();
        let mut indegree: Vec<usize> = self.in_edges.iter().map(Vec::len).collect();
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_first() {
            order.push(NodeId(v));
            for &i in &self.out_edges[v] {
                let t = self.edges[i].to.0;
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.insert(t);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&v| indegree[v] > 0).unwrap_or(0);
            return Err(GraphError::Cycle(NodeId(stuck)));
        }
        Ok(order)
    }

    /// Fails with the first data node that cannot reach the fusion node.
    pub fn check_connected(&self) -> Result<(), GraphError> {
        let reaches = self.reaches_fusion();
        match self.data_nodes().into_iter().find(|j| !reaches[j.0]) {
            Some(j) => Err(GraphError::Unreachable(j)),
            None => Ok(()),
        }
    }

    fn reaches_fusion(&self) -> Vec<bool> {
        let mut seen = vec![false; self.node_count()];
        let mut queue = VecDeque::from([self.fusion]);
        seen[self.fusion.0] = true;
        while let Some(v) = queue.pop_front() {
            for e in self.in_edges(v) {
                if !seen[e.from.0] {
                    seen[e.from.0] = true;
                    queue.push_back(e.from);
                }
            }
        }
        seen
    }

    /// Copy of the graph without the edge `from -> to`.
    pub fn without_edge(&self, from: NodeId, to: NodeId) -> Result<Self, GraphError> {
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|e| !(e.from == from && e.to == to))
            .collect();
        Self::new(self.roles.clone(), edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on cost, then on node id.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Result of a single-sink shortest-path computation toward the fusion node.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPaths {
    /// Minimum additive cost from each node to the fusion node, `INFINITY` if unreachable.
    pub distance: Vec<f64>,
    /// First hop on the selected minimum-cost path; `None` for the fusion
    /// node and unreachable nodes.
    pub next_hop: Vec<Option<NodeId>>,
    pub fusion: NodeId,
}

impl ShortestPaths {
    pub fn is_reachable(&self, v: NodeId) -> bool {
        self.distance[v.0].is_finite()
    }

    /// Node sequence from `v` to the fusion node following next hops.
    pub fn path(&self, v: NodeId) -> Option<Vec<NodeId>> {
        if !self.is_reachable(v) {
            return None;
        }
        let mut path = vec![v];
        let mut cur = v;
        while let Some(next) = self.next_hop[cur.0] {
            path.push(next);
            cur = next;
        }
        Some(path)
    }
}

/// Dijkstra from the fusion node over reversed edges.
///
/// Among equal-cost alternatives the next hop with the lowest id is kept, so
/// the resulting tree does not depend on heap order.
pub fn reverse_dijkstra(g: &NetworkGraph, w: &CostWeights) -> Result<ShortestPaths, GraphError> {
    w.validate()?;
    let n = g.node_count();
    let costs: Vec<f64> = g.edges().iter().map(|e| edge_cost(&e.attr, w)).collect();
    let mut distance = vec![f64::INFINITY; n];
    let mut settled = vec![false; n];
    let r = g.fusion();
    distance[r.0] = 0.0;

    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        cost: 0.0,
        node: r.0,
    });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if settled[node] {
            continue;
        }
        settled[node] = true;
        for &i in &g.in_edges[node] {
            let from = g.edges[i].from.0;
            let candidate = cost + costs[i];
            if candidate < distance[from] {
                distance[from] = candidate;
                heap.push(HeapEntry {
                    cost: candidate,
                    node: from,
                });
            }
        }
    }

    // Deterministic tie-breaking: lowest-id successor achieving the distance.
    let mut next_hop = vec![None; n];
    for v in 0..n {
        if v == r.0 || !distance[v].is_finite() {
            continue;
        }
        next_hop[v] = g.out_edges[v]
            .iter()
            .filter(|&&i| distance[g.edges[i].to.0] + costs[i] == distance[v])
            .map(|&i| g.edges[i].to)
            .min();
    }

    if let Some(j) = g
        .data_nodes()
        .into_iter()
        .find(|j| !distance[j.0].is_finite())
    {
        return Err(GraphError::Unreachable(j));
    }
    Ok(ShortestPaths {
        distance,
        next_hop,
        fusion: r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActiveEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub width: u32,
}

/// Subset of graph edges used for forward activations and backward errors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTopology {
    node_count: usize,
    fusion: NodeId,
    data_nodes: Vec<NodeId>,
    edges: Vec<ActiveEdge>,
    parents: Vec<Vec<NodeId>>,
    children: Vec<Vec<NodeId>>,
}

impl TrainingTopology {
    /// Topology made of the given graph edges, sorted by `(from, to)`.
    pub fn from_edges<'a>(g: &NetworkGraph, edges: impl IntoIterator<Item = &'a Edge>) -> Self {
        let mut active: Vec<ActiveEdge> = edges
            .into_iter()
            .map(|e| ActiveEdge {
                from: e.from,
                to: e.to,
                width: e.attr.width,
            })
            .collect();
        active.sort();
        active.dedup();
        let n = g.node_count();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for e in &active {
            parents[e.to.0].push(e.from);
            children[e.from.0].push(e.to);
        }
        Self {
            node_count: n,
            fusion: g.fusion(),
            data_nodes: g.data_nodes(),
            edges: active,
            parents,
            children,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn fusion(&self) -> NodeId {
        self.fusion
    }

    pub fn data_nodes(&self) -> &[NodeId] {
        &self.data_nodes
    }

    pub fn edges(&self) -> &[ActiveEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Active parents in ascending id order.
    pub fn parents(&self, v: NodeId) -> &[NodeId] {
        &self.parents[v.0]
    }

    /// Active children in ascending id order.
    pub fn children(&self, v: NodeId) -> &[NodeId] {
        &self.children[v.0]
    }

    pub fn contains(&self, from: NodeId, to: NodeId) -> bool {
        self.edges
            .binary_search_by(|e| (e.from, e.to).cmp(&(from, to)))
            .is_ok()
    }

    pub fn edge(&self, from: NodeId, to: NodeId) -> Option<&ActiveEdge> {
        self.edges
            .binary_search_by(|e| (e.from, e.to).cmp(&(from, to)))
            .ok()
            .map(|i| &self.edges[i])
    }

    /// Sum of message widths over active edges.
    pub fn total_width(&self) -> u64 {
        self.edges.iter().map(|e| u64::from(e.width)).sum()
    }

    /// Nodes with a directed path to the fusion node inside the topology
    /// (the fusion node included).
    pub fn reaches_fusion(&self) -> Vec<bool> {
        let mut seen = vec![false; self.node_count];
        seen[self.fusion.0] = true;
        let mut queue = VecDeque::from([self.fusion]);
        while let Some(v) = queue.pop_front() {
            for &p in &self.parents[v.0] {
                if !seen[p.0] {
                    seen[p.0] = true;
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// Fails with the first data node that has no active path to the fusion node.
    pub fn check_connected(&self) -> Result<(), GraphError> {
        let seen = self.reaches_fusion();
        match self.data_nodes.iter().find(|j| !seen[j.0]) {
            Some(&j) => Err(GraphError::Unreachable(j)),
            None => Ok(()),
        }
    }

    /// Nodes touched by at least one active edge, plus the fusion node.
    pub fn active_nodes(&self) -> Vec<NodeId> {
        (0..self.node_count)
            .map(NodeId)
            .filter(|&v| {
                v == self.fusion || !self.parents[v.0].is_empty() || !self.children[v.0].is_empty()
            })
            .collect()
    }
}

/// Shortest-path tree: union of the selected minimum-cost paths from every
/// data node to the fusion node.
pub fn build_spt(g: &NetworkGraph, w: &CostWeights) -> Result<TrainingTopology, GraphError> {
    let paths = reverse_dijkstra(g, w)?;
    Ok(spt_from_paths(g, &paths))
}

pub fn spt_from_paths(g: &NetworkGraph, paths: &ShortestPaths) -> TrainingTopology {
    let mut selected = Vec::new();
    let mut on_tree = vec![false; g.node_count()];
    for j in g.data_nodes() {
        let mut cur = j;
        while !on_tree[cur.0] {
            on_tree[cur.0] = true;
            let Some(next) = paths.next_hop[cur.0] else {
                break;
            };
            selected.push(
                g.find_edge(cur, next)
                    .expect("next hop always follows a graph edge"),
            );
            cur = next;
        }
    }
    TrainingTopology::from_edges(g, selected)
}

/// Every training-active edge: links that terminate at a relay or the fusion node.
pub fn full_topology(g: &NetworkGraph) -> TrainingTopology {
    TrainingTopology::from_edges(
        g,
        g.edges()
            .iter()
            .filter(|e| matches!(g.role(e.to), NodeRole::Relay | NodeRole::Fusion)),
    )
}

/// Per-epoch training exchange `2 * s * q * sum(d_e)` in bits.
pub fn exchange_bits(t: &TrainingTopology, bits_per_scalar: u32, samples: u64) -> u64 {
    2 * u64::from(bits_per_scalar) * samples * t.total_width()
}

/// Width-weighted fraction of the dense exchange kept by the sparse topology.
pub fn reduction_ratio(
    sparse: &TrainingTopology,
    dense: &TrainingTopology,
) -> Result<f64, GraphError> {
    let dense_width = dense.total_width();
    if dense_width == 0 {
        return Err(GraphError::ZeroWidth);
    }
    Ok(sparse.total_width() as f64 / dense_width as f64)
}

/// Fractional training-exchange gain `1 - ratio`.
pub fn exchange_gain(
    sparse: &TrainingTopology,
    dense: &TrainingTopology,
) -> Result<f64, GraphError> {
    reduction_ratio(sparse, dense).map(|r| 1.0 - r)
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    id: usize,
    role: NodeRole,
}

/// On-disk JSON form of a topology.
#[derive(Debug, Serialize, Deserialize)]
pub struct TopologyFile {
    nodes: Vec<NodeEntry>,
    edges: Vec<Edge>,
    cost_weights: CostWeights,
}

impl TopologyFile {
    pub fn from_graph(g: &NetworkGraph, w: &CostWeights) -> Self {
        Self {
            nodes: g
                .roles()
                .iter()
                .enumerate()
                .map(|(id, &role)| NodeEntry { id, role })
                .collect(),
            edges: g.edges().to_vec(),
            cost_weights: *w,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }
}

/// Parses and fully validates a JSON topology document.
pub fn parse_graph_spec(text: &str) -> Result<(NetworkGraph, CostWeights), GraphError> {
    let file: TopologyFile = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let count = file.nodes.len();
    let mut roles = vec![None; count];
    for node in &file.nodes {
        match roles.get_mut(node.id) {
            Some(slot @ None) => *slot = Some(node.role),
            _ => return Err(GraphError::BadNodeIds { id: node.id, count }),
        }
    }
    let roles = roles
        .into_iter()
        .map(|r| r.expect("all ids filled"))
        .collect();
    file.cost_weights.validate()?;
    let graph = NetworkGraph::new(roles, file.edges)?;
    graph.check_connected()?;
    Ok((graph, file.cost_weights))
}

pub fn paper_topology() -> (NetworkGraph, CostWeights) {
    parse_graph_spec(PAPER_TOPOLOGY).expect("bundled topology is valid")
}
