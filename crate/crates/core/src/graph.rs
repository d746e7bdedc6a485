//! Directed acyclic graphs over vector-valued nodes, together with the
//! orderings and conditioning sets the estimation pipeline walks along.
//!
//! Node indices are 0-based. Edges are kept in a `BTreeSet`, so iteration
//! and serialization are lexicographic and byte-stable.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbmError};

/// A directed edge `source -> target`; identifies the bottleneck living on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct EdgeId {
    pub source: usize,
    pub target: usize,
}

impl EdgeId {
    pub const fn new(source: usize, target: usize) -> Self {
        EdgeId { source, target }
    }
}

impl From<(usize, usize)> for EdgeId {
    fn from((source, target): (usize, usize)) -> Self {
        EdgeId { source, target }
    }
}

impl From<EdgeId> for (usize, usize) {
    fn from(e: EdgeId) -> Self {
        (e.source, e.target)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.source, self.target)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DagRepr {
    num_nodes: usize,
    node_dims: Vec<usize>,
    edges: Vec<[usize; 2]>,
}

/// Directed acyclic graph with a positive dimension attached to every node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DagRepr", into = "DagRepr")]
pub struct Dag {
    node_dims: Vec<usize>,
    edges: BTreeSet<EdgeId>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl TryFrom<DagRepr> for Dag {
    type Error = ScbmError;

    fn try_from(repr: DagRepr) -> Result<Self> {
        if repr.node_dims.len() != repr.num_nodes {
            return Err(ScbmError::DimensionMismatch {
                context: "dag node_dims",
                expected: repr.num_nodes,
                actual: repr.node_dims.len(),
            });
        }
        Dag::new(repr.node_dims, repr.edges.into_iter().map(|[i, j]| EdgeId::new(i, j)))
    }
}

impl From<Dag> for DagRepr {
    fn from(dag: Dag) -> Self {
        DagRepr {
            num_nodes: dag.num_nodes(),
            edges: dag.edges.iter().map(|e| [e.source, e.target]).collect(),
            node_dims: dag.node_dims,
        }
    }
}

impl Dag {
    /// Builds a DAG, rejecting self-loops, duplicates, out-of-range endpoints,
    /// zero dimensions and cycles.
    pub fn new(node_dims: Vec<usize>, edges: impl IntoIterator<Item = EdgeId>) -> Result<Self> {
        let n = node_dims.len();
        if let Some(i) = node_dims.iter().position(|&d| d == 0) {
            return Err(ScbmError::param(format!("node {i} has dimension 0")));
        }
        let mut set = BTreeSet::new();
        for e in edges {
            if e.source >= n || e.target >= n {
                return Err(ScbmError::param(format!("edge {e} references a node outside 0..{n}")));
            }
            if e.source == e.target {
                return Err(ScbmError::param(format!("self-loop on node {}", e.source)));
            }
            if !set.insert(e) {
                return Err(ScbmError::param(format!("duplicate edge {e}")));
            }
        }
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for e in &set {
            parents[e.target].push(e.source);
            children[e.source].push(e.target);
        }
        let dag = Dag {
            node_dims,
            edges: set,
            parents,
            children,
        };
        if dag.topological_order().len() != n {
            return Err(ScbmError::param("edge set contains a cycle"));
        }
        Ok(dag)
    }

    /// All nodes share one dimension.
    pub fn with_uniform_dim(num_nodes: usize, dim: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Dag::new(vec![dim; num_nodes], edges.iter().map(|&e| EdgeId::from(e)))
    }

    pub fn num_nodes(&self) -> usize {
        self.node_dims.len()
    }

    pub fn node_dims(&self) -> &[usize] {
        &self.node_dims
    }

    pub fn dim(&self, node: usize) -> usize {
        self.node_dims[node]
    }

    pub fn edges(&self) -> impl ExactSizeIterator<Item = EdgeId> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, edge: EdgeId) -> bool {
        self.edges.contains(&edge)
    }

    /// Parents in ascending index order.
    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    /// Children in ascending index order.
    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn is_root(&self, node: usize) -> bool {
        self.parents[node].is_empty()
    }

    /// Nodes reachable from `node` along directed edges, excluding `node`.
    pub fn descendants(&self, node: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = self.children[node].clone();
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(self.children[v].iter().copied());
            }
        }
        seen
    }

    /// Same graph without one edge; used for negative controls and ablations.
    pub fn without_edge(&self, edge: EdgeId) -> Result<Dag> {
        if !self.has_edge(edge) {
            return Err(ScbmError::param(format!("edge {edge} is not in the graph")));
        }
        Dag::new(
            self.node_dims.clone(),
            self.edges.iter().copied().filter(|&e| e != edge),
        )
    }

    fn topological_order(&self) -> Vec<usize> {
        let n = self.num_nodes();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(v)) = ready.pop() {
            order.push(v);
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        order
    }

    pub fn ensure_edge(&self, edge: EdgeId) -> Result<()> {
        if self.has_edge(edge) {
            Ok(())
        } else {
            Err(ScbmError::param(format!("edge {edge} is not in the graph")))
        }
    }
}

/// Erdős–Rényi DAG: edges are drawn independently with probability
/// `edge_prob` between every ordered pair of a uniformly random permutation,
/// so acyclicity holds by construction.
pub fn sample_er_dag<R: Rng + ?Sized>(
    num_nodes: usize,
    edge_prob: f64,
    node_dims: Vec<usize>,
    rng: &mut R,
) -> Result<Dag> {
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(ScbmError::param(format!("edge probability {edge_prob} outside [0, 1]")));
    }
    if num_nodes == 0 {
        return Err(ScbmError::param("a DAG needs at least one node"));
    }
    if node_dims.len() != num_nodes {
        return Err(ScbmError::DimensionMismatch {
            context: "sample_er_dag node_dims",
            expected: num_nodes,
            actual: node_dims.len(),
        });
    }
    let mut perm: Vec<usize> = (0..num_nodes).collect();
    perm.shuffle(rng);
    let mut edges = Vec::new();
    for a in 0..num_nodes {
        for b in a + 1..num_nodes {
            if rng.random::<f64>() < edge_prob {
                edges.push(EdgeId::new(perm[a], perm[b]));
            }
        }
    }
    Dag::new(node_dims, edges)
}

/// Topological order; ties are broken by ascending node index.
pub fn causal_order(dag: &Dag) -> Vec<usize> {
    dag.topological_order()
}

/// Position of every node within [`causal_order`].
pub fn order_positions(order: &[usize]) -> Vec<usize> {
    let mut pos = vec![0; order.len()];
    for (p, &v) in order.iter().enumerate() {
        pos[v] = p;
    }
    pos
}

/// Level partition by longest path from the exogenous nodes. Level 0 holds
/// the parentless nodes; each level is sorted ascending.
pub fn causal_grading(dag: &Dag) -> Vec<Vec<usize>> {
    let mut level = vec![0usize; dag.num_nodes()];
    for v in causal_order(dag) {
        level[v] = dag.parents(v).iter().map(|&p| level[p] + 1).max().unwrap_or(0);
    }
    let depth = level.iter().copied().max().map_or(0, |m| m + 1);
    let mut levels = vec![Vec::new(); depth];
    for (v, &l) in level.iter().enumerate() {
        levels[l].push(v);
    }
    levels
}

/// Bottlenecks to condition on when estimating `edge = (i, j)`: every
/// bottleneck entering `i`, plus the bottlenecks entering `j` from parents
/// that come after `i` in the causal order. No member has `i` as its source.
pub fn conditioning_set(dag: &Dag, edge: EdgeId) -> Result<Vec<EdgeId>> {
    dag.ensure_edge(edge)?;
    let pos = order_positions(&causal_order(dag));
    let (i, j) = (edge.source, edge.target);
    let mut set: Vec<EdgeId> = dag.parents(i).iter().map(|&k| EdgeId::new(k, i)).collect();
    set.extend(
        dag.parents(j)
            .iter()
            .filter(|&&l| l != i && pos[l] > pos[i])
            .map(|&l| EdgeId::new(l, j)),
    );
    Ok(set)
}

/// Raw-variable counterpart of [`conditioning_set`]: the source's parents and
/// the target's parents later than the source in the causal order.
pub fn raw_conditioning_nodes(dag: &Dag, edge: EdgeId) -> Result<Vec<usize>> {
    dag.ensure_edge(edge)?;
    let pos = order_positions(&causal_order(dag));
    let (i, j) = (edge.source, edge.target);
    let mut nodes: Vec<usize> = dag.parents(i).to_vec();
    nodes.extend(dag.parents(j).iter().copied().filter(|&l| l != i && pos[l] > pos[i]));
    Ok(nodes)
}

/// Order in which edges are estimated: targets follow the causal order and,
/// per target, sources run through its parents in reverse causal order.
pub fn estimation_schedule(dag: &Dag) -> Vec<EdgeId> {
    let order = causal_order(dag);
    let pos = order_positions(&order);
    let mut schedule = Vec::with_capacity(dag.num_edges());
    for &j in &order {
        let mut parents = dag.parents(j).to_vec();
        parents.sort_by_key(|&p| Reverse(pos[p]));
        schedule.extend(parents.into_iter().map(|i| EdgeId::new(i, j)));
    }
    schedule
}

/// Graph over the bottleneck variables: `Z(k,i) -> Z(i,j)` for composable
/// edges and `Z(i,j) <-> Z(i,l)` for bottlenecks sharing a source noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedGraph {
    pub nodes: BTreeSet<EdgeId>,
    pub directed: BTreeSet<(EdgeId, EdgeId)>,
    /// Stored with the smaller endpoint first.
    pub bidirected: BTreeSet<(EdgeId, EdgeId)>,
}

impl MixedGraph {
    pub fn has_bidirected(&self, a: EdgeId, b: EdgeId) -> bool {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.bidirected.contains(&key)
    }
}

pub fn bottleneck_mixed_graph(dag: &Dag) -> MixedGraph {
    let nodes: BTreeSet<EdgeId> = dag.edges().collect();
    let mut directed = BTreeSet::new();
    let mut bidirected = BTreeSet::new();
    for e in dag.edges() {
        for &j in dag.children(e.target) {
            directed.insert((e, EdgeId::new(e.target, j)));
        }
    }
    for i in 0..dag.num_nodes() {
        let ch = dag.children(i);
        for (a, &j) in ch.iter().enumerate() {
            for &l in &ch[a + 1..] {
                bidirected.insert((EdgeId::new(i, j), EdgeId::new(i, l)));
            }
        }
    }
    MixedGraph {
        nodes,
        directed,
        bidirected,
    }
}
