//! Message passing over small triplet graphs: node-level GCN, edge-level
//! hypergraph passing and relation-aware passing.
//!
//! All layers aggregate with dense row-normalized adjacency matrices built
//! from a canonically sorted [`LocalGraph`], so results do not depend on the
//! order triplets were supplied in.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId, Triplet};
use crate::tensor::nn::Linear;
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Width of relation vectors.
pub const RELATION_WIDTH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LocalEdge {
    pub head: usize,
    pub relation: RelationId,
    pub tail: usize,
}

/// Triplets re-indexed over their own sorted entity list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalGraph {
    pub nodes: Vec<EntityId>,
    pub triplets: Vec<Triplet>,
    pub edges: Vec<LocalEdge>,
}

impl LocalGraph {
    pub fn new(triplets: &[Triplet]) -> Self {
        Self::with_nodes(triplets, &[])
    }

    /// Like [`LocalGraph::new`] but also keeps `extra` entities, which may
    /// be isolated.
    pub fn with_nodes(triplets: &[Triplet], extra: &[EntityId]) -> Self {
        let triplets: Vec<Triplet> = triplets
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let nodes: Vec<EntityId> = triplets
            .iter()
            .flat_map(|t| [t.head, t.tail])
            .chain(extra.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pos = |e: EntityId| nodes.binary_search(&e).expect("node present");
        let edges = triplets
            .iter()
            .map(|t| LocalEdge {
                head: pos(t.head),
                relation: t.relation,
                tail: pos(t.tail),
            })
            .collect();
        Self {
            nodes,
            triplets,
            edges,
        }
    }

    pub fn node_index(&self, e: EntityId) -> Option<usize> {
        self.nodes.binary_search(&e).ok()
    }

    /// `A[t][s] = 1/deg(t)` over the undirected neighbour multiset of `t`.
    pub fn node_adjacency<T: Real>(&self) -> Vec<T> {
        let n = self.nodes.len();
        let mut a = vec![T::zero(); n * n];
        let mut deg = vec![0usize; n];
        for e in &self.edges {
            deg[e.tail] += 1;
            deg[e.head] += 1;
        }
        for e in &self.edges {
            a[e.tail * n + e.head] += T::one() / T::lit(deg[e.tail] as f64);
            a[e.head * n + e.tail] += T::one() / T::lit(deg[e.head] as f64);
        }
        a
    }

    /// `B[i][j] = 1/|N(i)|` where `N(i)` holds the other triplets sharing an
    /// endpoint with triplet `i`.
    pub fn edge_adjacency<T: Real>(&self) -> Vec<T> {
        let m = self.edges.len();
        let mut b = vec![T::zero(); m * m];
        for i in 0..m {
            let ei = self.edges[i];
            let nbrs: Vec<usize> = (0..m)
                .filter(|&j| {
                    let ej = self.edges[j];
                    j != i
                        && (ej.head == ei.head
                            || ej.head == ei.tail
                            || ej.tail == ei.head
                            || ej.tail == ei.tail)
                })
                .collect();
            for &j in &nbrs {
                b[i * m + j] = T::one() / T::lit(nbrs.len() as f64);
            }
        }
        b
    }

    /// `A[t][e] = 1/in_deg(t)` for each directed edge `e` into `t`.
    pub fn incoming<T: Real>(&self) -> Vec<T> {
        let (n, m) = (self.nodes.len(), self.edges.len());
        let mut deg = vec![0usize; n];
        for e in &self.edges {
            deg[e.tail] += 1;
        }
        let mut a = vec![T::zero(); n * m];
        for (i, e) in self.edges.iter().enumerate() {
            a[e.tail * m + i] = T::one() / T::lit(deg[e.tail] as f64);
        }
        a
    }
}

/// Stack of `e ← ReLU(W·[e ∥ mean of neighbours] + b)` layers, shared by the
/// node- and edge-level passes.
#[derive(Clone, Debug)]
pub struct MessagePassing {
    pub layers: Vec<Linear>,
    pub width: usize,
}

impl MessagePassing {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| Linear::new(store, &format!("{name}.{l}"), 2 * width, width, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, width })
    }

    /// Runs every layer with row-normalized adjacency `adj` (`n × n`).
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, adj: Vec<T>) -> Result<Var> {
        let (n, w) = g.shape(x);
        if w != self.width || adj.len() != n * n {
            return Err(Error::shape(
                "message_passing",
                format!("{n}x{w} with adjacency of {}", adj.len()),
            ));
        }
        let a = g.constant_matrix(n, n, adj);
        let mut h = x;
        for layer in &self.layers {
            let agg = g.matmul(a, h)?;
            let cat = g.concat_cols(&[h, agg])?;
            let y = layer.forward(g, cat)?;
            h = g.relu(y);
        }
        Ok(h)
    }
}

/// Node-level pass; `x` has one row per `graph.nodes` entry.
pub fn gcn_node_pass<T: Real>(
    g: &mut Graph<'_, T>,
    gcn: &MessagePassing,
    graph: &LocalGraph,
    x: Var,
) -> Result<Var> {
    gcn.forward(g, x, graph.node_adjacency())
}

/// Edge-level pass; `x` has one row per `graph.edges` entry.
pub fn ehgnn_edge_pass<T: Real>(
    g: &mut Graph<'_, T>,
    ehgnn: &MessagePassing,
    graph: &LocalGraph,
    x: Var,
) -> Result<Var> {
    ehgnn.forward(g, x, graph.edge_adjacency())
}

/// One relation-aware layer. The message along `(h, r, t)` into `t` is
/// `W·(x_h − P·r)`; the update is `ReLU(S·x_t + b + mean of messages)`.
#[derive(Clone, Copy, Debug)]
pub struct Rgnn {
    pub message: Linear,
    pub relation_proj: Linear,
    pub self_loop: Linear,
}

impl Rgnn {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            message: Linear::new(store, &format!("{name}.msg"), width, width, false, rng)?,
            relation_proj: Linear::new(
                store,
                &format!("{name}.proj"),
                RELATION_WIDTH,
                width,
                false,
                rng,
            )?,
            self_loop: Linear::new(store, &format!("{name}.self"), width, width, true, rng)?,
        })
    }

    /// `x`: one row per node. `relations`: the full relation table
    /// (`R × RELATION_WIDTH`), indexed by relation id.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        graph: &LocalGraph,
        x: Var,
        relations: Var,
    ) -> Result<Var> {
        let n = graph.nodes.len();
        if g.shape(x).0 != n {
            return Err(Error::shape("rgnn", "one row per node expected"));
        }
        let own = self.self_loop.forward(g, x)?;
        if graph.edges.is_empty() {
            return Ok(g.relu(own));
        }
        let n_rel = g.shape(relations).0;
        if let Some(e) = graph.edges.iter().find(|e| e.relation as usize >= n_rel) {
            return Err(Error::Unknown {
                kind: "relation vector",
                name: e.relation.to_string(),
            });
        }
        let heads: Vec<usize> = graph.edges.iter().map(|e| e.head).collect();
        let rels: Vec<usize> = graph.edges.iter().map(|e| e.relation as usize).collect();
        let xh = g.gather_rows(x, &heads)?;
        let r = g.gather_rows(relations, &rels)?;
        let pr = self.relation_proj.forward(g, r)?;
        let diff = g.sub(xh, pr)?;
        let msg = self.message.forward(g, diff)?;
        let a = g.constant_matrix(n, graph.edges.len(), graph.incoming());
        let agg = g.matmul(a, msg)?;
        let pre = g.add(own, agg)?;
        Ok(g.relu(pre))
    }
}
