//! Per-behavior bipartite interaction graphs, their set algebra, and the
//! symmetric-normalized weighted adjacency used for propagation.
//!
//! Node rows in every embedding matrix are laid out users first, then items:
//! user `u` is row `u`, item `v` is row `num_users + v`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diff::DenseMatrix;
use crate::error::{HgibError, Result};
use crate::scalar::Scalar;

/// Weighted degrees below this are treated as zero.
pub const DEGREE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSchema {
    names: Vec<String>,
    target_index: usize,
}

impl BehaviorSchema {
    pub fn new(names: Vec<String>, target_index: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(HgibError::InvalidArgument("behavior list is empty".into()));
        }
        let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if unique.len() != names.len() {
            return Err(HgibError::InvalidArgument(format!(
                "behavior names are not unique: {names:?}"
            )));
        }
        if target_index >= names.len() {
            return Err(HgibError::InvalidArgument(format!(
                "target index {target_index} out of range for {} behaviors",
                names.len()
            )));
        }
        Ok(Self { names, target_index })
    }

    /// Builds a schema from names and the target behavior's name.
    pub fn with_target(names: Vec<String>, target: &str) -> Result<Self> {
        let idx = names.iter().position(|n| n == target).ok_or_else(|| {
            HgibError::InvalidArgument(format!("target behavior {target:?} not in {names:?}"))
        })?;
        Self::new(names, idx)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_name(&self) -> &str {
        &self.names[self.target_index]
    }

    /// Indices of the auxiliary (non-target) behaviors, in schema order.
    pub fn auxiliary(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.names.len()).filter(move |&b| b != self.target_index)
    }
}

/// Deduplicated bipartite edge set with adjacency indexes in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
}

impl InteractionGraph {
    /// Builds a graph from raw pairs. Duplicates are removed and edges are
    /// stored sorted by `(user, item)`.
    pub fn build(
        num_users: usize,
        num_items: usize,
        raw_pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in raw_pairs {
            if u >= num_users || v >= num_items {
                return Err(HgibError::OutOfRange(format!(
                    "edge ({u}, {v}) outside {num_users} users x {num_items} items"
                )));
            }
            set.insert((u, v));
        }
        Ok(Self::from_sorted_unique(num_users, num_items, set.into_iter().collect()))
    }

    pub fn empty(num_users: usize, num_items: usize) -> Self {
        Self::from_sorted_unique(num_users, num_items, Vec::new())
    }

    fn from_sorted_unique(num_users: usize, num_items: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for &(u, v) in &edges {
            user_adj[u].push(v);
            item_adj[v].push(u);
        }
        // edges are sorted by (u, v), so users were pushed to item_adj in order
        Self { num_users, num_items, edges, user_adj, item_adj }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        &self.user_adj[u]
    }

    pub fn item_neighbors(&self, v: usize) -> &[usize] {
        &self.item_adj[v]
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        u < self.num_users && self.user_adj[u].binary_search(&v).is_ok()
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.num_users != other.num_users || self.num_items != other.num_items {
            return Err(HgibError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.num_users, self.num_items, other.num_users, other.num_items
            )));
        }
        Ok(())
    }

    /// Edges present in both graphs.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let edges = merge_sorted(&self.edges, &other.edges, |a, b| a && b);
        Ok(Self::from_sorted_unique(self.num_users, self.num_items, edges))
    }

    /// Edges of `self` absent from `other`.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let edges = merge_sorted(&self.edges, &other.edges, |a, b| a && !b);
        Ok(Self::from_sorted_unique(self.num_users, self.num_items, edges))
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let edges = merge_sorted(&self.edges, &other.edges, |a, b| a || b);
        Ok(Self::from_sorted_unique(self.num_users, self.num_items, edges))
    }
}

/// Walks two sorted edge lists and keeps an edge when `keep(in_a, in_b)`.
fn merge_sorted(
    a: &[(usize, usize)],
    b: &[(usize, usize)],
    keep: impl Fn(bool, bool) -> bool,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let (edge, in_a, in_b) = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x == y => {
                i += 1;
                j += 1;
                (*x, true, true)
            }
            (Some(x), Some(y)) if x < y => {
                i += 1;
                (*x, true, false)
            }
            (Some(_), Some(y)) => {
                j += 1;
                (*y, false, true)
            }
            (Some(x), None) => {
                i += 1;
                (*x, true, false)
            }
            (None, Some(y)) => {
                j += 1;
                (*y, false, true)
            }
            (None, None) => unreachable!(),
        };
        if keep(in_a, in_b) {
            out.push(edge);
        }
    }
    out
}

/// Union of any number of graphs sharing dimensions.
pub fn union_graphs<'a>(graphs: impl IntoIterator<Item = &'a InteractionGraph>) -> Result<InteractionGraph> {
    let mut iter = graphs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| HgibError::InvalidArgument("union of zero graphs".into()))?;
    iter.try_fold(first.clone(), |acc, g| acc.union(g))
}

pub fn intersect_graphs(g1: &InteractionGraph, g2: &InteractionGraph) -> Result<InteractionGraph> {
    g1.intersect(g2)
}

pub fn difference_graphs(g1: &InteractionGraph, g2: &InteractionGraph) -> Result<InteractionGraph> {
    g1.difference(g2)
}

/// Edge weights with their symmetric normalization coefficients
/// `w / sqrt(deg_w(u) * deg_w(v))`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAdjacency<T> {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<T>,
    norm_coeffs: Vec<T>,
    user_degree: Vec<T>,
    item_degree: Vec<T>,
}

pub fn normalized_adjacency<T: Scalar>(
    graph: &InteractionGraph,
    edge_weights: &[T],
) -> Result<WeightedAdjacency<T>> {
    WeightedAdjacency::new(graph, edge_weights)
}

impl<T: Scalar> WeightedAdjacency<T> {
    pub fn new(graph: &InteractionGraph, edge_weights: &[T]) -> Result<Self> {
        if edge_weights.len() != graph.num_edges() {
            return Err(HgibError::shape(
                "normalized_adjacency",
                format!("{} weights for {} edges", edge_weights.len(), graph.num_edges()),
            ));
        }
        if let Some(w) = edge_weights.iter().find(|w| !(**w >= T::zero())) {
            return Err(HgibError::InvalidArgument(format!(
                "edge weights must be nonnegative, got {w}"
            )));
        }
        let mut user_degree = vec![T::zero(); graph.num_users()];
        let mut item_degree = vec![T::zero(); graph.num_items()];
        for (&(u, v), &w) in graph.edges().iter().zip(edge_weights) {
            user_degree[u] += w;
            item_degree[v] += w;
        }
        let eps = T::of(DEGREE_EPS);
        let norm_coeffs = graph
            .edges()
            .iter()
            .zip(edge_weights)
            .map(|(&(u, v), &w)| {
                let (du, dv) = (user_degree[u], item_degree[v]);
                if du < eps || dv < eps || w == T::zero() {
                    T::zero()
                } else {
                    w / (du * dv).sqrt()
                }
            })
            .collect();
        Ok(Self {
            num_users: graph.num_users(),
            num_items: graph.num_items(),
            edges: graph.edges().to_vec(),
            weights: edge_weights.to_vec(),
            norm_coeffs,
            user_degree,
            item_degree,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn norm_coeffs(&self) -> &[T] {
        &self.norm_coeffs
    }

    pub fn user_degree(&self) -> &[T] {
        &self.user_degree
    }

    pub fn item_degree(&self) -> &[T] {
        &self.item_degree
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// One propagation step: every node receives the coefficient-weighted
    /// sum of its neighbors' rows. The operator is symmetric.
    pub fn propagate(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if x.rows() != self.num_nodes() {
            return Err(HgibError::shape(
                "sparse_propagate",
                format!("matrix has {} rows, graph has {} nodes", x.rows(), self.num_nodes()),
            ));
        }
        let d = x.cols();
        let mut out = DenseMatrix::zeros(x.rows(), d);
        for (&(u, v), &c) in self.edges.iter().zip(&self.norm_coeffs) {
            if c == T::zero() {
                continue;
            }
            let vi = self.num_users + v;
            for k in 0..d {
                let xu = x.get(u, k);
                let xv = x.get(vi, k);
                *out.get_mut(u, k) += c * xv;
                *out.get_mut(vi, k) += c * xu;
            }
        }
        Ok(out)
    }
}
