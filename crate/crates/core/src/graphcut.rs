//! Multi-label energy minimization on voxel adjacency graphs.
//!
//! Energies have the form `Σ_p data[p][l_p] + Σ_(p,q) pairwise[l_p][l_q]`
//! and are minimized with alpha-expansion, each move being an exact
//! s-t minimum cut.

use std::collections::{HashSet, VecDeque};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{neighbor_offsets, voxel_coord, voxel_index, Coord};

/// Residual capacities at or below this are treated as saturated.
const FLOW_EPS: f64 = 1e-12;

/// Largest labeling space [`brute_force_min`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// Nodes with undirected edges, each stored once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl GridGraph {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(edges.len());
        for &(u, v) in &edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::invalid(format!("edge ({u}, {v}) references a missing node")));
            }
            if u == v {
                return Err(Error::invalid(format!("self-loop at node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::invalid(format!("duplicate edge ({u}, {v})")));
            }
        }
        Ok(GridGraph { num_nodes, edges })
    }

    /// One node per `true` voxel, edges between 26-adjacent nodes. Returns
    /// the graph and the voxel index of each node.
    pub fn from_mask(res: usize, mask: &[bool]) -> (Self, Vec<usize>) {
        let voxels: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let mut node_of = vec![usize::MAX; mask.len()];
        for (n, &v) in voxels.iter().enumerate() {
            node_of[v] = n;
        }
        let forward: Vec<[isize; 3]> = neighbor_offsets()
            .filter(|o| (o[0], o[1], o[2]) > (0, 0, 0))
            .collect();
        let mut edges = Vec::new();
        for (n, &v) in voxels.iter().enumerate() {
            let c = voxel_coord(res, v);
            for o in &forward {
                let q: [isize; 3] = std::array::from_fn(|a| c[a] as isize + o[a]);
                if q.iter().any(|&x| x < 0 || x >= res as isize) {
                    continue;
                }
                let m = node_of[voxel_index(res, q.map(|x| x as usize))];
                if m != usize::MAX {
                    edges.push((n, m));
                }
            }
        }
        (
            GridGraph {
                num_nodes: voxels.len(),
                edges,
            },
            voxels,
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

/// Per-node label costs and a label-pair cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    num_labels: usize,
    data: Vec<f64>,
    pairwise: Vec<f64>,
}

impl EnergyModel {
    /// `data` is node-major `[nodes × labels]`, `pairwise` is `[labels × labels]`.
    /// Costs must be finite and nonnegative; the pairwise matrix symmetric
    /// with an exactly zero diagonal.
    pub fn new(num_labels: usize, data: Vec<f64>, pairwise: Vec<f64>) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::invalid("energy needs at least one label"));
        }
        if !data.len().is_multiple_of(num_labels) {
            return Err(Error::shape(
                "energy",
                format!("{} data costs are not a multiple of {num_labels} labels", data.len()),
            ));
        }
        if pairwise.len() != num_labels * num_labels {
            return Err(Error::shape(
                "energy",
                format!("pairwise matrix has {} entries for {num_labels} labels", pairwise.len()),
            ));
        }
        if data.iter().chain(&pairwise).any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid("costs must be finite and nonnegative"));
        }
        for a in 0..num_labels {
            if pairwise[a * num_labels + a] != 0.0 {
                return Err(Error::invalid(format!("pairwise diagonal at label {a} is nonzero")));
            }
            for b in 0..a {
                if pairwise[a * num_labels + b] != pairwise[b * num_labels + a] {
                    return Err(Error::invalid(format!("pairwise cost ({a}, {b}) is asymmetric")));
                }
            }
        }
        Ok(EnergyModel {
            num_labels,
            data,
            pairwise,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_nodes(&self) -> usize {
        self.data.len() / self.num_labels
    }

    #[inline]
    pub fn data(&self, node: usize, label: usize) -> f64 {
        self.data[node * self.num_labels + label]
    }

    #[inline]
    pub fn pairwise(&self, a: usize, b: usize) -> f64 {
        self.pairwise[a * self.num_labels + b]
    }

    pub fn pairwise_matrix(&self) -> &[f64] {
        &self.pairwise
    }

    /// Per-node cheapest label, ties to the lowest id.
    pub fn data_argmin(&self) -> Vec<usize> {
        self.data
            .chunks(self.num_labels)
            .map(|row| {
                let mut best = 0;
                for (l, &c) in row.iter().enumerate() {
                    if c < row[best] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }

    fn check(&self, g: &GridGraph) -> Result<()> {
        if self.num_nodes() != g.num_nodes {
            return Err(Error::shape(
                "energy",
                format!("{} data rows for {} nodes", self.num_nodes(), g.num_nodes),
            ));
        }
        Ok(())
    }
}

pub fn energy(g: &GridGraph, e: &EnergyModel, labels: &[usize]) -> f64 {
    let unary: f64 = labels.iter().enumerate().map(|(n, &l)| e.data(n, l)).sum();
    let pair: f64 = g.edges.iter().map(|&(u, v)| e.pairwise(labels[u], labels[v])).sum();
    unary + pair
}

/// Shortest-path closure of a symmetric cost matrix, which makes it satisfy
/// the triangle inequality. Returns the repaired matrix and whether any
/// entry changed.
pub fn metric_closure(num_labels: usize, pairwise: &[f64]) -> (Vec<f64>, bool) {
    let m = num_labels;
    let mut d = pairwise.to_vec();
    let mut changed = false;
    for k in 0..m {
        for i in 0..m {
            for j in 0..m {
                let via = d[i * m + k] + d[k * m + j];
                if via < d[i * m + j] {
                    d[i * m + j] = via;
                    changed = true;
                }
            }
        }
    }
    (d, changed)
}

pub fn is_metric(num_labels: usize, pairwise: &[f64]) -> bool {
    !metric_closure(num_labels, pairwise).1
}

#[derive(Clone, Debug)]
struct Arc {
    to: usize,
    cap: f64,
}

/// Directed flow network with a designated source and sink.
#[derive(Clone, Debug)]
pub struct FlowNetwork {
    source: usize,
    sink: usize,
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
}

/// Result of [`FlowNetwork::max_flow`].
#[derive(Clone, Debug, PartialEq)]
pub struct MinCut {
    pub value: f64,
    /// `true` for nodes on the source side of a minimum cut.
    pub source_side: Vec<bool>,
}

impl FlowNetwork {
    pub fn new(num_nodes: usize, source: usize, sink: usize) -> Result<Self> {
        if source >= num_nodes || sink >= num_nodes || source == sink {
            return Err(Error::invalid("source and sink must be distinct existing nodes"));
        }
        Ok(FlowNetwork {
            source,
            sink,
            arcs: Vec::new(),
            adj: vec![Vec::new(); num_nodes],
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn add_edge(&mut self, from: usize, to: usize, cap: f64) -> Result<()> {
        if !(cap >= 0.0) || !cap.is_finite() {
            return Err(Error::invalid(format!("capacity {cap} on edge {from}->{to}")));
        }
        if from >= self.adj.len() || to >= self.adj.len() {
            return Err(Error::invalid(format!("edge {from}->{to} references a missing node")));
        }
        self.adj[from].push(self.arcs.len());
        self.arcs.push(Arc { to, cap });
        self.adj[to].push(self.arcs.len());
        self.arcs.push(Arc { to: from, cap: 0.0 });
        Ok(())
    }

    fn levels(&self) -> Vec<usize> {
        let mut level = vec![usize::MAX; self.adj.len()];
        level[self.source] = 0;
        let mut q = VecDeque::from([self.source]);
        while let Some(u) = q.pop_front() {
            for &a in &self.adj[u] {
                let arc = &self.arcs[a];
                if arc.cap > FLOW_EPS && level[arc.to] == usize::MAX {
                    level[arc.to] = level[u] + 1;
                    q.push_back(arc.to);
                }
            }
        }
        level
    }

    fn augment(&mut self, u: usize, limit: f64, level: &[usize], next: &mut [usize]) -> f64 {
        if u == self.sink {
            return limit;
        }
        while next[u] < self.adj[u].len() {
            let a = self.adj[u][next[u]];
            let (to, cap) = (self.arcs[a].to, self.arcs[a].cap);
            if cap > FLOW_EPS && level[to] == level[u] + 1 {
                let pushed = self.augment(to, limit.min(cap), level, next);
                if pushed > 0.0 {
                    self.arcs[a].cap -= pushed;
                    self.arcs[a ^ 1].cap += pushed;
                    return pushed;
                }
            }
            next[u] += 1;
        }
        0.0
    }

    /// Maximum s-t flow by shortest augmenting paths (blocking flows per
    /// BFS level graph). Consumes the capacities; the returned cut is read
    /// off the final residual graph.
    pub fn max_flow(&mut self) -> MinCut {
        let mut value = 0.0;
        loop {
            let level = self.levels();
            if level[self.sink] == usize::MAX {
                return MinCut {
                    value,
                    source_side: level.iter().map(|&l| l != usize::MAX).collect(),
                };
            }
            let mut next = vec![0; self.adj.len()];
            loop {
                let f = self.augment(self.source, f64::INFINITY, &level, &mut next);
                if f <= 0.0 {
                    break;
                }
                value += f;
            }
        }
    }
}

/// Optimal single expansion of label `alpha` from `labels`, computed with
/// the standard binary-cut construction. `e` must be a metric energy for the
/// move to be exact; small violations are clamped.
pub fn expansion_move(g: &GridGraph, e: &EnergyModel, labels: &[usize], alpha: usize) -> Vec<usize> {
    let n = g.num_nodes;
    let (s, t) = (n, n + 1);
    let mut net = FlowNetwork::new(n + 2, s, t).expect("distinct terminals");
    // Coefficient of x_p, where x_p = 1 means "switch to alpha".
    let mut unary = vec![0.0; n];
    for p in 0..n {
        if labels[p] != alpha {
            unary[p] = e.data(p, alpha) - e.data(p, labels[p]);
        }
    }
    for &(p, q) in &g.edges {
        let (lp, lq) = (labels[p], labels[q]);
        match (lp == alpha, lq == alpha) {
            (true, true) => {}
            (false, true) => unary[p] -= e.pairwise(lp, alpha),
            (true, false) => unary[q] -= e.pairwise(alpha, lq),
            (false, false) => {
                let a = e.pairwise(lp, lq);
                let b = e.pairwise(lp, alpha);
                let c = e.pairwise(alpha, lq);
                unary[p] += c - a;
                unary[q] -= c;
                let w = (b + c - a).max(0.0);
                if w > 0.0 {
                    net.add_edge(p, q, w).expect("nonnegative");
                }
            }
        }
    }
    for (p, &u) in unary.iter().enumerate() {
        if u > 0.0 {
            net.add_edge(s, p, u).expect("nonnegative");
        } else if u < 0.0 {
            net.add_edge(p, t, -u).expect("nonnegative");
        }
    }
    let cut = net.max_flow();
    labels
        .iter()
        .enumerate()
        .map(|(p, &l)| if cut.source_side[p] { l } else { alpha })
        .collect()
}

/// Alpha-expansion from `init`, sweeping labels in increasing order until a
/// full sweep brings no strict decrease of the energy.
///
/// A non-metric pairwise matrix is replaced by its shortest-path closure for
/// constructing moves (with a warning); acceptance is always judged on the
/// original energy, so the result never exceeds `energy(init)`.
pub fn alpha_expansion(g: &GridGraph, e: &EnergyModel, init: &[usize]) -> Result<Vec<usize>> {
    e.check(g)?;
    if init.len() != g.num_nodes || init.iter().any(|&l| l >= e.num_labels) {
        return Err(Error::invalid("initial labeling does not match the energy"));
    }
    let m = e.num_labels;
    if m == 1 {
        return Ok(init.to_vec());
    }
    let (closed, changed) = metric_closure(m, &e.pairwise);
    let move_model = if changed {
        warn!("pairwise costs violate the triangle inequality; using their metric closure for moves");
        EnergyModel {
            num_labels: m,
            data: e.data.clone(),
            pairwise: closed,
        }
    } else {
        e.clone()
    };
    let mut labels = init.to_vec();
    let mut current = energy(g, e, &labels);
    loop {
        let mut improved = false;
        for alpha in 0..m {
            let cand = expansion_move(g, &move_model, &labels, alpha);
            let ce = energy(g, e, &cand);
            // Relative slack keeps rounding noise from cycling forever.
            if ce < current - 1e-12 * (1.0 + current.abs()) {
                labels = cand;
                current = ce;
                improved = true;
            }
        }
        if !improved {
            return Ok(labels);
        }
    }
}

/// Exhaustive global minimizer; ties go to the lexicographically smallest
/// labeling.
pub fn brute_force_min(g: &GridGraph, e: &EnergyModel) -> Result<Vec<usize>> {
    e.check(g)?;
    let (n, m) = (g.num_nodes, e.num_labels);
    let space = (m as u64).checked_pow(n as u32).filter(|&s| s <= BRUTE_FORCE_LIMIT);
    if space.is_none() {
        return Err(Error::invalid(format!(
            "{m}^{n} labelings exceed the enumeration limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    let mut cur = vec![0usize; n];
    let mut best = cur.clone();
    let mut best_e = energy(g, e, &cur);
    loop {
        // Odometer increment, last node fastest, so enumeration is
        // lexicographic.
        let mut k = n;
        loop {
            if k == 0 {
                return Ok(best);
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] < m {
                break;
            }
            cur[k] = 0;
        }
        let v = energy(g, e, &cur);
        if v < best_e {
            best_e = v;
            best = cur.clone();
        }
    }
}

/// A serialized problem instance, as accepted by the command-line solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphcutInstance {
    pub nodes: Vec<Coord>,
    pub edges: Vec<(usize, usize)>,
    pub data: Vec<Vec<f64>>,
    pub pairwise: Vec<Vec<f64>>,
}

impl GraphcutInstance {
    pub fn build(&self) -> Result<(GridGraph, EnergyModel)> {
        let m = self.pairwise.len();
        if self.data.len() != self.nodes.len() {
            return Err(Error::invalid(format!(
                "{} data rows for {} nodes",
                self.data.len(),
                self.nodes.len()
            )));
        }
        if self.data.iter().chain(&self.pairwise).any(|r| r.len() != m) {
            return Err(Error::invalid(format!("every cost row must have {m} entries")));
        }
        let g = GridGraph::new(self.nodes.len(), self.edges.clone())?;
        let e = EnergyModel::new(m, self.data.concat(), self.pairwise.concat())?;
        Ok((g, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_voxels() -> (GridGraph, EnergyModel) {
        let g = GridGraph::new(2, vec![(0, 1)]).unwrap();
        // Data cost 1 - p; smoothness 1 - f with f = 0.9.
        let e = EnergyModel::new(2, vec![0.1, 0.9, 0.6, 0.4], vec![0.0, 0.1, 0.1, 0.0]).unwrap();
        (g, e)
    }

    #[test]
    fn hand_instance() {
        let (g, e) = two_voxels();
        let best = brute_force_min(&g, &e).unwrap();
        assert_eq!(best, vec![0, 1]);
        assert!((energy(&g, &e, &best) - 0.6).abs() < 1e-12);
        let l = alpha_expansion(&g, &e, &e.data_argmin()).unwrap();
        assert_eq!(l, vec![0, 1]);
    }

    #[test]
    fn single_edge_and_parallel_paths() {
        let mut n = FlowNetwork::new(2, 0, 1).unwrap();
        n.add_edge(0, 1, 5.0).unwrap();
        assert_eq!(n.max_flow().value, 5.0);
        let mut n = FlowNetwork::new(4, 0, 3).unwrap();
        for (u, v, c) in [(0, 1, 2.0), (1, 3, 2.0), (0, 2, 3.0), (2, 3, 3.0)] {
            n.add_edge(u, v, c).unwrap();
        }
        let cut = n.max_flow();
        assert_eq!(cut.value, 5.0);
        assert!(cut.source_side[0] && !cut.source_side[3]);
        assert!(n.add_edge(0, 1, -1.0).is_err());
    }

    #[test]
    fn energy_terms() {
        let g = GridGraph::new(1, vec![]).unwrap();
        let e = EnergyModel::new(2, vec![0.3, 0.5], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(energy(&g, &e, &[0]), 0.3);
        let g = GridGraph::new(2, vec![(0, 1)]).unwrap();
        let e = EnergyModel::new(2, vec![0.0; 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(energy(&g, &e, &[1, 1]), 0.0);
    }

    #[test]
    fn single_label_returns_init() {
        let g = GridGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let e = EnergyModel::new(1, vec![0.5; 3], vec![0.0]).unwrap();
        assert_eq!(alpha_expansion(&g, &e, &[0, 0, 0]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn zero_pairwise_gives_argmin() {
        let g = GridGraph::new(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
        let data = vec![0.5, 0.2, 0.9, 0.1, 0.8, 0.3, 0.7, 0.6, 0.0];
        let e = EnergyModel::new(3, data, vec![0.0; 9]).unwrap();
        let init = vec![0, 0, 0];
        assert_eq!(alpha_expansion(&g, &e, &init).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn graph_validation() {
        assert!(GridGraph::new(2, vec![(0, 0)]).is_err());
        assert!(GridGraph::new(2, vec![(0, 1), (1, 0)]).is_err());
        assert!(EnergyModel::new(2, vec![0.0; 2], vec![0.0, 1.0, 0.5, 0.0]).is_err());
        assert!(EnergyModel::new(2, vec![0.0; 2], vec![0.1, 1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn closure_repairs_triangle_violations() {
        let p = vec![0.0, 1.0, 0.1, 1.0, 0.0, 0.1, 0.1, 0.1, 0.0];
        assert!(!is_metric(3, &p));
        let (d, changed) = metric_closure(3, &p);
        assert!(changed);
        assert!((d[1] - 0.2).abs() < 1e-12);
        assert!(is_metric(3, &d));
    }

    #[test]
    fn mask_graph_uses_26_connectivity() {
        let mut m = vec![false; 27];
        for c in [[0, 0, 0], [1, 1, 1], [2, 2, 2], [0, 2, 0]] {
            m[voxel_index(3, c)] = true;
        }
        let (g, nodes) = GridGraph::from_mask(3, &m);
        assert_eq!(nodes.len(), 4);
        assert_eq!(g.edges().len(), 3);
    }
}
