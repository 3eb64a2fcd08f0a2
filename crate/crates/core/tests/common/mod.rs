//! Independent oracles shared by integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod gmm;
pub mod gradcheck;
pub mod triplet;

use funcnet::graphcut::{EnergyModel, GridGraph};
use rand::seq::SliceRandom;
use rand::Rng;

/// A directed network as (nodes, source, sink, edges).
pub struct RandomNetwork {
    pub nodes: usize,
    pub source: usize,
    pub sink: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

pub fn random_network(rng: &mut impl Rng, max_nodes: usize) -> RandomNetwork {
    let nodes = rng.gen_range(2..=max_nodes);
    let density = rng.gen_range(0.2..0.7);
    let mut edges = Vec::new();
    for u in 0..nodes {
        for v in 0..nodes {
            if u != v && rng.gen_bool(density) {
                // Mix integral and fractional capacities.
                let cap = if rng.gen_bool(0.5) {
                    rng.gen_range(0..10) as f64
                } else {
                    rng.gen_range(0.0..5.0)
                };
                edges.push((u, v, cap));
            }
        }
    }
    RandomNetwork {
        nodes,
        source: 0,
        sink: nodes - 1,
        edges,
    }
}

/// Minimum s-t cut capacity by enumerating every partition.
pub fn brute_force_cut(net: &RandomNetwork) -> f64 {
    let inner: Vec<usize> = (0..net.nodes)
        .filter(|&v| v != net.source && v != net.sink)
        .collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << inner.len()) {
        let mut side = vec![false; net.nodes];
        side[net.source] = true;
        for (bit, &v) in inner.iter().enumerate() {
            side[v] = mask >> bit & 1 == 1;
        }
        let cut: f64 = net
            .edges
            .iter()
            .filter(|&&(u, v, _)| side[u] && !side[v])
            .map(|&(_, _, c)| c)
            .sum();
        best = best.min(cut);
    }
    best
}

/// Random connected-ish subset of the 3×3×3 cube with random data costs and a
/// metric pairwise matrix (off-diagonal entries in [0.5, 1]).
pub fn random_cube_instance(rng: &mut impl Rng, labels: usize, nodes: usize) -> (GridGraph, EnergyModel) {
    let mut cells: Vec<usize> = (0..27).collect();
    cells.shuffle(rng);
    let mut mask = vec![false; 27];
    for &c in &cells[..nodes] {
        mask[c] = true;
    }
    let (g, _) = GridGraph::from_mask(3, &mask);
    let data: Vec<f64> = (0..nodes * labels).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut pairwise = vec![0.0; labels * labels];
    for a in 0..labels {
        for b in 0..a {
            let v = rng.gen_range(0.5..1.0);
            pairwise[a * labels + b] = v;
            pairwise[b * labels + a] = v;
        }
    }
    (g, EnergyModel::new(labels, data, pairwise).unwrap())
}

/// Direct mixture density, summed term by term in f64.
pub fn naive_gmm_nll(logw: &[f64], mu: &[f64], sigma: &[f64], f: &[f64]) -> f64 {
    let d = f.len();
    let mut density = 0.0;
    for k in 0..logw.len() {
        let mut p = logw[k].exp();
        for j in 0..d {
            let s = sigma[k * d + j];
            let z = (f[j] - mu[k * d + j]) / s;
            p *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        }
        density += p;
    }
    -density.ln()
}
