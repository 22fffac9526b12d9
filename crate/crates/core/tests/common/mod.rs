#![allow(dead_code)]

use nmm::graph::random_graph;
use nmm::rng::seeded;
use nmm::{Graph, LabeledNodes, NeighborAssignment, NmmParams};
use rand::Rng;

/// Random graph on `n` nodes with |n(i)| ≤ `max_hood`, α entries in
/// (0.2, 5) and strictly positive random attention.
pub fn random_instance(seed: u64, n: usize, c: usize, max_hood: usize) -> (Graph, NmmParams) {
    let mut rng = seeded(seed);
    let g = random_graph(n, 0.6, max_hood - 1, &mut rng);
    let alpha: Vec<f64> = (0..n * c).map(|_| rng.random_range(0.2..5.0)).collect();
    let mut attn = Vec::with_capacity(g.hood_len());
    for i in 0..n {
        let w: Vec<f64> = (0..g.neighborhood(i).unwrap().len())
            .map(|_| rng.random_range(0.05..1.0))
            .collect();
        let s: f64 = w.iter().sum();
        attn.extend(w.iter().map(|x| x / s));
    }
    let p = NmmParams::new(&g, c, alpha, attn).unwrap();
    (g, p)
}

/// Every vector in {0..c}^n, last position fastest.
pub fn all_labelings(n: usize, c: usize) -> Vec<Vec<usize>> {
    let total = c.pow(n as u32);
    (0..total)
        .map(|mut k| {
            let mut v = vec![0; n];
            for slot in v.iter_mut().rev() {
                *slot = k % c;
                k /= c;
            }
            v
        })
        .collect()
}

/// Every c ∈ Π_{i∈nodes} n(i).
pub fn all_assignments(g: &Graph, nodes: &[usize]) -> Vec<NeighborAssignment> {
    let mut out = vec![Vec::new()];
    for &i in nodes {
        let hood = g.neighborhood(i).unwrap();
        out = out
            .into_iter()
            .flat_map(|prefix| {
                hood.iter().map(move |&j| {
                    let mut v = prefix.clone();
                    v.push(j);
                    v
                })
            })
            .collect();
    }
    out.into_iter().map(NeighborAssignment).collect()
}

pub fn labeled(g: &Graph, nodes: &[usize], labels: &[usize], c: usize) -> LabeledNodes {
    LabeledNodes::new(nodes.to_vec(), labels.to_vec(), g.num_nodes(), c).unwrap()
}

/// The graph with one edge 1–2 and an isolated node 0, uniform α = (1, 1)
/// and uniform attention.
pub fn two_node() -> (Graph, NmmParams) {
    let g = Graph::from_edges(3, &[(1, 2)]).unwrap();
    let p = NmmParams::uniform(&g, &[1.0, 1.0]).unwrap();
    (g, p)
}
