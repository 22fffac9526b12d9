//! The autoregressive variational distribution q(c_τ | y_τ, α, L).
//!
//! Nodes are visited in a uniformly random order. Each c_i is drawn from the
//! exact model conditional given the nodes already visited, which needs only
//! the running counts:
//!
//! ```text
//! q(c_i = j | ·) ∝ L_ij (α_{j,y_i} + s_{j,y_i}) / (α_{j,0} + s_{j,0}),   j ∈ n(i)
//! ```
//!
//! q reuses (α, L) and has no parameters of its own. The same increment,
//! before normalization, is the change in ln p(y, c), so each draw carries
//! its exact log q and log joint for free.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{NmmError, Result};
use crate::graph::Graph;
use crate::kernel::{assignment_count, sample_index, CountTable, EnumBudget, LabeledNodes, NeighborAssignment, NmmParams};
use crate::rng::stream;

/// One draw of c_τ together with its visit order and running state.
#[derive(Debug, Clone)]
pub struct QSample {
    /// Visited nodes in visit order (the permutation π).
    pub order: Vec<usize>,
    /// Labels aligned with `order`.
    pub labels: Vec<usize>,
    /// Chosen neighbors aligned with `order`.
    pub choices: Vec<usize>,
    /// Σ ln q(c_i | ·) over visited nodes.
    pub log_q: f64,
    /// ln p(y, c) over visited nodes.
    pub log_joint: f64,
    pub counts: CountTable,
    visited: Vec<bool>,
}

impl QSample {
    pub fn empty(num_nodes: usize, num_classes: usize) -> Self {
        QSample {
            order: Vec::new(),
            labels: Vec::new(),
            choices: Vec::new(),
            log_q: 0.0,
            log_joint: 0.0,
            counts: CountTable::new(num_nodes, num_classes),
            visited: vec![false; num_nodes],
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.visited.get(i).copied().unwrap_or(false)
    }

    /// ln p(y, c) − ln q(c | y): the per-sample ELBO term and the log
    /// importance weight of this draw.
    pub fn log_weight(&self) -> f64 {
        self.log_joint - self.log_q
    }

    /// Visited labels in visit order.
    pub fn labeled(&self) -> LabeledNodes {
        LabeledNodes::new(
            self.order.clone(),
            self.labels.clone(),
            self.visited.len(),
            usize::MAX,
        )
        .expect("sample nodes are distinct")
    }

    pub fn assignment(&self) -> NeighborAssignment {
        NeighborAssignment(self.choices.clone())
    }

    /// The choice for each node of `y`, in `y`'s order.
    pub fn assignment_for(&self, y: &LabeledNodes) -> Option<NeighborAssignment> {
        let mut pos = vec![usize::MAX; self.visited.len()];
        for (k, &i) in self.order.iter().enumerate() {
            pos[i] = k;
        }
        y.nodes()
            .iter()
            .map(|&i| match pos.get(i) {
                Some(&k) if k != usize::MAX => Some(self.choices[k]),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(NeighborAssignment)
    }

    fn step<R: Rng + ?Sized>(
        &mut self,
        g: &Graph,
        p: &NmmParams,
        i: usize,
        yi: usize,
        buf: &mut Vec<f64>,
        rng: &mut R,
    ) -> Result<()> {
        let lse = log_weights_into(g, p, &self.counts, i, yi, buf)?;
        let probs: Vec<f64> = buf.iter().map(|&w| (w - lse).exp()).collect();
        let pos = sample_index(&probs, rng);
        let j = g.hood(i)[pos];
        self.log_q += buf[pos] - lse;
        self.log_joint += buf[pos];
        self.counts.add(j, yi);
        self.order.push(i);
        self.labels.push(yi);
        self.choices.push(j);
        self.visited[i] = true;
        Ok(())
    }
}

/// Unnormalized log weights over n(i); returns their log-sum-exp.
fn log_weights_into(
    g: &Graph,
    p: &NmmParams,
    counts: &CountTable,
    i: usize,
    yi: usize,
    buf: &mut Vec<f64>,
) -> Result<f64> {
    buf.clear();
    let mut max = f64::NEG_INFINITY;
    for (&j, &l) in g.hood(i).iter().zip(p.attn(i)) {
        let w = if l > 0.0 {
            l.ln() + (p.alpha(j)[yi] + counts.count(j, yi) as f64).ln()
                - (p.alpha_total(j) + counts.total(j) as f64).ln()
        } else {
            f64::NEG_INFINITY
        };
        max = max.max(w);
        buf.push(w);
    }
    if max == f64::NEG_INFINITY {
        return Err(NmmError::DegenerateAttention(i));
    }
    let s: f64 = buf.iter().map(|&w| (w - max).exp()).sum();
    Ok(max + s.ln())
}

/// q(c_i = · | y_i, visited state), aligned with n(i).
pub fn q_conditional(g: &Graph, p: &NmmParams, counts: &CountTable, i: usize, yi: usize) -> Result<Vec<f64>> {
    g.check_node(i)?;
    if yi >= p.num_classes() {
        return Err(NmmError::InvalidArgument(format!("label {yi} out of range")));
    }
    let mut buf = Vec::new();
    let lse = log_weights_into(g, p, counts, i, yi, &mut buf)?;
    Ok(buf.iter().map(|&w| (w - lse).exp()).collect())
}

fn check_labels(g: &Graph, p: &NmmParams, y: &LabeledNodes) -> Result<()> {
    p.check_graph(g)?;
    for (i, yi) in y.iter() {
        g.check_node(i)?;
        if yi >= p.num_classes() {
            return Err(NmmError::InvalidArgument(format!("label {yi} of node {i} out of range")));
        }
    }
    Ok(())
}

/// Draws a uniform permutation of τ and then c along it.
pub fn sample_q<R: Rng + ?Sized>(g: &Graph, p: &NmmParams, y: &LabeledNodes, rng: &mut R) -> Result<QSample> {
    check_labels(g, p, y)?;
    let mut perm: Vec<usize> = (0..y.len()).collect();
    perm.shuffle(rng);
    let mut sample = QSample::empty(g.num_nodes(), p.num_classes());
    let mut buf = Vec::with_capacity(g.max_degree());
    for k in perm {
        sample.step(g, p, y.nodes()[k], y.labels()[k], &mut buf, rng)?;
    }
    Ok(sample)
}

/// Adds node `i` with label `yi` to an existing draw.
pub fn extend_sample<R: Rng + ?Sized>(
    g: &Graph,
    p: &NmmParams,
    mut sample: QSample,
    i: usize,
    yi: usize,
    rng: &mut R,
) -> Result<QSample> {
    extend_in_place(g, p, &mut sample, i, yi, rng)?;
    Ok(sample)
}

pub fn extend_in_place<R: Rng + ?Sized>(
    g: &Graph,
    p: &NmmParams,
    sample: &mut QSample,
    i: usize,
    yi: usize,
    rng: &mut R,
) -> Result<()> {
    g.check_node(i)?;
    if sample.contains(i) {
        return Err(NmmError::DuplicateNode(i));
    }
    if yi >= p.num_classes() {
        return Err(NmmError::InvalidArgument(format!("label {yi} out of range")));
    }
    let mut buf = Vec::with_capacity(g.max_degree());
    sample.step(g, p, i, yi, &mut buf, rng)
}

/// Monte Carlo ELBO with the per-sample terms ln p − ln q.
#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub per_sample: Vec<f64>,
}

impl ElboEstimate {
    pub fn std_error(&self) -> f64 {
        let t = self.per_sample.len() as f64;
        if t < 2.0 {
            return 0.0;
        }
        let var = self.per_sample.iter().map(|f| (f - self.elbo).powi(2)).sum::<f64>() / (t - 1.0);
        (var / t).sqrt()
    }
}

/// (1/T) Σ_t [ln p(y, c_t) − ln q(c_t | y)], each draw on its own stream.
pub fn elbo_estimate(g: &Graph, p: &NmmParams, y: &LabeledNodes, num_samples: usize, seed: u64) -> Result<ElboEstimate> {
    if num_samples == 0 {
        return Err(NmmError::InvalidArgument("need at least one sample".into()));
    }
    let per_sample = (0..num_samples)
        .map(|t| sample_q(g, p, y, &mut stream(seed, t as u64)).map(|s| s.log_weight()))
        .collect::<Result<Vec<_>>>()?;
    let elbo = per_sample.iter().sum::<f64>() / num_samples as f64;
    Ok(ElboEstimate { elbo, per_sample })
}

/// ln q(c | y) for a given assignment and visit order. `order` indexes into
/// `y`. Returns (ln q, ln p(y, c)).
pub fn log_q_eval(
    g: &Graph,
    p: &NmmParams,
    y: &LabeledNodes,
    c: &NeighborAssignment,
    order: &[usize],
) -> Result<(f64, f64)> {
    c.validate(g, y)?;
    if order.len() != y.len() {
        return Err(NmmError::InvalidArgument("order does not cover τ".into()));
    }
    let mut counts = CountTable::new(g.num_nodes(), p.num_classes());
    let mut buf = Vec::with_capacity(g.max_degree());
    let (mut lq, mut lj) = (0.0, 0.0);
    for &k in order {
        let (i, yi, j) = (y.nodes()[k], y.labels()[k], c.choices()[k]);
        let lse = log_weights_into(g, p, &counts, i, yi, &mut buf)?;
        let pos = g.hood_position(i, j).expect("validated");
        lq += buf[pos] - lse;
        lj += buf[pos];
        counts.add(j, yi);
    }
    Ok((lq, lj))
}

/// Steps to the next lexicographic permutation; false after the last one.
pub fn next_permutation(xs: &mut [usize]) -> bool {
    if xs.len() < 2 {
        return false;
    }
    let Some(k) = (0..xs.len() - 1).rev().find(|&k| xs[k] < xs[k + 1]) else {
        return false;
    };
    let l = (k + 1..xs.len()).rev().find(|&l| xs[k] < xs[l]).unwrap();
    xs.swap(k, l);
    xs[k + 1..].reverse();
    true
}

/// E_π E_{q_π}[ln p(y, c) − ln q_π(c | y)] by enumerating every visit order
/// and every assignment. Only for tiny τ.
pub fn exact_bound(g: &Graph, p: &NmmParams, y: &LabeledNodes, budget: EnumBudget) -> Result<f64> {
    check_labels(g, p, y)?;
    let n = y.len();
    let perms: f64 = (1..=n).map(|k| k as f64).product();
    budget.check(perms * assignment_count(g, y.nodes()), n)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut counts = CountTable::new(g.num_nodes(), p.num_classes());
    loop {
        counts.clear();
        total += bound_for_order(g, p, y, &order, 0, 0.0, 0.0, &mut counts)?;
        count += 1;
        if !next_permutation(&mut order) {
            break;
        }
    }
    Ok(total / count as f64)
}

/// Σ_c q(c)·(ln p − ln q) for one fixed order, depth first.
#[allow(clippy::too_many_arguments)]
fn bound_for_order(
    g: &Graph,
    p: &NmmParams,
    y: &LabeledNodes,
    order: &[usize],
    depth: usize,
    lq: f64,
    lj: f64,
    counts: &mut CountTable,
) -> Result<f64> {
    if depth == order.len() {
        return Ok(lq.exp() * (lj - lq));
    }
    let k = order[depth];
    let (i, yi) = (y.nodes()[k], y.labels()[k]);
    let mut buf = Vec::new();
    let lse = log_weights_into(g, p, counts, i, yi, &mut buf)?;
    let mut acc = 0.0;
    for (pos, &j) in g.hood(i).iter().enumerate() {
        if buf[pos] == f64::NEG_INFINITY {
            continue;
        }
        counts.add(j, yi);
        acc += bound_for_order(g, p, y, order, depth + 1, lq + buf[pos] - lse, lj + buf[pos], counts)?;
        counts.remove(j, yi);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{exact_marginal, log_joint, suff_stats};
    use crate::rng::seeded;

    fn two_node() -> (Graph, NmmParams) {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let p = NmmParams::uniform(&g, &[1.0, 1.0]).unwrap();
        (g, p)
    }

    #[test]
    fn conditional_examples() {
        let (g, p) = two_node();
        let counts = CountTable::new(2, 2);
        let q = q_conditional(&g, &p, &counts, 0, 0).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);

        // node 0 chose itself with label 0; now node 1 with label 0
        let mut counts = CountTable::new(2, 2);
        counts.add(0, 0);
        let q = q_conditional(&g, &p, &counts, 1, 0).unwrap();
        assert!((q[0] - 4.0 / 7.0).abs() < 1e-12);
        assert!((q[1] - 3.0 / 7.0).abs() < 1e-12);

        // the same ratio from two full joints
        let y = LabeledNodes::new(vec![0, 1], vec![0, 0], 2, 2).unwrap();
        let a = log_joint(&g, &p, &y, &NeighborAssignment(vec![0, 0])).unwrap();
        let b = log_joint(&g, &p, &y, &NeighborAssignment(vec![0, 1])).unwrap();
        assert!((1.0 / (1.0 + (b - a).exp()) - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_attention_is_deterministic() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let p = NmmParams::independent(&g, 2, vec![1.0, 2.0, 3.0, 1.0, 0.5, 0.5]).unwrap();
        let counts = CountTable::new(3, 2);
        assert_eq!(q_conditional(&g, &p, &counts, 1, 0).unwrap(), vec![0.0, 1.0, 0.0]);
        let y = LabeledNodes::new(vec![0, 1, 2], vec![1, 0, 1], 3, 2).unwrap();
        let s = sample_q(&g, &p, &y, &mut seeded(1)).unwrap();
        assert_eq!(s.assignment_for(&y).unwrap().0, vec![0, 1, 2]);
        assert_eq!(s.log_q, 0.0);
        let est = elbo_estimate(&g, &p, &y, 5, 3).unwrap();
        let closed: f64 = [(0, 1), (1, 0), (2, 1)]
            .iter()
            .map(|&(i, k)| (p.alpha(i)[k] / p.alpha_total(i)).ln())
            .sum();
        assert!(est.per_sample.iter().all(|f| (f - closed).abs() < 1e-12));
        assert_eq!(est.std_error(), 0.0);
    }

    #[test]
    fn degenerate_attention_is_an_error() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let mut p = NmmParams::independent(&g, 2, vec![1.0; 4]).unwrap();
        // zero out the only feasible weight by rebuilding with a bad row
        let attn = vec![0.0, 1.0, 0.0, 1.0];
        p = NmmParams::new(&g, 2, p.alpha_flat().to_vec(), attn).unwrap();
        let mut counts = CountTable::new(2, 2);
        counts.add(1, 0);
        assert!(q_conditional(&g, &p, &counts, 0, 0).is_ok());
        let zero = NmmParams::new(&g, 2, vec![1.0; 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(q_conditional(&g, &zero, &counts, 1, 0).is_ok());
    }

    #[test]
    fn empty_and_single_node_sets() {
        let (g, p) = two_node();
        let est = elbo_estimate(&g, &p, &LabeledNodes::empty(), 3, 0).unwrap();
        assert_eq!(est.elbo, 0.0);
        assert!(elbo_estimate(&g, &p, &LabeledNodes::empty(), 0, 0).is_err());
        let y = LabeledNodes::new(vec![1], vec![0], 2, 2).unwrap();
        let bound = exact_bound(&g, &p, &y, EnumBudget::default()).unwrap();
        assert!((bound - exact_marginal(&g, &p, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn extension_matches_fresh_sample_and_recomputation() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 2)]).unwrap();
        let p = NmmParams::new(
            &g,
            2,
            vec![0.5, 1.5, 2.0, 1.0, 1.0, 3.0, 0.7, 0.7],
            vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1, 0.25, 0.25, 0.25, 0.25, 0.9, 0.1],
        )
        .unwrap();
        let s0 = extend_sample(&g, &p, QSample::empty(4, 2), 2, 1, &mut seeded(3)).unwrap();
        let y2 = LabeledNodes::new(vec![2], vec![1], 4, 2).unwrap();
        let s1 = sample_q(&g, &p, &y2, &mut seeded(3)).unwrap();
        // a one-node permutation consumes no randomness
        assert_eq!(s0.choices, s1.choices);
        assert_eq!(s0.log_q, s1.log_q);

        let y = LabeledNodes::new(vec![0, 3], vec![0, 1], 4, 2).unwrap();
        let mut s = sample_q(&g, &p, &y, &mut seeded(9)).unwrap();
        let mut rng = seeded(10);
        for (i, k) in [(1, 1), (2, 0)] {
            s = extend_sample(&g, &p, s, i, k, &mut rng).unwrap();
        }
        assert!(extend_sample(&g, &p, s.clone(), 1, 0, &mut rng).is_err());
        let all = s.labeled();
        let c = s.assignment();
        let recomputed = log_joint(&g, &p, &all, &c).unwrap();
        assert!((recomputed - s.log_joint).abs() < 1e-10);
        let fresh = suff_stats(4, 2, &all, &c).unwrap();
        assert_eq!(fresh.to_map(), s.counts.to_map());
        let order: Vec<usize> = (0..all.len()).collect();
        let (lq, lj) = log_q_eval(&g, &p, &all, &c, &order).unwrap();
        assert!((lq - s.log_q).abs() < 1e-12);
        assert!((lj - s.log_joint).abs() < 1e-10);
    }

    #[test]
    fn two_node_frequency_of_self_assignment() {
        // Under π = (0, 1): q(c = (0, 0)) = 1/2 · 4/7 = 2/7. By symmetry the
        // other order gives the same mass to c = (1, 1) relabelled, so count
        // draws whose first visited node is 0.
        let (g, p) = two_node();
        let y = LabeledNodes::new(vec![0, 1], vec![0, 0], 2, 2).unwrap();
        let mut rng = seeded(77);
        let (mut hits, mut trials) = (0usize, 0usize);
        for _ in 0..100_000 {
            let s = sample_q(&g, &p, &y, &mut rng).unwrap();
            if s.order[0] == 0 {
                trials += 1;
                hits += (s.choices == [0, 0]) as usize;
            }
        }
        let f = hits as f64 / trials as f64;
        let p0 = 2.0 / 7.0;
        let se = (p0 * (1.0 - p0) / trials as f64).sqrt();
        assert!((f - p0).abs() < 4.0 * se, "{f} vs {p0}");
    }

    #[test]
    fn permutations_enumerate() {
        let mut xs = vec![0, 1, 2];
        let mut n = 1;
        while next_permutation(&mut xs) {
            n += 1;
        }
        assert_eq!(n, 6);
        assert_eq!(xs, vec![2, 1, 0]);
    }
}
