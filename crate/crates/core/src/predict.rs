//! Conditional prediction p(y_κ | y_τ) and evaluation metrics.
//!
//! Draws c_τ^{(t)} ~ q(c_τ | y_τ) give posterior concentrations
//! α′_j = α_j + s_j^{(t)}, and a node's predictive is
//!
//! ```text
//! p(y_i = k | y_τ) ≈ Σ_t w_t Σ_{j ∈ n(i)} L_ij α′_{j,k} / α′_{j,0}
//! ```
//!
//! With uniform weights w_t = 1/T this is the plain particle average. Since
//! q only conditions on labels visited earlier, that average is biased once
//! |τ| ≥ 2. Self-normalized weights w_t ∝ p(y, c_t) / q(c_t | y) remove the
//! bias as T grows.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NmmError, Result};
use crate::exec::{map_indexed, pool};
use crate::graph::{Graph, NodeSet};
use crate::kernel::{assignment_count, exact_marginal_with_budget, EnumBudget, LabeledNodes, NmmParams};
use crate::rng::{child_seed, stream};
use crate::variational::{extend_in_place, sample_q, QSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Equal weights 1/T.
    Uniform,
    /// Self-normalized importance weights exp(ln p − ln q).
    Importance,
}

impl FromStr for Weighting {
    type Err = NmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "importance" => Ok(Weighting::Importance),
            _ => Err(NmmError::InvalidArgument(format!("unknown weighting '{s}'"))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Uniform => "uniform",
            Weighting::Importance => "importance",
        })
    }
}

/// T draws over the same observed labels.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<QSample>,
    pub weighting: Weighting,
}

impl ParticleSet {
    /// Particle t uses stream t under `seed`.
    pub fn sample(
        g: &Graph,
        p: &NmmParams,
        y: &LabeledNodes,
        num_particles: usize,
        seed: u64,
        weighting: Weighting,
    ) -> Result<Self> {
        if num_particles == 0 {
            return Err(NmmError::InvalidArgument("need at least one particle".into()));
        }
        let particles = map_indexed(num_particles, |t| sample_q(g, p, y, &mut stream(seed, t as u64)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(ParticleSet { particles, weighting })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.particles.first().is_some_and(|s| s.contains(i))
    }

    /// Normalized particle weights.
    pub fn weights(&self) -> Vec<f64> {
        let t = self.particles.len() as f64;
        match self.weighting {
            Weighting::Uniform => vec![1.0 / t; self.particles.len()],
            Weighting::Importance => {
                let lw: Vec<f64> = self.particles.iter().map(QSample::log_weight).collect();
                let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = lw.iter().map(|&x| (x - max).exp()).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            }
        }
    }

    /// Kish effective sample size of the current weights.
    pub fn effective_size(&self) -> f64 {
        1.0 / self.weights().iter().map(|w| w * w).sum::<f64>()
    }

    /// Commits label `yi` for node `i` in every particle.
    pub fn extend(&mut self, g: &Graph, p: &NmmParams, i: usize, yi: usize, seed: u64) -> Result<()> {
        let mut parts = std::mem::take(&mut self.particles);
        let results: Vec<Result<()>> = pool().install(|| {
            parts
                .par_iter_mut()
                .enumerate()
                .map(|(t, s)| extend_in_place(g, p, s, i, yi, &mut stream(seed, t as u64)))
                .collect()
        });
        self.particles = parts;
        results.into_iter().collect()
    }
}

/// Σ_{j ∈ n(i)} L_ij α′_j / α′_{j,0} for one particle, written into `out`.
fn particle_predictive(g: &Graph, p: &NmmParams, s: &QSample, i: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (&j, &l) in g.hood(i).iter().zip(p.attn(i)) {
        if l == 0.0 {
            continue;
        }
        let a = p.alpha(j);
        let den = p.alpha_total(j) + s.counts.total(j) as f64;
        for (k, o) in out.iter_mut().enumerate() {
            *o += l * (a[k] + s.counts.count(j, k) as f64) / den;
        }
    }
}

/// A predictive vector with per-class Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub probs: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl Marginal {
    /// Lowest class wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}

pub fn predict_marginal(g: &Graph, p: &NmmParams, ps: &ParticleSet, i: usize) -> Result<Vec<f64>> {
    predict_with_error(g, p, ps, i).map(|m| m.probs)
}

pub fn predict_with_error(g: &Graph, p: &NmmParams, ps: &ParticleSet, i: usize) -> Result<Marginal> {
    p.check_graph(g)?;
    g.check_node(i)?;
    if ps.is_empty() {
        return Err(NmmError::InvalidArgument("empty particle set".into()));
    }
    if ps.contains(i) {
        return Err(NmmError::InvalidArgument(format!("node {i} is already labeled")));
    }
    let nc = p.num_classes();
    let w = ps.weights();
    let mut per = vec![0.0; ps.len() * nc];
    for (t, s) in ps.particles.iter().enumerate() {
        particle_predictive(g, p, s, i, &mut per[t * nc..(t + 1) * nc]);
    }
    let mut probs = vec![0.0; nc];
    for (t, &wt) in w.iter().enumerate() {
        for k in 0..nc {
            probs[k] += wt * per[t * nc + k];
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|x| *x /= total);
    let t = ps.len() as f64;
    let std_error = (0..nc)
        .map(|k| {
            let dev = |tt: usize| per[tt * nc + k] - probs[k];
            match ps.weighting {
                Weighting::Uniform if t > 1.0 => {
                    let var = (0..ps.len()).map(|tt| dev(tt).powi(2)).sum::<f64>() / (t - 1.0);
                    (var / t).sqrt()
                }
                Weighting::Uniform => 0.0,
                // delta-method variance of a self-normalized mean
                Weighting::Importance => w.iter().enumerate().map(|(tt, &wt)| (wt * dev(tt)).powi(2)).sum::<f64>().sqrt(),
            }
        })
        .collect();
    Ok(Marginal { probs, std_error })
}

/// p(y_κ | y_τ) over every labelling of κ. Configurations are indexed in
/// mixed radix with the first node of κ most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallsetPosterior {
    pub nodes: Vec<usize>,
    pub num_classes: usize,
    pub probs: Vec<f64>,
}

impl SmallsetPosterior {
    pub fn labels_of(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.nodes.len()];
        let mut r = index;
        for slot in out.iter_mut().rev() {
            *slot = r % self.num_classes;
            r /= self.num_classes;
        }
        out
    }

    /// Marginal of the k-th node of κ.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for (idx, &pr) in self.probs.iter().enumerate() {
            out[self.labels_of(idx)[k]] += pr;
        }
        out
    }
}

pub fn predict_exact_smallset(
    g: &Graph,
    p: &NmmParams,
    y: &LabeledNodes,
    kappa: &NodeSet,
    budget: EnumBudget,
) -> Result<SmallsetPosterior> {
    p.check_graph(g)?;
    let nc = p.num_classes();
    if let Some(&i) = kappa.ids().iter().find(|&&i| y.contains(i)) {
        return Err(NmmError::InvalidArgument(format!("node {i} is already labeled")));
    }
    let mut all: Vec<usize> = y.nodes().to_vec();
    all.extend_from_slice(kappa.ids());
    let configs = (nc as f64).powi(kappa.len() as i32);
    budget.check(assignment_count(g, &all) * configs, all.len())?;
    let base = exact_marginal_with_budget(g, p, y, budget)?;
    let n = configs as usize;
    let mut probs = Vec::with_capacity(n);
    let post = SmallsetPosterior {
        nodes: kappa.ids().to_vec(),
        num_classes: nc,
        probs: Vec::new(),
    };
    for idx in 0..n {
        let mut labels = y.labels().to_vec();
        labels.extend(post.labels_of(idx));
        let joint = LabeledNodes::new(all.clone(), labels, g.num_nodes(), nc)?;
        probs.push((exact_marginal_with_budget(g, p, &joint, budget)? - base).exp());
    }
    Ok(SmallsetPosterior { probs, ..post })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeOrder {
    /// Ascending node id.
    NodeId,
    /// The order κ was given in.
    AsGiven,
    /// Highest predictive maximum first.
    Confident,
}

impl FromStr for DecodeOrder {
    type Err = NmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(DecodeOrder::NodeId),
            "given" => Ok(DecodeOrder::AsGiven),
            "confident" => Ok(DecodeOrder::Confident),
            _ => Err(NmmError::InvalidArgument(format!("unknown decode order '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub node: usize,
    pub label: usize,
    /// The predictive at the moment the label was committed.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub num_particles: usize,
    pub seed: u64,
    pub weighting: Weighting,
    pub order: DecodeOrder,
}

/// Labels κ one node at a time, committing each argmax into every particle.
/// Results are in commit order.
pub fn greedy_decode(
    g: &Graph,
    p: &NmmParams,
    y: &LabeledNodes,
    kappa: &NodeSet,
    cfg: DecodeConfig,
) -> Result<Vec<Decoded>> {
    let mut ps = ParticleSet::sample(g, p, y, cfg.num_particles, child_seed(cfg.seed, 0), cfg.weighting)?;
    let mut pending: Vec<usize> = kappa.ids().to_vec();
    if cfg.order == DecodeOrder::NodeId {
        pending.sort_unstable();
    }
    let mut out = Vec::with_capacity(pending.len());
    let mut step = 0u64;
    while !pending.is_empty() {
        let pick = match cfg.order {
            DecodeOrder::Confident => {
                let mut best = (0, f64::NEG_INFINITY);
                for (k, &i) in pending.iter().enumerate() {
                    let m = predict_marginal(g, p, &ps, i)?;
                    let top = m[argmax(&m)];
                    if top > best.1 {
                        best = (k, top);
                    }
                }
                best.0
            }
            _ => 0,
        };
        let i = pending.remove(pick);
        let probs = predict_marginal(g, p, &ps, i)?;
        let label = argmax(&probs);
        step += 1;
        if !pending.is_empty() {
            ps.extend(g, p, i, label, child_seed(cfg.seed, step))?;
        }
        out.push(Decoded { node: i, label, probs });
    }
    Ok(out)
}

/// Mean of ln p(y_u, y_v) over edges, each by exact enumeration.
pub fn pairwise_ll(g: &Graph, p: &NmmParams, edges: &[(usize, usize)], labels: &[Option<usize>]) -> Result<f64> {
    if edges.is_empty() {
        return Err(NmmError::InvalidArgument("no test edges".into()));
    }
    let mut total = 0.0;
    for &(u, v) in edges {
        let lab = |i: usize| {
            labels
                .get(i)
                .copied()
                .flatten()
                .ok_or_else(|| NmmError::InvalidArgument(format!("edge ({u}, {v}) has an unlabeled endpoint")))
        };
        let y = LabeledNodes::new(vec![u, v], vec![lab(u)?, lab(v)?], g.num_nodes(), p.num_classes())?;
        total += exact_marginal_with_budget(g, p, &y, EnumBudget::default())?;
    }
    Ok(total / edges.len() as f64)
}

/// Fraction of (predicted, true) pairs that agree; None when empty.
pub fn accuracy(pairs: impl IntoIterator<Item = (usize, usize)>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (a, b) in pairs {
        hit += (a == b) as usize;
        n += 1;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn two_node() -> (Graph, NmmParams) {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let p = NmmParams::uniform(&g, &[1.0, 1.0]).unwrap();
        (g, p)
    }

    #[test]
    fn seven_twelfths() {
        let (g, p) = two_node();
        let y = LabeledNodes::new(vec![0], vec![0], 2, 2).unwrap();
        let kappa = NodeSet::new(vec![1], 2).unwrap();
        let exact = predict_exact_smallset(&g, &p, &y, &kappa, EnumBudget::default()).unwrap();
        assert!((exact.probs[0] - 7.0 / 12.0).abs() < 1e-12);
        assert!((exact.probs[1] - 5.0 / 12.0).abs() < 1e-12);
        for w in [Weighting::Uniform, Weighting::Importance] {
            let ps = ParticleSet::sample(&g, &p, &y, 10_000, 4, w).unwrap();
            let m = predict_with_error(&g, &p, &ps, 1).unwrap();
            assert!((m.probs[0] - 7.0 / 12.0).abs() <= 4.0 * m.std_error[0].max(1e-12));
        }
        let cfg = DecodeConfig {
            num_particles: 100,
            seed: 1,
            weighting: Weighting::Uniform,
            order: DecodeOrder::NodeId,
        };
        let d = greedy_decode(&g, &p, &y, &kappa, cfg).unwrap();
        assert_eq!(d[0].label, 0);
    }

    #[test]
    fn empty_kappa_and_prior() {
        let (g, p) = two_node();
        let y = LabeledNodes::empty();
        let e = predict_exact_smallset(&g, &p, &y, &NodeSet::new(vec![], 2).unwrap(), EnumBudget::default()).unwrap();
        assert_eq!(e.probs, vec![1.0]);
        let ps = ParticleSet::sample(&g, &p, &y, 3, 0, Weighting::Uniform).unwrap();
        assert_eq!(predict_marginal(&g, &p, &ps, 0).unwrap(), p.prior_marginal(&g, 0));
    }

    #[test]
    fn identity_attention_ignores_neighbors() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let p = NmmParams::independent(&g, 2, vec![1.0, 3.0, 2.0, 2.0, 5.0, 1.0]).unwrap();
        let y = LabeledNodes::new(vec![0, 2], vec![0, 0], 3, 2).unwrap();
        let ps = ParticleSet::sample(&g, &p, &y, 5, 0, Weighting::Importance).unwrap();
        let m = predict_marginal(&g, &p, &ps, 1).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!(predict_marginal(&g, &p, &ps, 0).is_err());
    }

    #[test]
    fn disconnected_node_is_uniform() {
        let g = Graph::from_edges(3, &[(0, 1)]).unwrap();
        let p = NmmParams::uniform(&g, &[1.0, 1.0, 1.0]).unwrap();
        let y = LabeledNodes::new(vec![0, 1], vec![2, 2], 3, 3).unwrap();
        let e = predict_exact_smallset(&g, &p, &y, &NodeSet::new(vec![2], 3).unwrap(), EnumBudget::default()).unwrap();
        assert!(e.probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn ties_go_to_the_lowest_class() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let p = NmmParams::uniform(&g, &[1.0, 1.0]).unwrap();
        let kappa = NodeSet::new(vec![2, 0], 3).unwrap();
        let cfg = DecodeConfig {
            num_particles: 8,
            seed: 0,
            weighting: Weighting::Uniform,
            order: DecodeOrder::NodeId,
        };
        let d = greedy_decode(&g, &p, &LabeledNodes::empty(), &kappa, cfg).unwrap();
        assert_eq!(d[0].node, 0);
        assert_eq!(d[0].label, 0);
        assert_eq!(d[1].node, 2);
    }

    #[test]
    fn exact_smallset_sums_to_one() {
        let mut rng = seeded(8);
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let alpha: Vec<f64> = (0..12).map(|_| rng.random_range(0.3..3.0)).collect();
        let p = NmmParams::new(&g, 3, alpha, vec![1.0 / 3.0; 12]).unwrap();
        let y = LabeledNodes::new(vec![0], vec![2], 4, 3).unwrap();
        let e = predict_exact_smallset(&g, &p, &y, &NodeSet::new(vec![1, 3], 4).unwrap(), EnumBudget::default()).unwrap();
        assert!((e.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(e.labels_of(5), vec![1, 2]);
    }

    #[test]
    fn pll_examples() {
        let (g, p) = two_node();
        let v = pairwise_ll(&g, &p, &[(0, 1)], &[Some(0), Some(0)]).unwrap();
        assert!((v - (7.0f64 / 24.0).ln()).abs() < 1e-12);
        let ind = NmmParams::independent(&g, 2, vec![1.0; 4]).unwrap();
        let v = pairwise_ll(&g, &ind, &[(0, 1)], &[Some(0), Some(1)]).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let err = pairwise_ll(&g, &p, &[], &[]).unwrap_err();
        assert!(err.to_string().contains("no test edges"));
        assert!(pairwise_ll(&g, &p, &[(0, 1)], &[Some(0), None]).is_err());
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(vec![(1, 1), (0, 1)]), Some(0.5));
        assert_eq!(accuracy(Vec::<(usize, usize)>::new()), None);
    }
}
