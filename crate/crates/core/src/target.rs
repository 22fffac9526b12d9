//! Fitting an NMM to an external unnormalized density p̃*(y).
//!
//! For (y, c) drawn from the NMM itself,
//!
//! ```text
//! E_p[ln p(y, c) − ln q(c | y) − ln p̃*(y)]  ≥  KL(p ‖ p*) − ln Z
//! ```
//!
//! because q(c | y) is a distribution over c for every visit order. This is
//! the quantity minimized here and reported as a free energy. The Ising
//! model and its mean-field approximation serve as the reference target.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NmmError, Result};
use crate::exec::map_indexed;
use crate::grad::{GradVector, Tape, Var};
use crate::graph::{make_grid_graph, Features, Graph};
use crate::kernel::{
    exact_marginal_with_budget, sample_labels_ancestral, EnumBudget, LabeledNodes, LogSumExp, NeighborAssignment,
    NmmParams,
};
use crate::learning::{baselines, pullback, Adam, Baseline};
use crate::parameterize::{params_from_tape, Parameterization};
use crate::rng::{child_seed, stream};
use crate::taped::{sample_gradient, KernelGrad};
use crate::variational::{log_q_eval, next_permutation};

/// Largest N the 2^N oracles accept.
pub const MAX_ORACLE_NODES: usize = 20;

/// Binary MRF with spins s = 2y − 1 and ln p̃*(y) = Σ h_i s_i + Σ_E J_ij s_i s_j.
#[derive(Debug, Clone)]
pub struct IsingModel {
    graph: Graph,
    h: Vec<f64>,
    edges: Vec<(usize, usize, f64)>,
    // couplings aligned with graph.adjacent(i), concatenated
    adj_offsets: Vec<usize>,
    adj_j: Vec<f64>,
}

impl IsingModel {
    /// `couplings` is aligned with `graph.edges()`.
    pub fn new(graph: Graph, h: Vec<f64>, couplings: &[f64]) -> Result<Self> {
        let edge_list = graph.edges();
        if h.len() != graph.num_nodes() || couplings.len() != edge_list.len() {
            return Err(NmmError::InvalidArgument(format!(
                "need {} fields and {} couplings, got {} and {}",
                graph.num_nodes(),
                edge_list.len(),
                h.len(),
                couplings.len()
            )));
        }
        if h.iter().chain(couplings).any(|x| !x.is_finite()) {
            return Err(NmmError::Domain("Ising potentials must be finite".into()));
        }
        let edges: Vec<(usize, usize, f64)> = edge_list.iter().zip(couplings).map(|(&(u, v), &j)| (u, v, j)).collect();
        let mut adj_offsets = Vec::with_capacity(graph.num_nodes() + 1);
        let mut adj_j = Vec::new();
        adj_offsets.push(0);
        for i in 0..graph.num_nodes() {
            for &k in graph.adjacent(i) {
                let key = (i.min(k), i.max(k));
                let pos = edge_list.binary_search(&key).expect("edge present");
                adj_j.push(couplings[pos]);
            }
            adj_offsets.push(adj_j.len());
        }
        Ok(IsingModel {
            graph,
            h,
            edges,
            adj_offsets,
            adj_j,
        })
    }

    pub fn grid(height: usize, width: usize, j: f64, h: f64) -> Result<Self> {
        let g = make_grid_graph(height, width)?;
        let n = g.num_nodes();
        let e = g.num_edges();
        Self::new(g, vec![h; n], &vec![j; e])
    }

    pub fn from_spec(spec: &IsingSpec) -> Result<Self> {
        let g = make_grid_graph(spec.height, spec.width)?;
        let h = spec.h.expand(g.num_nodes(), "h")?;
        let j = spec.j.expand(g.num_edges(), "J")?;
        Self::new(g, h, &j)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn fields(&self) -> &[f64] {
        &self.h
    }

    /// (u, v, J) with u < v.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// (neighbor, J) pairs of node i.
    pub fn couplings(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.adj_offsets[i]..self.adj_offsets[i + 1];
        self.graph.adjacent(i).iter().copied().zip(self.adj_j[r].iter().copied())
    }

    pub fn log_unnorm(&self, y: &[usize]) -> Result<f64> {
        if y.len() != self.num_nodes() {
            return Err(NmmError::InvalidArgument("labels must cover every node".into()));
        }
        if let Some(i) = y.iter().position(|&k| k > 1) {
            return Err(NmmError::InvalidArgument(format!("label of node {i} is not binary")));
        }
        let s = |i: usize| 2.0 * y[i] as f64 - 1.0;
        let mut v: f64 = self.h.iter().enumerate().map(|(i, &h)| h * s(i)).sum();
        for &(a, b, j) in &self.edges {
            v += j * s(a) * s(b);
        }
        Ok(v)
    }

    /// Row i is (h_i, couplings to neighbors by ascending id, zero-padded to
    /// the maximum degree).
    pub fn potential_features(&self) -> Features {
        let d = self.graph.max_degree() - 1;
        let dim = 1 + d;
        let mut data = vec![0.0; self.num_nodes() * dim];
        for i in 0..self.num_nodes() {
            data[i * dim] = self.h[i];
            for (k, (_, j)) in self.couplings(i).enumerate() {
                data[i * dim + 1 + k] = j;
            }
        }
        Features {
            num_rows: self.num_nodes(),
            dim,
            data,
        }
    }
}

/// A per-item value or one value for all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrList {
    Scalar(f64),
    List(Vec<f64>),
}

impl ScalarOrList {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrList::Scalar(x) => Ok(vec![*x; n]),
            ScalarOrList::List(v) if v.len() == n => Ok(v.clone()),
            ScalarOrList::List(v) => Err(NmmError::InvalidArgument(format!(
                "{what} lists {} values, the grid needs {n}",
                v.len()
            ))),
        }
    }
}

/// Grid Ising file. Per-edge couplings follow the (u, v), u < v order of
/// row-major node ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsingSpec {
    pub height: usize,
    pub width: usize,
    #[serde(rename = "J")]
    pub j: ScalarOrList,
    pub h: ScalarOrList,
}

impl IsingSpec {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NmmError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// q(y) = Π_i Bernoulli(y_i; μ_i).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    pub mu: Vec<f64>,
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// E_q[ln q − ln p̃*] = KL(q ‖ p*) − ln Z.
pub fn mean_field_free_energy(m: &IsingModel, state: &MeanFieldState) -> f64 {
    let mu = &state.mu;
    let neg_entropy: f64 = mu.iter().map(|&x| xlogx(x) + xlogx(1.0 - x)).sum();
    let mag = |i: usize| 2.0 * mu[i] - 1.0;
    let mut energy: f64 = m.h.iter().enumerate().map(|(i, &h)| h * mag(i)).sum();
    for &(a, b, j) in &m.edges {
        energy += j * mag(a) * mag(b);
    }
    neg_entropy - energy
}

#[derive(Debug, Clone)]
pub struct MeanFieldFit {
    pub state: MeanFieldState,
    pub free_energy: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// F after each full sweep.
    pub trace: Vec<f64>,
}

/// Coordinate ascent μ_i ← σ(2(h_i + Σ_j J_ij (2μ_j − 1))) in ascending id
/// order, starting from the decoupled solution μ_i = σ(2h_i).
pub fn mean_field_fit(m: &IsingModel, max_sweeps: usize, tol: f64) -> Result<MeanFieldFit> {
    if max_sweeps == 0 {
        return Err(NmmError::InvalidArgument("need at least one sweep".into()));
    }
    let mut mu: Vec<f64> = m.h.iter().map(|&h| sigmoid(2.0 * h)).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        for i in 0..m.num_nodes() {
            let field = m.h[i] + m.couplings(i).map(|(k, j)| j * (2.0 * mu[k] - 1.0)).sum::<f64>();
            let new = sigmoid(2.0 * field);
            delta = delta.max((new - mu[i]).abs());
            mu[i] = new;
        }
        let state = MeanFieldState { mu: mu.clone() };
        trace.push(mean_field_free_energy(m, &state));
        if delta < tol {
            converged = true;
            break;
        }
    }
    let state = MeanFieldState { mu };
    Ok(MeanFieldFit {
        free_energy: mean_field_free_energy(m, &state),
        state,
        converged,
        sweeps,
        trace,
    })
}

/// Calls `f` with every binary labelling of `n` nodes, in counting order.
fn for_each_binary(n: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let mut y = vec![0usize; n];
    for code in 0u64..(1u64 << n) {
        for (k, slot) in y.iter_mut().enumerate() {
            *slot = ((code >> k) & 1) as usize;
        }
        f(&y)?;
    }
    Ok(())
}

fn check_oracle_size(n: usize) -> Result<()> {
    if n > MAX_ORACLE_NODES {
        return Err(NmmError::BudgetExceeded {
            configs: 2f64.powi(n as i32),
            limit: 2f64.powi(MAX_ORACLE_NODES as i32),
        });
    }
    Ok(())
}

pub fn ising_log_partition(m: &IsingModel) -> Result<f64> {
    check_oracle_size(m.num_nodes())?;
    let mut acc = LogSumExp::default();
    for_each_binary(m.num_nodes(), |y| {
        acc.push(m.log_unnorm(y)?);
        Ok(())
    })?;
    Ok(acc.value())
}

/// (KL(q ‖ p*), ln Z) by enumeration.
pub fn exact_kl_mean_field(m: &IsingModel, state: &MeanFieldState) -> Result<(f64, f64)> {
    let log_z = ising_log_partition(m)?;
    let mut kl = 0.0;
    for_each_binary(m.num_nodes(), |y| {
        let lq: f64 = y
            .iter()
            .zip(&state.mu)
            .map(|(&k, &mu)| if k == 1 { mu.ln() } else { (1.0 - mu).ln() })
            .sum();
        if lq > f64::NEG_INFINITY {
            kl += lq.exp() * (lq - m.log_unnorm(y)?);
        }
        Ok(())
    })?;
    Ok((kl + log_z, log_z))
}

/// (KL(p_nmm ‖ p*), ln Z) with p_nmm(y) by exact marginalization of c.
pub fn exact_kl_nmm(m: &IsingModel, g: &Graph, p: &NmmParams) -> Result<(f64, f64)> {
    check_binary_params(m, g, p)?;
    let log_z = ising_log_partition(m)?;
    let n = m.num_nodes();
    let nodes: Vec<usize> = (0..n).collect();
    let budget = EnumBudget::default();
    let mut kl = 0.0;
    for_each_binary(n, |y| {
        let lab = LabeledNodes::new(nodes.clone(), y.to_vec(), n, 2)?;
        let lp = exact_marginal_with_budget(g, p, &lab, budget)?;
        if lp > f64::NEG_INFINITY {
            kl += lp.exp() * (lp - m.log_unnorm(y)?);
        }
        Ok(())
    })?;
    Ok((kl + log_z, log_z))
}

fn check_binary_params(m: &IsingModel, g: &Graph, p: &NmmParams) -> Result<()> {
    p.check_graph(g)?;
    if p.num_classes() != 2 || g.num_nodes() != m.num_nodes() {
        return Err(NmmError::InvalidArgument("an Ising target needs binary parameters on its graph".into()));
    }
    Ok(())
}

/// E_{p_nmm}[ln p̃*(y)] from exact single-node and pairwise marginals.
pub fn nmm_expected_log_unnorm(m: &IsingModel, g: &Graph, p: &NmmParams) -> Result<f64> {
    check_binary_params(m, g, p)?;
    let mut t = Tape::new();
    let alpha: Vec<Var> = p.alpha_flat().iter().map(|&a| t.constant(a)).collect();
    let attn: Vec<Option<Var>> = p.attn_flat().iter().map(|&l| (l > 0.0).then(|| t.constant(l))).collect();
    let v = taped_expected_log_unnorm(&mut t, m, g, &alpha, &attn);
    Ok(t.value(v))
}

/// u_i = Σ_j L_ij r_j, the single-node marginals, flattened N×2.
fn taped_node_marginals(t: &mut Tape, g: &Graph, r: &[Var], attn: &[Option<Var>]) -> Vec<Var> {
    let n = g.num_nodes();
    let mut u = Vec::with_capacity(2 * n);
    for i in 0..n {
        let off = g.hood_offset(i);
        let mut ls = Vec::new();
        let mut r0s = Vec::new();
        let mut r1s = Vec::new();
        for (pos, &j) in g.hood(i).iter().enumerate() {
            if let Some(l) = attn[off + pos] {
                ls.push(l);
                r0s.push(r[2 * j]);
                r1s.push(r[2 * j + 1]);
            }
        }
        u.push(t.dot(&ls, &r0s));
        u.push(t.dot(&ls, &r1s));
    }
    u
}

/// u and Σ u ln u on the tape.
fn taped_marginal_entropy_term(t: &mut Tape, g: &Graph, alpha: &[Var], attn: &[Option<Var>]) -> (Vec<Var>, Var) {
    let mut r = Vec::with_capacity(alpha.len());
    for pair in alpha.chunks(2) {
        let total = t.add(pair[0], pair[1]);
        r.push(t.div(pair[0], total));
        r.push(t.div(pair[1], total));
    }
    let u = taped_node_marginals(t, g, &r, attn);
    let ln_u: Vec<Var> = u.iter().map(|&x| t.ln(x)).collect();
    let e = t.dot(&u, &ln_u);
    (ln_u, e)
}

/// Differentiable E_p[ln p̃*]. With r_j = α_j / α_{j,0},
/// d_j = Σ_k α_jk(α_jk + 1) / (α_{j,0}(α_{j,0} + 1)) and u_i = Σ_j L_ij r_j:
///
/// ```text
/// P(y_a = y_b) = u_a·u_b + Σ_{j ∈ n(a) ∩ n(b)} L_aj L_bj (d_j − ‖r_j‖²)
/// ```
fn taped_expected_log_unnorm(t: &mut Tape, m: &IsingModel, g: &Graph, alpha: &[Var], attn: &[Option<Var>]) -> Var {
    let n = g.num_nodes();
    let mut r = Vec::with_capacity(2 * n);
    let mut excess = Vec::with_capacity(n);
    for j in 0..n {
        let (a0, a1) = (alpha[2 * j], alpha[2 * j + 1]);
        let total = t.add(a0, a1);
        let r0 = t.div(a0, total);
        let r1 = t.div(a1, total);
        let a0p = t.add_const(a0, 1.0);
        let a1p = t.add_const(a1, 1.0);
        let tp = t.add_const(total, 1.0);
        let s0 = t.mul(a0, a0p);
        let s1 = t.mul(a1, a1p);
        let num = t.add(s0, s1);
        let den = t.mul(total, tp);
        let d = t.div(num, den);
        let rr = t.dot(&[r0, r1], &[r0, r1]);
        excess.push(t.sub(d, rr));
        r.extend([r0, r1]);
    }
    let u = taped_node_marginals(t, g, &r, attn);
    let mut terms = Vec::with_capacity(n + m.edges.len());
    for (i, &h) in m.h.iter().enumerate() {
        let mag = t.sub(u[2 * i + 1], u[2 * i]);
        terms.push(t.scale(mag, h));
    }
    for &(a, b, jab) in &m.edges {
        let mut same = t.dot(&u[2 * a..2 * a + 2], &u[2 * b..2 * b + 2]);
        let (ha, hb) = (g.hood(a), g.hood(b));
        for (pa, &j) in ha.iter().enumerate() {
            let Some(pb) = hb.binary_search(&j).ok() else {
                continue;
            };
            if let (Some(la), Some(lb)) = (attn[g.hood_offset(a) + pa], attn[g.hood_offset(b) + pb]) {
                let w = t.mul(la, lb);
                let x = t.mul(w, excess[j]);
                same = t.add(same, x);
            }
        }
        let corr = t.scale(same, 2.0);
        let corr = t.add_const(corr, -1.0);
        terms.push(t.scale(corr, jab));
    }
    t.sum(&terms)
}

/// The exact expectation of the bound for tiny graphs: enumerates y, c and
/// every visit order.
pub fn exact_upper_bound(m: &IsingModel, g: &Graph, p: &NmmParams) -> Result<f64> {
    check_binary_params(m, g, p)?;
    let n = g.num_nodes();
    let perms: f64 = (1..=n).map(|k| k as f64).product();
    let configs = 2f64.powi(n as i32) * perms * crate::kernel::assignment_count(g, &(0..n).collect::<Vec<_>>());
    EnumBudget::default().check(configs, n)?;
    let nodes: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for_each_binary(n, |y| {
        let lab = LabeledNodes::new(nodes.clone(), y.to_vec(), n, 2)?;
        let target = m.log_unnorm(y)?;
        let mut c = vec![0usize; n];
        let mut pos = vec![0usize; n];
        loop {
            for i in 0..n {
                c[i] = g.hood(i)[pos[i]];
            }
            let asg = NeighborAssignment(c.clone());
            let lj = crate::kernel::log_joint(g, p, &lab, &asg)?;
            if lj > f64::NEG_INFINITY {
                let mut order: Vec<usize> = (0..n).collect();
                let mut lq_mean = 0.0;
                loop {
                    lq_mean += log_q_eval(g, p, &lab, &asg, &order)?.0;
                    if !next_permutation(&mut order) {
                        break;
                    }
                }
                lq_mean /= perms;
                total += lj.exp() * (lj - lq_mean - target);
            }
            // odometer over neighbor positions
            let mut k = 0;
            while k < n {
                pos[k] += 1;
                if pos[k] < g.hood(k).len() {
                    break;
                }
                pos[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
        Ok(())
    })?;
    Ok(total)
}

/// One draw of the bound's integrand.
struct BoundDraw {
    order: Vec<usize>,
    labels: Vec<usize>,
    choices: Vec<usize>,
    log_joint: f64,
    log_q: f64,
    target: f64,
}

fn draw_bound<R: Rng + ?Sized, F>(g: &Graph, p: &NmmParams, target: &F, rng: &mut R) -> Result<BoundDraw>
where
    F: Fn(&[usize]) -> Result<f64> + Sync + ?Sized,
{
    let n = g.num_nodes();
    let (y, c) = sample_labels_ancestral(g, p, rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let lab = LabeledNodes::new((0..n).collect(), y.clone(), n, p.num_classes())?;
    let (log_q, log_joint) = log_q_eval(g, p, &lab, &c, &order)?;
    let t = target(&y)?;
    Ok(BoundDraw {
        labels: order.iter().map(|&i| y[i]).collect(),
        choices: order.iter().map(|&i| c.0[i]).collect(),
        order,
        log_joint,
        log_q,
        target: t,
    })
}

#[derive(Debug, Clone)]
pub struct BoundEstimate {
    pub ub: f64,
    pub std_error: f64,
    pub grad: GradVector,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo bound and its score-function gradient with respect to θ:
/// (1/S) Σ_s [(g_s − b_s)·∇ln p(y_s, c_s) + ∇g_s].
pub fn kl_upper_bound<F>(
    par: &Parameterization,
    g: &Graph,
    theta: &[f64],
    target: &F,
    num_samples: usize,
    seed: u64,
) -> Result<BoundEstimate>
where
    F: Fn(&[usize]) -> Result<f64> + Sync + ?Sized,
{
    bound_with_gradient(par, g, theta, target, None, num_samples, seed)
}

/// As `kl_upper_bound` for an Ising target, with E_p[ln p̃*] and its
/// gradient computed exactly. Only the c-dependent part is sampled.
pub fn kl_upper_bound_ising(
    par: &Parameterization,
    m: &IsingModel,
    theta: &[f64],
    num_samples: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let zero = |_: &[usize]| Ok(0.0);
    bound_with_gradient(par, m.graph(), theta, &zero, Some(m), num_samples, seed)
}

fn bound_with_gradient<F>(
    par: &Parameterization,
    g: &Graph,
    theta: &[f64],
    target: &F,
    exact: Option<&IsingModel>,
    num_samples: usize,
    seed: u64,
) -> Result<BoundEstimate>
where
    F: Fn(&[usize]) -> Result<f64> + Sync + ?Sized,
{
    if num_samples < 2 {
        return Err(NmmError::InvalidArgument("need S ≥ 2 samples".into()));
    }
    let mut t = Tape::new();
    let vars = t.vars(theta);
    let tp = par.forward(&mut t, g, &vars)?;
    // For an Ising target: the exact E_p[ln p̃*], plus the control variate
    // Σ_i ln π_i(y_i) with its exact mean Σ π ln π.
    let exact_terms = match exact {
        Some(m) => {
            let attn: Vec<Option<Var>> = tp
                .log_attn
                .iter()
                .zip(&tp.live)
                .map(|(&v, &l)| if l { Some(t.exp(v)) } else { None })
                .collect();
            let expected = taped_expected_log_unnorm(&mut t, m, g, &tp.alpha, &attn);
            let (ln_u, cv_mean) = taped_marginal_entropy_term(&mut t, g, &tp.alpha, &attn);
            Some((expected, ln_u, cv_mean))
        }
        None => None,
    };
    t.check_finite()?;
    let p = params_from_tape(&t, g, par.num_classes, &tp)?;
    if let Some(m) = exact {
        check_binary_params(m, g, &p)?;
    }
    let draws = map_indexed(num_samples, |s| draw_bound(g, &p, target, &mut stream(seed, s as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ln_u: Vec<f64> = exact_terms.as_ref().map(|(_, l, _)| t.values(l)).unwrap_or_default();
    let cv = |d: &BoundDraw| -> f64 {
        if ln_u.is_empty() {
            0.0
        } else {
            d.order.iter().zip(&d.labels).map(|(&i, &y)| ln_u[2 * i + y]).sum()
        }
    };
    let gs: Vec<f64> = draws.iter().map(|d| d.log_joint - d.log_q - d.target - cv(d)).collect();
    if let Some(k) = gs.iter().position(|x| !x.is_finite()) {
        return Err(NmmError::NonFinite {
            index: k,
            op: "ln p − ln q − ln p̃*",
        });
    }
    let b = baselines(&gs, Baseline::Loo);
    let parts = map_indexed(num_samples, |s| {
        let d = &draws[s];
        sample_gradient(g, &p, &d.order, &d.labels, &d.choices, -1.0, gs[s] - b[s] + 1.0)
    });
    let mut kg = KernelGrad::zeros(g, p.num_classes());
    for part in parts {
        kg.add_assign(&part?);
    }
    let scale = 1.0 / num_samples as f64;
    kg.d_alpha.iter_mut().chain(kg.d_log_attn.iter_mut()).for_each(|x| *x *= scale);
    let (mut ub, std_error) = mean_and_se(&gs);
    let mut extra = Vec::new();
    if let Some((expected, ln_u_vars, cv_mean)) = &exact_terms {
        extra.push((*expected, -1.0));
        extra.push((*cv_mean, 1.0));
        let mut counts = vec![0.0; ln_u_vars.len()];
        for d in &draws {
            for (&i, &y) in d.order.iter().zip(&d.labels) {
                counts[2 * i + y] += scale;
            }
        }
        extra.extend(ln_u_vars.iter().zip(&counts).filter(|&(_, &c)| c != 0.0).map(|(&v, &c)| (v, -c)));
        ub += t.value(*cv_mean) - t.value(*expected);
    }
    let grad = pullback(&t, &vars, &tp, &kg, &extra)?;
    Ok(BoundEstimate { ub, std_error, grad })
}

/// ln π_i(k) for every node, where π_i is the single-node marginal of the NMM.
fn node_log_marginals(g: &Graph, p: &NmmParams) -> Vec<Vec<f64>> {
    let k = p.num_classes();
    (0..g.num_nodes())
        .map(|i| {
            let mut pi = vec![0.0; k];
            for (&j, &l) in g.hood(i).iter().zip(p.attn(i)) {
                let total = p.alpha_total(j);
                for (x, &a) in pi.iter_mut().zip(p.alpha(j)) {
                    *x += l * a / total;
                }
            }
            pi.into_iter().map(f64::ln).collect()
        })
        .collect()
}

/// Bound estimate at fixed parameters. For an Ising target the ln p̃* term
/// is replaced by its exact expectation, which leaves only the c-dependent
/// part to Monte Carlo. Σ_i ln π_i(y_i), whose expectation is exact, serves
/// as a control variate, so a model with L = identity evaluates without noise.
pub fn evaluate_bound(m: &IsingModel, g: &Graph, p: &NmmParams, num_samples: usize, seed: u64) -> Result<(f64, f64)> {
    check_binary_params(m, g, p)?;
    let lp = node_log_marginals(g, p);
    let cv_mean: f64 = lp.iter().map(|row| row.iter().map(|&l| if l > f64::NEG_INFINITY { l.exp() * l } else { 0.0 }).sum::<f64>()).sum();
    let zero = |_: &[usize]| Ok(0.0);
    let draws = map_indexed(num_samples, |s| draw_bound(g, p, &zero, &mut stream(seed, s as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = draws
        .iter()
        .map(|d| {
            let cv: f64 = d.order.iter().zip(&d.labels).map(|(&i, &y)| lp[i][y]).sum();
            d.log_joint - d.log_q - cv
        })
        .collect();
    let (mean, se) = mean_and_se(&xs);
    Ok((mean + cv_mean - nmm_expected_log_unnorm(m, g, p)?, se))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApproxInit {
    /// The backbone's own initialization.
    Default,
    /// α from the mean-field solution, L sharp on the diagonal. Free
    /// backbone only.
    MeanField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub steps: usize,
    pub samples: usize,
    pub lr: f64,
    pub seed: u64,
    pub init: ApproxInit,
    /// Samples for the final bound evaluation.
    pub eval_samples: usize,
    /// Smallest α entry of the mean-field start.
    pub init_alpha_min: f64,
    /// γ of the mean-field start.
    pub init_gamma: f64,
    /// Cosine decay of the step size to zero.
    pub anneal: bool,
    /// Also consider the mean-field anchor (α from mean field, γ = 50) and
    /// keep whichever of it and the optimized θ evaluates lower.
    pub select: bool,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        ApproxConfig {
            steps: 300,
            samples: 32,
            lr: 0.05,
            seed: 0,
            init: ApproxInit::MeanField,
            eval_samples: 20_000,
            init_alpha_min: 2.0,
            init_gamma: 6.0,
            anneal: true,
            select: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxRecord {
    pub step: usize,
    pub ub: f64,
}

#[derive(Debug, Clone)]
pub struct ApproxOutcome {
    pub theta: Vec<f64>,
    pub trace: Vec<ApproxRecord>,
    /// Evaluated bound at the returned θ, on draws not used for selection.
    pub free_energy: f64,
    pub std_error: f64,
    /// True when the mean-field anchor beat the optimized θ.
    pub anchored: bool,
}

/// α_i ∝ (1 − μ_i, μ_i), scaled so the smaller entry equals `alpha_min`.
pub fn mean_field_alpha(state: &MeanFieldState, alpha_min: f64) -> Vec<f64> {
    let eps = 1e-6;
    state
        .mu
        .iter()
        .flat_map(|&mu| {
            let mu = mu.clamp(eps, 1.0 - eps);
            let s = alpha_min / mu.min(1.0 - mu);
            [s * (1.0 - mu), s * mu]
        })
        .collect()
}

/// γ of the mean-field anchor; L_ii differs from 1 by less than 1e-20.
const ANCHOR_GAMMA: f64 = 50.0;

/// Minimizes the bound over θ with Adam.
///
/// With `select`, the optimized θ is kept only if its evaluated bound is
/// below the anchor's by more than two standard errors; otherwise the anchor,
/// whose bound is the mean-field free energy, is returned. The reported value
/// comes from a fresh evaluation of the winner.
pub fn fit_nmm(m: &IsingModel, par: &Parameterization, cfg: &ApproxConfig) -> Result<ApproxOutcome> {
    let g = m.graph();
    if par.num_classes != 2 || par.num_nodes != m.num_nodes() {
        return Err(NmmError::InvalidArgument("parameterization does not match the target".into()));
    }
    let mut theta = par.init_theta(&mut stream(cfg.seed, u64::MAX));
    let mut anchor = None;
    if cfg.init == ApproxInit::MeanField {
        let mf = mean_field_fit(m, 10_000, 1e-8)?;
        let alpha = mean_field_alpha(&mf.state, cfg.init_alpha_min);
        par.free_theta_for(&alpha, cfg.init_gamma, &mut theta)?;
        if cfg.select {
            let mut a = theta.clone();
            par.free_theta_for(&alpha, ANCHOR_GAMMA, &mut a)?;
            anchor = Some(a);
        }
    }
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cfg.anneal {
            adam.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        }
        let est = kl_upper_bound_ising(par, m, &theta, cfg.samples, child_seed(cfg.seed, step as u64))?;
        if !est.ub.is_finite() || !est.grad.is_finite() {
            return Err(NmmError::Diverged { epoch: step, elbo: -est.ub });
        }
        trace.push(ApproxRecord { step, ub: est.ub });
        let descent: Vec<f64> = est.grad.0.iter().map(|x| -x).collect();
        adam.ascend(&mut theta, &descent);
    }
    let select_seed = child_seed(cfg.seed ^ 0xA5C4_0E5E, u64::MAX);
    let mut anchored = false;
    if let Some(a) = anchor {
        let (ub, se) = evaluate_bound(m, g, &par.params(g, &theta)?, cfg.eval_samples, select_seed)?;
        let (ub_a, se_a) = evaluate_bound(m, g, &par.params(g, &a)?, cfg.eval_samples, select_seed)?;
        if !(ub + 2.0 * (se * se + se_a * se_a).sqrt() < ub_a) {
            theta = a;
            anchored = true;
        }
    }
    let p = par.params(g, &theta)?;
    let (free_energy, std_error) = evaluate_bound(m, g, &p, cfg.eval_samples, child_seed(cfg.seed, u64::MAX))?;
    Ok(ApproxOutcome {
        theta,
        trace,
        free_energy,
        std_error,
        anchored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parameterize::{AttentionMode, BackboneConfig};
    use crate::rng::seeded;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn log_unnorm_examples() {
        let m = IsingModel::grid(2, 2, 1.0, 0.0).unwrap();
        assert_eq!(m.log_unnorm(&[1, 1, 1, 1]).unwrap(), 4.0);
        assert_eq!(m.log_unnorm(&[0, 0, 0, 0]).unwrap(), 4.0);
        assert!(m.log_unnorm(&[0, 2, 0, 0]).is_err());
        let single = IsingModel::grid(1, 1, 0.0, 0.3).unwrap();
        assert!((single.log_unnorm(&[1]).unwrap() - 0.3).abs() < 1e-15);
        let flat = IsingModel::grid(2, 3, 0.0, 0.0).unwrap();
        assert_eq!(flat.log_unnorm(&[0, 1, 0, 1, 1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn mean_field_examples() {
        let m = IsingModel::grid(2, 3, 0.0, 0.0).unwrap();
        let fit = mean_field_fit(&m, 100, 1e-8).unwrap();
        assert!(fit.converged);
        assert!(fit.state.mu.iter().all(|&x| x == 0.5));
        assert!((fit.free_energy + 6.0 * 2f64.ln()).abs() < 1e-12);

        let g = make_grid_graph(2, 2).unwrap();
        let h = vec![0.3, -0.7, 1.1, 0.0];
        let m = IsingModel::new(g, h.clone(), &[0.0; 4]).unwrap();
        let fit = mean_field_fit(&m, 100, 1e-8).unwrap();
        let expect: f64 = -h.iter().map(|&x| (x.exp() + (-x).exp()).ln()).sum::<f64>();
        assert!((fit.free_energy - expect).abs() < 1e-12);
        let (kl, _) = exact_kl_mean_field(&m, &fit.state).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn mean_field_gap_is_the_true_kl() {
        let m = IsingModel::grid(2, 2, 0.5, 0.0).unwrap();
        let fit = mean_field_fit(&m, 10_000, 1e-10).unwrap();
        let (kl, log_z) = exact_kl_mean_field(&m, &fit.state).unwrap();
        assert!(fit.free_energy >= -log_z);
        assert!((fit.free_energy + log_z - kl).abs() < 1e-10);
        assert!(kl > 0.0);
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn uniform_target_oracles() {
        let m = IsingModel::grid(2, 2, 0.0, 0.0).unwrap();
        let g = m.graph().clone();
        let (kl, log_z) = exact_kl_mean_field(&m, &MeanFieldState { mu: vec![0.5; 4] }).unwrap();
        assert!(kl.abs() < 1e-12);
        assert!((log_z - 4.0 * 2f64.ln()).abs() < 1e-12);
        let p = NmmParams::independent(&g, 2, vec![1.0; 8]).unwrap();
        let (kl, _) = exact_kl_nmm(&m, &g, &p).unwrap();
        assert!(kl.abs() < 1e-12);
        let (ub, se) = evaluate_bound(&m, &g, &p, 100, 0).unwrap();
        assert!((ub + 4.0 * 2f64.ln()).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn identity_attention_bound_is_mean_field() {
        let g = make_grid_graph(2, 2).unwrap();
        let m = IsingModel::new(g.clone(), vec![0.2, -0.1, 0.4, 0.0], &[0.5, -0.3, 0.2, 0.6]).unwrap();
        let mu = [0.3, 0.6, 0.8, 0.45];
        let alpha: Vec<f64> = mu.iter().flat_map(|&x| [2.0 * (1.0 - x), 2.0 * x]).collect();
        let p = NmmParams::independent(&g, 2, alpha).unwrap();
        let f = mean_field_free_energy(&m, &MeanFieldState { mu: mu.to_vec() });
        assert!((exact_upper_bound(&m, &g, &p).unwrap() - f).abs() < 1e-12);
        let (ub, se) = evaluate_bound(&m, &g, &p, 20_000, 1).unwrap();
        assert!((ub - f).abs() < 4.0 * se);
    }

    #[test]
    fn bound_dominates_the_exact_kl() {
        let mut rng = seeded(5);
        let g = make_grid_graph(2, 2).unwrap();
        let normal = Normal::new(0.0, 0.4).unwrap();
        let h: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
        let j: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..0.8)).collect();
        let m = IsingModel::new(g.clone(), h, &j).unwrap();
        let alpha: Vec<f64> = (0..8).map(|_| rng.random_range(1.0..3.0)).collect();
        let mut attn = Vec::new();
        for i in 0..4 {
            let w: Vec<f64> = (0..g.hood(i).len()).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            attn.extend(w.iter().map(|x| x / s));
        }
        let p = NmmParams::new(&g, 2, alpha, attn).unwrap();
        let (kl, log_z) = exact_kl_nmm(&m, &g, &p).unwrap();
        let ub = exact_upper_bound(&m, &g, &p).unwrap();
        assert!(kl >= 0.0);
        assert!(ub + log_z >= kl - 1e-12);
        let (mc, se) = evaluate_bound(&m, &g, &p, 20_000, 2).unwrap();
        assert!((mc - ub).abs() < 4.0 * se, "{mc} vs {ub} ± {se}");
        // the unbiased estimator with the target in the integrand
        let par = Parameterization::new(BackboneConfig::default(), &g, 2).unwrap();
        let theta = vec![0.0; par.num_params()];
        let pp = par.params(&g, &theta).unwrap();
        let est = kl_upper_bound(&par, &g, &theta, &|y: &[usize]| m.log_unnorm(y), 20_000, 3).unwrap();
        let exact = exact_upper_bound(&m, &g, &pp).unwrap();
        assert!((est.ub - exact).abs() < 4.0 * est.std_error);
    }

    #[test]
    fn bound_gradient_is_unbiased() {
        // FD of the exact bound over θ versus the mean of many estimates
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let m = IsingModel::new(g.clone(), vec![0.3, -0.2], &[0.7]).unwrap();
        let par = Parameterization::new(
            BackboneConfig {
                embed_dim: 2,
                ..Default::default()
            },
            &g,
            2,
        )
        .unwrap();
        let theta = vec![0.4, -0.3, 0.1, 0.2, 0.5, -0.5, 0.3, 0.8, 0.9, 0.2];
        let exact = |th: &[f64]| exact_upper_bound(&m, &g, &par.params(&g, th).unwrap()).unwrap();
        let reps = 400;
        let mut sum = vec![0.0; theta.len()];
        let mut sq = vec![0.0; theta.len()];
        for r in 0..reps {
            let est = kl_upper_bound(&par, &g, &theta, &|y: &[usize]| m.log_unnorm(y), 32, r).unwrap();
            for (k, &d) in est.grad.0.iter().enumerate() {
                sum[k] += d;
                sq[k] += d * d;
            }
        }
        for k in 0..theta.len() {
            let mean = sum[k] / reps as f64;
            let se = ((sq[k] / reps as f64 - mean * mean) / reps as f64).sqrt();
            let mut a = theta.clone();
            a[k] += 1e-5;
            let mut b = theta.clone();
            b[k] -= 1e-5;
            let fd = (exact(&a) - exact(&b)) / 2e-5;
            assert!((mean - fd).abs() < 4.0 * se + 1e-6, "coord {k}: {mean} vs {fd} ± {se}");
        }
    }

    #[test]
    fn expected_target_matches_enumeration() {
        let mut rng = seeded(9);
        let g = make_grid_graph(2, 3).unwrap();
        let h: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let j: Vec<f64> = (0..g.num_edges()).map(|_| rng.random_range(-0.8..0.8)).collect();
        let m = IsingModel::new(g.clone(), h, &j).unwrap();
        let alpha: Vec<f64> = (0..12).map(|_| rng.random_range(0.3..4.0)).collect();
        let mut attn = Vec::new();
        for i in 0..6 {
            let w: Vec<f64> = (0..g.hood(i).len()).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            attn.extend(w.iter().map(|x| x / s));
        }
        let p = NmmParams::new(&g, 2, alpha, attn).unwrap();
        let mut brute = 0.0;
        for_each_binary(6, |y| {
            let lab = LabeledNodes::new((0..6).collect(), y.to_vec(), 6, 2)?;
            brute += exact_marginal_with_budget(&g, &p, &lab, EnumBudget::default())?.exp() * m.log_unnorm(y)?;
            Ok(())
        })
        .unwrap();
        assert!((nmm_expected_log_unnorm(&m, &g, &p).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn ising_bound_gradient_is_unbiased() {
        let g = make_grid_graph(1, 3).unwrap();
        let m = IsingModel::new(g.clone(), vec![0.3, -0.2, 0.1], &[0.7, 0.4]).unwrap();
        let par = Parameterization::new(
            BackboneConfig {
                embed_dim: 2,
                ..Default::default()
            },
            &g,
            2,
        )
        .unwrap();
        let theta: Vec<f64> = (0..par.num_params()).map(|k| ((k as f64) * 0.77).sin()).collect();
        let exact = |th: &[f64]| exact_upper_bound(&m, &g, &par.params(&g, th).unwrap()).unwrap();
        let reps = 300;
        let mut sum = vec![0.0; theta.len()];
        let mut sq = vec![0.0; theta.len()];
        let mut ub = 0.0;
        for r in 0..reps {
            let est = kl_upper_bound_ising(&par, &m, &theta, 16, r).unwrap();
            ub += est.ub / reps as f64;
            for (k, &d) in est.grad.0.iter().enumerate() {
                sum[k] += d;
                sq[k] += d * d;
            }
        }
        assert!((ub - exact(&theta)).abs() < 0.01);
        for k in 0..theta.len() {
            let mean = sum[k] / reps as f64;
            let se = ((sq[k] / reps as f64 - mean * mean) / reps as f64).sqrt();
            let mut a = theta.clone();
            a[k] += 1e-5;
            let mut b = theta.clone();
            b[k] -= 1e-5;
            let fd = (exact(&a) - exact(&b)) / 2e-5;
            assert!((mean - fd).abs() < 4.0 * se + 1e-6, "coord {k}: {mean} vs {fd} ± {se}");
        }
    }

    #[test]
    fn oracle_size_limit() {
        let m = IsingModel::grid(3, 7, 0.1, 0.0).unwrap();
        assert!(ising_log_partition(&m).is_err());
        let m4 = IsingModel::grid(4, 4, 0.1, 0.0).unwrap();
        let g = m4.graph().clone();
        let p = NmmParams::uniform(&g, &[1.0, 1.0]).unwrap();
        assert!(exact_kl_nmm(&m4, &g, &p).is_err());
    }

    #[test]
    fn features_and_spec() {
        let spec: IsingSpec = serde_json::from_str(r#"{"height":2,"width":2,"J":[0.1,0.2,0.3,0.4],"h":0.5}"#).unwrap();
        let m = IsingModel::from_spec(&spec).unwrap();
        let x = m.potential_features();
        assert_eq!(x.dim, 3);
        // node 0 neighbors 1 and 2: edges (0,1) and (0,2)
        assert_eq!(x.row(0), &[0.5, 0.1, 0.2]);
        let bad: IsingSpec = serde_json::from_str(r#"{"height":2,"width":2,"J":[0.1],"h":0.5}"#).unwrap();
        assert!(IsingModel::from_spec(&bad).is_err());
    }

    #[test]
    fn identity_model_bound_has_no_noise() {
        let g = make_grid_graph(2, 2).unwrap();
        let m = IsingModel::grid(2, 2, 0.0, 0.0).unwrap();
        let cfg = BackboneConfig {
            attention: AttentionMode::Identity,
            ..Default::default()
        };
        let par = Parameterization::new(cfg, &g, 2).unwrap();
        let theta = vec![0.0; par.num_params()];
        let est = kl_upper_bound(&par, &g, &theta, &|y: &[usize]| m.log_unnorm(y), 64, 0).unwrap();
        assert!((est.ub + 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(est.std_error < 1e-12);
    }
}
