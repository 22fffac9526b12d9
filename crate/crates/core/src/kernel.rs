//! The collapsed NMM probability core.
//!
//! Every node j owns a latent label distribution z_j ~ Dirichlet(α_j).
//! Node i picks a neighbor c_i ∈ n(i) with probability L_{i,c_i} and draws
//! its label from z_{c_i}. Integrating z out gives the closed form
//!
//! ```text
//! ln p(y_τ, c_τ) = Σ_{i∈τ} ln L_{i,c_i} + Σ_{j ∈ c_τ} [ln B(α_j + s_j) − ln B(α_j)]
//! ```
//!
//! where s_j counts, per class, the nodes of τ that chose j.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{NmmError, Result};
use crate::graph::Graph;
use crate::special::ln_beta;

/// Per-node Dirichlet concentrations and neighbor attention.
///
/// `attn` is flattened in the graph's neighborhood order: the row for node i
/// lines up with the sorted list n(i).
#[derive(Debug, Clone, PartialEq)]
pub struct NmmParams {
    num_classes: usize,
    alpha: Vec<f64>,
    alpha_total: Vec<f64>,
    attn: Vec<f64>,
    offsets: Vec<usize>,
}

const ATTN_SUM_TOL: f64 = 1e-12;

impl NmmParams {
    pub fn new(g: &Graph, num_classes: usize, alpha: Vec<f64>, attn: Vec<f64>) -> Result<Self> {
        let n = g.num_nodes();
        if num_classes < 2 {
            return Err(NmmError::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if alpha.len() != n * num_classes {
            return Err(NmmError::InvalidArgument(format!(
                "alpha has {} entries, expected {}",
                alpha.len(),
                n * num_classes
            )));
        }
        if attn.len() != g.hood_len() {
            return Err(NmmError::InvalidArgument(format!(
                "attention has {} entries, expected {}",
                attn.len(),
                g.hood_len()
            )));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(NmmError::Domain(format!("alpha entries must be positive, got {a}")));
        }
        let offsets: Vec<usize> = (0..=n)
            .map(|i| if i == n { g.hood_len() } else { g.hood_offset(i) })
            .collect();
        for i in 0..n {
            let row = &attn[offsets[i]..offsets[i + 1]];
            if row.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(NmmError::Domain(format!("attention row {i} has invalid entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ATTN_SUM_TOL * row.len() as f64 {
                return Err(NmmError::Domain(format!("attention row {i} sums to {s}")));
            }
        }
        let alpha_total = alpha.chunks(num_classes).map(|r| r.iter().sum()).collect();
        Ok(NmmParams {
            num_classes,
            alpha,
            alpha_total,
            attn,
            offsets,
        })
    }

    /// Same α for every node, uniform attention over each neighborhood.
    pub fn uniform(g: &Graph, alpha: &[f64]) -> Result<Self> {
        let attn = (0..g.num_nodes())
            .flat_map(|i| {
                let d = g.hood(i).len();
                std::iter::repeat_n(1.0 / d as f64, d)
            })
            .collect();
        let alpha = alpha.repeat(g.num_nodes());
        Self::new(g, alpha.len() / g.num_nodes().max(1), alpha, attn)
    }

    /// L_i = onehot(i): labels are independent given α.
    pub fn independent(g: &Graph, num_classes: usize, alpha: Vec<f64>) -> Result<Self> {
        let mut attn = vec![0.0; g.hood_len()];
        for i in 0..g.num_nodes() {
            let pos = g.hood_position(i, i).expect("self in neighborhood");
            attn[g.hood_offset(i) + pos] = 1.0;
        }
        Self::new(g, num_classes, alpha, attn)
    }

    pub fn num_nodes(&self) -> usize {
        self.alpha_total.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn alpha(&self, j: usize) -> &[f64] {
        &self.alpha[j * self.num_classes..(j + 1) * self.num_classes]
    }

    #[inline]
    pub fn alpha_total(&self, j: usize) -> f64 {
        self.alpha_total[j]
    }

    pub fn alpha_flat(&self) -> &[f64] {
        &self.alpha
    }

    /// L_i aligned with n(i).
    #[inline]
    pub fn attn(&self, i: usize) -> &[f64] {
        &self.attn[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn attn_flat(&self) -> &[f64] {
        &self.attn
    }

    /// Checks that these parameters were built for `g`.
    pub fn check_graph(&self, g: &Graph) -> Result<()> {
        if self.num_nodes() != g.num_nodes() || self.attn.len() != g.hood_len() {
            return Err(NmmError::InvalidArgument(
                "parameters do not match the graph".into(),
            ));
        }
        Ok(())
    }

    /// Prior predictive Σ_j L_ij α_j / α_{j,0} for node i.
    pub fn prior_marginal(&self, g: &Graph, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for (&j, &l) in g.hood(i).iter().zip(self.attn(i)) {
            let a = self.alpha(j);
            let t = self.alpha_total(j);
            for (o, &ak) in out.iter_mut().zip(a) {
                *o += l * ak / t;
            }
        }
        out
    }

    pub fn to_document(&self, g: &Graph) -> ParamsDocument {
        ParamsDocument {
            num_nodes: self.num_nodes(),
            num_classes: self.num_classes,
            alpha: self.alpha.chunks(self.num_classes).map(|r| r.to_vec()).collect(),
            attn: (0..self.num_nodes())
                .map(|i| AttnRow {
                    neighbors: g.hood(i).to_vec(),
                    weights: self.attn(i).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_document(g: &Graph, doc: &ParamsDocument) -> Result<Self> {
        if doc.num_nodes != g.num_nodes() || doc.attn.len() != g.num_nodes() {
            return Err(NmmError::InvalidArgument("parameter document node count mismatch".into()));
        }
        let mut attn = Vec::with_capacity(g.hood_len());
        for (i, row) in doc.attn.iter().enumerate() {
            if row.neighbors != g.hood(i) || row.weights.len() != row.neighbors.len() {
                return Err(NmmError::InvalidArgument(format!(
                    "attention row {i} is not aligned with the graph neighborhood"
                )));
            }
            attn.extend_from_slice(&row.weights);
        }
        let alpha: Vec<f64> = doc.alpha.iter().flatten().copied().collect();
        Self::new(g, doc.num_classes, alpha, attn)
    }
}

/// Serialized form of [`NmmParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub alpha: Vec<Vec<f64>>,
    pub attn: Vec<AttnRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnRow {
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Labels observed on a node subset τ, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledNodes {
    nodes: Vec<usize>,
    labels: Vec<usize>,
}

impl LabeledNodes {
    pub fn new(nodes: Vec<usize>, labels: Vec<usize>, num_nodes: usize, num_classes: usize) -> Result<Self> {
        if nodes.len() != labels.len() {
            return Err(NmmError::InvalidArgument(format!(
                "{} nodes but {} labels",
                nodes.len(),
                labels.len()
            )));
        }
        let mut seen = vec![false; num_nodes];
        for (&i, &y) in nodes.iter().zip(&labels) {
            if i >= num_nodes {
                return Err(NmmError::NodeOutOfRange { node: i, num_nodes });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(NmmError::DuplicateNode(i));
            }
            if y >= num_classes {
                return Err(NmmError::InvalidArgument(format!(
                    "label {y} of node {i} is not below {num_classes}"
                )));
            }
        }
        Ok(LabeledNodes { nodes, labels })
    }

    /// Known labels among `subset`, skipping unknowns.
    pub fn from_partial(
        labels: &[Option<usize>],
        subset: impl IntoIterator<Item = usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let (nodes, ys): (Vec<_>, Vec<_>) = subset
            .into_iter()
            .filter_map(|i| labels.get(i).copied().flatten().map(|y| (i, y)))
            .unzip();
        Self::new(nodes, ys, labels.len(), num_classes)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().copied().zip(self.labels.iter().copied())
    }

    pub fn contains(&self, i: usize) -> bool {
        self.nodes.contains(&i)
    }

    /// Union with `other`; `other`'s nodes come last.
    pub fn concat(&self, other: &LabeledNodes) -> Result<Self> {
        let n = self
            .nodes
            .iter()
            .chain(&other.nodes)
            .max()
            .map_or(0, |m| m + 1);
        let c = self
            .labels
            .iter()
            .chain(&other.labels)
            .max()
            .map_or(2, |m| (m + 1).max(2));
        Self::new(
            [self.nodes.clone(), other.nodes.clone()].concat(),
            [self.labels.clone(), other.labels.clone()].concat(),
            n,
            c,
        )
    }
}

/// The neighbor chosen by each node of τ, aligned with a [`LabeledNodes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborAssignment(pub Vec<usize>);

impl NeighborAssignment {
    pub fn choices(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, g: &Graph, y: &LabeledNodes) -> Result<()> {
        if self.0.len() != y.len() {
            return Err(NmmError::InvalidArgument(format!(
                "assignment covers {} nodes, labels cover {}",
                self.0.len(),
                y.len()
            )));
        }
        for (&i, &c) in y.nodes().iter().zip(&self.0) {
            if g.hood_position(i, c).is_none() {
                return Err(NmmError::NotANeighbor { node: i, choice: c });
            }
        }
        Ok(())
    }
}

const ABSENT: u32 = u32::MAX;

/// Sparse per-node class counts s_j, with row totals.
///
/// Rows are kept in first-touch order. `clear` only resets touched rows, so
/// one table can be reused across many samples.
#[derive(Debug, Clone)]
pub struct CountTable {
    num_classes: usize,
    slot: Vec<u32>,
    keys: Vec<usize>,
    counts: Vec<u32>,
    totals: Vec<u32>,
}

impl CountTable {
    pub fn new(num_nodes: usize, num_classes: usize) -> Self {
        CountTable {
            num_classes,
            slot: vec![ABSENT; num_nodes],
            keys: Vec::new(),
            counts: Vec::new(),
            totals: Vec::new(),
        }
    }

    #[inline]
    pub fn count(&self, j: usize, k: usize) -> u32 {
        match self.slot[j] {
            ABSENT => 0,
            s => self.counts[s as usize * self.num_classes + k],
        }
    }

    #[inline]
    pub fn total(&self, j: usize) -> u32 {
        match self.slot[j] {
            ABSENT => 0,
            s => self.totals[s as usize],
        }
    }

    pub fn row(&self, j: usize) -> Option<&[u32]> {
        match self.slot[j] {
            ABSENT => None,
            s => {
                let s = s as usize;
                Some(&self.counts[s * self.num_classes..(s + 1) * self.num_classes])
            }
        }
    }

    pub fn add(&mut self, j: usize, k: usize) {
        let s = match self.slot[j] {
            ABSENT => {
                let s = self.keys.len();
                self.slot[j] = s as u32;
                self.keys.push(j);
                self.counts.extend(std::iter::repeat_n(0, self.num_classes));
                self.totals.push(0);
                s
            }
            s => s as usize,
        };
        self.counts[s * self.num_classes + k] += 1;
        self.totals[s] += 1;
    }

    /// Undoes one `add(j, k)`. The row stays allocated.
    pub fn remove(&mut self, j: usize, k: usize) {
        let s = self.slot[j] as usize;
        self.counts[s * self.num_classes + k] -= 1;
        self.totals[s] -= 1;
    }

    /// Nodes with a row, in first-touch order.
    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn clear(&mut self) {
        for &j in &self.keys {
            self.slot[j] = ABSENT;
        }
        self.keys.clear();
        self.counts.clear();
        self.totals.clear();
    }

    /// Non-zero rows as a sorted map, for comparisons.
    pub fn to_map(&self) -> std::collections::BTreeMap<usize, Vec<u32>> {
        self.keys
            .iter()
            .filter(|&&j| self.total(j) > 0)
            .map(|&j| (j, self.row(j).unwrap().to_vec()))
            .collect()
    }
}

/// s_j = Σ_{i∈τ: c_i=j} onehot(y_i).
pub fn suff_stats(
    num_nodes: usize,
    num_classes: usize,
    y: &LabeledNodes,
    c: &NeighborAssignment,
) -> Result<CountTable> {
    if c.0.len() != y.len() {
        return Err(NmmError::InvalidArgument(format!(
            "assignment covers {} nodes, labels cover {}",
            c.0.len(),
            y.len()
        )));
    }
    let mut table = CountTable::new(num_nodes, num_classes);
    for (&j, &k) in c.0.iter().zip(y.labels()) {
        if j >= num_nodes {
            return Err(NmmError::NodeOutOfRange { node: j, num_nodes });
        }
        table.add(j, k);
    }
    Ok(table)
}

/// ln p(y_τ, c_τ | α, L) with z integrated out. A zero attention weight on a
/// chosen neighbor gives −∞.
pub fn log_joint(g: &Graph, p: &NmmParams, y: &LabeledNodes, c: &NeighborAssignment) -> Result<f64> {
    c.validate(g, y)?;
    let counts = suff_stats(g.num_nodes(), p.num_classes(), y, c)?;
    let mut lp = 0.0;
    for (&i, &j) in y.nodes().iter().zip(c.choices()) {
        let pos = g.hood_position(i, j).expect("validated");
        lp += p.attn(i)[pos].ln();
    }
    let mut buf = vec![0.0; p.num_classes()];
    for &j in counts.keys() {
        let a = p.alpha(j);
        for (k, b) in buf.iter_mut().enumerate() {
            *b = a[k] + counts.count(j, k) as f64;
        }
        lp += ln_beta(&buf) - ln_beta(a);
    }
    Ok(lp)
}

/// Limits on brute-force enumeration over c_τ.
#[derive(Debug, Clone, Copy)]
pub struct EnumBudget {
    pub max_nodes: usize,
    pub max_configs: f64,
}

impl Default for EnumBudget {
    fn default() -> Self {
        EnumBudget {
            max_nodes: 12,
            max_configs: (1u64 << 24) as f64,
        }
    }
}

impl EnumBudget {
    pub fn check(&self, configs: f64, nodes: usize) -> Result<()> {
        if nodes > self.max_nodes || configs > self.max_configs {
            return Err(NmmError::BudgetExceeded {
                configs,
                limit: self.max_configs,
            });
        }
        Ok(())
    }
}

/// Number of joint neighbor assignments Π_{i∈τ} |n(i)|.
pub fn assignment_count(g: &Graph, nodes: &[usize]) -> f64 {
    nodes.iter().map(|&i| g.hood(i).len() as f64).product()
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    scaled: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }
}

impl LogSumExp {
    #[inline]
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.scaled += (x - self.max).exp();
        } else {
            self.scaled = self.scaled * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut acc = LogSumExp::default();
    xs.iter().for_each(|&x| acc.push(x));
    acc.value()
}

/// ln p(y_τ | α, L) by summing the collapsed joint over every c_τ.
pub fn exact_marginal(g: &Graph, p: &NmmParams, y: &LabeledNodes) -> Result<f64> {
    exact_marginal_with_budget(g, p, y, EnumBudget::default())
}

pub fn exact_marginal_with_budget(
    g: &Graph,
    p: &NmmParams,
    y: &LabeledNodes,
    budget: EnumBudget,
) -> Result<f64> {
    p.check_graph(g)?;
    budget.check(assignment_count(g, y.nodes()), y.len())?;
    let mut counts = CountTable::new(g.num_nodes(), p.num_classes());
    let mut acc = LogSumExp::default();
    enumerate_assignments(g, p, y, 0, 0.0, &mut counts, &mut acc);
    Ok(acc.value())
}

/// Depth-first enumeration using the one-node increment
/// ln L_ij + ln(α_{j,y} + s_{j,y}) − ln(α_{j,0} + s_{j,0}).
fn enumerate_assignments(
    g: &Graph,
    p: &NmmParams,
    y: &LabeledNodes,
    depth: usize,
    lp: f64,
    counts: &mut CountTable,
    acc: &mut LogSumExp,
) {
    if depth == y.len() {
        acc.push(lp);
        return;
    }
    let i = y.nodes()[depth];
    let yi = y.labels()[depth];
    for (&j, &l) in g.hood(i).iter().zip(p.attn(i)) {
        if l == 0.0 {
            continue;
        }
        let step = l.ln() + (p.alpha(j)[yi] + counts.count(j, yi) as f64).ln()
            - (p.alpha_total(j) + counts.total(j) as f64).ln();
        counts.add(j, yi);
        enumerate_assignments(g, p, y, depth + 1, lp + step, counts, acc);
        counts.remove(j, yi);
    }
}

/// α′_j = α_j + s_j(y_τ, c_τ), flattened N×C.
pub fn posterior_alpha(g: &Graph, p: &NmmParams, y: &LabeledNodes, c: &NeighborAssignment) -> Result<Vec<f64>> {
    c.validate(g, y)?;
    let counts = suff_stats(g.num_nodes(), p.num_classes(), y, c)?;
    let mut out = p.alpha_flat().to_vec();
    let nc = p.num_classes();
    for &j in counts.keys() {
        for k in 0..nc {
            out[j * nc + k] += counts.count(j, k) as f64;
        }
    }
    Ok(out)
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return k;
            }
            u -= w;
            last = k;
        }
    }
    last
}

/// z ~ Dirichlet(α) through normalized Gamma(α_k, 1) draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R, out: &mut [f64]) {
    let mut total = 0.0;
    for (o, &a) in out.iter_mut().zip(alpha) {
        let g = Gamma::new(a, 1.0).expect("positive shape");
        *o = g.sample(rng);
        total += *o;
    }
    if total > 0.0 && total.is_finite() {
        out.iter_mut().for_each(|o| *o /= total);
    } else {
        // Every draw underflowed: the limit is a vertex of the simplex.
        let k = rng.random_range(0..out.len());
        out.iter_mut().enumerate().for_each(|(m, o)| *o = (m == k) as u8 as f64);
    }
}

fn sample_all_z<R: Rng + ?Sized>(p: &NmmParams, rng: &mut R) -> Vec<f64> {
    let nc = p.num_classes();
    let mut z = vec![0.0; p.num_nodes() * nc];
    for j in 0..p.num_nodes() {
        sample_dirichlet(p.alpha(j), rng, &mut z[j * nc..(j + 1) * nc]);
    }
    z
}

/// Ancestral draw of (y, c) over all of V: z_j, then c_i, then y_i ~ z_{c_i}.
pub fn sample_labels_ancestral<R: Rng + ?Sized>(
    g: &Graph,
    p: &NmmParams,
    rng: &mut R,
) -> (Vec<usize>, NeighborAssignment) {
    let nc = p.num_classes();
    let z = sample_all_z(p, rng);
    let mut y = Vec::with_capacity(g.num_nodes());
    let mut c = Vec::with_capacity(g.num_nodes());
    for i in 0..g.num_nodes() {
        let j = g.hood(i)[sample_index(p.attn(i), rng)];
        c.push(j);
        y.push(sample_index(&z[j * nc..(j + 1) * nc], rng));
    }
    (y, NeighborAssignment(c))
}

/// Draws y over V from the mixture u_i = Σ_j L_ij z_j without sampling c.
pub fn sample_labels_marginalized<R: Rng + ?Sized>(g: &Graph, p: &NmmParams, rng: &mut R) -> Vec<usize> {
    let nc = p.num_classes();
    let z = sample_all_z(p, rng);
    let mut u = vec![0.0; nc];
    (0..g.num_nodes())
        .map(|i| {
            u.iter_mut().for_each(|x| *x = 0.0);
            for (&j, &l) in g.hood(i).iter().zip(p.attn(i)) {
                for (k, uk) in u.iter_mut().enumerate() {
                    *uk += l * z[j * nc + k];
                }
            }
            sample_index(&u, rng)
        })
        .collect()
}
