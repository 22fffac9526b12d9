//! ln p(y, c) and ln q(c | y) recorded on a tape with α and ln L as leaves.
//!
//! Leaves are created on first use, so a per-sample tape only holds the
//! parameters the sample touches. After `backward`, the adjoints scatter
//! into dense buffers aligned with `NmmParams::alpha_flat` and the
//! neighborhood layout of the attention weights.

use crate::error::{NmmError, Result};
use crate::grad::{Tape, Var};
use crate::graph::Graph;
use crate::kernel::{CountTable, NmmParams};

const ABSENT: u32 = u32::MAX;

enum Leaves<'a> {
    /// Fresh tape inputs with these values. ln L = −∞ marks a zero weight.
    Values { alpha: &'a [f64], log_attn: Vec<f64> },
    /// Existing records.
    Vars { alpha: &'a [Var], log_attn: &'a [Var], live: &'a [bool] },
}

pub struct KernelExpr<'a> {
    g: &'a Graph,
    num_classes: usize,
    leaves: Leaves<'a>,
    // node -> first of C alpha vars, followed by their sum
    alpha_slot: Vec<u32>,
    alpha_vars: Vec<Var>,
    alpha_touched: Vec<usize>,
    attn_slot: Vec<u32>,
    attn_touched: Vec<usize>,
    attn_vars: Vec<Var>,
}

impl<'a> KernelExpr<'a> {
    /// Leaves take their values from `p`.
    pub fn from_params(g: &'a Graph, p: &'a NmmParams) -> Self {
        let log_attn = p
            .attn_flat()
            .iter()
            .map(|&l| if l > 0.0 { l.ln() } else { f64::NEG_INFINITY })
            .collect();
        Self::build(
            g,
            p.num_classes(),
            Leaves::Values {
                alpha: p.alpha_flat(),
                log_attn,
            },
        )
    }

    /// Leaves are existing vars. Positions with `live[k] == false` have zero
    /// attention and are never chosen.
    pub fn from_vars(
        g: &'a Graph,
        num_classes: usize,
        alpha: &'a [Var],
        log_attn: &'a [Var],
        live: &'a [bool],
    ) -> Result<Self> {
        if alpha.len() != g.num_nodes() * num_classes || log_attn.len() != g.hood_len() || live.len() != g.hood_len() {
            return Err(NmmError::InvalidArgument("leaf vars do not match the graph".into()));
        }
        Ok(Self::build(g, num_classes, Leaves::Vars { alpha, log_attn, live }))
    }

    fn build(g: &'a Graph, num_classes: usize, leaves: Leaves<'a>) -> Self {
        KernelExpr {
            g,
            num_classes,
            leaves,
            alpha_slot: vec![ABSENT; g.num_nodes()],
            alpha_vars: Vec::new(),
            alpha_touched: Vec::new(),
            attn_slot: vec![ABSENT; g.hood_len()],
            attn_touched: Vec::new(),
            attn_vars: Vec::new(),
        }
    }

    fn live(&self, k: usize) -> bool {
        match &self.leaves {
            Leaves::Values { log_attn, .. } => log_attn[k] > f64::NEG_INFINITY,
            Leaves::Vars { live, .. } => live[k],
        }
    }

    /// Index of node j's block in `alpha_vars`: C vars then their sum.
    fn alpha_block(&mut self, t: &mut Tape, j: usize) -> usize {
        if self.alpha_slot[j] != ABSENT {
            return self.alpha_slot[j] as usize;
        }
        let c = self.num_classes;
        let start = self.alpha_vars.len();
        for k in 0..c {
            let v = match &self.leaves {
                Leaves::Values { alpha, .. } => t.var(alpha[j * c + k]),
                Leaves::Vars { alpha, .. } => alpha[j * c + k],
            };
            self.alpha_vars.push(v);
        }
        let total = t.sum(&self.alpha_vars[start..start + c]);
        self.alpha_vars.push(total);
        self.alpha_slot[j] = start as u32;
        self.alpha_touched.push(j);
        start
    }

    fn log_attn(&mut self, t: &mut Tape, k: usize) -> Var {
        if self.attn_slot[k] != ABSENT {
            return self.attn_vars[self.attn_slot[k] as usize];
        }
        let v = match &self.leaves {
            Leaves::Values { log_attn, .. } => t.var(log_attn[k]),
            Leaves::Vars { log_attn, .. } => log_attn[k],
        };
        self.attn_slot[k] = self.attn_vars.len() as u32;
        self.attn_vars.push(v);
        self.attn_touched.push(k);
        v
    }

    /// ln p(y, c) over the given nodes; the three slices are aligned.
    pub fn log_joint(&mut self, t: &mut Tape, nodes: &[usize], labels: &[usize], choices: &[usize]) -> Result<Var> {
        let c = self.num_classes;
        let mut counts = CountTable::new(self.g.num_nodes(), c);
        let mut lp = t.constant(0.0);
        for ((&i, &yi), &j) in nodes.iter().zip(labels).zip(choices) {
            let k = self.position(i, j)?;
            if !self.live(k) {
                return Err(NmmError::NotANeighbor { node: i, choice: j });
            }
            let la = self.log_attn(t, k);
            lp = t.add(lp, la);
            counts.add(j, yi);
        }
        let mut tmp = Vec::with_capacity(c);
        for &j in counts.keys() {
            let b = self.alpha_block(t, j);
            tmp.clear();
            for k in 0..c {
                let a = self.alpha_vars[b + k];
                tmp.push(t.add_const(a, counts.count(j, k) as f64));
            }
            let post = self.log_beta(t, &tmp);
            let prior_vars: Vec<Var> = self.alpha_vars[b..b + c].to_vec();
            let prior = self.log_beta(t, &prior_vars);
            let d = t.sub(post, prior);
            lp = t.add(lp, d);
        }
        Ok(lp)
    }

    fn log_beta(&self, t: &mut Tape, a: &[Var]) -> Var {
        let lg: Vec<Var> = a.iter().map(|&x| t.log_gamma(x)).collect();
        let acc = t.sum(&lg);
        let total = t.sum(a);
        let lt = t.log_gamma(total);
        t.sub(acc, lt)
    }

    fn position(&self, i: usize, j: usize) -> Result<usize> {
        self.g
            .hood_position(i, j)
            .map(|pos| self.g.hood_offset(i) + pos)
            .ok_or(NmmError::NotANeighbor { node: i, choice: j })
    }

    /// ln q(c | y) with nodes given in visit order.
    pub fn log_q(&mut self, t: &mut Tape, order: &[usize], labels: &[usize], choices: &[usize]) -> Result<Var> {
        let g = self.g;
        let mut counts = CountTable::new(g.num_nodes(), self.num_classes);
        let mut lq = t.constant(0.0);
        let mut logits = Vec::with_capacity(g.max_degree());
        for ((&i, &yi), &jc) in order.iter().zip(labels).zip(choices) {
            let off = g.hood_offset(i);
            logits.clear();
            let mut chosen = None;
            for (pos, &j) in g.hood(i).iter().enumerate() {
                if !self.live(off + pos) {
                    continue;
                }
                let la = self.log_attn(t, off + pos);
                let b = self.alpha_block(t, j);
                let num = t.add_const(self.alpha_vars[b + yi], counts.count(j, yi) as f64);
                let den = t.add_const(self.alpha_vars[b + self.num_classes], counts.total(j) as f64);
                let ln_num = t.ln(num);
                let ln_den = t.ln(den);
                let r = t.sub(ln_num, ln_den);
                if j == jc {
                    chosen = Some(logits.len());
                }
                logits.push(t.add(la, r));
            }
            let Some(ci) = chosen else {
                return Err(NmmError::NotANeighbor { node: i, choice: jc });
            };
            let lse = t.logsumexp(&logits);
            let term = t.sub(logits[ci], lse);
            lq = t.add(lq, term);
            counts.add(jc, yi);
        }
        Ok(lq)
    }

    /// Adds `scale` × the leaf adjoints into dense gradient buffers.
    pub fn scatter(&self, adj: &[f64], scale: f64, d_alpha: &mut [f64], d_log_attn: &mut [f64]) {
        let c = self.num_classes;
        for &j in &self.alpha_touched {
            let b = self.alpha_slot[j] as usize;
            for k in 0..c {
                d_alpha[j * c + k] += scale * adj[self.alpha_vars[b + k].index()];
            }
        }
        for &k in &self.attn_touched {
            d_log_attn[k] += scale * adj[self.attn_vars[self.attn_slot[k] as usize].index()];
        }
    }
}

/// Gradient of Σ_s [a_s·ln q(c_s | y) + b_s·ln p(y, c_s)] with respect to α
/// and ln L, for samples given as (order, labels, choices, a_s, b_s).
#[derive(Debug, Clone)]
pub struct KernelGrad {
    pub d_alpha: Vec<f64>,
    pub d_log_attn: Vec<f64>,
}

impl KernelGrad {
    pub fn zeros(g: &Graph, num_classes: usize) -> Self {
        KernelGrad {
            d_alpha: vec![0.0; g.num_nodes() * num_classes],
            d_log_attn: vec![0.0; g.hood_len()],
        }
    }

    pub fn add_assign(&mut self, other: &KernelGrad) {
        for (a, b) in self.d_alpha.iter_mut().zip(&other.d_alpha) {
            *a += b;
        }
        for (a, b) in self.d_log_attn.iter_mut().zip(&other.d_log_attn) {
            *a += b;
        }
    }
}

/// One sample's contribution a·ln q + b·ln p, differentiated.
pub fn sample_gradient(
    g: &Graph,
    p: &NmmParams,
    order: &[usize],
    labels: &[usize],
    choices: &[usize],
    coef_q: f64,
    coef_joint: f64,
) -> Result<KernelGrad> {
    let mut t = Tape::new();
    let mut e = KernelExpr::from_params(g, p);
    let mut seeds = Vec::with_capacity(2);
    if coef_q != 0.0 {
        seeds.push((e.log_q(&mut t, order, labels, choices)?, coef_q));
    }
    if coef_joint != 0.0 {
        seeds.push((e.log_joint(&mut t, order, labels, choices)?, coef_joint));
    }
    let mut out = KernelGrad::zeros(g, p.num_classes());
    if seeds.is_empty() {
        return Ok(out);
    }
    let adj = t.backward_seeded(&seeds)?;
    e.scatter(&adj, 1.0, &mut out.d_alpha, &mut out.d_log_attn);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check_gradient;
    use crate::kernel::{log_joint, LabeledNodes, NeighborAssignment};
    use crate::variational::log_q_eval;

    fn fixture() -> (Graph, NmmParams) {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 2)]).unwrap();
        let p = NmmParams::new(
            &g,
            2,
            vec![0.5, 1.5, 2.0, 1.0, 1.0, 3.0, 0.7, 0.7],
            vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1, 0.25, 0.25, 0.25, 0.25, 0.9, 0.1],
        )
        .unwrap();
        (g, p)
    }

    #[test]
    fn values_match_plain_evaluation() {
        let (g, p) = fixture();
        let nodes = [2, 0, 3, 1];
        let labels = [1, 0, 1, 1];
        let choices = [0, 2, 2, 1];
        let y = LabeledNodes::new(nodes.to_vec(), labels.to_vec(), 4, 2).unwrap();
        let c = NeighborAssignment(choices.to_vec());
        let mut t = Tape::new();
        let mut e = KernelExpr::from_params(&g, &p);
        let lj = e.log_joint(&mut t, &nodes, &labels, &choices).unwrap();
        let lq = e.log_q(&mut t, &nodes, &labels, &choices).unwrap();
        let plain_lj = log_joint(&g, &p, &y, &c).unwrap();
        let (plain_lq, lj_inc) = log_q_eval(&g, &p, &y, &c, &[0, 1, 2, 3]).unwrap();
        assert!((t.value(lj) - plain_lj).abs() < 1e-12);
        assert!((lj_inc - plain_lj).abs() < 1e-12);
        assert!((t.value(lq) - plain_lq).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (g, p) = fixture();
        let nodes = [2usize, 0, 3, 1];
        let labels = [1usize, 0, 1, 1];
        let choices = [0usize, 2, 2, 1];
        let mut point = p.alpha_flat().to_vec();
        point.extend(p.attn_flat().iter().map(|l| l.ln()));
        let na = p.alpha_flat().len();
        let live = vec![true; g.hood_len()];
        let f = |t: &mut Tape, x: &[Var]| {
            let mut e = KernelExpr::from_vars(&g, 2, &x[..na], &x[na..], &live).unwrap();
            let a = e.log_q(t, &nodes, &labels, &choices).unwrap();
            let b = e.log_joint(t, &nodes, &labels, &choices).unwrap();
            let a = t.scale(a, 0.7);
            t.add(a, b)
        };
        let report = check_gradient(f, &point, 1e-6, 1e-6).unwrap();
        assert!(report.passed, "{}", report.max_rel_err);

        // the lazy-leaf path agrees with the explicit one
        let kg = sample_gradient(&g, &p, &nodes, &labels, &choices, 0.7, 1.0).unwrap();
        let dense: Vec<f64> = kg.d_alpha.iter().chain(&kg.d_log_attn).copied().collect();
        for (a, b) in dense.iter().zip(&report.tape) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_are_skipped() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let p = NmmParams::independent(&g, 2, vec![1.0, 2.0, 3.0, 1.0, 0.5, 0.5]).unwrap();
        let kg = sample_gradient(&g, &p, &[1, 0], &[0, 1], &[1, 0], 1.0, 1.0).unwrap();
        assert!(kg.d_alpha.iter().all(|d| d.is_finite()));
        assert!(sample_gradient(&g, &p, &[1], &[0], &[2], 1.0, 1.0).is_err());
    }
}
