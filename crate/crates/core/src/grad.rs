//! A small reverse-mode differentiation tape over scalars.
//!
//! Every record stores its value and the local partials with respect to
//! earlier records, so the tape is acyclic by construction. Vector
//! primitives (sum, dot, softmax, log-sum-exp, cosine similarity) expand to
//! one record per output with one partial per input.

use crate::error::{NmmError, Result};
use crate::special::{ln_gamma, psi};

/// Handle to a tape record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<f64>,
    ops: Vec<&'static str>,
    edge_start: Vec<u32>,
    edges: Vec<(u32, f64)>,
    first_bad: Option<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every record, keeping allocations.
    pub fn clear(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.edge_start.clear();
        self.edges.clear();
        self.first_bad = None;
    }

    #[inline]
    fn push(&mut self, op: &'static str, value: f64, partials: &[(Var, f64)]) -> Var {
        let idx = self.values.len();
        if !value.is_finite() && self.first_bad.is_none() {
            self.first_bad = Some(idx);
        }
        self.values.push(value);
        self.ops.push(op);
        self.edge_start.push(self.edges.len() as u32);
        self.edges.extend(partials.iter().map(|&(v, d)| (v.0, d)));
        Var(idx as u32)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.value(v)).collect()
    }

    /// An input whose gradient is wanted.
    pub fn var(&mut self, value: f64) -> Var {
        self.push("input", value, &[])
    }

    pub fn vars(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.var(x)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push("const", value, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push("add", v, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push("sub", v, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push("mul", x * y, &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push("div", x / y, &[(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push("neg", v, &[(a, -1.0)])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push("add_const", v, &[(a, 1.0)])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push("scale", v, &[(a, k)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push("ln", x.ln(), &[(a, 1.0 / x)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push("exp", e, &[(a, e)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push("square", x * x, &[(a, 2.0 * x)])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (v, d) = if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) };
        self.push("relu", v, &[(a, d)])
    }

    /// ln(1 + eˣ), evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.max(0.0) + (-x.abs()).exp().ln_1p();
        let d = 1.0 / (1.0 + (-x).exp());
        self.push("softplus", v, &[(a, d)])
    }

    /// ln Γ(a); the adjoint is ψ(a).
    pub fn log_gamma(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push("log_gamma", ln_gamma(x), &[(a, psi(x))])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut v = 0.0;
        for &x in xs {
            v += self.value(x);
        }
        let partials: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.push("sum", v, &partials)
    }

    pub fn dot(&mut self, xs: &[Var], ys: &[Var]) -> Var {
        assert_eq!(xs.len(), ys.len(), "dot of unequal lengths");
        let mut v = 0.0;
        let mut partials = Vec::with_capacity(2 * xs.len());
        for (&x, &y) in xs.iter().zip(ys) {
            let (a, b) = (self.value(x), self.value(y));
            v += a * b;
            partials.push((x, b));
            partials.push((y, a));
        }
        self.push("dot", v, &partials)
    }

    /// Σ_k w_k x_k with constant weights.
    pub fn weighted_sum(&mut self, xs: &[Var], ws: &[f64]) -> Var {
        let mut v = 0.0;
        for (&x, &w) in xs.iter().zip(ws) {
            v += w * self.value(x);
        }
        let partials: Vec<(Var, f64)> = xs.iter().zip(ws).map(|(&x, &w)| (x, w)).collect();
        self.push("weighted_sum", v, &partials)
    }

    /// ln Σ exp(x_k), shifted by the max.
    pub fn logsumexp(&mut self, xs: &[Var]) -> Var {
        let vals = self.values(xs);
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vals.iter().map(|&x| (x - m).exp()).sum();
        let v = m + s.ln();
        let partials: Vec<(Var, f64)> = xs
            .iter()
            .zip(&vals)
            .map(|(&x, &xv)| (x, (xv - v).exp()))
            .collect();
        self.push("logsumexp", v, &partials)
    }

    /// Max-shifted softmax; ∂s_k/∂x_m = s_k(δ_km − s_m).
    pub fn softmax(&mut self, xs: &[Var]) -> Vec<Var> {
        let vals = self.values(xs);
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = vals.iter().map(|&x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|x| x / s).collect();
        let mut out = Vec::with_capacity(xs.len());
        let mut partials = Vec::with_capacity(xs.len());
        for k in 0..xs.len() {
            partials.clear();
            for (m, &x) in xs.iter().enumerate() {
                let d = if k == m { probs[k] * (1.0 - probs[k]) } else { -probs[k] * probs[m] };
                partials.push((x, d));
            }
            out.push(self.push("softmax", probs[k], &partials));
        }
        out
    }

    /// x_k − logsumexp(x).
    pub fn log_softmax(&mut self, xs: &[Var]) -> Vec<Var> {
        let lse = self.logsumexp(xs);
        xs.iter().map(|&x| self.sub(x, lse)).collect()
    }

    /// cos(a, b); defined as 0 (with zero gradient) when either norm is 0.
    pub fn cosine(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "cosine of unequal lengths");
        let av = self.values(a);
        let bv = self.values(b);
        let dot: f64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
        let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return self.push("cosine", 0.0, &[]);
        }
        let cos = dot / (na * nb);
        let mut partials = Vec::with_capacity(2 * a.len());
        for (k, &x) in a.iter().enumerate() {
            partials.push((x, bv[k] / (na * nb) - cos * av[k] / (na * na)));
        }
        for (k, &y) in b.iter().enumerate() {
            partials.push((y, av[k] / (na * nb) - cos * bv[k] / (nb * nb)));
        }
        self.push("cosine", cos, &partials)
    }

    /// First non-finite forward value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_bad {
            Some(index) => Err(NmmError::NonFinite {
                index,
                op: self.ops[index],
            }),
            None => Ok(()),
        }
    }

    /// Adjoints of every record for d(output)/d(·).
    pub fn backward(&self, output: Var) -> Result<Vec<f64>> {
        self.backward_seeded(&[(output, 1.0)])
    }

    /// Vector-Jacobian product: propagates the given output adjoints.
    pub fn backward_seeded(&self, seeds: &[(Var, f64)]) -> Result<Vec<f64>> {
        self.check_finite()?;
        let mut adj = vec![0.0; self.values.len()];
        for &(v, s) in seeds {
            adj[v.index()] += s;
        }
        let top = seeds.iter().map(|(v, _)| v.index()).max().map_or(0, |m| m + 1);
        for idx in (0..top).rev() {
            let a = adj[idx];
            if a == 0.0 {
                continue;
            }
            if !a.is_finite() {
                return Err(NmmError::NonFinite {
                    index: idx,
                    op: self.ops[idx],
                });
            }
            let start = self.edge_start[idx] as usize;
            let end = self
                .edge_start
                .get(idx + 1)
                .map_or(self.edges.len(), |&e| e as usize);
            for &(src, d) in &self.edges[start..end] {
                adj[src as usize] += a * d;
            }
        }
        Ok(adj)
    }
}

/// Gradient values aligned with a parameter layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        assert_eq!(self.len(), other.len(), "gradient layouts differ");
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|a| *a *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Runs `forward` on a fresh tape with `point` as inputs and returns the
/// value and its gradient.
pub fn record_and_backward<F>(point: &[f64], forward: F) -> Result<(f64, GradVector)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let inputs = tape.vars(point);
    let out = forward(&mut tape, &inputs);
    let adj = tape.backward(out)?;
    let grad = inputs.iter().map(|v| adj[v.index()]).collect();
    Ok((tape.value(out), GradVector(grad)))
}

/// Per-coordinate comparison of tape and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tape: Vec<f64>,
    pub finite_diff: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// |a − b| / max(1, |a|, |b|).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn check_gradient<F>(forward: F, point: &[f64], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let (_, grad) = record_and_backward(point, &forward)?;
    let eval = |x: &[f64]| {
        let mut tape = Tape::new();
        let inputs = tape.vars(x);
        let out = forward(&mut tape, &inputs);
        tape.value(out)
    };
    let mut x = point.to_vec();
    let mut fd = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let x0 = x[k];
        x[k] = x0 + step;
        let up = eval(&x);
        x[k] = x0 - step;
        let down = eval(&x);
        x[k] = x0;
        fd.push((up - down) / (2.0 * step));
    }
    let rel_err: Vec<f64> = grad.0.iter().zip(&fd).map(|(&a, &b)| relative_error(a, b)).collect();
    let max_rel_err = rel_err.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        tape: grad.0,
        finite_diff: fd,
        rel_err,
        max_rel_err,
        passed: max_rel_err < tol,
    })
}
