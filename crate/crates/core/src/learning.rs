//! Stochastic ascent on the ELBO with the score-function estimator.
//!
//! For draws c_t ~ q with f_t = ln p(y, c_t) − ln q(c_t | y) and baseline b_t,
//!
//! ```text
//! ∇ELBO ≈ (1/T) Σ_t [ (f_t − b_t)·∇ln q_t + ∇ln p_t − ∇ln q_t ]
//! ```
//!
//! Each term is differentiated with respect to (α, ln L) on a private tape.
//! The summed adjoints are then pulled back to θ through one tape of the
//! parameterization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NmmError, Result};
use crate::exec::map_indexed;
use crate::grad::{GradVector, Tape, Var};
use crate::graph::Graph;
use crate::kernel::{LabeledNodes, NmmParams};
use crate::parameterize::{params_from_tape, Parameterization, TapedParams};
use crate::predict::{argmax, predict_marginal, ParticleSet, Weighting};
use crate::rng::{child_seed, stream};
use crate::taped::{sample_gradient, KernelGrad};
use crate::variational::{sample_q, QSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    /// Mean of the other T − 1 samples.
    Loo,
}

impl FromStr for Baseline {
    type Err = NmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "loo" => Ok(Baseline::Loo),
            _ => Err(NmmError::InvalidArgument(format!("unknown baseline '{s}'"))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::None => "none",
            Baseline::Loo => "loo",
        })
    }
}

/// b_t for each sample.
pub fn baselines(f: &[f64], kind: Baseline) -> Vec<f64> {
    match kind {
        Baseline::None => vec![0.0; f.len()],
        Baseline::Loo => {
            let n = f.len() as f64;
            let total: f64 = f.iter().sum();
            f.iter().map(|&x| (total - x) / (n - 1.0)).collect()
        }
    }
}

fn check_samples(num_samples: usize, baseline: Baseline) -> Result<()> {
    if num_samples == 0 || (baseline == Baseline::Loo && num_samples < 2) {
        return Err(NmmError::InvalidArgument(
            "need T ≥ 1 samples, and T ≥ 2 with the leave-one-out baseline".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub elbo: f64,
    pub per_sample: Vec<f64>,
    pub grad: KernelGrad,
}

/// ELBO estimate and its gradient with respect to α and ln L.
pub fn reinforce_kernel_gradient(
    g: &Graph,
    p: &NmmParams,
    y: &LabeledNodes,
    num_samples: usize,
    baseline: Baseline,
    seed: u64,
) -> Result<KernelEstimate> {
    check_samples(num_samples, baseline)?;
    let samples = map_indexed(num_samples, |t| sample_q(g, p, y, &mut stream(seed, t as u64)))
        .into_iter()
        .collect::<Result<Vec<QSample>>>()?;
    let f: Vec<f64> = samples.iter().map(QSample::log_weight).collect();
    if let Some(k) = f.iter().position(|x| !x.is_finite()) {
        return Err(NmmError::NonFinite {
            index: k,
            op: "ln p − ln q",
        });
    }
    let b = baselines(&f, baseline);
    let parts = map_indexed(num_samples, |t| {
        let s = &samples[t];
        sample_gradient(g, p, &s.order, &s.labels, &s.choices, f[t] - b[t] - 1.0, 1.0)
    });
    let mut grad = KernelGrad::zeros(g, p.num_classes());
    for part in parts {
        grad.add_assign(&part?);
    }
    let scale = 1.0 / num_samples as f64;
    grad.d_alpha.iter_mut().chain(grad.d_log_attn.iter_mut()).for_each(|x| *x *= scale);
    let elbo = f.iter().sum::<f64>() * scale;
    Ok(KernelEstimate { elbo, per_sample: f, grad })
}

/// Pulls (α, ln L) adjoints, plus any extra output adjoints, back to θ.
pub(crate) fn pullback(
    t: &Tape,
    theta: &[Var],
    tp: &TapedParams,
    kg: &KernelGrad,
    extra: &[(Var, f64)],
) -> Result<GradVector> {
    let mut seeds = extra.to_vec();
    seeds.extend(tp.alpha.iter().copied().zip(kg.d_alpha.iter().copied()).filter(|&(_, d)| d != 0.0));
    seeds.extend(
        tp.log_attn
            .iter()
            .zip(&tp.live)
            .zip(&kg.d_log_attn)
            .filter(|&((_, &l), &d)| l && d != 0.0)
            .map(|((&v, _), &d)| (v, d)),
    );
    if seeds.is_empty() {
        return Ok(GradVector::zeros(theta.len()));
    }
    let adj = t.backward_seeded(&seeds)?;
    Ok(GradVector(theta.iter().map(|v| adj[v.index()]).collect()))
}

#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub elbo: f64,
    pub per_sample: Vec<f64>,
    pub grad: GradVector,
}

/// ELBO estimate and its gradient with respect to θ.
pub fn reinforce_gradient(
    par: &Parameterization,
    g: &Graph,
    theta: &[f64],
    y: &LabeledNodes,
    num_samples: usize,
    baseline: Baseline,
    seed: u64,
) -> Result<GradientEstimate> {
    let mut t = Tape::new();
    let vars = t.vars(theta);
    let tp = par.forward(&mut t, g, &vars)?;
    t.check_finite()?;
    let p = params_from_tape(&t, g, par.num_classes, &tp)?;
    let est = reinforce_kernel_gradient(g, &p, y, num_samples, baseline, seed)?;
    let grad = pullback(&t, &vars, &tp, &est.grad, &[])?;
    Ok(GradientEstimate {
        elbo: est.elbo,
        per_sample: est.per_sample,
        grad,
    })
}

/// First-order adaptive-moment ascent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// θ ← θ + lr · m̂ / (√v̂ + ε).
    pub fn ascend(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for k in 0..theta.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            theta[k] += self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// T, samples per gradient step.
    pub samples: usize,
    pub baseline: Baseline,
    pub seed: u64,
    pub l2: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Particles used to score the validation split.
    pub eval_particles: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.01,
            samples: 8,
            baseline: Baseline::Loo,
            seed: 0,
            l2: 0.005,
            patience: 100,
            eval_particles: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_samples(self.samples, self.baseline)?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() || !(self.l2 >= 0.0) || self.eval_particles == 0 {
            return Err(NmmError::InvalidArgument("bad training configuration".into()));
        }
        Ok(())
    }
}

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub objective: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// θ at the best validation epoch, or after the last step.
    pub theta: Vec<f64>,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn validation_accuracy(
    g: &Graph,
    p: &NmmParams,
    train: &LabeledNodes,
    val: &LabeledNodes,
    particles: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let ps = ParticleSet::sample(g, p, train, particles, seed, Weighting::Uniform)?;
    let mut hits = 0usize;
    for (i, yi) in val.iter() {
        hits += (argmax(&predict_marginal(g, p, &ps, i)?) == yi) as usize;
    }
    Ok(Some(hits as f64 / val.len() as f64))
}

/// Maximizes ELBO(θ) − l2·‖W‖² from `theta0`. `on_epoch` sees each record
/// as soon as it exists, so a caller can persist the trace before an abort.
pub fn train(
    par: &Parameterization,
    g: &Graph,
    y: &LabeledNodes,
    val: Option<&LabeledNodes>,
    cfg: &TrainConfig,
    theta0: Vec<f64>,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if y.is_empty() {
        return Err(NmmError::InvalidArgument("no observed labels to train on".into()));
    }
    if theta0.len() != par.num_params() {
        return Err(NmmError::InvalidArgument("θ does not match the layout".into()));
    }
    let mask = par.layout.l2_mask();
    let mut theta = theta0;
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let est = reinforce_gradient(par, g, &theta, y, cfg.samples, cfg.baseline, child_seed(cfg.seed, epoch as u64))?;
        let mut grad = est.grad;
        let mut penalty = 0.0;
        for k in 0..theta.len() {
            if mask[k] {
                penalty += theta[k] * theta[k];
                grad.0[k] -= 2.0 * cfg.l2 * theta[k];
            }
        }
        let objective = est.elbo - cfg.l2 * penalty;
        if !est.elbo.is_finite() || !grad.is_finite() {
            return Err(NmmError::Diverged { epoch, elbo: est.elbo });
        }
        let val_accuracy = match val {
            Some(v) => {
                let p = par.params(g, &theta)?;
                let seed = child_seed(cfg.seed ^ 0x5EED_0F_5A11, epoch as u64);
                validation_accuracy(g, &p, y, v, cfg.eval_particles, seed)?
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            elbo: est.elbo,
            objective,
            val_accuracy,
        };
        on_epoch(&record)?;
        trace.push(record);
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, theta.clone()));
            } else if epoch - best.as_ref().unwrap().1 >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        adam.ascend(&mut theta, &grad.0);
    }
    Ok(match best {
        Some((_, best_epoch, snapshot)) => TrainOutcome {
            theta: snapshot,
            best_epoch,
            trace,
            stopped_early,
        },
        None => TrainOutcome {
            best_epoch: trace.len().saturating_sub(1),
            theta,
            trace,
            stopped_early,
        },
    })
}
