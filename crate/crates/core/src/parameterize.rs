//! Maps a flat parameter vector θ to (α, L) through a node backbone.
//!
//! The backbone yields u_i ∈ R^C and v_i ∈ R^H per node. Then
//!
//! ```text
//! α_i  = act(u_i) + 1                      act ∈ {softplus, square}
//! L_i· = softmax_{j ∈ n(i)} ( ω²·cos(v_i, v_j) + γ·[j = i] )
//! ```
//!
//! with ω = ρ and γ learned scalars at the end of θ. Everything is recorded
//! on a tape so gradients with respect to (α, ln L) pull back to θ.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{NmmError, Result};
use crate::grad::{Tape, Var};
use crate::graph::{Features, Graph};
use crate::kernel::NmmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Independent u_i, v_i per node.
    Free,
    /// u_i = W_u x_i + b_u, v_i = W_v x_i + b_v.
    Linear,
    /// One hidden layer over the mean of features in n(i).
    OneHop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    SoftplusPlusOne,
    SquarePlusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Cosine,
    /// L_ii = 1: every node draws from its own z.
    Identity,
}

macro_rules! kebab_enum {
    ($t:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = NmmError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(NmmError::InvalidArgument(format!("unknown value '{s}'"))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

kebab_enum!(BackboneKind, "free" => BackboneKind::Free, "linear" => BackboneKind::Linear, "onehop" => BackboneKind::OneHop);
kebab_enum!(Activation, "softplus" => Activation::SoftplusPlusOne, "square" => Activation::SquarePlusOne);
kebab_enum!(AttentionMode, "cosine" => AttentionMode::Cosine, "identity" => AttentionMode::Identity);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub activation: Activation,
    pub attention: AttentionMode,
    /// H, the width of v_i.
    pub embed_dim: usize,
    /// Hidden width of the one-hop backbone.
    pub hidden: usize,
    pub init_omega_sq: f64,
    pub init_gamma: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Free,
            activation: Activation::SoftplusPlusOne,
            attention: AttentionMode::Cosine,
            embed_dim: 16,
            hidden: 16,
            init_omega_sq: 1.0,
            init_gamma: 0.0,
        }
    }
}

/// A named rows×cols slice of θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Included in the L2 penalty.
    pub weight: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<Block>,
    pub len: usize,
}

impl ParamLayout {
    fn push(&mut self, name: &'static str, rows: usize, cols: usize, weight: bool) {
        self.blocks.push(Block {
            name,
            offset: self.len,
            rows,
            cols,
            weight,
        });
        self.len += rows * cols;
    }

    pub fn block(&self, name: &str) -> &Block {
        self.blocks.iter().find(|b| b.name == name).expect("known block")
    }

    /// True for coordinates under the L2 penalty.
    pub fn l2_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for b in self.blocks.iter().filter(|b| b.weight) {
            mask[b.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

/// Leaves of the kernel as tape records.
pub struct TapedParams {
    pub alpha: Vec<Var>,
    pub log_attn: Vec<Var>,
    /// False where L_ij is structurally zero.
    pub live: Vec<bool>,
}

/// A backbone bound to one graph and class count.
#[derive(Debug, Clone)]
pub struct Parameterization {
    pub config: BackboneConfig,
    pub num_classes: usize,
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub layout: ParamLayout,
    // aggregated inputs, precomputed: x_i for linear, mean over n(i) for one-hop
    inputs: Option<Features>,
}

impl Parameterization {
    pub fn new(config: BackboneConfig, g: &Graph, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(NmmError::InvalidArgument("need at least two classes".into()));
        }
        if config.embed_dim == 0 || (config.kind == BackboneKind::OneHop && config.hidden == 0) {
            return Err(NmmError::InvalidArgument("layer widths must be positive".into()));
        }
        if !(config.init_omega_sq >= 0.0) || !config.init_gamma.is_finite() {
            return Err(NmmError::InvalidArgument("bad attention initialization".into()));
        }
        let n = g.num_nodes();
        let (c, h, k) = (num_classes, config.embed_dim, config.hidden);
        let mut layout = ParamLayout {
            blocks: Vec::new(),
            len: 0,
        };
        let (feature_dim, inputs) = match config.kind {
            BackboneKind::Free => {
                layout.push("u", n, c, false);
                layout.push("v", n, h, false);
                (0, None)
            }
            BackboneKind::Linear | BackboneKind::OneHop => {
                let x = g
                    .features()
                    .ok_or_else(|| NmmError::InvalidArgument(format!("the {} backbone needs node features", config.kind)))?;
                let f = x.dim;
                if config.kind == BackboneKind::Linear {
                    layout.push("w_u", c, f, true);
                    layout.push("b_u", 1, c, false);
                    layout.push("w_v", h, f, true);
                    layout.push("b_v", 1, h, false);
                    (f, Some(x.clone()))
                } else {
                    layout.push("w1_u", k, f, true);
                    layout.push("b1_u", 1, k, false);
                    layout.push("w2_u", c, k, true);
                    layout.push("b2_u", 1, c, false);
                    layout.push("w1_v", k, f, true);
                    layout.push("b1_v", 1, k, false);
                    layout.push("w2_v", h, k, true);
                    layout.push("b2_v", 1, h, false);
                    (f, Some(neighborhood_mean(g, x)))
                }
            }
        };
        layout.push("rho", 1, 1, false);
        layout.push("gamma", 1, 1, false);
        Ok(Parameterization {
            config,
            num_classes,
            num_nodes: n,
            feature_dim,
            layout,
            inputs,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Glorot-uniform weights, zero biases; free u = 0 and v ~ 0.1·N(0, 1).
    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.layout.len];
        for b in &self.layout.blocks {
            let slot = &mut theta[b.range()];
            match b.name {
                "v" => slot.iter_mut().for_each(|x| { let z: f64 = StandardNormal.sample(rng); *x = 0.1 * z }),
                "rho" => slot[0] = self.config.init_omega_sq.sqrt(),
                "gamma" => slot[0] = self.config.init_gamma,
                _ if b.weight => {
                    let a = (6.0 / (b.rows + b.cols) as f64).sqrt();
                    let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
                    slot.iter_mut().for_each(|x| *x = u.sample(rng));
                }
                _ => {}
            }
        }
        theta
    }

    fn check_theta(&self, theta_len: usize) -> Result<()> {
        if theta_len != self.layout.len {
            return Err(NmmError::InvalidArgument(format!(
                "θ has {} entries, layout needs {}",
                theta_len, self.layout.len
            )));
        }
        Ok(())
    }

    /// Records (u, v) for every node. Returns N×C and N×H row-major vars.
    pub fn backbone_forward(&self, t: &mut Tape, theta: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_theta(theta.len())?;
        let (n, c, h) = (self.num_nodes, self.num_classes, self.config.embed_dim);
        let blk = |name: &str| &theta[self.layout.block(name).range()];
        match self.config.kind {
            BackboneKind::Free => Ok((blk("u").to_vec(), blk("v").to_vec())),
            BackboneKind::Linear => {
                let x = self.inputs.as_ref().expect("features");
                let mut u = Vec::with_capacity(n * c);
                let mut v = Vec::with_capacity(n * h);
                for i in 0..n {
                    affine(t, blk("w_u"), blk("b_u"), x.row(i), &mut u);
                    affine(t, blk("w_v"), blk("b_v"), x.row(i), &mut v);
                }
                Ok((u, v))
            }
            BackboneKind::OneHop => {
                let x = self.inputs.as_ref().expect("features");
                let mut u = Vec::with_capacity(n * c);
                let mut v = Vec::with_capacity(n * h);
                let mut hid = Vec::with_capacity(self.config.hidden);
                for i in 0..n {
                    for (w1, b1, w2, b2, out) in [
                        ("w1_u", "b1_u", "w2_u", "b2_u", &mut u),
                        ("w1_v", "b1_v", "w2_v", "b2_v", &mut v),
                    ] {
                        hid.clear();
                        affine(t, blk(w1), blk(b1), x.row(i), &mut hid);
                        for z in hid.iter_mut() {
                            *z = t.relu(*z);
                        }
                        affine_vars(t, blk(w2), blk(b2), &hid, out);
                    }
                }
                Ok((u, v))
            }
        }
    }

    /// Records α and ln L as functions of θ.
    pub fn forward(&self, t: &mut Tape, g: &Graph, theta: &[Var]) -> Result<TapedParams> {
        if g.num_nodes() != self.num_nodes {
            return Err(NmmError::InvalidArgument("graph does not match the parameterization".into()));
        }
        let (u, v) = self.backbone_forward(t, theta)?;
        let alpha = u
            .iter()
            .map(|&x| {
                let a = match self.config.activation {
                    Activation::SoftplusPlusOne => t.softplus(x),
                    Activation::SquarePlusOne => t.square(x),
                };
                t.add_const(a, 1.0)
            })
            .collect();
        let mut log_attn = Vec::with_capacity(g.hood_len());
        let mut live = Vec::with_capacity(g.hood_len());
        match self.config.attention {
            AttentionMode::Identity => {
                let zero = t.constant(0.0);
                for i in 0..self.num_nodes {
                    for &j in g.hood(i) {
                        log_attn.push(zero);
                        live.push(j == i);
                    }
                }
            }
            AttentionMode::Cosine => {
                let rho = theta[self.layout.block("rho").offset];
                let gamma = theta[self.layout.block("gamma").offset];
                let omega_sq = t.square(rho);
                let h = self.config.embed_dim;
                let mut logits = Vec::with_capacity(g.max_degree());
                for i in 0..self.num_nodes {
                    logits.clear();
                    for &j in g.hood(i) {
                        let cos = t.cosine(&v[i * h..(i + 1) * h], &v[j * h..(j + 1) * h]);
                        let mut z = t.mul(omega_sq, cos);
                        if j == i {
                            z = t.add(z, gamma);
                        }
                        logits.push(z);
                    }
                    log_attn.extend(t.log_softmax(&logits));
                    live.extend(std::iter::repeat_n(true, logits.len()));
                }
            }
        }
        Ok(TapedParams { alpha, log_attn, live })
    }

    /// (α, L) at θ.
    pub fn params(&self, g: &Graph, theta: &[f64]) -> Result<NmmParams> {
        let mut t = Tape::new();
        let vars = t.vars(theta);
        let tp = self.forward(&mut t, g, &vars)?;
        t.check_finite()?;
        params_from_tape(&t, g, self.num_classes, &tp)
    }

    /// Sets the free backbone so α_i = target_i and L is as sharp on the
    /// diagonal as `gamma` makes it. Targets must exceed 1 entrywise.
    pub fn free_theta_for(&self, alpha_target: &[f64], gamma: f64, theta: &mut [f64]) -> Result<()> {
        self.check_theta(theta.len())?;
        if self.config.kind != BackboneKind::Free || alpha_target.len() != self.num_nodes * self.num_classes {
            return Err(NmmError::InvalidArgument("targets need the free backbone and N×C values".into()));
        }
        let u = self.layout.block("u").range();
        for (slot, &a) in theta[u].iter_mut().zip(alpha_target) {
            if !(a > 1.0) || !a.is_finite() {
                return Err(NmmError::Domain(format!("α target {a} must exceed 1")));
            }
            *slot = match self.config.activation {
                Activation::SoftplusPlusOne => (a - 1.0).exp_m1().ln(),
                Activation::SquarePlusOne => (a - 1.0).sqrt(),
            };
        }
        theta[self.layout.block("gamma").offset] = gamma;
        Ok(())
    }
}

pub(crate) fn params_from_tape(t: &Tape, g: &Graph, num_classes: usize, tp: &TapedParams) -> Result<NmmParams> {
    let alpha = t.values(&tp.alpha);
    let attn = tp
        .log_attn
        .iter()
        .zip(&tp.live)
        .map(|(&v, &l)| if l { t.value(v).exp() } else { 0.0 })
        .collect();
    NmmParams::new(g, num_classes, alpha, attn)
}

/// out += W x + b for constant x.
fn affine(t: &mut Tape, w: &[Var], b: &[Var], x: &[f64], out: &mut Vec<Var>) {
    let f = x.len();
    for (r, &br) in b.iter().enumerate() {
        let s = t.weighted_sum(&w[r * f..(r + 1) * f], x);
        out.push(t.add(s, br));
    }
}

fn affine_vars(t: &mut Tape, w: &[Var], b: &[Var], x: &[Var], out: &mut Vec<Var>) {
    let f = x.len();
    for (r, &br) in b.iter().enumerate() {
        let s = t.dot(&w[r * f..(r + 1) * f], x);
        out.push(t.add(s, br));
    }
}

fn neighborhood_mean(g: &Graph, x: &Features) -> Features {
    let mut data = vec![0.0; x.num_rows * x.dim];
    for i in 0..g.num_nodes() {
        let hood = g.hood(i);
        let row = &mut data[i * x.dim..(i + 1) * x.dim];
        for &j in hood {
            for (r, &xj) in row.iter_mut().zip(x.row(j)) {
                *r += xj;
            }
        }
        row.iter_mut().for_each(|r| *r /= hood.len() as f64);
    }
    Features {
        num_rows: x.num_rows,
        dim: x.dim,
        data,
    }
}
