//! Log-gamma, digamma and the multivariate log-Beta function.
//!
//! `ln_gamma` uses the Lanczos approximation with g = 7 and nine
//! coefficients, with the reflection formula below 0.5. `psi` shifts the
//! argument upward to at least 6 and then applies the asymptotic series.

use std::f64::consts::PI;

use crate::error::{NmmError, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// ln Γ(x) for x > 0.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NmmError::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(ln_gamma(x))
}

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NmmError::Domain(format!("digamma requires x > 0, got {x}")));
    }
    Ok(psi(x))
}

/// Σ_c ln Γ(α_c) − ln Γ(Σ_c α_c).
pub fn log_beta(alpha: &[f64]) -> Result<f64> {
    if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(NmmError::Domain(format!(
            "log_beta requires positive entries, got {bad}"
        )));
    }
    Ok(ln_beta(alpha))
}

/// Unchecked ln Γ. Returns NaN outside the domain.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    if x < 0.5 {
        // Γ(x)Γ(1−x) = π / sin(πx); sin(πx) > 0 on (0, 0.5).
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut series = LANCZOS_COEF[0];
    for (k, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        series += c / (x + k as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + series.ln()
}

/// Unchecked digamma.
#[inline]
pub fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2k / (2k) for k = 1..7, Horner in 1/x².
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - tail
}

/// Unchecked multivariate log-Beta.
#[inline]
pub fn ln_beta(alpha: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut acc = 0.0;
    for &a in alpha {
        acc += ln_gamma(a);
        total += a;
    }
    acc - ln_gamma(total)
}

/// A single node's Dirichlet concentration vector (entries > 0, length ≥ 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ConcVec(Vec<f64>);

impl ConcVec {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(NmmError::Domain(format!(
                "concentration needs at least 2 classes, got {}",
                alpha.len()
            )));
        }
        if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(NmmError::Domain(format!(
                "concentration entries must be positive, got {bad}"
            )));
        }
        Ok(ConcVec(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn log_beta(&self) -> f64 {
        ln_beta(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}
