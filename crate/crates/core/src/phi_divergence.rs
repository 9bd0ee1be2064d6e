//! φ-divergences and the inner maximisation of the distributionally robust
//! loss.
//!
//! For a loss vector `v` of length `n` and a robustness parameter `β > 0`,
//! the robust loss is
//!
//! ```text
//! R(v) = max_{p ∈ Δn}  <v, p> − (1/β) D_φ(p ‖ uniform)
//! D_φ(p ‖ uniform) = (1/n) Σ φ(n pᵢ)
//! ```
//!
//! and the maximiser `p̄(v)` is both the hardness-weighted sampling
//! distribution and the gradient `∇_v R(v)`. For KL the maximiser is
//! `softmax(β v)` and `R` is a scaled log-mean-exp. For any other divergence
//! `p̄` is obtained from the KKT system
//!
//! ```text
//! p̄ᵢ = (1/n) ReLU((φ*)′(β (vᵢ + λ))),    (1/n) Σ ReLU((φ*)′(β (vᵢ + λ))) = 1
//! ```
//!
//! which is solved for the scalar multiplier `λ` by bracketed bisection.

use crate::error::{DroError, Result};

/// Tolerance on `|F(λ) − 1|` accepted from the dual solver.
pub const DUAL_TOLERANCE: f64 = 1e-10;

/// Maximum number of step doublings while bracketing the multiplier.
pub const MAX_BRACKET_DOUBLINGS: usize = 200;

const MAX_BISECTIONS: usize = 4096;

/// Strictly positive robustness parameter β.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RobustnessParam(f64);

impl RobustnessParam {
    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta > 0.0 {
            Ok(Self(beta))
        } else {
            Err(DroError::arg(format!(
                "beta must be finite and > 0, got {beta}"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceKind {
    /// `φ(z) = z log z − z + 1`
    Kl,
    /// `φ(z) = (z − 1)²`
    PearsonChi2,
}

/// A φ-divergence: convex `φ` with `φ(1) = 0`, `φ′(1) = 0`, together with the
/// derivative of its Fenchel conjugate, `(φ*)′ = (φ′)⁻¹`.
///
/// φ is only required on `[0, n]`; the dual solver evaluates `(φ*)′` on all of
/// ℝ, which uses the analytic extension of each closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhiDivergence {
    kind: DivergenceKind,
}

impl PhiDivergence {
    pub const KL: PhiDivergence = PhiDivergence {
        kind: DivergenceKind::Kl,
    };
    pub const PEARSON_CHI2: PhiDivergence = PhiDivergence {
        kind: DivergenceKind::PearsonChi2,
    };

    pub fn new(kind: DivergenceKind) -> Self {
        Self { kind }
    }

    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    /// Strong-convexity constant of φ on `[0, n]`.
    pub fn rho(&self, n: usize) -> f64 {
        match self.kind {
            // φ''(z) = 1/z ≥ 1/n on (0, n]
            DivergenceKind::Kl => 1.0 / n as f64,
            DivergenceKind::PearsonChi2 => 2.0,
        }
    }

    pub fn phi(&self, z: f64) -> f64 {
        match self.kind {
            DivergenceKind::Kl => {
                if z > 0.0 {
                    z * z.ln() - z + 1.0
                } else if z == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            }
            DivergenceKind::PearsonChi2 => (z - 1.0) * (z - 1.0),
        }
    }

    pub fn phi_prime(&self, z: f64) -> f64 {
        match self.kind {
            DivergenceKind::Kl => {
                if z >= 0.0 {
                    z.ln()
                } else {
                    f64::NAN
                }
            }
            DivergenceKind::PearsonChi2 => 2.0 * (z - 1.0),
        }
    }

    pub fn phi_star_prime(&self, y: f64) -> f64 {
        match self.kind {
            DivergenceKind::Kl => y.exp(),
            DivergenceKind::PearsonChi2 => 0.5 * y + 1.0,
        }
    }

    /// `D_φ(q ‖ uniform) = (1/n) Σ φ(n qᵢ)`.
    pub fn divergence_from_uniform(&self, q: &[f64]) -> f64 {
        let n = q.len() as f64;
        q.iter().map(|&qi| self.phi(n * qi)).sum::<f64>() / n
    }
}

/// A probability vector over the `n` training examples.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessDistribution(Vec<f64>);

impl HardnessDistribution {
    /// Sum tolerance accepted for caller-supplied probability vectors.
    pub const INPUT_SUM_TOLERANCE: f64 = 1e-9;

    /// Validates a caller-supplied probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DroError::arg("empty probability vector"));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(DroError::arg(format!("invalid probability entry {bad}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::INPUT_SUM_TOLERANCE {
            return Err(DroError::arg(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(DroError::arg("uniform distribution over zero outcomes"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Result of the generic dual solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub lambda: f64,
    pub probs: HardnessDistribution,
    /// `|F(λ) − 1|` at the returned multiplier.
    pub residual: f64,
    pub iterations: usize,
}

fn check_losses(losses: &[f64]) -> Result<()> {
    if losses.is_empty() {
        return Err(DroError::arg("empty loss vector"));
    }
    if let Some((i, v)) = losses.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(DroError::arg(format!("loss[{i}] = {v} is not finite")));
    }
    Ok(())
}

/// KL maximiser `softmax(β · losses)`, computed with max-subtraction.
pub fn hardness_weights_kl(losses: &[f64], beta: RobustnessParam) -> Result<HardnessDistribution> {
    check_losses(losses)?;
    Ok(HardnessDistribution(softmax_scaled(losses, beta.get())))
}

/// `softmax(β · xs)` on validated, non-empty input.
pub(crate) fn softmax_scaled(xs: &[f64], beta: f64) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| (beta * (x - max)).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `(1/β) log((1/n) Σ exp(β xᵢ))` in shifted form.
pub fn log_mean_exp(xs: &[f64], beta: RobustnessParam) -> Result<f64> {
    check_losses(xs)?;
    let beta = beta.get();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = xs.iter().map(|&x| (beta * (x - max)).exp()).sum::<f64>() / xs.len() as f64;
    Ok(max + mean.ln() / beta)
}

#[inline]
fn relu_keep_nan(x: f64) -> f64 {
    if x > 0.0 || x.is_nan() {
        x
    } else {
        0.0
    }
}

/// Solves the KKT system for an arbitrary φ-divergence.
///
/// `F(λ) = (1/n) Σ ReLU((φ*)′(β(vᵢ + λ)))` is nondecreasing in λ. The root of
/// `F(λ) = 1` is bracketed by geometric expansion from `λ₀ = −mean(v)` with an
/// initial step of `1/β`, then bisected until the bracket cannot shrink. `F`
/// overflowing to `+∞` is a valid upper bracket; NaN is a numeric error.
pub fn hardness_weights_generic(
    losses: &[f64],
    beta: RobustnessParam,
    div: PhiDivergence,
) -> Result<DualSolution> {
    check_losses(losses)?;
    let beta = beta.get();
    let n = losses.len() as f64;

    let mass = |lambda: f64| -> Result<f64> {
        let total: f64 = losses
            .iter()
            .map(|&v| relu_keep_nan(div.phi_star_prime(beta * (v + lambda))))
            .sum();
        if total.is_nan() {
            return Err(DroError::Numeric(format!("F({lambda}) evaluated to NaN")));
        }
        Ok(total / n)
    };

    let lambda0 = -losses.iter().map(|&v| v / n).sum::<f64>();
    let f0 = mass(lambda0)?;
    let mut iterations = 0usize;

    let (mut lo, mut hi) = if f0 == 1.0 {
        (lambda0, lambda0)
    } else {
        let upward = f0 < 1.0;
        let mut anchor = lambda0;
        let mut step = 1.0 / beta;
        let mut found = None;
        for _ in 0..MAX_BRACKET_DOUBLINGS {
            iterations += 1;
            let probe = if upward { anchor + step } else { anchor - step };
            let f = mass(probe)?;
            let crossed = if upward { f >= 1.0 } else { f <= 1.0 };
            if crossed {
                found = Some(if upward {
                    (anchor, probe)
                } else {
                    (probe, anchor)
                });
                break;
            }
            anchor = probe;
            step *= 2.0;
        }
        found.ok_or_else(|| {
            DroError::Convergence(format!(
                "could not bracket the multiplier within {MAX_BRACKET_DOUBLINGS} doublings"
            ))
        })?
    };

    for _ in 0..MAX_BISECTIONS {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        let f = mass(mid)?;
        if f == 1.0 {
            lo = mid;
            hi = mid;
            break;
        } else if f < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let r_lo = (mass(lo)? - 1.0).abs();
    let r_hi = (mass(hi)? - 1.0).abs();
    let (lambda, residual) = if r_lo <= r_hi { (lo, r_lo) } else { (hi, r_hi) };
    if residual.is_nan() || residual > DUAL_TOLERANCE {
        return Err(DroError::Convergence(format!(
            "residual {residual:e} above tolerance {DUAL_TOLERANCE:e} at lambda = {lambda}"
        )));
    }

    let mut probs: Vec<f64> = losses
        .iter()
        .map(|&v| relu_keep_nan(div.phi_star_prime(beta * (v + lambda))) / n)
        .collect();
    let total: f64 = probs.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(DroError::Numeric(format!(
            "probability mass {total} at lambda = {lambda}"
        )));
    }
    for p in &mut probs {
        *p /= total;
    }

    Ok(DualSolution {
        lambda,
        probs: HardnessDistribution(probs),
        residual,
        iterations,
    })
}

/// The maximiser `p̄(losses)`: closed-form softmax for KL, dual solve otherwise.
pub fn hardness_weights(
    losses: &[f64],
    beta: RobustnessParam,
    div: PhiDivergence,
) -> Result<HardnessDistribution> {
    match div.kind() {
        DivergenceKind::Kl => hardness_weights_kl(losses, beta),
        _ => Ok(hardness_weights_generic(losses, beta, div)?.probs),
    }
}

/// `<v, q> − (1/β) D_φ(q ‖ uniform)` for an arbitrary feasible `q`.
pub fn penalized_objective(
    losses: &[f64],
    q: &HardnessDistribution,
    beta: RobustnessParam,
    div: PhiDivergence,
) -> Result<f64> {
    if losses.len() != q.len() {
        return Err(DroError::arg(format!(
            "length mismatch: {} losses vs {} probabilities",
            losses.len(),
            q.len()
        )));
    }
    let expected: f64 = losses.iter().zip(q.probs()).map(|(v, p)| v * p).sum();
    Ok(expected - div.divergence_from_uniform(q.probs()) / beta.get())
}

/// The distributionally robust loss `R(losses)`.
///
/// For KL this is the log-mean-exp closed form; otherwise the penalised
/// objective evaluated at the dual solution.
pub fn robust_loss(losses: &[f64], beta: RobustnessParam, div: PhiDivergence) -> Result<f64> {
    match div.kind() {
        DivergenceKind::Kl => log_mean_exp(losses, beta),
        _ => {
            let sol = hardness_weights_generic(losses, beta, div)?;
            penalized_objective(losses, &sol.probs, beta, div)
        }
    }
}

/// `∇_v R(v) = p̄(v)`.
pub fn robust_loss_gradient(
    losses: &[f64],
    beta: RobustnessParam,
    div: PhiDivergence,
) -> Result<Vec<f64>> {
    hardness_weights(losses, beta, div).map(HardnessDistribution::into_vec)
}

/// `KL(q ‖ p) = Σ qᵢ log(qᵢ / pᵢ)` with `0 log 0 = 0`.
pub fn kl_divergence(q: &HardnessDistribution, p: &HardnessDistribution) -> Result<f64> {
    if q.len() != p.len() {
        return Err(DroError::arg(format!(
            "length mismatch: {} vs {}",
            q.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&qi, &pi)) in q.probs().iter().zip(p.probs()).enumerate() {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(DroError::Domain(format!(
                "q[{i}] = {qi} > 0 where p[{i}] = 0"
            )));
        }
        total += qi * (qi / pi).ln();
    }
    // Rounding can leave a tiny negative value when q ≈ p.
    Ok(total.max(0.0))
}
