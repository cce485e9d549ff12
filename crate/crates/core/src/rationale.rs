//! HardKuma gates, selection probabilities, energies and mask extraction.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{parse_arg, Registry};

pub const STRETCH_LOWER: f64 = -0.1;
pub const STRETCH_UPPER: f64 = 1.1;
/// Upper clamp on probabilities before taking `-ln(1 - p)`.
pub const ENERGY_CLAMP: f64 = 1.0 - 1e-6;

/// Rectified, stretched Kumaraswamy distribution.
///
/// A base Kumaraswamy(a, b) sample on (0, 1) is stretched to (l, r) and
/// clipped back to [0, 1], which puts point masses at exactly 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardKuma {
    pub a: f64,
    pub b: f64,
    pub l: f64,
    pub r: f64,
}

/// Partial derivatives of a quantity with respect to `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGrad {
    pub value: f64,
    pub d_a: f64,
    pub d_b: f64,
}

impl HardKuma {
    pub fn new(a: f64, b: f64, l: f64, r: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Config(format!("HardKuma shape must be positive: a={a}, b={b}")));
        }
        if !(l < 0.0 && r > 1.0) {
            return Err(Error::Config(format!("HardKuma stretch needs l < 0 < 1 < r: l={l}, r={r}")));
        }
        Ok(Self { a, b, l, r })
    }

    pub fn with_default_stretch(a: f64, b: f64) -> Result<Self> {
        Self::new(a, b, STRETCH_LOWER, STRETCH_UPPER)
    }

    /// Kumaraswamy CDF on (0, 1).
    pub fn base_cdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            0.0
        } else if u >= 1.0 {
            1.0
        } else {
            1.0 - (1.0 - u.powf(self.a)).powf(self.b)
        }
    }

    /// Point masses `(P(z = 0), P(z = 1))`.
    pub fn boundary_probs(&self) -> (f64, f64) {
        let span = self.r - self.l;
        let p_zero = self.base_cdf(-self.l / span);
        let p_one = 1.0 - self.base_cdf((1.0 - self.l) / span);
        (p_zero.clamp(0.0, 1.0), p_one.clamp(0.0, 1.0))
    }

    /// `P(z != 0)`.
    pub fn selection_prob(&self) -> f64 {
        self.selection_prob_grad().value
    }

    /// Selection probability `(1 - c^a)^b` with `c = -l / (r - l)`, together
    /// with its derivatives in `a` and `b`.
    pub fn selection_prob_grad(&self) -> ParamGrad {
        let c = -self.l / (self.r - self.l);
        let ca = c.powf(self.a);
        let q = 1.0 - ca;
        let value = q.powf(self.b);
        ParamGrad {
            value,
            d_a: self.b * q.powf(self.b - 1.0) * (-ca * c.ln()),
            d_b: value * q.ln(),
        }
    }

    /// Reparameterised sample for a uniform draw `u` in (0, 1).
    pub fn sample(&self, u: f64) -> f64 {
        self.sample_grad(u).value
    }

    /// Sample with `dz/da`, `dz/db`. Both are zero where the stretched value
    /// was clipped.
    pub fn sample_grad(&self, u: f64) -> ParamGrad {
        let (a, b) = (self.a, self.b);
        let one_minus_u = 1.0 - u;
        let root = one_minus_u.powf(1.0 / b);
        let w = 1.0 - root;
        let k = w.powf(1.0 / a);
        let span = self.r - self.l;
        let t = self.l + span * k;
        if t <= 0.0 {
            return ParamGrad { value: 0.0, d_a: 0.0, d_b: 0.0 };
        }
        if t >= 1.0 {
            return ParamGrad { value: 1.0, d_a: 0.0, d_b: 0.0 };
        }
        let dk_da = -k * w.ln() / (a * a);
        let dw_db = root * one_minus_u.ln() / (b * b);
        let dk_db = k / (a * w) * dw_db;
        ParamGrad {
            value: t,
            d_a: span * dk_da,
            d_b: span * dk_db,
        }
    }
}

/// `-ln(1 - p)` with `p` clamped to `[0, 1 - 1e-6]`.
pub fn energy(p: f64) -> f64 {
    -(1.0 - p.clamp(0.0, ENERGY_CLAMP)).ln()
}

/// Derivative of [`energy`] with respect to `p`; zero inside the clamp.
pub fn energy_grad(p: f64) -> f64 {
    if !(0.0..ENERGY_CLAMP).contains(&p) {
        0.0
    } else {
        1.0 / (1.0 - p)
    }
}

/// Inverse of [`energy`]: the selection probability with this energy.
pub fn prob_from_energy(e: f64) -> f64 {
    1.0 - (-e.max(0.0)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Task,
    Bias,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Task => "task",
            Objective::Bias => "bias",
        })
    }
}

/// Per-token rationale of one extractor over one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleState {
    pub objective: Objective,
    pub select_prob: Vec<f64>,
    pub energy: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RationaleState {
    pub fn new(objective: Objective, select_prob: Vec<f64>, policy: &dyn MaskPolicy) -> Self {
        let energy = select_prob.iter().map(|&p| energy(p)).collect();
        let mask = policy.select(&select_prob);
        Self {
            objective,
            select_prob,
            energy,
            mask,
        }
    }
}

/// Turns per-token selection probabilities into a binary mask.
pub trait MaskPolicy: Send + Sync + fmt::Debug {
    /// Canonical `name:argument` spec that recreates this policy.
    fn spec(&self) -> String;

    /// Always selects at least one token for non-empty input.
    fn select(&self, probs: &[f64]) -> Vec<bool>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub theta: f64,
}

impl MaskPolicy for Threshold {
    fn spec(&self) -> String {
        format!("threshold:{}", self.theta)
    }

    fn select(&self, probs: &[f64]) -> Vec<bool> {
        let mut mask: Vec<bool> = probs.iter().map(|&p| p >= self.theta).collect();
        if !probs.is_empty() && !mask.iter().any(|&m| m) {
            mask[argmax(probs)] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopK {
    /// Fraction of tokens to keep, in (0, 1].
    pub budget: f64,
}

impl MaskPolicy for TopK {
    fn spec(&self) -> String {
        format!("topk:{}", self.budget)
    }

    fn select(&self, probs: &[f64]) -> Vec<bool> {
        let n = probs.len();
        let k = ((self.budget * n as f64 - 1e-9).ceil() as usize).clamp(1.min(n), n);
        let mut mask = vec![false; n];
        for i in ranked_desc(probs).into_iter().take(k) {
            mask[i] = true;
        }
        mask
    }
}

/// Indices sorted by descending value, ties by lower index.
fn ranked_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    ranked_desc(values).first().copied().unwrap_or(0)
}

pub fn mask_policies() -> &'static Registry<dyn MaskPolicy> {
    static REGISTRY: OnceLock<Registry<dyn MaskPolicy>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn MaskPolicy> = Registry::new("mask policy");
        reg.register("threshold", |arg| {
            let theta = parse_arg("threshold", arg, 0.5)?;
            if !(theta > 0.0 && theta < 1.0) {
                return Err(Error::Config(format!("threshold must be in (0, 1): {theta}")));
            }
            Ok(Box::new(Threshold { theta }))
        });
        reg.register("topk", |arg| {
            let budget = parse_arg("topk", arg, 0.3)?;
            if !(budget > 0.0 && budget <= 1.0) {
                return Err(Error::Config(format!("top-k budget must be in (0, 1]: {budget}")));
            }
            Ok(Box::new(TopK { budget }))
        });
        reg
    })
}

pub fn mask_policy(spec: &str) -> Result<Box<dyn MaskPolicy>> {
    mask_policies().create(spec)
}

pub fn extract_mask(select_probs: &[f64], policy: &dyn MaskPolicy) -> Vec<bool> {
    policy.select(select_probs)
}
