//! Hard-label query interfaces with exact query accounting.
//!
//! Three behaviors sit behind one oracle type: a model-backed classifier
//! (optionally wrapped by the defense), and two analytic binary oracles with
//! closed-form margins and gradients used for theory verification. Analytic
//! oracles can additionally corrupt their answers near the boundary, which is
//! how the flip-collapse and countermeasure experiments are driven.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::defense::DefenseState;
use crate::error::{Error, Result};
use crate::nn::DenseNetwork;

/// Sign of the observed margin: +1 when a query point is classified away
/// from the source class, -1 otherwise (boundary counts as -1).
pub type Phi = i8;

/// Input domain the oracle accepts. Attack candidates are clipped to the
/// unit cube only when the oracle demands it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    UnitCube,
    Unbounded,
}

#[derive(Debug, Clone)]
pub enum OracleKind {
    /// Classifier network, optionally defended.
    Model {
        net: Arc<DenseNetwork>,
        defense: Option<DefenseState>,
    },
    /// Binary oracle with margin S(x) = w.x + b; class 1 iff S > 0.
    AnalyticLinear { w: Vec<f64>, b: f64 },
    /// Binary oracle with margin S(x) = r^2 - |x - c|^2; class 1 inside the
    /// ball. Curvature gives a known Lipschitz constant L = 2 for the
    /// gradient-estimation bound checks.
    AnalyticQuadratic { center: Vec<f64>, radius: f64 },
}

/// Answer corruption for analytic oracles. A flip is applied only when the
/// query's margin lies within `band` of the boundary, mimicking a detector
/// that flags near-boundary queries; `band = f64::INFINITY` flags everything.
#[derive(Debug, Clone)]
pub enum Corruption {
    None,
    /// Flip the returned class with probability `p` per query.
    Coin { p: f64, band: f64 },
    /// Deterministic input-dependent flip: the label flips iff the last
    /// digit of round(1e4 * a.x) is even. A stand-in for the parity
    /// countermeasure with the same quantization rule.
    Parity { a: Vec<f64>, band: f64 },
}

#[derive(Debug, Clone)]
pub struct HardLabelOracle {
    kind: OracleKind,
    corruption: Corruption,
    rng: ChaCha8Rng,
    query_count: u64,
    /// Absolute cap on `query_count`; queries beyond it fail.
    budget: Option<u64>,
}

impl HardLabelOracle {
    pub fn model(net: Arc<DenseNetwork>) -> Self {
        Self::from_kind(OracleKind::Model { net, defense: None })
    }

    pub fn defended(defense: DefenseState) -> Self {
        let net = defense.target.clone();
        Self::from_kind(OracleKind::Model {
            net,
            defense: Some(defense),
        })
    }

    pub fn linear(w: Vec<f64>, b: f64) -> Self {
        Self::from_kind(OracleKind::AnalyticLinear { w, b })
    }

    pub fn quadratic(center: Vec<f64>, radius: f64) -> Self {
        Self::from_kind(OracleKind::AnalyticQuadratic { center, radius })
    }

    fn from_kind(kind: OracleKind) -> Self {
        HardLabelOracle {
            kind,
            corruption: Corruption::None,
            rng: ChaCha8Rng::seed_from_u64(0),
            query_count: 0,
            budget: None,
        }
    }

    /// Seed the oracle's internal randomness (defense flips, corruption coins).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_corruption(mut self, corruption: Corruption) -> Self {
        self.corruption = corruption;
        self
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            OracleKind::Model { net, .. } => net.input_dim,
            OracleKind::AnalyticLinear { w, .. } => w.len(),
            OracleKind::AnalyticQuadratic { center, .. } => center.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.kind {
            OracleKind::Model { net, .. } => net.output_dim,
            _ => 2,
        }
    }

    pub fn domain(&self) -> Domain {
        match &self.kind {
            OracleKind::Model { .. } => Domain::UnitCube,
            _ => Domain::Unbounded,
        }
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    /// Allow at most `n` further queries from the current count.
    pub fn limit_additional(&mut self, n: u64) {
        let cap = self.query_count.saturating_add(n);
        self.budget = Some(match self.budget {
            Some(existing) => existing.min(cap),
            None => cap,
        });
    }

    /// Absolute query cap, if any.
    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    /// Replace the absolute query cap.
    pub fn set_budget(&mut self, budget: Option<u64>) {
        self.budget = budget;
    }

    pub fn remaining(&self) -> Option<u64> {
        self.budget.map(|b| b.saturating_sub(self.query_count))
    }

    fn check_dims(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn analytic_margin(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            OracleKind::AnalyticLinear { w, b } => {
                Some(w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b)
            }
            OracleKind::AnalyticQuadratic { center, radius } => {
                let dist2: f64 = center.iter().zip(x).map(|(c, xi)| (xi - c) * (xi - c)).sum();
                Some(radius * radius - dist2)
            }
            OracleKind::Model { .. } => None,
        }
    }

    /// One hard-label query. Increments the counter by exactly 1.
    pub fn query_label(&mut self, x: &[f64]) -> Result<usize> {
        self.check_dims(x)?;
        if let Some(budget) = self.budget {
            if self.query_count >= budget {
                return Err(Error::BudgetExhausted {
                    queries_used: self.query_count,
                });
            }
        }
        let label = match &self.kind {
            OracleKind::Model { net, defense } => match defense {
                Some(ds) => ds.predict_with(x, &mut self.rng)?,
                None => net.predict(x)?,
            },
            _ => {
                let s = self.analytic_margin(x).unwrap();
                let raw = usize::from(s > 0.0);
                self.corrupt(raw, s, x)
            }
        };
        self.query_count += 1;
        Ok(label)
    }

    fn corrupt(&mut self, label: usize, margin: f64, x: &[f64]) -> usize {
        match &self.corruption {
            Corruption::None => label,
            Corruption::Coin { p, band } => {
                if margin.abs() <= *band && *p > 0.0 && self.rng.random::<f64>() < *p {
                    1 - label
                } else {
                    label
                }
            }
            Corruption::Parity { a, band } => {
                if margin.abs() <= *band {
                    let proj: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
                    let f = ((proj * 1e4).round().abs() as i64) % 10;
                    if f % 2 == 0 {
                        1 - label
                    } else {
                        label
                    }
                } else {
                    label
                }
            }
        }
    }

    /// Hard-label realization of sign(S): +1 iff the query's label differs
    /// from `c_star`. Consumes exactly one query.
    pub fn phi(&mut self, c_star: usize, x: &[f64]) -> Result<Phi> {
        let label = self.query_label(x)?;
        Ok(if label != c_star { 1 } else { -1 })
    }

    /// Closed-form margin and gradient; analytic oracles only.
    pub fn analytic_margin_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dims(x)?;
        match &self.kind {
            OracleKind::AnalyticLinear { w, b } => {
                let s = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
                Ok((s, w.clone()))
            }
            OracleKind::AnalyticQuadratic { center, radius } => {
                let dist2: f64 = center.iter().zip(x).map(|(c, xi)| (xi - c) * (xi - c)).sum();
                let grad: Vec<f64> = x.iter().zip(center).map(|(xi, c)| -2.0 * (xi - c)).collect();
                Ok((radius * radius - dist2, grad))
            }
            OracleKind::Model { .. } => Err(Error::UnsupportedOracle(
                "analytic margin requires an analytic oracle",
            )),
        }
    }
}
