//! Query-based hard-label attacks and their shared primitives:
//! Monte-Carlo gradient estimation on the decision boundary and boundary
//! bisection.

mod boundary;
mod hsja;
mod sfa;
mod signopt;

pub use boundary::boundary_attack;
pub use hsja::{hsja, hsja_with_estimator, GradientRoutine};
pub use sfa::sfa;
pub use signopt::sign_opt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{Domain, HardLabelOracle, Phi};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    LInf,
}

impl Norm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::L2 => l2_distance(a, b),
            Norm::LInf => linf_distance(a, b),
        }
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HsjaParams {
    /// Hard cap on per-iteration probe counts.
    pub max_batch: usize,
    /// Geometric-progression halvings before giving up on a step.
    pub max_step_halvings: usize,
}

impl Default for HsjaParams {
    fn default() -> Self {
        HsjaParams {
            max_batch: 10_000,
            max_step_halvings: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaParams {
    /// Initial orthogonal step, relative to the current distance.
    pub orth_step: f64,
    /// Initial contraction toward the source, relative to the distance.
    pub contract_step: f64,
    /// Disable step adaptation (used by degenerate-step tests).
    pub adapt: bool,
}

impl Default for BaParams {
    fn default() -> Self {
        BaParams {
            orth_step: 0.1,
            contract_step: 0.05,
            adapt: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignOptParams {
    /// Random directions tried at initialization; the best is kept.
    pub init_directions: usize,
    /// Fixed starting direction, bypassing random initialization.
    pub init_direction: Option<Vec<f64>>,
    /// Relative probe radius: eps = probe_scale * g(theta).
    pub probe_scale: f64,
    /// Initial descent step.
    pub step: f64,
}

impl Default for SignOptParams {
    fn default() -> Self {
        SignOptParams {
            init_directions: 10,
            init_direction: None,
            probe_scale: 1e-3,
            step: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SfaParams {
    /// Starting l-inf radius.
    pub epsilon: f64,
    /// Starting fraction of coordinates flipped per proposal.
    pub flip_fraction: f64,
    /// Multiplicative shrink applied by an accepted projection step.
    pub project_shrink: f64,
    /// Disable projection steps (degenerate-config tests).
    pub project: bool,
    /// Rounds of sign-flip proposals between projection attempts.
    pub project_every: usize,
    /// Disable flip-fraction adaptation.
    pub adapt: bool,
}

impl Default for SfaParams {
    fn default() -> Self {
        SfaParams {
            epsilon: 0.5,
            flip_fraction: 0.05,
            project_shrink: 0.97,
            project: true,
            project_every: 1,
            adapt: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub query_budget: u64,
    /// Initial sample count for gradient estimation.
    pub b0: usize,
    pub seed: u64,
    /// Bracket tolerance for boundary bisection.
    pub bisect_tol: f64,
    /// Random draws allowed when searching for an adversarial start.
    pub init_tries: usize,
    pub hsja: HsjaParams,
    pub ba: BaParams,
    pub sign_opt: SignOptParams,
    pub sfa: SfaParams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            norm: Norm::L2,
            query_budget: 2_000,
            b0: 100,
            seed: 0,
            bisect_tol: 1e-3,
            init_tries: 200,
            hsja: HsjaParams::default(),
            ba: BaParams::default(),
            sign_opt: SignOptParams::default(),
            sfa: SfaParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TracePoint {
    pub queries: u64,
    pub best_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    pub l2_dist: f64,
    pub linf_dist: f64,
    pub queries_used: u64,
    pub success: bool,
    pub trace: Vec<TracePoint>,
}

/// Monte-Carlo boundary-gradient estimate.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    /// Unit-normalized direction (the raw mean if it was exactly zero).
    pub direction: Vec<f64>,
    /// Unnormalized mean of phi-weighted sphere directions.
    pub raw: Vec<f64>,
    /// Set when the raw mean was exactly the zero vector.
    pub degenerate: bool,
    pub queries: u64,
}

/// Draw a point uniformly on the unit sphere in `dim` dimensions.
pub fn sample_unit_sphere(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = l2_norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub(crate) fn clip_unit_cube(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Core of Eq.-style gradient estimation, generic over the phi source so the
/// attack session can route queries through its accounting.
pub(crate) fn estimate_gradient_core(
    mut phi: impl FnMut(&[f64]) -> Result<Phi>,
    x_t: &[f64],
    delta: f64,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate> {
    let dim = x_t.len();
    let mut mean = vec![0.0; dim];
    let mut spent = 0u64;
    for _ in 0..b {
        let u = sample_unit_sphere(rng, dim);
        let probe: Vec<f64> = x_t.iter().zip(&u).map(|(x, du)| x + delta * du).collect();
        let sign = match phi(&probe) {
            Ok(s) => s,
            Err(Error::BudgetExhausted { .. }) => {
                return Err(Error::PartialEstimate {
                    queries_spent: spent,
                    requested: b as u64,
                })
            }
            Err(e) => return Err(e),
        };
        spent += 1;
        for (m, du) in mean.iter_mut().zip(&u) {
            *m += sign as f64 * du;
        }
    }
    for m in mean.iter_mut() {
        *m /= b as f64;
    }
    let norm = l2_norm(&mean);
    let degenerate = norm == 0.0;
    let direction = if degenerate {
        mean.clone()
    } else {
        mean.iter().map(|m| m / norm).collect()
    };
    Ok(GradientEstimate {
        direction,
        raw: mean,
        degenerate,
        queries: spent,
    })
}

/// Estimate the boundary-normal direction at `x_t` by averaging
/// phi-weighted i.i.d. unit-sphere directions at radius `delta`.
/// Consumes exactly `b` queries (or fails with a partial-estimate error if
/// the oracle's budget dies mid-way). Probes are clipped to the unit cube
/// for cube-domain oracles.
pub fn estimate_gradient(
    oracle: &mut HardLabelOracle,
    c_star: usize,
    x_t: &[f64],
    delta: f64,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate> {
    if b == 0 {
        return Err(Error::InvalidConfig("B must be at least 1".into()));
    }
    let clip = oracle.domain() == Domain::UnitCube;
    estimate_gradient_core(
        |probe| {
            if clip {
                let mut p = probe.to_vec();
                clip_unit_cube(&mut p);
                oracle.phi(c_star, &p)
            } else {
                oracle.phi(c_star, probe)
            }
        },
        x_t,
        delta,
        b,
        rng,
    )
}

/// Interpolate between the source and an adversarial point. For l2 this is
/// the straight segment; for l-inf the perturbation is clamped
/// coordinate-wise to a shrinking box around the source.
pub(crate) fn interpolate(x_star: &[f64], x_adv: &[f64], alpha: f64, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L2 => x_star
            .iter()
            .zip(x_adv)
            .map(|(s, a)| (1.0 - alpha) * s + alpha * a)
            .collect(),
        Norm::LInf => {
            let radius = alpha * linf_distance(x_star, x_adv);
            x_star
                .iter()
                .zip(x_adv)
                .map(|(s, a)| s + (a - s).clamp(-radius, radius))
                .collect()
        }
    }
}

pub(crate) fn bisect_core(
    mut phi: impl FnMut(&[f64]) -> Result<Phi>,
    x_star: &[f64],
    x_adv: &[f64],
    tol: f64,
    norm: Norm,
) -> Result<Vec<f64>> {
    if phi(x_adv)? != 1 {
        return Err(Error::NotAdversarial);
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if phi(&interpolate(x_star, x_adv, mid, norm))? == 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(interpolate(x_star, x_adv, hi, norm))
}

/// Binary-search the segment (or l-inf projection path) between the source
/// and an adversarial point down to bracket width `tol`, returning a
/// near-boundary point on the adversarial side. Consumes at most
/// ceil(log2(1/tol)) + 1 queries.
pub fn bisect_to_boundary(
    oracle: &mut HardLabelOracle,
    x_star: &[f64],
    c_star: usize,
    x_adv: &[f64],
    tol: f64,
    norm: Norm,
) -> Result<Vec<f64>> {
    if tol <= 0.0 || tol >= 1.0 {
        return Err(Error::InvalidConfig("bisection tol must be in (0,1)".into()));
    }
    bisect_core(|x| oracle.phi(c_star, x), x_star, x_adv, tol, norm)
}

/// Per-run bookkeeping: exact query accounting, best-point tracking over
/// every adversarial response, trace checkpoints, and budget enforcement
/// via the oracle's own cap.
pub(crate) struct Session<'a> {
    pub oracle: &'a mut HardLabelOracle,
    pub x_star: &'a [f64],
    pub c_star: usize,
    norm: Norm,
    start_count: u64,
    /// Absolute cap including the query reserved for confirmation.
    total_cap: u64,
    clip: bool,
    best: Option<(Vec<f64>, f64)>,
    trace: Vec<TracePoint>,
}

impl<'a> Session<'a> {
    /// Reserves one query out of `cfg.query_budget` for the final
    /// success-confirmation query.
    pub fn begin(
        oracle: &'a mut HardLabelOracle,
        x_star: &'a [f64],
        c_star: usize,
        cfg: &AttackConfig,
    ) -> Result<Self> {
        if x_star.len() != oracle.dim() {
            return Err(Error::DimensionMismatch {
                expected: oracle.dim(),
                actual: x_star.len(),
            });
        }
        let clip = oracle.domain() == Domain::UnitCube;
        let start_count = oracle.query_count();
        let mut total_cap = start_count.saturating_add(cfg.query_budget);
        if let Some(existing) = oracle.budget() {
            total_cap = total_cap.min(existing);
        }
        let search_cap = total_cap.saturating_sub(1).max(start_count);
        oracle.set_budget(Some(search_cap));
        Ok(Session {
            oracle,
            x_star,
            c_star,
            norm: cfg.norm,
            start_count,
            total_cap,
            clip,
            best: None,
            trace: Vec::new(),
        })
    }

    pub fn used(&self) -> u64 {
        self.oracle.query_count() - self.start_count
    }

    pub fn remaining(&self) -> u64 {
        self.oracle.remaining().unwrap_or(u64::MAX)
    }

    /// Clip a candidate to the oracle's domain.
    pub fn admissible(&self, x: &[f64]) -> Vec<f64> {
        let mut p = x.to_vec();
        if self.clip {
            clip_unit_cube(&mut p);
        }
        p
    }

    pub fn clips(&self) -> bool {
        self.clip
    }

    /// Query phi on an already-admissible point.
    pub fn phi(&mut self, x: &[f64]) -> Result<Phi> {
        self.oracle.phi(self.c_star, x)
    }

    /// Record an accepted iterate (a point the attack observed answering
    /// adversarial and adopted as state); the best point and trace follow
    /// accepted iterates, not stray probes.
    pub fn record_iterate(&mut self, x: &[f64]) {
        let dist = self.norm.distance(x, self.x_star);
        let improved = match &self.best {
            Some((_, d)) => dist < *d,
            None => true,
        };
        if improved {
            self.best = Some((x.to_vec(), dist));
            self.trace.push(TracePoint {
                queries: self.used(),
                best_distance: dist,
            });
        }
    }

    /// Uniform random draws (l2) or source-plus-sign-pattern blends (l-inf)
    /// until an adversarial point is found.
    pub fn find_adversarial_init(
        &mut self,
        tries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let dim = self.x_star.len();
        for _ in 0..tries {
            if self.remaining() == 0 {
                return Err(Error::BudgetExhausted {
                    queries_used: self.used(),
                });
            }
            let candidate = match self.norm {
                Norm::L2 => (0..dim).map(|_| rng.random::<f64>()).collect::<Vec<f64>>(),
                Norm::LInf => self
                    .x_star
                    .iter()
                    .map(|&s| {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        s + sign
                    })
                    .collect(),
            };
            let candidate = self.admissible(&candidate);
            if self.phi(&candidate)? == 1 {
                self.record_iterate(&candidate);
                return Ok(candidate);
            }
        }
        Err(Error::InitFailed { tries })
    }

    pub fn bisect(&mut self, x_adv: &[f64], tol: f64) -> Result<Vec<f64>> {
        let norm = self.norm;
        let x_star = self.x_star.to_vec();
        let point = bisect_core(|x| self.phi(x), &x_star, x_adv, tol, norm)?;
        self.record_iterate(&point);
        Ok(point)
    }

    pub fn estimate_gradient(
        &mut self,
        x_t: &[f64],
        delta: f64,
        b: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GradientEstimate> {
        let clip = self.clip;
        estimate_gradient_core(
            |probe| {
                if clip {
                    let mut p = probe.to_vec();
                    clip_unit_cube(&mut p);
                    self.phi(&p)
                } else {
                    self.phi(probe)
                }
            },
            x_t,
            delta,
            b,
            rng,
        )
    }

    /// Spend the reserved query confirming the best point, and assemble the
    /// result. With no adversarial point found the result is a failure
    /// anchored at the source.
    pub fn finalize(self) -> AttackResult {
        let Session {
            oracle,
            x_star,
            c_star,
            best,
            mut trace,
            start_count,
            total_cap,
            ..
        } = self;
        oracle.set_budget(Some(total_cap));
        match best {
            Some((point, dist)) => {
                let success = match oracle.query_label(&point) {
                    Ok(label) => label != c_star,
                    Err(_) => false,
                };
                let queries_used = oracle.query_count() - start_count;
                trace.push(TracePoint {
                    queries: queries_used,
                    best_distance: dist,
                });
                AttackResult {
                    l2_dist: l2_distance(&point, x_star),
                    linf_dist: linf_distance(&point, x_star),
                    x_adv: point,
                    queries_used,
                    success,
                    trace,
                }
            }
            None => AttackResult {
                x_adv: x_star.to_vec(),
                l2_dist: 0.0,
                linf_dist: 0.0,
                queries_used: oracle.query_count() - start_count,
                success: false,
                trace,
            },
        }
    }
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
