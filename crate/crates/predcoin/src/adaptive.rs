//! Defense-aware attack primitives: white-box detector bypass for gradient
//! probes, and repeat-query voting against the randomized flip.

use rand_chacha::ChaCha8Rng;

use crate::attacks::{l2_norm, sample_unit_sphere};
use crate::defense::DefenseState;
use crate::error::{Error, Result};
use crate::oracle::{Domain, HardLabelOracle, Phi};

/// Outcome of the minimal-radius bypass search for one sphere direction.
#[derive(Debug, Clone, Copy)]
pub struct BypassResult {
    /// Smallest probe radius that slips under the detector threshold while
    /// staying inside the unit cube; absent when no radius works.
    pub delta_b: Option<f64>,
    /// White-box detector evaluations spent by the search.
    pub queries_to_detector: u64,
    pub feasible: bool,
}

const BYPASS_GRID: usize = 50;
const BYPASS_GRID_DECADES: f64 = 4.0;
const BYPASS_REFINE_STEPS: usize = 20;

fn bypass_feasible(ds: &DefenseState, x_t: &[f64], u_b: &[f64], delta: f64) -> Result<bool> {
    let probe: Vec<f64> = x_t.iter().zip(u_b).map(|(x, du)| x + delta * du).collect();
    if probe.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Ok(false);
    }
    let p = ds.target.forward(&probe)?;
    let (_, y1) = ds.detect(&p);
    Ok(y1 < ds.gamma)
}

/// Minimal probe radius evading the detector along one direction: a coarse
/// log-spaced scan over (0, delta_max], then bisection refinement between
/// the last infeasible and first feasible grid points.
pub fn bypass_delta(
    ds: &DefenseState,
    x_t: &[f64],
    u_b: &[f64],
    delta_max: f64,
) -> Result<BypassResult> {
    if delta_max <= 0.0 {
        return Err(Error::InvalidConfig("delta_max must be positive".into()));
    }
    let mut queries = 0u64;
    let grid = |i: usize| -> f64 {
        let t = i as f64 / (BYPASS_GRID - 1) as f64;
        delta_max * 10f64.powf(-BYPASS_GRID_DECADES * (1.0 - t))
    };
    let mut first_feasible = None;
    for i in 0..BYPASS_GRID {
        queries += 1;
        if bypass_feasible(ds, x_t, u_b, grid(i))? {
            first_feasible = Some(i);
            break;
        }
    }
    let Some(i) = first_feasible else {
        return Ok(BypassResult {
            delta_b: None,
            queries_to_detector: queries,
            feasible: false,
        });
    };
    let mut hi = grid(i);
    if i > 0 {
        let mut lo = grid(i - 1);
        for _ in 0..BYPASS_REFINE_STEPS {
            let mid = 0.5 * (lo + hi);
            queries += 1;
            if bypass_feasible(ds, x_t, u_b, mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    Ok(BypassResult {
        delta_b: Some(hi),
        queries_to_detector: queries,
        feasible: true,
    })
}

#[derive(Debug, Clone)]
pub struct BypassEstimate {
    pub direction: Vec<f64>,
    pub raw: Vec<f64>,
    pub feasible_draws: usize,
    pub total_draws: usize,
    /// No feasible direction existed, or they summed to zero.
    pub degenerate: bool,
    pub oracle_queries: u64,
    pub detector_queries: u64,
}

pub(crate) fn bypass_core(
    mut phi: impl FnMut(&[f64]) -> Result<Phi>,
    ds: &DefenseState,
    x_t: &[f64],
    b: usize,
    delta_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BypassEstimate> {
    if b == 0 {
        return Err(Error::InvalidConfig("B must be at least 1".into()));
    }
    let dim = x_t.len();
    let mut detector_queries = 0u64;
    let mut oracle_queries = 0u64;
    let mut sum = vec![0.0; dim];
    let mut feasible_draws = 0usize;
    for _ in 0..b {
        let u = sample_unit_sphere(rng, dim);
        let bypass = bypass_delta(ds, x_t, &u, delta_max)?;
        detector_queries += bypass.queries_to_detector;
        let Some(delta) = bypass.delta_b else {
            continue;
        };
        let probe: Vec<f64> = x_t.iter().zip(&u).map(|(x, du)| x + delta * du).collect();
        let sign = phi(&probe)?;
        oracle_queries += 1;
        feasible_draws += 1;
        for (s, du) in sum.iter_mut().zip(&u) {
            *s += sign as f64 * du;
        }
    }
    let raw: Vec<f64> = if feasible_draws == 0 {
        sum
    } else {
        sum.iter().map(|s| s / feasible_draws as f64).collect()
    };
    let norm = l2_norm(&raw);
    let degenerate = feasible_draws == 0 || norm == 0.0;
    let direction = if degenerate {
        raw.clone()
    } else {
        raw.iter().map(|v| v / norm).collect()
    };
    Ok(BypassEstimate {
        direction,
        raw,
        feasible_draws,
        total_draws: b,
        degenerate,
        oracle_queries,
        detector_queries,
    })
}

/// Gradient estimate restricted to detector-evading probes: each sphere
/// direction is first given its minimal bypass radius (white-box), then a
/// single hard-label query at that radius feeds the usual average.
pub fn bypass_gradient_estimate(
    oracle: &mut HardLabelOracle,
    ds: &DefenseState,
    c_star: usize,
    x_t: &[f64],
    b: usize,
    delta_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BypassEstimate> {
    bypass_core(
        |probe| oracle.phi(c_star, probe),
        ds,
        x_t,
        b,
        delta_max,
        rng,
    )
}

/// Majority-voted phi over `k` repeated queries of the identical point;
/// ties resolve to -1. Consumes exactly `k` queries.
pub fn uncertainty_phi(
    oracle: &mut HardLabelOracle,
    c_star: usize,
    x_q: &[f64],
    k: usize,
) -> Result<Phi> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut total: i64 = 0;
    for _ in 0..k {
        total += oracle.phi(c_star, x_q)? as i64;
    }
    Ok(if total > 0 { 1 } else { -1 })
}

#[derive(Debug, Clone)]
pub struct UncertaintyEstimate {
    pub direction: Vec<f64>,
    pub raw: Vec<f64>,
    /// Draws whose k answers were unanimous and entered the average.
    pub resolved: usize,
    /// Draws with disagreeing answers, excluded as detected randomness.
    pub discarded: usize,
    pub degenerate: bool,
    pub queries: u64,
}

pub(crate) fn repeat_vote_core(
    mut phi: impl FnMut(&[f64]) -> Result<Phi>,
    x_t: &[f64],
    delta: f64,
    b: usize,
    k: usize,
    clip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<UncertaintyEstimate> {
    if b == 0 || k == 0 {
        return Err(Error::InvalidConfig("B and k must be at least 1".into()));
    }
    let dim = x_t.len();
    let mut queries = 0u64;
    let mut sum = vec![0.0; dim];
    let mut resolved = 0usize;
    let mut discarded = 0usize;
    for _ in 0..b {
        let u = sample_unit_sphere(rng, dim);
        let mut probe: Vec<f64> = x_t.iter().zip(&u).map(|(x, du)| x + delta * du).collect();
        if clip {
            crate::attacks::clip_unit_cube(&mut probe);
        }
        let first = phi(&probe)?;
        queries += 1;
        let mut unanimous = true;
        for _ in 1..k {
            if phi(&probe)? != first {
                unanimous = false;
            }
            queries += 1;
        }
        if unanimous {
            resolved += 1;
            for (s, du) in sum.iter_mut().zip(&u) {
                *s += first as f64 * du;
            }
        } else {
            discarded += 1;
        }
    }
    let raw: Vec<f64> = if resolved == 0 {
        sum
    } else {
        sum.iter().map(|s| s / resolved as f64).collect()
    };
    let norm = l2_norm(&raw);
    let degenerate = resolved == 0 || norm == 0.0;
    let direction = if degenerate {
        raw.clone()
    } else {
        raw.iter().map(|v| v / norm).collect()
    };
    Ok(UncertaintyEstimate {
        direction,
        raw,
        resolved,
        discarded,
        degenerate,
        queries,
    })
}

/// Repeat-query gradient estimate: each sphere draw is queried `k` times;
/// draws with unanimous answers contribute their phi, disagreeing draws
/// reveal the flip and are discarded. A randomized flip slips through with
/// probability 2^(1-k) per draw; with k = 1 this is the plain estimate.
pub fn uncertainty_gradient_estimate(
    oracle: &mut HardLabelOracle,
    c_star: usize,
    x_t: &[f64],
    delta: f64,
    b: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<UncertaintyEstimate> {
    let clip = oracle.domain() == Domain::UnitCube;
    repeat_vote_core(
        |probe| oracle.phi(c_star, probe),
        x_t,
        delta,
        b,
        k,
        clip,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::estimate_gradient;
    use crate::defense::{FlipMode, FQ_ARCH};
    use crate::nn::{Activation, DenseNetwork, Layer};
    use crate::oracle::Corruption;
    use crate::theory::cos_angle;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Bias-only 3-class target: argmax 1, runner-up 2, source class 0.
    fn fixed_target() -> Arc<DenseNetwork> {
        let mut layer = Layer::zeros(3, 2, Activation::Softmax);
        layer.bias.copy_from_slice(&[0.0, 2.0, 1.0]);
        Arc::new(DenseNetwork::from_layers(vec![layer]).unwrap())
    }

    fn defense(gamma: f64, mode: FlipMode) -> DefenseState {
        let fq = DenseNetwork::new_classifier(&FQ_ARCH, 7).unwrap();
        DefenseState::new(fixed_target(), fq, gamma, mode).unwrap()
    }

    #[test]
    fn bypass_with_gamma_one_returns_smallest_grid_value() {
        let ds = defense(1.0, FlipMode::Off);
        let x_t = vec![0.5, 0.5];
        let u = vec![1.0, 0.0];
        let result = bypass_delta(&ds, &x_t, &u, 0.2).unwrap();
        assert!(result.feasible);
        let smallest = 0.2 * 1e-4;
        assert!((result.delta_b.unwrap() - smallest).abs() < 1e-15);
    }

    #[test]
    fn bypass_with_gamma_zero_is_infeasible() {
        let ds = defense(0.0, FlipMode::Off);
        let result = bypass_delta(&ds, &[0.5, 0.5], &[1.0, 0.0], 0.2).unwrap();
        assert!(!result.feasible);
        assert!(result.delta_b.is_none());
        assert_eq!(result.queries_to_detector, 50);
    }

    #[test]
    fn bypass_respects_the_unit_cube() {
        let ds = defense(1.0, FlipMode::Off);
        // Pointing out of the cube from the corner: nothing is feasible.
        let result = bypass_delta(&ds, &[1.0, 1.0], &[1.0, 0.0], 0.5).unwrap();
        assert!(!result.feasible);
    }

    #[test]
    fn bypass_estimate_reduces_to_plain_estimate_when_undetected() {
        // Gamma 1 never detects: every draw is feasible at the smallest grid
        // radius, so the bypass estimate equals the plain estimate there.
        let target = fixed_target();
        let fq = DenseNetwork::new_classifier(&FQ_ARCH, 7).unwrap();
        let ds = DefenseState::new(target.clone(), fq, 1.0, FlipMode::Off).unwrap();
        let mut defended = HardLabelOracle::defended(ds.clone());
        let x_t = vec![0.5, 0.5];
        let delta_max = 0.3;
        let smallest = delta_max * 1e-4;

        let est_bypass =
            bypass_gradient_estimate(&mut defended, &ds, 0, &x_t, 200, delta_max, &mut seeded(3))
                .unwrap();
        assert_eq!(est_bypass.feasible_draws, 200);

        let mut plain = HardLabelOracle::defended(ds.clone());
        let est_plain = estimate_gradient(&mut plain, 0, &x_t, smallest, 200, &mut seeded(3)).unwrap();
        for (a, b) in est_bypass.raw.iter().zip(&est_plain.raw) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bypass_estimate_with_gamma_zero_is_degenerate() {
        let ds = defense(0.0, FlipMode::Probabilistic);
        let mut oracle = HardLabelOracle::defended(ds.clone());
        let est =
            bypass_gradient_estimate(&mut oracle, &ds, 0, &[0.5, 0.5], 50, 0.3, &mut seeded(4))
                .unwrap();
        assert!(est.degenerate);
        assert_eq!(est.feasible_draws, 0);
        assert_eq!(est.oracle_queries, 0);
    }

    #[test]
    fn uncertainty_phi_on_deterministic_oracle() {
        let mut o = HardLabelOracle::linear(vec![1.0], -0.5);
        assert_eq!(uncertainty_phi(&mut o, 0, &[0.9], 5).unwrap(), 1);
        assert_eq!(o.query_count(), 5);
        assert_eq!(uncertainty_phi(&mut o, 0, &[0.1], 5).unwrap(), -1);
        assert_eq!(o.query_count(), 10);
    }

    #[test]
    fn uncertainty_phi_against_parity_mode_matches_single_answer() {
        let ds = defense(0.0, FlipMode::Parity);
        let x = vec![0.3, 0.8];
        let mut o = HardLabelOracle::defended(ds.clone()).with_seed(2);
        let single = o.phi(0, &x).unwrap();
        for k in [1usize, 3, 9] {
            assert_eq!(uncertainty_phi(&mut o, 0, &x, k).unwrap(), single);
        }
    }

    #[test]
    fn uncertainty_phi_recovers_when_both_labels_are_adversarial() {
        // Flagged point whose argmax and runner-up both differ from the
        // source class: every answer has phi +1, so the k = 9 majority is
        // +1 with certainty (>= 0.99).
        let ds = defense(0.0, FlipMode::Probabilistic);
        let mut o = HardLabelOracle::defended(ds).with_seed(11);
        for _ in 0..50 {
            assert_eq!(uncertainty_phi(&mut o, 0, &[0.5, 0.5], 9).unwrap(), 1);
        }
    }

    #[test]
    fn unanimity_filter_wrong_rate_is_bounded() {
        // Fair-coin corruption on every query: a draw slips through the
        // filter only when all k coins agree, so the wrongly-resolved rate
        // stays under 2 * (1/2)^k.
        let d = 6;
        let k = 4;
        let boundary = {
            let mut x = vec![0.0; d];
            x[0] = 1.0;
            x
        };
        let mut oracle = HardLabelOracle::quadratic(vec![0.0; d], 1.0)
            .with_corruption(Corruption::Coin {
                p: 0.5,
                band: f64::INFINITY,
            })
            .with_seed(5);
        let mut truth_oracle = HardLabelOracle::quadratic(vec![0.0; d], 1.0);

        let b = 2_000;
        let mut rng = seeded(6);
        let mut wrong_resolved = 0usize;
        for _ in 0..b {
            let u = sample_unit_sphere(&mut rng, d);
            let probe: Vec<f64> = boundary.iter().zip(&u).map(|(x, du)| x + 0.01 * du).collect();
            let first = oracle.phi(0, &probe).unwrap();
            let mut unanimous = true;
            for _ in 1..k {
                if oracle.phi(0, &probe).unwrap() != first {
                    unanimous = false;
                }
            }
            if unanimous && first != truth_oracle.phi(0, &probe).unwrap() {
                wrong_resolved += 1;
            }
        }
        let rate = wrong_resolved as f64 / b as f64;
        let bound = 2.0 * 0.5f64.powi(k);
        assert!(rate <= bound, "wrong-resolved rate {rate} > bound {bound}");
    }

    #[test]
    fn repeats_recover_gradients_under_partial_coin_flips() {
        // Coin flips confined to a near-boundary band: k = 1 estimates are
        // polluted, k = 5 discards the coin draws and realigns.
        let d = 8;
        let delta = 0.01;
        let radius = 1.0;
        let band = 0.5 * delta * 2.0 * radius;
        let boundary = {
            let mut x = vec![0.0; d];
            x[0] = radius;
            x
        };
        let truth = HardLabelOracle::quadratic(vec![0.0; d], radius)
            .analytic_margin_gradient(&boundary)
            .unwrap()
            .1;
        let mut mean_cos = [0.0f64; 2];
        let trials = 10;
        for trial in 0..trials {
            for (slot, k) in [(0usize, 1usize), (1, 5)] {
                let mut oracle = HardLabelOracle::quadratic(vec![0.0; d], radius)
                    .with_corruption(Corruption::Coin { p: 0.5, band })
                    .with_seed(100 + trial);
                let est = uncertainty_gradient_estimate(
                    &mut oracle,
                    0,
                    &boundary,
                    delta,
                    150,
                    k,
                    &mut seeded(200 + trial),
                )
                .unwrap();
                assert_eq!(est.queries, 150 * k as u64);
                mean_cos[slot] += cos_angle(&est.direction, &truth).unwrap() / trials as f64;
            }
        }
        assert!(
            mean_cos[1] > mean_cos[0] + 0.05,
            "k=5 cos {} not above k=1 cos {}",
            mean_cos[1],
            mean_cos[0]
        );
    }

    #[test]
    fn repeats_are_useless_against_parity_corruption() {
        // Deterministic flips answer repeats identically: with shared sphere
        // draws the k = 5 estimate equals the k = 1 estimate bit for bit.
        let d = 8;
        let delta = 0.01;
        let band = 0.4 * delta * 2.0;
        let boundary = {
            let mut x = vec![0.0; d];
            x[0] = 1.0;
            x
        };
        let a: Vec<f64> = (0..d).map(|i| 1.3 + 0.7 * i as f64).collect();
        let make_oracle = || {
            HardLabelOracle::quadratic(vec![0.0; d], 1.0).with_corruption(Corruption::Parity {
                a: a.clone(),
                band,
            })
        };
        let est1 = uncertainty_gradient_estimate(
            &mut make_oracle(),
            0,
            &boundary,
            delta,
            200,
            1,
            &mut seeded(9),
        )
        .unwrap();
        let est5 = uncertainty_gradient_estimate(
            &mut make_oracle(),
            0,
            &boundary,
            delta,
            200,
            5,
            &mut seeded(9),
        )
        .unwrap();
        assert_eq!(est5.discarded, 0);
        for (x, y) in est1.raw.iter().zip(&est5.raw) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
