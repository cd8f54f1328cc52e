//! Boundary-walking attack built on the bisect / estimate / step pipeline:
//! binary-search to the boundary, Monte-Carlo gradient estimate, geometric
//! step-size progression. The gradient-estimation step can be swapped for
//! one of the defense-aware estimators.

use crate::adaptive::{bypass_core, repeat_vote_core};
use crate::defense::DefenseState;
use crate::error::{Error, Result};
use crate::oracle::HardLabelOracle;

use super::{l2_distance, l2_norm, rng_from_seed, AttackConfig, AttackResult, Norm, Session};

/// Which estimator drives the gradient step.
#[derive(Debug, Clone, Copy)]
pub enum GradientRoutine<'a> {
    /// Plain phi-weighted sphere average.
    Standard,
    /// k repeated queries per probe; disagreeing probes are discarded.
    RepeatVote { k: usize },
    /// White-box detector bypass: per-direction minimal evading radius.
    DetectorBypass {
        ds: &'a DefenseState,
        delta_max: f64,
    },
}

pub fn hsja(
    oracle: &mut HardLabelOracle,
    x_star: &[f64],
    c_star: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    hsja_with_estimator(oracle, x_star, c_star, cfg, GradientRoutine::Standard)
}

pub fn hsja_with_estimator(
    oracle: &mut HardLabelOracle,
    x_star: &[f64],
    c_star: usize,
    cfg: &AttackConfig,
    routine: GradientRoutine<'_>,
) -> Result<AttackResult> {
    let mut session = Session::begin(oracle, x_star, c_star, cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let dim = x_star.len();

    let mut current = match session.find_adversarial_init(cfg.init_tries, &mut rng) {
        Ok(p) => p,
        Err(Error::InitFailed { .. }) | Err(Error::BudgetExhausted { .. }) => {
            return Ok(session.finalize())
        }
        Err(e) => return Err(e),
    };

    let repeats = match routine {
        GradientRoutine::RepeatVote { k } => k.max(1) as u64,
        _ => 1,
    };

    let mut t: u64 = 1;
    'outer: loop {
        let boundary = match session.bisect(&current, cfg.bisect_tol) {
            Ok(p) => p,
            Err(Error::BudgetExhausted { .. }) => break,
            Err(Error::NotAdversarial) => {
                // A defended oracle can retract an earlier acceptance; fall
                // back to a fresh initialization if budget allows.
                match session.find_adversarial_init(cfg.init_tries, &mut rng) {
                    Ok(p) => {
                        current = p;
                        continue;
                    }
                    Err(Error::InitFailed { .. }) | Err(Error::BudgetExhausted { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };

        if session.remaining() < repeats {
            break;
        }

        let dist2 = l2_distance(&boundary, x_star);
        let delta = (dist2 / dim as f64).max(1e-12);
        let batch = (cfg.b0 * (t as f64).sqrt().ceil() as usize)
            .min(cfg.hsja.max_batch)
            .min((session.remaining() / repeats) as usize)
            .max(1);

        let (raw, degenerate) = match routine {
            GradientRoutine::Standard => match session.estimate_gradient(&boundary, delta, batch, &mut rng)
            {
                Ok(est) => (est.raw, est.degenerate),
                Err(Error::PartialEstimate { .. }) | Err(Error::BudgetExhausted { .. }) => break,
                Err(e) => return Err(e),
            },
            GradientRoutine::RepeatVote { k } => {
                let clip = session.clips();
                let result = {
                    let sess = &mut session;
                    repeat_vote_core(|p| sess.phi(p), &boundary, delta, batch, k, clip, &mut rng)
                };
                match result {
                    Ok(est) => (est.raw, est.degenerate),
                    Err(Error::BudgetExhausted { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
            GradientRoutine::DetectorBypass { ds, delta_max } => {
                let result = {
                    let sess = &mut session;
                    bypass_core(|p| sess.phi(p), ds, &boundary, batch, delta_max, &mut rng)
                };
                match result {
                    Ok(est) => (est.raw, est.degenerate),
                    Err(Error::BudgetExhausted { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
        };

        if degenerate {
            t += 1;
            if session.remaining() == 0 {
                break;
            }
            continue;
        }

        // Step direction: unit estimate for l2, its sign pattern for l-inf.
        let direction: Vec<f64> = match cfg.norm {
            Norm::L2 => {
                let norm = l2_norm(&raw);
                raw.iter().map(|v| v / norm).collect()
            }
            Norm::LInf => raw.iter().map(|v| v.signum()).collect(),
        };

        let mut step = cfg.norm.distance(&boundary, x_star) / (t as f64).sqrt();
        let mut accepted = false;
        for _ in 0..cfg.hsja.max_step_halvings {
            if session.remaining() == 0 {
                break 'outer;
            }
            let candidate: Vec<f64> = boundary
                .iter()
                .zip(&direction)
                .map(|(x, d)| x + step * d)
                .collect();
            let candidate = session.admissible(&candidate);
            match session.phi(&candidate) {
                Ok(1) => {
                    session.record_iterate(&candidate);
                    current = candidate;
                    accepted = true;
                    break;
                }
                Ok(_) => step *= 0.5,
                Err(Error::BudgetExhausted { .. }) => break 'outer,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            current = boundary;
        }
        t += 1;
        if session.remaining() == 0 {
            break;
        }
    }
    Ok(session.finalize())
}
