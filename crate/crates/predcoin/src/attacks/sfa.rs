//! Sign-flip attack: evolves an l-inf perturbation by random sign flips on
//! coordinate subsets, interleaved with projection steps that shrink the
//! radius. The flip-subset size self-adapts on the acceptance rate.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::HardLabelOracle;

use super::{rng_from_seed, AttackConfig, AttackResult, Session};

const FLIP_WINDOW: usize = 20;

pub fn sfa(
    oracle: &mut HardLabelOracle,
    x_star: &[f64],
    c_star: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let mut session = Session::begin(oracle, x_star, c_star, cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let dim = x_star.len();

    let mut epsilon = cfg.sfa.epsilon;
    // Initialize with random sign patterns at the starting radius.
    let mut eta: Option<Vec<f64>> = None;
    for _ in 0..cfg.init_tries {
        if session.remaining() == 0 {
            break;
        }
        let candidate_eta: Vec<f64> = (0..dim)
            .map(|_| if rng.random::<bool>() { epsilon } else { -epsilon })
            .collect();
        let point: Vec<f64> = x_star.iter().zip(&candidate_eta).map(|(s, e)| s + e).collect();
        let point = session.admissible(&point);
        match session.phi(&point) {
            Ok(1) => {
                session.record_iterate(&point);
                // Keep the effective (possibly clipped) perturbation.
                eta = Some(point.iter().zip(x_star).map(|(p, s)| p - s).collect());
                break;
            }
            Ok(_) => {}
            Err(Error::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    let Some(mut eta) = eta else {
        return Ok(session.finalize());
    };

    let mut flip_fraction = cfg.sfa.flip_fraction;
    let mut accepted_in_window = 0usize;
    let mut window_trials = 0usize;
    let mut round = 0usize;
    // Multiplicative projection step in log space, damped on rejection so
    // the radius settles instead of wandering.
    let step0 = -cfg.sfa.project_shrink.ln();
    let mut step = step0;

    while session.remaining() > 0 {
        round += 1;
        // (a) Sign-flip proposal on a random coordinate subset.
        let subset = ((flip_fraction * dim as f64).round() as usize).clamp(1, dim);
        let mut proposal = eta.clone();
        for idx in sample(&mut rng, dim, subset) {
            proposal[idx] = -proposal[idx];
        }
        let point: Vec<f64> = x_star.iter().zip(&proposal).map(|(s, e)| s + e).collect();
        let point = session.admissible(&point);
        match session.phi(&point) {
            Ok(1) => {
                session.record_iterate(&point);
                eta = point.iter().zip(x_star).map(|(p, s)| p - s).collect();
                accepted_in_window += 1;
            }
            Ok(_) => {}
            Err(Error::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        }
        window_trials += 1;
        if cfg.sfa.adapt && window_trials >= FLIP_WINDOW {
            let rate = accepted_in_window as f64 / window_trials as f64;
            if rate >= 0.5 {
                flip_fraction = (flip_fraction * 2.0).min(0.5);
            } else if rate <= 0.2 {
                flip_fraction = (flip_fraction * 0.5).max(1.0 / dim as f64);
            }
            accepted_in_window = 0;
            window_trials = 0;
        }

        if !cfg.sfa.project
            || !round.is_multiple_of(cfg.sfa.project_every.max(1))
            || session.remaining() == 0
        {
            continue;
        }

        // (b) Projection step: shrink the radius and clamp the perturbation.
        // A rejected shrink relaxes the radius by the same amount and damps
        // the step, so the radius only drifts under real signal and settles
        // once answers stop carrying any.
        let next_eps = epsilon * (-step).exp();
        let projected: Vec<f64> = eta.iter().map(|e| e.clamp(-next_eps, next_eps)).collect();
        let point: Vec<f64> = x_star.iter().zip(&projected).map(|(s, e)| s + e).collect();
        let point = session.admissible(&point);
        match session.phi(&point) {
            Ok(1) => {
                session.record_iterate(&point);
                eta = point.iter().zip(x_star).map(|(p, s)| p - s).collect();
                epsilon = next_eps;
                step = (step * 1.05).min(step0);
            }
            Ok(_) => {
                epsilon = (epsilon * step.exp()).min(cfg.sfa.epsilon);
                step = (step * 0.8).max(1e-4);
            }
            Err(Error::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(session.finalize())
}
