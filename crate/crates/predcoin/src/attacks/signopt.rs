//! Direction-based attack: maintains a unit direction toward the nearest
//! boundary, the boundary distance g(theta) along it, and descends on g
//! using single-query sign probes of the directional derivative.

use crate::error::{Error, Result};
use crate::oracle::HardLabelOracle;

use super::{l2_norm, rng_from_seed, sample_unit_sphere, AttackConfig, AttackResult, Norm, Session};

/// Outcome of evaluating g(theta): the boundary distance along a direction.
enum GEval {
    Distance(f64),
    NoBoundary,
    OutOfBudget,
}

/// Coarse doubling to bracket the boundary along `theta`, then bisection.
/// `hint` seeds the upper bound.
fn eval_g(session: &mut Session, theta: &[f64], hint: f64, tol_rel: f64) -> Result<GEval> {
    let mut last_adversarial: Option<Vec<f64>> = None;
    let point_at = |session: &Session, lambda: f64| -> Vec<f64> {
        let p: Vec<f64> = session
            .x_star
            .iter()
            .zip(theta)
            .map(|(s, t)| s + lambda * t)
            .collect();
        session.admissible(&p)
    };

    let mut hi = hint.max(1e-6);
    let mut lo = 0.0f64;
    let mut found = false;
    for _ in 0..24 {
        if session.remaining() == 0 {
            return Ok(GEval::OutOfBudget);
        }
        let p = point_at(session, hi);
        match session.phi(&p) {
            Ok(1) => {
                last_adversarial = Some(p);
                found = true;
                break;
            }
            Ok(_) => {
                lo = hi;
                hi *= 2.0;
            }
            Err(Error::BudgetExhausted { .. }) => return Ok(GEval::OutOfBudget),
            Err(e) => return Err(e),
        }
    }
    if !found {
        return Ok(GEval::NoBoundary);
    }
    let tol = (tol_rel * hi).max(1e-12);
    while hi - lo > tol {
        if session.remaining() == 0 {
            return Ok(GEval::OutOfBudget);
        }
        let mid = 0.5 * (lo + hi);
        let p = point_at(session, mid);
        match session.phi(&p) {
            Ok(1) => {
                last_adversarial = Some(p);
                hi = mid;
            }
            Ok(_) => lo = mid,
            Err(Error::BudgetExhausted { .. }) => return Ok(GEval::OutOfBudget),
            Err(e) => return Err(e),
        }
    }
    if let Some(p) = last_adversarial {
        session.record_iterate(&p);
    }
    Ok(GEval::Distance(hi))
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    if n < 1e-12 {
        None
    } else {
        Some(v.iter().map(|x| x / n).collect())
    }
}

pub fn sign_opt(
    oracle: &mut HardLabelOracle,
    x_star: &[f64],
    c_star: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.norm != Norm::L2 {
        return Err(Error::InvalidConfig(
            "sign-opt is an l2 attack; it is ineffective in the l-inf setting".into(),
        ));
    }
    let mut session = Session::begin(oracle, x_star, c_star, cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let dim = x_star.len();
    let initial_scale = (dim as f64).sqrt();

    // Initialization: fixed direction if supplied, otherwise the best of a
    // handful of random directions.
    let mut best: Option<(Vec<f64>, f64)> = None;
    let candidates: Vec<Vec<f64>> = match &cfg.sign_opt.init_direction {
        Some(dir) => match normalize(dir) {
            Some(d) => vec![d],
            None => return Err(Error::ZeroVector),
        },
        None => (0..cfg.sign_opt.init_directions)
            .map(|_| sample_unit_sphere(&mut rng, dim))
            .collect(),
    };
    for theta in candidates {
        match eval_g(&mut session, &theta, initial_scale, G_EVAL_TOL)? {
            GEval::Distance(g) => {
                if best.as_ref().is_none_or(|(_, bg)| g < *bg) {
                    best = Some((theta, g));
                }
            }
            GEval::NoBoundary => {}
            GEval::OutOfBudget => break,
        }
    }
    let (mut theta, mut g) = match best {
        Some(b) => b,
        None => return Ok(session.finalize()),
    };

    let mut step = cfg.sign_opt.step;
    'outer: while session.remaining() > 0 && step > 1e-9 {
        // Sign probes of the directional derivative of g, taken at the
        // bracket center so the bisection residual stays symmetric.
        let probes = cfg.b0.min(session.remaining() as usize).max(1);
        let eps = cfg.sign_opt.probe_scale * g;
        let probe_radius = g * (1.0 - 0.5 * G_EVAL_TOL);
        let mut grad = vec![0.0; dim];
        for _ in 0..probes {
            let u = sample_unit_sphere(&mut rng, dim);
            let perturbed: Vec<f64> = theta.iter().zip(&u).map(|(t, du)| t + eps * du).collect();
            let Some(unit) = normalize(&perturbed) else {
                continue;
            };
            let probe_point: Vec<f64> = session
                .x_star
                .iter()
                .zip(&unit)
                .map(|(s, t)| s + probe_radius * t)
                .collect();
            let probe_point = session.admissible(&probe_point);
            let sign = match session.phi(&probe_point) {
                // Still adversarial at distance g: the boundary moved closer,
                // so g decreases along +u.
                Ok(1) => -1.0,
                Ok(_) => 1.0,
                Err(Error::BudgetExhausted { .. }) => break 'outer,
                Err(e) => return Err(e),
            };
            for (gr, du) in grad.iter_mut().zip(&u) {
                *gr += sign * du;
            }
        }
        let Some(grad_unit) = normalize(&grad) else {
            break;
        };

        // Line search against the current gradient, halving on failure.
        let mut improved = false;
        for _ in 0..8 {
            let proposal: Vec<f64> = theta
                .iter()
                .zip(&grad_unit)
                .map(|(t, gr)| t - step * gr)
                .collect();
            let Some(new_theta) = normalize(&proposal) else {
                step *= 0.5;
                continue;
            };
            match eval_g(&mut session, &new_theta, g * 1.05, G_EVAL_TOL)? {
                GEval::Distance(new_g) if new_g < g => {
                    theta = new_theta;
                    g = new_g;
                    improved = true;
                    break;
                }
                GEval::Distance(_) | GEval::NoBoundary => step *= 0.5,
                GEval::OutOfBudget => break 'outer,
            }
            if step <= 1e-9 {
                break;
            }
        }
        if !improved && step <= 1e-9 {
            break;
        }
    }
    Ok(session.finalize())
}

/// Relative bisection tolerance for g evaluations; probe radii sit half a
/// bracket inside it.
const G_EVAL_TOL: f64 = 2e-4;
