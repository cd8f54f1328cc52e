//! Random-walk boundary attack: orthogonal Gaussian steps on the sphere
//! around the source plus inward contractions, with acceptance-rate driven
//! step adaptation.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::oracle::HardLabelOracle;

use super::{l2_distance, l2_norm, rng_from_seed, AttackConfig, AttackResult, Session};

const WINDOW: usize = 30;
const GROW: f64 = 1.5;
const SHRINK: f64 = 0.67;

struct AcceptanceWindow {
    accepted: usize,
    total: usize,
    target: f64,
}

impl AcceptanceWindow {
    fn new(target: f64) -> Self {
        AcceptanceWindow {
            accepted: 0,
            total: 0,
            target,
        }
    }

    /// Record one trial; when the window fills, return the multiplicative
    /// step adjustment and reset.
    fn record(&mut self, accepted: bool) -> Option<f64> {
        self.accepted += usize::from(accepted);
        self.total += 1;
        if self.total < WINDOW {
            return None;
        }
        let rate = self.accepted as f64 / self.total as f64;
        self.accepted = 0;
        self.total = 0;
        if rate > self.target {
            Some(GROW)
        } else if rate < self.target {
            Some(SHRINK)
        } else {
            None
        }
    }
}

pub fn boundary_attack(
    oracle: &mut HardLabelOracle,
    x_star: &[f64],
    c_star: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let mut session = Session::begin(oracle, x_star, c_star, cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let dim = x_star.len();

    let mut x = match session.find_adversarial_init(cfg.init_tries, &mut rng) {
        Ok(p) => p,
        Err(Error::InitFailed { .. }) | Err(Error::BudgetExhausted { .. }) => {
            return Ok(session.finalize())
        }
        Err(e) => return Err(e),
    };

    let mut orth_step = cfg.ba.orth_step;
    let mut contract_step = cfg.ba.contract_step;
    let mut orth_window = AcceptanceWindow::new(0.5);
    let mut contract_window = AcceptanceWindow::new(0.25);

    while session.remaining() > 0 {
        let radius = l2_distance(&x, x_star);
        if radius == 0.0 {
            break;
        }
        let axis: Vec<f64> = x.iter().zip(x_star).map(|(a, s)| (a - s) / radius).collect();

        // Orthogonal perturbation scaled to the current radius, re-projected
        // onto the sphere around the source.
        let noise: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dot: f64 = noise.iter().zip(&axis).map(|(n, a)| n * a).sum();
        let mut offset: Vec<f64> = noise.iter().zip(&axis).map(|(n, a)| n - dot * a).collect();
        let offset_norm = l2_norm(&offset);
        let spherical = if offset_norm < 1e-12 {
            // No orthogonal direction (e.g. dim 1): stay put, contraction
            // below still makes progress.
            x.clone()
        } else {
            let scale = orth_step * radius / offset_norm;
            for v in offset.iter_mut() {
                *v *= scale;
            }
            let moved: Vec<f64> = x.iter().zip(&offset).map(|(a, o)| a + o).collect();
            let moved_norm = l2_distance(&moved, x_star);
            x_star
                .iter()
                .zip(&moved)
                .map(|(s, m)| s + (m - s) * radius / moved_norm)
                .collect()
        };
        let spherical = session.admissible(&spherical);

        let sph_ok = match session.phi(&spherical) {
            Ok(sign) => sign == 1,
            Err(Error::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        };
        if cfg.ba.adapt {
            if let Some(mult) = orth_window.record(sph_ok) {
                orth_step = (orth_step * mult).clamp(1e-9, 2.0);
            }
        }
        if !sph_ok {
            continue;
        }
        session.record_iterate(&spherical);

        if contract_step == 0.0 {
            x = spherical;
            continue;
        }
        if session.remaining() == 0 {
            break;
        }
        let contracted: Vec<f64> = x_star
            .iter()
            .zip(&spherical)
            .map(|(s, p)| s + (1.0 - contract_step) * (p - s))
            .collect();
        let contracted = session.admissible(&contracted);
        let con_ok = match session.phi(&contracted) {
            Ok(sign) => sign == 1,
            Err(Error::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        };
        if cfg.ba.adapt {
            if let Some(mult) = contract_window.record(con_ok) {
                contract_step = (contract_step * mult).clamp(1e-9, 0.5);
            }
        }
        if con_ok {
            session.record_iterate(&contracted);
        }
        x = if con_ok { contracted } else { spherical };
    }
    Ok(session.finalize())
}
