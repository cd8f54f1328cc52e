//! Empirical verification of the gradient-estimation bound chain and the
//! flip-collapse argument, on analytic oracles with known gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{estimate_gradient, l2_norm, sample_unit_sphere};
use crate::error::{Error, Result};
use crate::oracle::{Corruption, HardLabelOracle};

/// Lipschitz constant of the quadratic oracle's margin gradient.
pub const QUADRATIC_LIPSCHITZ: f64 = 2.0;

/// Cosine of the angle between two vectors, clamped against rounding.
pub fn cos_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub d: usize,
    pub delta: f64,
    pub b: usize,
    pub cos_measured: f64,
    pub bound_rhs: f64,
    pub mc_slack: f64,
    pub pass: bool,
    /// Delta of exactly zero probes nothing; the row is recorded but not
    /// judged.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub lipschitz: f64,
    pub seed: u64,
}

impl ConvergenceReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().filter(|r| !r.degenerate).all(|r| r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,delta,B,cos_measured,bound_rhs,slack,pass\n");
        for r in &self.rows {
            let verdict = if r.degenerate {
                "degenerate"
            } else if r.pass {
                "pass"
            } else {
                "fail"
            };
            out.push_str(&format!(
                "{},{:e},{},{:.6},{:.6},{:.6},{}\n",
                r.d, r.delta, r.b, r.cos_measured, r.bound_rhs, r.mc_slack, verdict
            ));
        }
        out
    }
}

/// Deterministic bound on the expected estimate quality at a boundary point
/// of the quadratic oracle, with the Monte-Carlo slack subtracted by the
/// caller: 1 - 9 L^2 delta^2 (d-1)^2 / (8 |grad|^2).
pub fn convergence_bound_rhs(l: f64, delta: f64, d: usize, grad_norm: f64) -> f64 {
    1.0 - 9.0 * l * l * delta * delta * ((d - 1) as f64).powi(2) / (8.0 * grad_norm * grad_norm)
}

/// Boundary-gradient estimation sweep over dimensions and probe radii on the
/// unit-radius quadratic oracle. Each (d, delta) row compares the measured
/// cosine against the deterministic bound minus a 5/sqrt(B) Monte-Carlo
/// slack. Rows at the same d share sphere draws, so shrinking delta can only
/// change answers through the curvature term.
pub fn convergence_experiment(
    d_list: &[usize],
    delta_list: &[f64],
    b: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    let mut rows = Vec::new();
    let radius = 1.0;
    let slack = 5.0 / (b as f64).sqrt();
    for (di, &d) in d_list.iter().enumerate() {
        let center = vec![0.0; d];
        let mut boundary = vec![0.0; d];
        boundary[0] = radius;
        let x_star = {
            let mut x = vec![0.0; d];
            x[0] = 2.0 * radius;
            x
        };
        let reference = HardLabelOracle::quadratic(center.clone(), radius);
        let (_, grad) = reference.analytic_margin_gradient(&boundary)?;
        let grad_norm = l2_norm(&grad);
        let c_star = {
            let mut probe = HardLabelOracle::quadratic(center.clone(), radius);
            probe.query_label(&x_star)?
        };
        for &delta in delta_list {
            if delta == 0.0 {
                rows.push(ConvergenceRow {
                    d,
                    delta,
                    b,
                    cos_measured: f64::NAN,
                    bound_rhs: 1.0,
                    mc_slack: slack,
                    pass: true,
                    degenerate: true,
                });
                continue;
            }
            let mut oracle = HardLabelOracle::quadratic(center.clone(), radius);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((di as u64 + 1) << 32));
            let est = estimate_gradient(&mut oracle, c_star, &boundary, delta, b, &mut rng)?;
            let cos = if est.degenerate {
                0.0
            } else {
                cos_angle(&est.direction, &grad)?
            };
            let bound_rhs = convergence_bound_rhs(QUADRATIC_LIPSCHITZ, delta, d, grad_norm);
            rows.push(ConvergenceRow {
                d,
                delta,
                b,
                cos_measured: cos,
                bound_rhs,
                mc_slack: slack,
                pass: cos >= bound_rhs - slack,
                degenerate: false,
            });
        }
    }
    Ok(ConvergenceReport {
        rows,
        lipschitz: QUADRATIC_LIPSCHITZ,
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipCollapseStats {
    pub d: usize,
    pub delta: f64,
    pub b: usize,
    pub trials: usize,
    pub flip_p: f64,
    /// Mean norm of the unnormalized estimates across trials.
    pub mean_raw_norm: f64,
    pub mean_cos: f64,
    pub std_cos: f64,
    /// Spread of the raw estimates around their cross-trial mean
    /// (square root of summed per-coordinate variances).
    pub raw_spread: f64,
}

/// Run repeated boundary-gradient estimates against the quadratic oracle
/// whose answers flip with probability `flip_p` on every query, and
/// aggregate the estimate norms and cosines against the true gradient.
pub fn flip_collapse_experiment(
    d: usize,
    delta: f64,
    b: usize,
    trials: usize,
    flip_p: f64,
    seed: u64,
) -> Result<FlipCollapseStats> {
    let radius = 1.0;
    let center = vec![0.0; d];
    let mut boundary = vec![0.0; d];
    boundary[0] = radius;
    let reference = HardLabelOracle::quadratic(center.clone(), radius);
    let (_, grad) = reference.analytic_margin_gradient(&boundary)?;

    let mut raws: Vec<Vec<f64>> = Vec::with_capacity(trials);
    let mut cosines = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut oracle = HardLabelOracle::quadratic(center.clone(), radius)
            .with_corruption(Corruption::Coin {
                p: flip_p,
                band: f64::INFINITY,
            })
            .with_seed(seed ^ (0xc01u64 + trial as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((trial as u64 + 1) << 24));
        let est = estimate_gradient(&mut oracle, 0, &boundary, delta, b, &mut rng)?;
        cosines.push(if est.degenerate {
            0.0
        } else {
            cos_angle(&est.direction, &grad)?
        });
        raws.push(est.raw);
    }

    let mean_raw_norm = raws.iter().map(|r| l2_norm(r)).sum::<f64>() / trials as f64;
    let mean_cos = cosines.iter().sum::<f64>() / trials as f64;
    let var_cos = cosines
        .iter()
        .map(|c| (c - mean_cos) * (c - mean_cos))
        .sum::<f64>()
        / trials as f64;
    let mut centroid = vec![0.0; d];
    for raw in &raws {
        for (c, v) in centroid.iter_mut().zip(raw) {
            *c += v / trials as f64;
        }
    }
    let mut total_var = 0.0;
    for raw in &raws {
        for (c, v) in centroid.iter().zip(raw) {
            total_var += (v - c) * (v - c) / trials as f64;
        }
    }
    Ok(FlipCollapseStats {
        d,
        delta,
        b,
        trials,
        flip_p,
        mean_raw_norm,
        mean_cos,
        std_cos: var_cos.sqrt(),
        raw_spread: total_var.sqrt(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaMomentReport {
    pub d: usize,
    pub n_samples: usize,
    pub mean_empirical: f64,
    pub mean_theory: f64,
    pub mean_se: f64,
    pub var_empirical: f64,
    pub var_theory: f64,
    pub var_se: f64,
    pub pass: bool,
}

/// The squared projection of a uniform sphere direction onto a fixed axis
/// has mean 1/d and variance 2(d-1)/(d^2 (d+2)); check the empirical moments
/// against those values within three standard errors.
pub fn beta_projection_check(d: usize, n_samples: usize, seed: u64) -> Result<BetaMomentReport> {
    if d < 2 || n_samples < 10_000 {
        return Err(Error::InvalidConfig(
            "need d >= 2 and n_samples >= 10^4".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_samples as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let u = sample_unit_sphere(&mut rng, d);
        let y = u[0] * u[0];
        sum += y;
        sum_sq += y * y;
    }
    let mean_empirical = sum / n;
    let var_empirical = sum_sq / n - mean_empirical * mean_empirical;

    // Raw moments of the squared projection: E[X^{2k}] = prod_{j<k} (1/2+j)/(d/2+j).
    let df = d as f64;
    let m1 = 1.0 / df;
    let m2 = 3.0 / (df * (df + 2.0));
    let m3 = 15.0 / (df * (df + 2.0) * (df + 4.0));
    let m4 = 105.0 / (df * (df + 2.0) * (df + 4.0) * (df + 6.0));
    let mean_theory = m1;
    let var_theory = m2 - m1 * m1;
    debug_assert!((var_theory - 2.0 * (df - 1.0) / (df * df * (df + 2.0))).abs() < 1e-15);

    let mean_se = (var_theory / n).sqrt();
    // Fourth central moment of the squared projection, for the variance
    // estimator's standard error.
    let mu4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
    let var_se = ((mu4 - var_theory * var_theory) / n).sqrt();

    let pass = (mean_empirical - mean_theory).abs() <= 3.0 * mean_se
        && (var_empirical - var_theory).abs() <= 3.0 * var_se;
    Ok(BetaMomentReport {
        d,
        n_samples,
        mean_empirical,
        mean_theory,
        mean_se,
        var_empirical,
        var_theory,
        var_se,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::estimate_gradient;

    #[test]
    fn cos_angle_basics() {
        let u = vec![1.0, 2.0, -3.0];
        let v: Vec<f64> = u.iter().map(|x| -x).collect();
        assert_eq!(cos_angle(&u, &u).unwrap(), 1.0);
        assert_eq!(cos_angle(&u, &v).unwrap(), -1.0);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        assert!(cos_angle(&a, &b).unwrap().abs() < 1e-12);
        assert!(matches!(
            cos_angle(&[0.0, 0.0], &a),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn convergence_rows_pass_and_zero_delta_degenerates() {
        let report = convergence_experiment(&[5], &[1e-3, 0.0], 20_000, 9).unwrap();
        assert_eq!(report.rows.len(), 2);
        let live = &report.rows[0];
        assert!(live.pass);
        assert!(live.cos_measured >= 0.9, "cos {}", live.cos_measured);
        assert!(report.rows[1].degenerate);
        assert!(report.all_pass());
    }

    #[test]
    fn convergence_cos_is_monotone_in_delta() {
        // Radii large enough for the curvature term to matter; rows at the
        // same d share sphere draws, so only the probe radius moves.
        let report = convergence_experiment(&[12], &[4e-1, 1e-1, 1e-2], 20_000, 4).unwrap();
        let cos: Vec<f64> = report.rows.iter().map(|r| r.cos_measured).collect();
        assert!(
            cos[1] >= cos[0] && cos[2] >= cos[1],
            "not monotone: {cos:?}"
        );
        assert!(cos[0] < cos[2], "radius had no effect: {cos:?}");
    }

    #[test]
    fn convergence_report_is_reproducible() {
        let a = convergence_experiment(&[5, 8], &[1e-2], 5_000, 13).unwrap();
        let b = convergence_experiment(&[5, 8], &[1e-2], 5_000, 13).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn csv_has_expected_shape() {
        let report = convergence_experiment(&[5], &[1e-2, 0.0], 2_000, 1).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "d,delta,B,cos_measured,bound_rhs,slack,pass");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with("degenerate"));
    }

    #[test]
    fn flip_probability_zero_matches_plain_estimate() {
        let stats = flip_collapse_experiment(6, 1e-2, 1_000, 1, 0.0, 21).unwrap();
        let mut oracle = HardLabelOracle::quadratic(vec![0.0; 6], 1.0);
        let mut boundary = vec![0.0; 6];
        boundary[0] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(21 ^ (1u64 << 24));
        let est = estimate_gradient(&mut oracle, 0, &boundary, 1e-2, 1_000, &mut rng).unwrap();
        assert!((stats.mean_raw_norm - l2_norm(&est.raw)).abs() < 1e-15);
    }

    #[test]
    fn flip_probability_one_inverts_the_estimate() {
        let a = flip_collapse_experiment(6, 1e-2, 1_000, 3, 0.0, 8).unwrap();
        let b = flip_collapse_experiment(6, 1e-2, 1_000, 3, 1.0, 8).unwrap();
        assert!((a.mean_cos + b.mean_cos).abs() < 1e-12, "{} vs {}", a.mean_cos, b.mean_cos);
        assert!((a.mean_raw_norm - b.mean_raw_norm).abs() < 1e-12);
    }

    #[test]
    fn fair_flips_collapse_the_estimate() {
        let flipped = flip_collapse_experiment(20, 1e-2, 2_000, 10, 0.5, 33).unwrap();
        let baseline = flip_collapse_experiment(20, 1e-2, 2_000, 10, 0.0, 33).unwrap();
        assert!(flipped.mean_cos.abs() < 0.25, "mean cos {}", flipped.mean_cos);
        assert!(flipped.mean_raw_norm < 0.2 * baseline.mean_raw_norm + 5.0 * baseline.raw_spread);
    }

    #[test]
    fn beta_moments_match_theory() {
        for d in [2usize, 10] {
            let report = beta_projection_check(d, 100_000, 5).unwrap();
            assert!(report.pass, "{report:?}");
            assert!((report.mean_theory - 1.0 / d as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_check_is_reproducible() {
        let a = beta_projection_check(6, 20_000, 3).unwrap();
        let b = beta_projection_check(6, 20_000, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
