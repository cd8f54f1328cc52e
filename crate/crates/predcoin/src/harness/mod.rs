//! Evaluation harness: metrics, campaign orchestration, report persistence.

mod campaign;

pub use campaign::{
    run_campaign, AdaptiveMode, ArmReport, AsrPoint, AttackName, BudgetAggregate,
    ExperimentConfig, Report, RunRecord, TimingInfo,
};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{AttackResult, Norm};
use crate::defense::DefenseState;
use crate::error::{Error, Result};

fn result_distance(r: &AttackResult, norm: Norm) -> f64 {
    match norm {
        Norm::L2 => r.l2_dist,
        Norm::LInf => r.linf_dist,
    }
}

/// Median distance over successful results; the even-count convention is the
/// mean of the middle two. Failures are the caller's to count separately.
pub fn median_lp(results: &[AttackResult], norm: Norm) -> Result<f64> {
    let mut distances: Vec<f64> = results
        .iter()
        .filter(|r| r.success)
        .map(|r| result_distance(r, norm))
        .collect();
    if distances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = distances.len();
    Ok(if n % 2 == 1 {
        distances[n / 2]
    } else {
        0.5 * (distances[n / 2 - 1] + distances[n / 2])
    })
}

/// Attack success rate: the fraction of all runs that succeeded within
/// distance `epsilon`.
pub fn asr(results: &[AttackResult], epsilon: f64, norm: Norm) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidConfig("epsilon must be non-negative".into()));
    }
    let hits = results
        .iter()
        .filter(|r| r.success && result_distance(r, norm) <= epsilon)
        .count();
    Ok(hits as f64 / results.len() as f64)
}

pub use crate::defense::{accuracy_loss, AccuracyLoss};

/// Wall-time ratio of defended to undefended inference over a batch,
/// median of `reps` repetitions per arm on a monotonic clock.
pub fn inference_time_ratio(
    ds: &DefenseState,
    batch: &[Vec<f64>],
    reps: usize,
) -> Result<f64> {
    if reps < 5 {
        return Err(Error::InvalidConfig("need at least 5 timing reps".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut undefended = Vec::with_capacity(reps);
    let mut defended = Vec::with_capacity(reps);
    for rep in 0..reps {
        let start = Instant::now();
        for x in batch {
            std::hint::black_box(ds.target.predict(x)?);
        }
        undefended.push(start.elapsed().as_secs_f64().max(1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(rep as u64);
        let start = Instant::now();
        for x in batch {
            std::hint::black_box(ds.predict_with(x, &mut rng)?);
        }
        defended.push(start.elapsed().as_secs_f64().max(1e-12));
    }
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    Ok(median(defended) / median(undefended))
}
