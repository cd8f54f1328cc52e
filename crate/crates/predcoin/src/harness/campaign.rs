//! Campaign orchestration: fan attack runs out over pre-filtered seed
//! images (optionally paired base/defended), aggregate metrics, and build a
//! reproducible report.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    boundary_attack, hsja, hsja_with_estimator, sfa, sign_opt, AttackConfig, AttackResult,
    GradientRoutine, Norm,
};
use crate::data::{Dataset, DatasetSpec};
use crate::defense::{
    accuracy_loss, fq_metrics, generate_fq_dataset, AccuracyLoss, DefenseConfig, DefenseState,
    FqMetrics, FqSamplerConfig,
};
use crate::error::{Error, Result};
use crate::nn::{load_model, DenseNetwork};
use crate::oracle::HardLabelOracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackName {
    Ba,
    SignOpt,
    Hsja,
    Sfa,
}

impl std::str::FromStr for AttackName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ba" => Ok(AttackName::Ba),
            "signopt" => Ok(AttackName::SignOpt),
            "hsja" => Ok(AttackName::Hsja),
            "sfa" => Ok(AttackName::Sfa),
            other => Err(Error::InvalidConfig(format!("unknown attack {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdaptiveMode {
    #[default]
    None,
    /// White-box detector bypass inside the gradient step (hsja only).
    Bypass { delta_max: f64 },
    /// Repeat-query voting inside the gradient step (hsja only).
    Uncertainty { k: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Evaluation pool; seed images are drawn from its correctly
    /// classified points in order.
    pub dataset: DatasetSpec,
    pub target_model: String,
    /// Defense JSON path; None runs the base arm only.
    pub defense: Option<String>,
    pub attack: AttackName,
    pub norm: Norm,
    pub budgets: Vec<u64>,
    pub seed_images: usize,
    pub base_seed: u64,
    #[serde(default = "default_b0")]
    pub b0: usize,
    #[serde(default)]
    pub adaptive: AdaptiveMode,
    #[serde(default)]
    pub serial: bool,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_b0() -> usize {
    100
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::InvalidConfig("budget list is empty".into()));
        }
        if self.seed_images == 0 {
            return Err(Error::InvalidConfig("need at least one seed image".into()));
        }
        if self.attack == AttackName::SignOpt && self.norm == Norm::LInf {
            return Err(Error::InvalidConfig(
                "sign-opt does not run in the l-inf setting".into(),
            ));
        }
        if !matches!(self.adaptive, AdaptiveMode::None) && self.attack != AttackName::Hsja {
            return Err(Error::InvalidConfig(
                "adaptive modes only apply to hsja".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub image_index: usize,
    pub seed: u64,
    pub budget: u64,
    pub result: AttackResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetAggregate {
    pub budget: u64,
    pub runs: usize,
    pub successes: usize,
    pub median_l2: Option<f64>,
    pub median_linf: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub defended: bool,
    pub rows: Vec<RunRecord>,
    pub aggregates: Vec<BudgetAggregate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrPoint {
    pub epsilon: f64,
    pub asr_base: f64,
    pub asr_defended: Option<f64>,
}

/// Timing numbers live under one key so reproducibility comparisons can
/// strip them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingInfo {
    pub inference_time_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
    pub asr_curve: Vec<AsrPoint>,
    pub delta_acc: Option<AccuracyLoss>,
    pub fq_metrics: Option<FqMetrics>,
    pub timing: Option<TimingInfo>,
}

impl Report {
    pub fn base_arm(&self) -> &ArmReport {
        &self.arms[0]
    }

    pub fn defended_arm(&self) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.defended)
    }

    pub fn asr_csv(&self) -> String {
        let mut out = String::from("epsilon,asr_base,asr_defended\n");
        for p in &self.asr_curve {
            match p.asr_defended {
                Some(d) => out.push_str(&format!("{:.6},{:.6},{:.6}\n", p.epsilon, p.asr_base, d)),
                None => out.push_str(&format!("{:.6},{:.6},\n", p.epsilon, p.asr_base)),
            }
        }
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("report.json"), json)?;
        std::fs::write(out_dir.join("asr_curve.csv"), self.asr_csv())?;
        Ok(())
    }
}

fn dispatch_attack(
    oracle: &mut HardLabelOracle,
    x_star: &[f64],
    c_star: usize,
    cfg: &AttackConfig,
    name: AttackName,
    adaptive: AdaptiveMode,
    defense: Option<&DefenseState>,
) -> Result<AttackResult> {
    match (name, adaptive) {
        (AttackName::Hsja, AdaptiveMode::None) => hsja(oracle, x_star, c_star, cfg),
        (AttackName::Hsja, AdaptiveMode::Uncertainty { k }) => {
            hsja_with_estimator(oracle, x_star, c_star, cfg, GradientRoutine::RepeatVote { k })
        }
        (AttackName::Hsja, AdaptiveMode::Bypass { delta_max }) => {
            let ds = defense.ok_or_else(|| {
                Error::InvalidConfig("bypass mode needs a defense".into())
            })?;
            hsja_with_estimator(
                oracle,
                x_star,
                c_star,
                cfg,
                GradientRoutine::DetectorBypass { ds, delta_max },
            )
        }
        (AttackName::Ba, _) => boundary_attack(oracle, x_star, c_star, cfg),
        (AttackName::SignOpt, _) => sign_opt(oracle, x_star, c_star, cfg),
        (AttackName::Sfa, _) => sfa(oracle, x_star, c_star, cfg),
    }
}

fn run_arm(
    cfg: &ExperimentConfig,
    target: &Arc<DenseNetwork>,
    defense: Option<&DefenseState>,
    seeds: &[(usize, u64)],
    pool: &Dataset,
) -> Result<ArmReport> {
    let jobs: Vec<(usize, u64, u64)> = seeds
        .iter()
        .flat_map(|&(idx, seed)| cfg.budgets.iter().map(move |&b| (idx, seed, b)))
        .collect();

    let run_one = |&(image_index, seed, budget): &(usize, u64, u64)| -> Result<RunRecord> {
        let x_star = &pool.inputs[image_index];
        let c_star = target.predict(x_star)?;
        let mut oracle = match defense {
            Some(ds) => HardLabelOracle::defended(ds.clone()).with_seed(seed ^ 0xdef),
            None => HardLabelOracle::model(target.clone()),
        };
        let attack_cfg = AttackConfig {
            norm: cfg.norm,
            query_budget: budget,
            b0: cfg.b0,
            seed,
            ..AttackConfig::default()
        };
        // Defense-aware modes only shape the defended arm; the base arm is
        // always the plain attack.
        let adaptive = if defense.is_some() {
            cfg.adaptive
        } else {
            AdaptiveMode::None
        };
        let result = dispatch_attack(
            &mut oracle,
            x_star,
            c_star,
            &attack_cfg,
            cfg.attack,
            adaptive,
            defense,
        )?;
        Ok(RunRecord {
            image_index,
            seed,
            budget,
            result,
        })
    };

    let rows: Vec<RunRecord> = if cfg.serial {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    } else {
        jobs.par_iter().map(run_one).collect::<Result<_>>()?
    };

    let mut aggregates = Vec::new();
    for &budget in &cfg.budgets {
        let results: Vec<AttackResult> = rows
            .iter()
            .filter(|r| r.budget == budget)
            .map(|r| r.result.clone())
            .collect();
        let successes = results.iter().filter(|r| r.success).count();
        aggregates.push(BudgetAggregate {
            budget,
            runs: results.len(),
            successes,
            median_l2: super::median_lp(&results, Norm::L2).ok(),
            median_linf: super::median_lp(&results, Norm::LInf).ok(),
        });
    }
    Ok(ArmReport {
        defended: defense.is_some(),
        rows,
        aggregates,
    })
}

fn asr_curve(cfg: &ExperimentConfig, arms: &[ArmReport]) -> Vec<AsrPoint> {
    let top_budget = cfg.budgets.iter().copied().max().unwrap_or(0);
    let pick = |arm: &ArmReport| -> Vec<AttackResult> {
        arm.rows
            .iter()
            .filter(|r| r.budget == top_budget)
            .map(|r| r.result.clone())
            .collect()
    };
    let base = pick(&arms[0]);
    let defended = arms.iter().find(|a| a.defended).map(pick);

    let max_dist = arms
        .iter()
        .flat_map(|a| a.rows.iter())
        .filter(|r| r.result.success)
        .map(|r| match cfg.norm {
            Norm::L2 => r.result.l2_dist,
            Norm::LInf => r.result.linf_dist,
        })
        .fold(0.0f64, f64::max);
    let top = if max_dist > 0.0 { max_dist * 1.05 } else { 1.0 };

    (0..=100)
        .map(|i| {
            let epsilon = top * i as f64 / 100.0;
            AsrPoint {
                epsilon,
                asr_base: super::asr(&base, epsilon, cfg.norm).unwrap_or(0.0),
                asr_defended: defended
                    .as_ref()
                    .map(|d| super::asr(d, epsilon, cfg.norm).unwrap_or(0.0)),
            }
        })
        .collect()
}

/// Execute a campaign: load the pool and models, pre-filter correctly
/// classified seed images, run every (image, budget) attack job with a
/// derived seed (base_seed xor image index), and aggregate. With a defense
/// configured, a defended arm runs over the same seeds, and clean-accuracy
/// loss plus detector metrics are measured on the pool.
pub fn run_campaign(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let pool = cfg.dataset.load()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let target = Arc::new(load_model(Path::new(&cfg.target_model))?);
    let defense: Option<DefenseState> = match &cfg.defense {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let dc: DefenseConfig = serde_json::from_str(&text)?;
            Some(dc.load()?)
        }
        None => None,
    };

    // Seed images: correctly classified pool points, in order.
    let mut seeds = Vec::new();
    for (idx, (x, &y)) in pool.inputs.iter().zip(&pool.labels).enumerate() {
        if seeds.len() == cfg.seed_images {
            break;
        }
        if target.predict(x)? == y {
            seeds.push((idx, cfg.base_seed ^ idx as u64));
        }
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "no correctly classified seed images in the pool".into(),
        ));
    }

    let mut arms = vec![run_arm(cfg, &target, None, &seeds, &pool)?];
    let mut delta_acc = None;
    let mut fq = None;
    if let Some(ds) = &defense {
        arms.push(run_arm(cfg, &target, Some(ds), &seeds, &pool)?);
        delta_acc = Some(accuracy_loss(ds, &pool, cfg.base_seed ^ 0xacc)?);
        let fq_base = Dataset {
            inputs: pool.inputs.iter().take(50).cloned().collect(),
            labels: pool.labels.iter().take(50).copied().collect(),
            num_classes: pool.num_classes,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed ^ 0xf9);
        let fq_rows = generate_fq_dataset(&target, &fq_base, &FqSamplerConfig::default(), &mut rng)?;
        fq = Some(fq_metrics(ds, &fq_rows.rows)?);
    }

    let asr_curve = asr_curve(cfg, &arms);
    Ok(Report {
        schema_version: 1,
        config: cfg.clone(),
        seeds: seeds.iter().map(|&(_, s)| s).collect(),
        arms,
        asr_curve,
        delta_acc,
        fq_metrics: fq,
        timing: None,
    })
}
