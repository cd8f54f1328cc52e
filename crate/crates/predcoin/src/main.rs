use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use predcoin::data::{Dataset, DatasetSpec};
use predcoin::defense::{
    gamma_search, generate_fq_dataset, train_fq, DefenseConfig, DefenseState, FlipMode,
    FqDataset, FqSamplerConfig,
};
use predcoin::harness::{inference_time_ratio, run_campaign, AdaptiveMode, ExperimentConfig};
use predcoin::nn::{load_model, save_model, train_classifier, TrainConfig};
use predcoin::theory::{beta_projection_check, convergence_experiment, flip_collapse_experiment};

#[derive(Parser)]
#[command(
    name = "predcoin",
    about = "Hard-label black-box attacks, a randomized inference defense, and their evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DefenseModeArg {
    None,
    Prob,
    Parity,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptiveArg {
    None,
    Bypass,
    Uncertainty,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    L2,
    Linf,
}

impl From<NormArg> for predcoin::attacks::Norm {
    fn from(v: NormArg) -> Self {
        match v {
            NormArg::L2 => predcoin::attacks::Norm::L2,
            NormArg::Linf => predcoin::attacks::Norm::LInf,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the target classifier from a JSON config.
    TrainTarget {
        #[arg(long)]
        config: PathBuf,
        /// Weight-file output path.
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the detector training set from a trained target.
    GenFqData {
        #[arg(long)]
        model: PathBuf,
        /// Dataset spec JSON providing the base points.
        #[arg(long)]
        config: PathBuf,
        /// Base points to use (prefix of the dataset).
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n_sphere: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector network on a generated CSV.
    TrainFq {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
    },
    /// Search the detection threshold under an accuracy-loss cap.
    GammaSearch {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        fq: PathBuf,
        /// Dataset spec JSON providing validation data.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        cap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip mode written into the defense file.
        #[arg(long, value_enum, default_value_t = DefenseModeArg::Prob)]
        defense: DefenseModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an attack campaign from an experiment config.
    Attack {
        #[command(flatten)]
        common: CampaignArgs,
    },
    /// Run the full paired evaluation (campaign + timing + curves).
    Evaluate {
        #[command(flatten)]
        common: CampaignArgs,
        /// Inputs per timing batch.
        #[arg(long, default_value_t = 256)]
        timing_batch: usize,
        /// Timing repetitions (median taken).
        #[arg(long, default_value_t = 7)]
        timing_reps: usize,
    },
    /// Empirically verify the estimation bounds on analytic oracles.
    VerifyTheory {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probe count for the convergence sweep.
        #[arg(long, default_value_t = 20_000)]
        b: usize,
        /// Trials for the flip-collapse experiment.
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

#[derive(clap::Args)]
struct CampaignArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the defense JSON path ("none" disables).
    #[arg(long)]
    defense: Option<String>,
    /// Override the attack (ba, signopt, hsja, sfa).
    #[arg(long)]
    attack: Option<String>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Override the budget list, comma separated.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long, value_enum)]
    adaptive: Option<AdaptiveArg>,
    /// Repeat count for uncertainty mode.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Radius cap for bypass mode.
    #[arg(long, default_value_t = 0.5)]
    delta_max: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainTargetSpec {
    dataset: DatasetSpec,
    /// Leading samples used for training; the rest evaluate.
    train_count: usize,
    arch: Vec<usize>,
    train: TrainConfig,
}

fn accuracy(net: &predcoin::nn::DenseNetwork, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        correct += usize::from(net.predict(x)? == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &CampaignArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(defense) = &args.defense {
        cfg.defense = if defense == "none" {
            None
        } else {
            Some(defense.clone())
        };
    }
    if let Some(attack) = &args.attack {
        cfg.attack = attack.parse()?;
    }
    if let Some(norm) = args.norm {
        cfg.norm = norm.into();
    }
    if let Some(budget) = &args.budget {
        cfg.budgets = budget
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .context("parsing --budget")?;
    }
    if let Some(adaptive) = args.adaptive {
        cfg.adaptive = match adaptive {
            AdaptiveArg::None => AdaptiveMode::None,
            AdaptiveArg::Bypass => AdaptiveMode::Bypass {
                delta_max: args.delta_max,
            },
            AdaptiveArg::Uncertainty => AdaptiveMode::Uncertainty { k: args.k },
        };
    }
    Ok(())
}

fn cmd_train_target(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: TrainTargetSpec = load_json(config)?;
    if let Some(seed) = seed {
        spec.train.seed = seed;
    }
    let full = spec.dataset.load()?;
    let (train, test) = full.split_at(spec.train_count);
    let net = train_classifier(&train, &spec.arch, &spec.train)?;
    save_model(&net, out)?;
    let summary = serde_json::json!({
        "model": out.display().to_string(),
        "arch": spec.arch,
        "train_samples": train.len(),
        "train_accuracy": accuracy(&net, &train)?,
        "test_accuracy": if test.is_empty() { serde_json::Value::Null } else { serde_json::json!(accuracy(&net, &test)?) },
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_gen_fq_data(
    model: &Path,
    config: &Path,
    count: usize,
    seed: u64,
    n_sphere: usize,
    out: &Path,
) -> Result<()> {
    let target = Arc::new(load_model(model)?);
    let spec: DatasetSpec = load_json(config)?;
    let full = spec.load()?;
    let base = Dataset {
        inputs: full.inputs.into_iter().take(count).collect(),
        labels: full.labels.into_iter().take(count).collect(),
        num_classes: full.num_classes,
    };
    let sampler = FqSamplerConfig {
        n_sphere,
        ..FqSamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate_fq_dataset(&target, &base, &sampler, &mut rng)?;
    data.write_csv(out)?;
    println!(
        "{}",
        serde_json::json!({"rows": data.rows.len(), "skipped": data.skipped, "out": out.display().to_string()})
    );
    Ok(())
}

fn cmd_train_fq(data: &Path, out: &Path, seed: u64, epochs: usize) -> Result<()> {
    let dataset = FqDataset::read_csv(data)?;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let (fq, metrics) = train_fq(&dataset, &cfg)?;
    save_model(&fq, out)?;
    let summary = serde_json::json!({
        "model": out.display().to_string(),
        "held_out": metrics,
    });
    let metrics_path = out.with_extension("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_gamma_search(
    target: &Path,
    fq: &Path,
    config: &Path,
    cap: f64,
    seed: u64,
    mode: DefenseModeArg,
    out: &Path,
) -> Result<()> {
    let target_net = Arc::new(load_model(target)?);
    let fq_net = load_model(fq)?;
    let spec: DatasetSpec = load_json(config)?;
    let validation = spec.load()?;
    let ds = DefenseState::new(target_net, fq_net, 0.5, FlipMode::Probabilistic)?;
    let found = gamma_search(&ds, &validation, cap, seed)?;
    let mode = match mode {
        DefenseModeArg::None => bail!("gamma-search needs a flip mode (prob or parity)"),
        DefenseModeArg::Prob => FlipMode::Probabilistic,
        DefenseModeArg::Parity => FlipMode::Parity,
    };
    let dc = DefenseConfig {
        gamma: found.gamma,
        mode,
        fq_path: fq.display().to_string(),
        target_path: target.display().to_string(),
        seed,
    };
    std::fs::write(out, serde_json::to_string_pretty(&dc)?)?;
    println!(
        "{}",
        serde_json::json!({
            "gamma": found.gamma,
            "iterations": found.iterations,
            "warning": found.warning,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_campaign(args: &CampaignArgs, timing: Option<(usize, usize)>) -> Result<()> {
    let mut cfg: ExperimentConfig = load_json(&args.config)?;
    apply_overrides(&mut cfg, args)?;
    let mut report = run_campaign(&cfg)?;

    if let (Some((batch_size, reps)), Some(defense_path)) = (timing, cfg.defense.as_ref()) {
        let dc: DefenseConfig = load_json(Path::new(defense_path))?;
        let ds = dc.load()?;
        let pool = cfg.dataset.load()?;
        let batch: Vec<Vec<f64>> = pool
            .inputs
            .iter()
            .cycle()
            .take(batch_size)
            .cloned()
            .collect();
        let ratio = inference_time_ratio(&ds, &batch, reps)?;
        report.timing = Some(predcoin::harness::TimingInfo {
            inference_time_ratio: ratio,
        });
    }

    report.write(&args.out)?;
    for arm in &report.arms {
        for agg in &arm.aggregates {
            println!(
                "arm={} budget={} runs={} successes={} median_l2={:?} median_linf={:?}",
                if arm.defended { "defended" } else { "base" },
                agg.budget,
                agg.runs,
                agg.successes,
                agg.median_l2,
                agg.median_linf
            );
        }
    }
    if let Some(t) = &report.timing {
        println!("inference_time_ratio={:.3}", t.inference_time_ratio);
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_verify_theory(out: &Path, seed: u64, b: usize, trials: usize) -> Result<()> {
    std::fs::create_dir_all(out)?;

    let convergence = convergence_experiment(&[5, 20], &[1e-2, 1e-3], b, seed)?;
    std::fs::write(out.join("convergence.csv"), convergence.to_csv())?;
    for row in &convergence.rows {
        println!(
            "convergence d={} delta={:e}: cos={:.4} threshold={:.4} {}",
            row.d,
            row.delta,
            row.cos_measured,
            row.bound_rhs - row.mc_slack,
            if row.degenerate {
                "degenerate"
            } else if row.pass {
                "PASS"
            } else {
                "FAIL"
            }
        );
    }

    let flipped = flip_collapse_experiment(20, 1e-2, 10_000, trials, 0.5, seed)?;
    let baseline = flip_collapse_experiment(20, 1e-2, 10_000, trials, 0.0, seed)?;
    let collapse_pass =
        flipped.mean_cos.abs() <= 0.15 && flipped.mean_raw_norm <= 5.0 * baseline.raw_spread;
    println!(
        "flip-collapse d=20 B=10000 trials={trials}: mean_cos={:.4} mean_norm={:.5} baseline_spread={:.5} {}",
        flipped.mean_cos,
        flipped.mean_raw_norm,
        baseline.raw_spread,
        if collapse_pass { "PASS" } else { "FAIL" }
    );

    let mut beta_reports = Vec::new();
    for d in [2usize, 10] {
        let report = beta_projection_check(d, 100_000, seed)?;
        println!(
            "beta-projection d={}: mean {:.5} vs {:.5}, var {:.6} vs {:.6} {}",
            d,
            report.mean_empirical,
            report.mean_theory,
            report.var_empirical,
            report.var_theory,
            if report.pass { "PASS" } else { "FAIL" }
        );
        beta_reports.push(report);
    }

    let summary = serde_json::json!({
        "convergence": convergence,
        "flip_collapse": {"flipped": flipped, "baseline": baseline, "pass": collapse_pass},
        "beta_projection": beta_reports,
    });
    std::fs::write(out.join("theory.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainTarget { config, out, seed } => cmd_train_target(config, out, *seed),
        Command::GenFqData {
            model,
            config,
            count,
            seed,
            n_sphere,
            out,
        } => cmd_gen_fq_data(model, config, *count, *seed, *n_sphere, out),
        Command::TrainFq {
            data,
            out,
            seed,
            epochs,
        } => cmd_train_fq(data, out, *seed, *epochs),
        Command::GammaSearch {
            target,
            fq,
            config,
            cap,
            seed,
            defense,
            out,
        } => cmd_gamma_search(target, fq, config, *cap, *seed, *defense, out),
        Command::Attack { common } => cmd_campaign(common, None),
        Command::Evaluate {
            common,
            timing_batch,
            timing_reps,
        } => cmd_campaign(common, Some((*timing_batch, *timing_reps))),
        Command::VerifyTheory {
            out,
            seed,
            b,
            trials,
        } => cmd_verify_theory(out, *seed, *b, *trials),
    }
}
