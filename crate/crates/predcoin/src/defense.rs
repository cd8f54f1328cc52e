//! Inference-phase defense: a small detector network reads the sorted top-3
//! confidences of each query and flags gradient-estimation probes; flagged
//! queries answer with the second-likeliest label, either with a fair coin
//! or deterministically from the parity of a quantized first-layer feature
//! sum.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{bisect_to_boundary, sample_unit_sphere, Norm};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    argmax, load_model, second_argmax, train_on_vectors, DenseNetwork, TrainConfig,
};
use crate::oracle::HardLabelOracle;

/// Detector input: the three largest confidences in descending order.
pub type FqInput = [f64; 3];

/// Detector architecture: 3 -> 64 -> 64 -> 32 -> softmax 2.
pub const FQ_ARCH: [usize; 5] = [3, 64, 64, 32, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    Off,
    #[serde(rename = "probabilistic", alias = "prob")]
    Probabilistic,
    Parity,
}

/// Frozen defense bundle: target classifier, detector, threshold, flip mode.
/// Immutable after construction; randomness comes from the caller.
#[derive(Debug, Clone)]
pub struct DefenseState {
    pub target: Arc<DenseNetwork>,
    pub fq: DenseNetwork,
    pub gamma: f64,
    pub mode: FlipMode,
}

/// Serialized defense configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub gamma: f64,
    pub mode: FlipMode,
    pub fq_path: String,
    pub target_path: String,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn load(&self) -> Result<DefenseState> {
        let target = Arc::new(load_model(Path::new(&self.target_path))?);
        let fq = load_model(Path::new(&self.fq_path))?;
        DefenseState::new(target, fq, self.gamma, self.mode)
    }
}

/// The three largest components of a probability vector, descending;
/// padded with zeros when fewer than three classes exist.
pub fn top3_descending(p: &[f64]) -> FqInput {
    let mut top = [0.0f64; 3];
    for &v in p {
        if v > top[0] {
            top = [v, top[0], top[1]];
        } else if v > top[1] {
            top = [top[0], v, top[1]];
        } else if v > top[2] {
            top[2] = v;
        }
    }
    top
}

/// Last-digit parity of the quantized feature sum: multiply by 1e4, round
/// half away from zero, take |.| mod 10; even means flip.
pub fn parity_of_sum(sum: f64) -> bool {
    let f = ((sum * 1e4).round().abs() as i64) % 10;
    f % 2 == 0
}

impl DefenseState {
    pub fn new(
        target: Arc<DenseNetwork>,
        fq: DenseNetwork,
        gamma: f64,
        mode: FlipMode,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidConfig("gamma must be in [0,1]".into()));
        }
        if fq.input_dim != 3 || fq.output_dim != 2 {
            return Err(Error::InvalidConfig(
                "detector must map 3 confidences to 2 scores".into(),
            ));
        }
        Ok(DefenseState {
            target,
            fq,
            gamma,
            mode,
        })
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        DefenseState {
            gamma,
            ..self.clone()
        }
    }

    pub fn with_mode(&self, mode: FlipMode) -> Self {
        DefenseState {
            mode,
            ..self.clone()
        }
    }

    /// Detector score for an already-sorted top-3 input.
    pub fn detect_top3(&self, top3: &FqInput) -> (bool, f64) {
        let scores = self
            .fq
            .forward(top3.as_slice())
            .expect("detector input is always 3-wide");
        let y1 = scores[0];
        (y1 >= self.gamma, y1)
    }

    /// Detector decision for a prediction vector.
    pub fn detect(&self, p: &[f64]) -> (bool, f64) {
        self.detect_top3(&top3_descending(p))
    }

    /// Deterministic flip decision from the target's first hidden layer.
    pub fn parity_flag(&self, x: &[f64]) -> Result<bool> {
        Ok(parity_of_sum(self.target.first_layer_sum(x)?))
    }

    /// Defended label for a query. `Off` mode is the undefended code path.
    pub fn predict_with(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.mode == FlipMode::Off {
            return self.target.predict(x);
        }
        let p = self.target.forward(x)?;
        let top = argmax(&p);
        let (flagged, _) = self.detect(&p);
        if !flagged {
            return Ok(top);
        }
        let flip = match self.mode {
            FlipMode::Off => unreachable!(),
            FlipMode::Probabilistic => rng.random::<f64>() < 0.5,
            FlipMode::Parity => self.parity_flag(x)?,
        };
        Ok(if flip { second_argmax(&p) } else { top })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FqSamplerConfig {
    /// Sphere probes emitted per boundary point.
    pub n_sphere: usize,
    /// Probe radius range before the 1/sqrt(d) scaling (log-uniform).
    pub delta_min: f64,
    pub delta_max: f64,
    /// Random draws allowed when searching for an adversarial start.
    pub init_tries: usize,
    pub bisect_tol: f64,
}

impl Default for FqSamplerConfig {
    fn default() -> Self {
        FqSamplerConfig {
            n_sphere: 10,
            delta_min: 1e-3,
            delta_max: 1e-1,
            init_tries: 200,
            bisect_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FqRow {
    pub top3: FqInput,
    pub adversarial: bool,
}

/// Balanced detector training set plus the number of base points skipped
/// because no adversarial initialization was found.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FqDataset {
    pub rows: Vec<FqRow>,
    pub skipped: usize,
}

impl FqDataset {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "top1,top2,top3,adversarial")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:.17e},{:.17e},{:.17e},{}",
                row.top3[0],
                row.top3[1],
                row.top3[2],
                u8::from(row.adversarial)
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::InvalidConfig(format!("bad csv row {i}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad number in csv row {i}")))
            };
            rows.push(FqRow {
                top3: [parse(fields[0])?, parse(fields[1])?, parse(fields[2])?],
                adversarial: fields[3].trim() == "1",
            });
        }
        Ok(FqDataset { rows, skipped: 0 })
    }
}

/// Build the detector training set: for each base point, the clean top-3 row
/// plus boundary and sphere-probe rows generated by the same Monte-Carlo
/// procedure the attacks use. The adversarial side is subsampled to match
/// the clean side exactly.
pub fn generate_fq_dataset(
    target: &Arc<DenseNetwork>,
    base: &Dataset,
    cfg: &FqSamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FqDataset> {
    if base.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = target.input_dim;
    let scale = 1.0 / (dim as f64).sqrt();
    let mut clean_rows = Vec::new();
    let mut adv_pool = Vec::new();
    let mut skipped = 0usize;

    for x_star in &base.inputs {
        let c_star = target.predict(x_star)?;
        // Random adversarial initialization against the undefended model.
        let mut oracle = HardLabelOracle::model(target.clone());
        let mut init = None;
        for _ in 0..cfg.init_tries {
            let candidate: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            if oracle.query_label(&candidate)? != c_star {
                init = Some(candidate);
                break;
            }
        }
        let Some(x_adv) = init else {
            skipped += 1;
            continue;
        };
        let x_t = bisect_to_boundary(&mut oracle, x_star, c_star, &x_adv, cfg.bisect_tol, Norm::L2)?;

        clean_rows.push(FqRow {
            top3: top3_descending(&target.forward(x_star)?),
            adversarial: false,
        });
        adv_pool.push(FqRow {
            top3: top3_descending(&target.forward(&x_t)?),
            adversarial: true,
        });
        for _ in 0..cfg.n_sphere {
            let u = sample_unit_sphere(rng, dim);
            let ln_min = cfg.delta_min.ln();
            let ln_max = cfg.delta_max.ln();
            let delta = (ln_min + rng.random::<f64>() * (ln_max - ln_min)).exp() * scale;
            let probe: Vec<f64> = x_t
                .iter()
                .zip(&u)
                .map(|(x, du)| (x + delta * du).clamp(0.0, 1.0))
                .collect();
            adv_pool.push(FqRow {
                top3: top3_descending(&target.forward(&probe)?),
                adversarial: true,
            });
        }
    }

    // Balance: keep exactly as many adversarial rows as clean rows.
    let keep = clean_rows.len();
    let mut rows = clean_rows;
    if adv_pool.len() > keep {
        for idx in rand::seq::index::sample(rng, adv_pool.len(), keep) {
            rows.push(adv_pool[idx].clone());
        }
    } else {
        rows.extend(adv_pool);
    }
    Ok(FqDataset { rows, skipped })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FqMetrics {
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub accuracy: f64,
}

/// Confusion rates of a detector at a threshold over labeled top-3 rows.
fn metrics_at_gamma(fq: &DenseNetwork, rows: &[FqRow], gamma: f64) -> Result<FqMetrics> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut clean = 0usize;
    let mut adv = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for row in rows {
        let y1 = fq.forward(row.top3.as_slice())?[0];
        let flagged = y1 >= gamma;
        if row.adversarial {
            adv += 1;
            fnn += usize::from(!flagged);
        } else {
            clean += 1;
            fp += usize::from(flagged);
        }
    }
    let fp_rate = if clean == 0 { 0.0 } else { fp as f64 / clean as f64 };
    let fn_rate = if adv == 0 { 0.0 } else { fnn as f64 / adv as f64 };
    let correct = (clean - fp) + (adv - fnn);
    Ok(FqMetrics {
        fp_rate,
        fn_rate,
        accuracy: correct as f64 / rows.len() as f64,
    })
}

/// Confusion rates for a defense state's detector at its current threshold.
pub fn fq_metrics(ds: &DefenseState, rows: &[FqRow]) -> Result<FqMetrics> {
    metrics_at_gamma(&ds.fq, rows, ds.gamma)
}

/// Train the detector on a balanced top-3 dataset. Returns the network and
/// its metrics on a 20% held-out split at the argmax threshold (gamma 0.5).
pub fn train_fq(data: &FqDataset, cfg: &TrainConfig) -> Result<(DenseNetwork, FqMetrics)> {
    if data.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.rows.iter().all(|r| r.adversarial) || data.rows.iter().all(|r| !r.adversarial) {
        return Err(Error::InvalidConfig(
            "detector data is single-class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..data.rows.len()).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xf0));
    order.shuffle(&mut rng);
    let split = (data.rows.len() * 4) / 5;
    let (train_idx, held_idx) = order.split_at(split.max(1));

    let inputs: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| data.rows[i].top3.to_vec())
        .collect();
    // Class 0 = adversarial query, class 1 = clean; y1 is the first score.
    let labels: Vec<usize> = train_idx
        .iter()
        .map(|&i| usize::from(!data.rows[i].adversarial))
        .collect();

    let mut fq = DenseNetwork::new_classifier(&FQ_ARCH, cfg.seed)?;
    fq.meta.train = Some(*cfg);
    train_on_vectors(&mut fq, &inputs, &labels, cfg)?;

    let held: Vec<FqRow> = held_idx.iter().map(|&i| data.rows[i].clone()).collect();
    let metrics = metrics_at_gamma(&fq, &held, 0.5)?;
    Ok((fq, metrics))
}

/// Clean-accuracy drop caused by the defense, with the binomial standard
/// error of the defended-accuracy measurement.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyLoss {
    pub delta: f64,
    pub se: f64,
    pub acc_undefended: f64,
    pub acc_defended: f64,
}

pub fn accuracy_loss(ds: &DefenseState, data: &Dataset, eval_seed: u64) -> Result<AccuracyLoss> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let n = data.len() as f64;
    let mut undef = 0usize;
    let mut def = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        undef += usize::from(ds.target.predict(x)? == y);
        def += usize::from(ds.predict_with(x, &mut rng)? == y);
    }
    let acc_undefended = undef as f64 / n;
    let acc_defended = def as f64 / n;
    Ok(AccuracyLoss {
        delta: acc_undefended - acc_defended,
        se: (acc_defended * (1.0 - acc_defended) / n).sqrt(),
        acc_undefended,
        acc_defended,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaSearchResult {
    pub gamma: f64,
    pub iterations: usize,
    /// Set when no threshold below 1 satisfied the cap.
    pub warning: bool,
}

/// Bisection for the smallest gamma whose measured accuracy loss stays
/// within `acc_loss_cap`. The guard mirrors the |hi - lo| >= 0.01 loop
/// bound, giving exactly 7 iterations on [0, 1].
pub fn gamma_search_with(
    mut measure: impl FnMut(f64) -> f64,
    acc_loss_cap: f64,
) -> Result<GammaSearchResult> {
    if !(acc_loss_cap > 0.0 && acc_loss_cap <= 1.0) {
        return Err(Error::InvalidConfig("acc_loss_cap must be in (0,1]".into()));
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut iterations = 0usize;
    while (hi - lo).abs() >= 0.01 {
        let gamma = 0.5 * (hi + lo);
        if measure(gamma) <= acc_loss_cap {
            hi = gamma;
        } else {
            lo = gamma;
        }
        iterations += 1;
    }
    Ok(GammaSearchResult {
        gamma: hi,
        iterations,
        warning: hi == 1.0,
    })
}

/// Gamma search against the real defense: accuracy loss is measured in
/// probabilistic mode with a fixed evaluation seed per probe.
pub fn gamma_search(
    ds: &DefenseState,
    validation: &Dataset,
    acc_loss_cap: f64,
    eval_seed: u64,
) -> Result<GammaSearchResult> {
    let probe = ds.with_mode(FlipMode::Probabilistic);
    gamma_search_with(
        |gamma| {
            accuracy_loss(&probe.with_gamma(gamma), validation, eval_seed)
                .map(|l| l.delta)
                .unwrap_or(f64::INFINITY)
        },
        acc_loss_cap,
    )
}
