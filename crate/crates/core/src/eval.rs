//! Informativeness of learned codes: part-wise kNN accuracy, supervision
//! sweeps, the primary-vs-dual ablation, and hybrid image grids.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairRecord, PairSet, SquareDataset, FACTOR_NAMES};
use crate::error::{Error, Result};
use crate::model::{CodeLayout, DsdModel};
use crate::ppm;
use crate::tensor::Tensor;
use crate::trainer::{EpochSummary, StepReport, TrainConfig, Trainer, UnlabeledObjective};

pub const DEFAULT_K_NEIGHBORS: usize = 5;

/// Codes with the ground-truth factor classes of the images they encode.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTable {
    /// `[rows, layout.total()]`.
    pub codes: Tensor,
    /// One entry per row, one class per factor.
    pub labels: Vec<Vec<usize>>,
    pub layout: CodeLayout,
}

impl CodeTable {
    pub fn new(codes: Tensor, labels: Vec<Vec<usize>>, layout: CodeLayout) -> Result<Self> {
        if codes.rank() != 2 || codes.shape()[1] != layout.total() {
            return Err(Error::invalid(format!(
                "codes {:?} do not match a layout of {} dims",
                codes.shape(),
                layout.total()
            )));
        }
        if codes.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} code rows but {} label rows",
                codes.shape()[0],
                labels.len()
            )));
        }
        Ok(CodeTable { codes, labels, layout })
    }

    /// Encodes both images of every pair.
    pub fn from_pairs(model: &DsdModel, set: &PairSet) -> Result<Self> {
        let mut images = Vec::with_capacity(2 * set.len() * set.pixels());
        let mut labels = Vec::with_capacity(2 * set.len());
        for r in &set.records {
            images.extend_from_slice(r.image_a.data());
            labels.push(r.factors_a.to_vec());
            images.extend_from_slice(r.image_b.data());
            labels.push(r.factors_b.to_vec());
        }
        let codes = model.encode_batch(&Tensor::matrix(labels.len(), set.pixels(), images)?)?;
        CodeTable::new(codes, labels, model.layout())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_factors(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    fn features(&self, r: usize, part: Part) -> &[f64] {
        let row = self.codes.row(r);
        match part {
            Part::Whole => row,
            Part::Index(k) => &row[self.layout.part(k)],
        }
    }
}

/// Which code dimensions a classifier sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Index(usize),
    Whole,
}

/// Which training rows a query may use as neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Every training row.
    All,
    /// Only rows that differ from the query in at least one factor other
    /// than the target.
    ///
    /// The desk dataset has a few hundred distinct images, so almost every
    /// query has exact twins among the training rows and any injective code
    /// scores perfectly from any part. Dropping every row that agrees with
    /// the query on all non-target factors removes the twins without
    /// favouring either label of the target.
    HoldOutContext,
}

/// Classifier settings for model evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k_neighbors: usize,
    pub reference: Reference,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k_neighbors: DEFAULT_K_NEIGHBORS,
            reference: Reference::HoldOutContext,
        }
    }
}

/// Majority vote of the `k_neighbors` nearest training rows (Euclidean).
/// Distance ties go to the lower row index and vote ties to the lower class.
pub fn knn_accuracy(train: &CodeTable, test: &CodeTable, part: Part, factor: usize, k_neighbors: usize) -> Result<f64> {
    knn_accuracy_with(train, test, part, factor, k_neighbors, Reference::All)
}

/// [`knn_accuracy`] with a choice of admissible neighbours.
pub fn knn_accuracy_with(
    train: &CodeTable,
    test: &CodeTable,
    part: Part,
    factor: usize,
    k_neighbors: usize,
    reference: Reference,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("kNN needs non-empty train and test tables"));
    }
    if train.layout != test.layout {
        return Err(Error::invalid("train and test tables have different layouts"));
    }
    if k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    if let Part::Index(k) = part {
        if k >= train.layout.n {
            return Err(Error::invalid(format!("part {k} out of range (n = {})", train.layout.n)));
        }
    }
    if factor >= train.n_factors() || factor >= test.n_factors() {
        return Err(Error::invalid(format!("unknown factor {factor}")));
    }
    let classes = 1 + train.labels.iter().map(|l| l[factor]).max().unwrap_or(0);
    let correct: usize = (0..test.len())
        .into_par_iter()
        .map(|t| {
            let q = test.features(t, part);
            let query = &test.labels[t];
            let admissible = |r: &usize| {
                reference == Reference::All
                    || train.labels[*r].iter().zip(query).enumerate().any(|(f, (a, b))| f != factor && a != b)
            };
            let mut dist: Vec<(f64, usize)> = (0..train.len())
                .filter(admissible)
                .map(|r| {
                    let d = q.iter().zip(train.features(r, part)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, r)
                })
                .collect();
            if dist.is_empty() {
                return 0;
            }
            let kk = k_neighbors.min(dist.len());
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if kk < dist.len() {
                dist.select_nth_unstable_by(kk - 1, cmp);
            }
            let mut votes = vec![0usize; classes];
            for &(_, r) in &dist[..kk] {
                votes[train.labels[r][factor]] += 1;
            }
            // max_by_key keeps the last maximum, so scan in reverse for the lowest class
            let best = (0..classes).rev().max_by_key(|&c| votes[c]).unwrap();
            usize::from(best == test.labels[t][factor])
        })
        .sum();
    Ok(correct as f64 / test.len() as f64)
}

/// Part-wise (`q`) and whole-code (`p`) accuracies for every factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub factors: Vec<String>,
    pub knn: KnnConfig,
    /// `part[i][j]`: accuracy of factor `j` from code part `i`.
    pub part: Vec<Vec<f64>>,
    /// `whole[j]`: accuracy of factor `j` from the full code.
    pub whole: Vec<f64>,
}

impl AccuracyReport {
    pub fn compute(train: &CodeTable, test: &CodeTable, knn: KnnConfig) -> Result<Self> {
        let n = train.layout.n;
        let f = train.n_factors();
        let mut part = vec![vec![0.0; f]; n];
        for (i, row) in part.iter_mut().enumerate() {
            for (j, acc) in row.iter_mut().enumerate() {
                *acc = knn_accuracy_with(train, test, Part::Index(i), j, knn.k_neighbors, knn.reference)?;
            }
        }
        let whole = (0..f)
            .map(|j| knn_accuracy_with(train, test, Part::Whole, j, knn.k_neighbors, knn.reference))
            .collect::<Result<_>>()?;
        let factors = (0..f)
            .map(|j| FACTOR_NAMES.get(j).map_or_else(|| format!("factor_{j}"), |s| s.to_string()))
            .collect();
        Ok(AccuracyReport {
            factors,
            knn,
            part,
            whole,
        })
    }

    /// `q_k`: accuracy of factor `k` from its own part.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.part.len().min(self.whole.len())).map(|k| self.part[k][k]).collect()
    }

    /// Mean of [`diagonal`](Self::diagonal), the headline part-wise accuracy.
    pub fn mean_partwise(&self) -> f64 {
        let d = self.diagonal();
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// For each factor `k`: own-part accuracy minus the best other part.
    pub fn margins(&self) -> Vec<f64> {
        (0..self.diagonal().len())
            .map(|k| {
                let other = (0..self.part.len())
                    .filter(|&i| i != k)
                    .map(|i| self.part[i][k])
                    .fold(f64::NEG_INFINITY, f64::max);
                self.part[k][k] - other
            })
            .collect()
    }
}

/// Accuracy of `model` with the kNN fitted on `reference` codes and scored on `query` codes.
pub fn evaluate_model(model: &DsdModel, reference: &PairSet, query: &PairSet, knn: KnnConfig) -> Result<AccuracyReport> {
    let train = CodeTable::from_pairs(model, reference)?;
    let test = CodeTable::from_pairs(model, query)?;
    AccuracyReport::compute(&train, &test, knn)
}

/// Everything recorded for one trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub rate: Option<f64>,
    pub seed: u64,
    pub report: AccuracyReport,
    pub epochs: Vec<EpochSummary>,
    #[serde(skip)]
    pub steps: Vec<StepReport>,
    #[serde(skip)]
    pub model: Option<DsdModel>,
}

/// Trains on the train split, validates on val, and scores kNN on the
/// test split against codes of the train split.
pub fn train_and_evaluate(data: &SquareDataset, config: TrainConfig, label: &str, knn: KnnConfig) -> Result<RunResult> {
    let n = crate::dataset::N_FACTORS;
    let mut trainer = Trainer::for_pairs(config, &data.train, n)?;
    let train = trainer.prepare(&data.train)?;
    let val = crate::trainer::TrainSet::new(&data.val, n)?;
    let mut steps = Vec::new();
    let epochs = trainer.fit(&train, (!data.val.is_empty()).then_some(&val), |_, _, reports| {
        steps.extend_from_slice(reports);
        Ok(())
    })?;
    let report = evaluate_model(&trainer.model, &data.train, &data.test, knn)?;
    Ok(RunResult {
        label: label.to_string(),
        rate: trainer.config.supervision_rate,
        seed: trainer.config.seed,
        report,
        epochs,
        steps,
        model: Some(trainer.model),
    })
}

fn run_pool<T: Send>(jobs: usize, tasks: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| tasks.into_par_iter().map(|t| t()).collect())
}

/// Mean, min and max of one quantity over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        Spread {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Per-rate summary of a sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateSummary {
    pub rate: f64,
    pub mean_partwise: Spread,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<RateSummary>,
}

fn check_rates(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::invalid("no supervision rates given"));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::invalid(format!("supervision rate {r} outside [0, 1]")));
    }
    Ok(())
}

/// Trains one model per `(rate, seed)`; at most `jobs` run at once.
pub fn supervision_sweep(
    data: &SquareDataset,
    base: &TrainConfig,
    rates: &[f64],
    seeds: &[u64],
    jobs: usize,
    knn: KnnConfig,
) -> Result<SweepReport> {
    check_rates(rates)?;
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds given"));
    }
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<RunResult> + Send + '_>> = Vec::new();
    for &rate in rates {
        for &seed in seeds {
            let config = TrainConfig {
                supervision_rate: Some(rate),
                seed,
                ..base.clone()
            };
            tasks.push(Box::new(move || {
                train_and_evaluate(data, config, &format!("rate={rate} seed={seed}"), knn)
            }));
        }
    }
    let mut results = run_pool(jobs, tasks)?.into_iter();
    let entries = rates
        .iter()
        .map(|&rate| {
            let runs: Vec<RunResult> = results.by_ref().take(seeds.len()).collect();
            let acc: Vec<f64> = runs.iter().map(|r| r.report.mean_partwise()).collect();
            RateSummary {
                rate,
                mean_partwise: Spread::of(&acc),
                runs,
            }
        })
        .collect();
    Ok(SweepReport { entries })
}

/// Dual framework against the primary one on identical data and seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rate: Option<f64>,
    pub dual: Vec<RunResult>,
    pub primary: Vec<RunResult>,
    pub dual_mean_partwise: Spread,
    pub primary_mean_partwise: Spread,
}

impl AblationReport {
    pub fn margin(&self) -> f64 {
        self.dual_mean_partwise.mean - self.primary_mean_partwise.mean
    }
}

/// Trains both arms for every seed; the primary arm uses `L_o` alone on
/// unlabeled pairs.
pub fn ablation_primary_vs_dual(
    data: &SquareDataset,
    base: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
    knn: KnnConfig,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds given"));
    }
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<RunResult> + Send + '_>> = Vec::new();
    for (arm, objective) in [("dual", UnlabeledObjective::DualSwap), ("primary", UnlabeledObjective::Reconstruction)] {
        for &seed in seeds {
            let config = TrainConfig {
                unlabeled_objective: objective,
                seed,
                ..base.clone()
            };
            tasks.push(Box::new(move || {
                train_and_evaluate(data, config, &format!("{arm} seed={seed}"), knn)
            }));
        }
    }
    let mut results = run_pool(jobs, tasks)?;
    let primary = results.split_off(seeds.len());
    let dual = results;
    let acc = |runs: &[RunResult]| Spread::of(&runs.iter().map(|r| r.report.mean_partwise()).collect::<Vec<_>>());
    Ok(AblationReport {
        rate: base.supervision_rate,
        dual_mean_partwise: acc(&dual),
        primary_mean_partwise: acc(&primary),
        dual,
        primary,
    })
}

/// Decoded reconstructions and part-`k` hybrids of a list of pairs.
pub struct HybridBatch {
    /// `[pairs, pixels]` each.
    pub recon_a: Tensor,
    pub recon_b: Tensor,
    pub hybrid_a: Tensor,
    pub hybrid_b: Tensor,
}

pub fn hybrids(model: &DsdModel, pairs: &[PairRecord], k: usize) -> Result<HybridBatch> {
    let layout = model.layout();
    if k >= layout.n {
        return Err(Error::invalid(format!("part {k} out of range (n = {})", layout.n)));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs given"));
    }
    let pixels = model.config.pixels();
    let stack = |f: fn(&PairRecord) -> &Tensor| -> Result<Tensor> {
        let data = pairs.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Tensor::matrix(pairs.len(), pixels, data)
    };
    let ca = model.encode_batch(&stack(|p| &p.image_a)?)?;
    let cb = model.encode_batch(&stack(|p| &p.image_b)?)?;
    let (mut ha, mut hb) = (ca.clone(), cb.clone());
    let part = layout.part(k);
    for r in 0..pairs.len() {
        let off = r * layout.total();
        let range = off + part.start..off + part.end;
        ha.data_mut()[range.clone()].copy_from_slice(&cb.data()[range.clone()]);
        hb.data_mut()[range.clone()].copy_from_slice(&ca.data()[range]);
    }
    Ok(HybridBatch {
        recon_a: model.decode_batch(&ca)?,
        recon_b: model.decode_batch(&cb)?,
        hybrid_a: model.decode_batch(&ha)?,
        hybrid_b: model.decode_batch(&hb)?,
    })
}

/// Grid with one row per pair and columns `I_A, I_B, Ï_A, Ï_B`, as `[3, rows·h, 4·w]`.
pub fn hybrid_grid(model: &DsdModel, pairs: &[PairRecord], k: usize) -> Result<Tensor> {
    let [c, h, w] = model.config.image_shape;
    if c != 3 {
        return Err(Error::invalid("hybrid grids need 3-channel images"));
    }
    let hy = hybrids(model, pairs, k)?;
    let (gh, gw) = (pairs.len() * h, 4 * w);
    let mut grid = vec![0.0; c * gh * gw];
    for (r, pair) in pairs.iter().enumerate() {
        let tiles = [pair.image_a.data(), pair.image_b.data(), hy.hybrid_a.row(r), hy.hybrid_b.row(r)];
        for (col, tile) in tiles.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    let src = &tile[ch * h * w + y * w..][..w];
                    let dst = ch * gh * gw + (r * h + y) * gw + col * w;
                    grid[dst..dst + w].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(vec![c, gh, gw], grid)
}

/// Writes [`hybrid_grid`] as a P6 file.
pub fn save_hybrid_grid(model: &DsdModel, pairs: &[PairRecord], k: usize, path: impl AsRef<Path>) -> Result<()> {
    ppm::save_ppm(path, &hybrid_grid(model, pairs, k)?)
}
