//! Objectives and the alternating labeled/unlabeled training loop.
//!
//! For a pair `(I_A, I_B)` with codes `R_A = [a_1..a_n]`, `R_B = [b_1..b_n]`:
//!
//! * reconstruction `L_o = |I_A - dec(R_A)|² + |I_B - dec(R_B)|²`;
//! * swap `L_s`: the same error against decodings of the hybrids where part
//!   `k` was exchanged, used on pairs labeled as sharing factor `k`;
//! * dual swap `L_d`: the hybrids' decodings are encoded again, part `k` is
//!   swapped back, and the result decoded; used on unlabeled pairs.
//!
//! Labeled batches minimize `L_p = L_o + α L_s`, unlabeled ones
//! `L_u = L_o + β L_d`, alternating one of each per iteration.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, AdamState, Feeds, Graph, NodeId};
use crate::dataset::PairSet;
use crate::error::{Error, Result};
use crate::model::{decoder_graph, encoder_graph, swap_graph, CodeLayout, DsdModel, ModelConfig};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// How squared errors are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Unnormalized squared L2 norm, summed over the batch.
    Sum,
    /// Mean over every pixel of the batch.
    MeanPerPixel,
}

fn squared_error(a: &Tensor, b: &Tensor, reduction: Reduction) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            node: "loss".into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::MeanPerPixel => sum / a.len() as f64,
    })
}

/// `|I_A - out_A|² + |I_B - out_B|²`, the shared form of every pair loss.
pub fn pair_error(ia: &Tensor, ib: &Tensor, out_a: &Tensor, out_b: &Tensor, reduction: Reduction) -> Result<f64> {
    Ok(squared_error(ia, out_a, reduction)? + squared_error(ib, out_b, reduction)?)
}

/// `L_o` from plain reconstructions.
pub fn loss_original(ia: &Tensor, ib: &Tensor, recon_a: &Tensor, recon_b: &Tensor, reduction: Reduction) -> Result<f64> {
    pair_error(ia, ib, recon_a, recon_b, reduction)
}

/// `L_s` from the decodings of swapped codes.
pub fn loss_swap(ia: &Tensor, ib: &Tensor, hybrid_a: &Tensor, hybrid_b: &Tensor, reduction: Reduction) -> Result<f64> {
    pair_error(ia, ib, hybrid_a, hybrid_b, reduction)
}

/// `L_d` from the decodings after swapping back.
pub fn loss_dual_swap(ia: &Tensor, ib: &Tensor, dual_a: &Tensor, dual_b: &Tensor, reduction: Reduction) -> Result<f64> {
    pair_error(ia, ib, dual_a, dual_b, reduction)
}

/// Weighted total `base + weight * extra` (`L_p` with α, `L_u` with β).
pub fn weighted_total(base: f64, extra: f64, weight: f64) -> f64 {
    base + weight * extra
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Labeled,
    Unlabeled,
}

/// What unlabeled pairs are trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledObjective {
    /// `L_o + β L_d`.
    DualSwap,
    /// `L_o` only: no swapping for unlabeled pairs.
    Reconstruction,
}

/// How the swap index of an unlabeled batch is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapIndex {
    /// Reuse the group drawn for the labeled batch of the same iteration.
    Coupled,
    /// Draw a fresh uniform part index.
    Independent,
}

/// A loss graph with handles to its components. Inputs are named `ia` and `ib`.
pub struct LossGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub recon: NodeId,
    /// `L_s` or `L_d`; absent for the reconstruction-only objective.
    pub swap: Option<NodeId>,
}

fn error_node(g: &mut Graph, a: NodeId, b: NodeId, reduction: Reduction) -> NodeId {
    match reduction {
        Reduction::Sum => g.sse(a, b),
        Reduction::MeanPerPixel => g.mse(a, b),
    }
}

fn pair_error_node(g: &mut Graph, ia: NodeId, ib: NodeId, oa: NodeId, ob: NodeId, reduction: Reduction) -> NodeId {
    let ea = error_node(g, ia, oa, reduction);
    let eb = error_node(g, ib, ob, reduction);
    g.add(ea, eb)
}

struct Stage {
    ia: NodeId,
    ib: NodeId,
    ra: NodeId,
    rb: NodeId,
    recon: NodeId,
}

fn reconstruction_stage(g: &mut Graph, config: &ModelConfig, reduction: Reduction) -> Stage {
    let ia = g.input("ia");
    let ib = g.input("ib");
    let ra = encoder_graph(g, config, ia);
    let rb = encoder_graph(g, config, ib);
    let oa = decoder_graph(g, config, ra);
    let ob = decoder_graph(g, config, rb);
    let recon = pair_error_node(g, ia, ib, oa, ob, reduction);
    Stage { ia, ib, ra, rb, recon }
}

fn finish(mut graph: Graph, recon: NodeId, swap: Option<NodeId>, weight: f64) -> LossGraph {
    let total = match swap {
        Some(s) => {
            let ws = graph.scale(s, weight);
            graph.add(recon, ws)
        }
        None => recon,
    };
    graph.mark_output("l_o", recon);
    if let Some(s) = swap {
        graph.mark_output("l_swap", s);
    }
    graph.mark_output("total", total);
    LossGraph {
        graph,
        total,
        recon,
        swap,
    }
}

/// `L_p = L_o + α L_s` for a batch sharing group `k`.
pub fn primary_graph(config: &ModelConfig, k: usize, alpha: f64, reduction: Reduction) -> LossGraph {
    let mut g = Graph::new();
    let s = reconstruction_stage(&mut g, config, reduction);
    let (ha, hb) = swap_graph(&mut g, config.layout, s.ra, s.rb, k);
    let oa = decoder_graph(&mut g, config, ha);
    let ob = decoder_graph(&mut g, config, hb);
    let swap = pair_error_node(&mut g, s.ia, s.ib, oa, ob, reduction);
    finish(g, s.recon, Some(swap), alpha)
}

/// `L_u = L_o + β L_d`, or plain `L_o` for [`UnlabeledObjective::Reconstruction`].
pub fn unlabeled_graph(
    config: &ModelConfig,
    k: usize,
    beta: f64,
    objective: UnlabeledObjective,
    reduction: Reduction,
) -> LossGraph {
    let mut g = Graph::new();
    let s = reconstruction_stage(&mut g, config, reduction);
    if objective == UnlabeledObjective::Reconstruction {
        return finish(g, s.recon, None, beta);
    }
    // primary stage: swap part k and decode the hybrids
    let (ha, hb) = swap_graph(&mut g, config.layout, s.ra, s.rb, k);
    let hybrid_a = decoder_graph(&mut g, config, ha);
    let hybrid_b = decoder_graph(&mut g, config, hb);
    // dual stage: encode the hybrids, swap part k back, decode
    let ra2 = encoder_graph(&mut g, config, hybrid_a);
    let rb2 = encoder_graph(&mut g, config, hybrid_b);
    let (back_a, back_b) = swap_graph(&mut g, config.layout, ra2, rb2, k);
    let dual_a = decoder_graph(&mut g, config, back_a);
    let dual_b = decoder_graph(&mut g, config, back_b);
    let dual = pair_error_node(&mut g, s.ia, s.ib, dual_a, dual_b, reduction);
    finish(g, s.recon, Some(dual), beta)
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_o: f64,
    /// `L_s` or `L_d` (0 when the objective has none).
    pub l_swap: f64,
    pub total: f64,
}

fn evaluate(model: &DsdModel, mut lg: LossGraph, ia: &Tensor, ib: &Tensor) -> Result<LossValues> {
    let ia = model.as_batch(ia)?;
    let ib = model.as_batch(ib)?;
    let feeds = Feeds::new().with_params(&model.params).with("ia", &ia).with("ib", &ib);
    let out = lg.graph.forward(&feeds)?;
    Ok(LossValues {
        l_o: out["l_o"].item(),
        l_swap: out.get("l_swap").map_or(0.0, Tensor::item),
        total: out["total"].item(),
    })
}

fn check_group(layout: CodeLayout, k: usize) -> Result<()> {
    if k >= layout.n {
        return Err(Error::invalid(format!("group {k} out of range (n = {})", layout.n)));
    }
    Ok(())
}

/// Evaluates `L_p` on a labeled batch sharing group `k`.
pub fn loss_primary(model: &DsdModel, ia: &Tensor, ib: &Tensor, k: usize, alpha: f64, reduction: Reduction) -> Result<LossValues> {
    check_group(model.layout(), k)?;
    evaluate(model, primary_graph(&model.config, k, alpha, reduction), ia, ib)
}

/// Evaluates `L_u = L_o + β L_d` on an unlabeled batch with swap index `k`.
pub fn loss_dual(model: &DsdModel, ia: &Tensor, ib: &Tensor, k: usize, beta: f64, reduction: Reduction) -> Result<LossValues> {
    check_group(model.layout(), k)?;
    let lg = unlabeled_graph(&model.config, k, beta, UnlabeledObjective::DualSwap, reduction);
    evaluate(model, lg, ia, ib)
}

fn default_alpha() -> f64 {
    5.0
}
fn default_beta() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    50
}
fn default_hidden() -> Vec<usize> {
    vec![256, 128]
}
fn default_part_dims() -> usize {
    5
}
fn default_swap_index() -> SwapIndex {
    SwapIndex::Coupled
}
fn default_objective() -> UnlabeledObjective {
    UnlabeledObjective::DualSwap
}
fn default_reduction() -> Reduction {
    Reduction::MeanPerPixel
}

/// Training hyperparameters. Every field has a default, so `{}` is a valid
/// JSON config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Fraction of training pairs to keep labeled; `None` keeps the dataset's labels.
    #[serde(default)]
    pub supervision_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_swap_index")]
    pub swap_index: SwapIndex,
    #[serde(default = "default_objective")]
    pub unlabeled_objective: UnlabeledObjective,
    #[serde(default = "default_reduction")]
    pub reduction: Reduction,
    /// Write a checkpoint every this many epochs (0 = only the final one).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Dimensions per code part.
    #[serde(default = "default_part_dims")]
    pub part_dims: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("invalid learning rate {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if let Some(r) = self.supervision_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("supervision_rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Model shape for images of `image_shape` with `n` factors.
    pub fn model_config(&self, image_shape: [usize; 3], n: usize) -> ModelConfig {
        ModelConfig {
            layout: CodeLayout { n, m: self.part_dims },
            image_shape,
            hidden: self.hidden.clone(),
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    /// Swap index used by the step.
    pub k: usize,
    pub batch: usize,
    pub l_o: f64,
    /// `L_s` for labeled steps, `L_d` (or 0) for unlabeled ones.
    pub l_swap: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Training pairs flattened for fast batch assembly.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pixels: usize,
    images_a: Vec<f64>,
    images_b: Vec<f64>,
    /// Pair indices of each labeled group.
    groups: Vec<Vec<usize>>,
    unlabeled: Vec<usize>,
}

impl TrainSet {
    pub fn new(set: &PairSet, n_groups: usize) -> Result<Self> {
        let pixels = set.pixels();
        let mut images_a = Vec::with_capacity(set.len() * pixels);
        let mut images_b = Vec::with_capacity(set.len() * pixels);
        let mut groups = vec![Vec::new(); n_groups];
        let mut unlabeled = Vec::new();
        for (i, r) in set.records.iter().enumerate() {
            images_a.extend_from_slice(r.image_a.data());
            images_b.extend_from_slice(r.image_b.data());
            match r.label {
                Some(k) if k < n_groups => groups[k].push(i),
                Some(k) => return Err(Error::invalid(format!("label {k} out of range (n = {n_groups})"))),
                None => unlabeled.push(i),
            }
        }
        Ok(TrainSet {
            pixels,
            images_a,
            images_b,
            groups,
            unlabeled,
        })
    }

    pub fn labeled_len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn group(&self, k: usize) -> &[usize] {
        &self.groups[k]
    }

    /// Stacks pairs `idx` into `[len, pixels]` tensors.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let p = self.pixels;
        let gather = |src: &[f64]| {
            let mut out = Vec::with_capacity(idx.len() * p);
            for &i in idx {
                out.extend_from_slice(&src[i * p..(i + 1) * p]);
            }
            Tensor::matrix(idx.len(), p, out).expect("non-empty batch")
        };
        (gather(&self.images_a), gather(&self.images_b))
    }
}

/// Shuffled queue of indices, reshuffled when it cannot fill a batch.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new<R: Rng + ?Sized>(mut order: Vec<usize>, rng: &mut R) -> Self {
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Mean validation losses after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub train_total: f64,
    pub val_l_o: Option<f64>,
    pub val_l_s: Option<f64>,
}

/// Owns the model and optimizer for one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DsdModel,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh model initialized from the config seed.
    pub fn new(config: TrainConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let model = DsdModel::new(model_config, &mut rng_for(config.seed, stream::INIT))?;
        let adam = AdamState::new(config.lr);
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
        })
    }

    /// Trainer for the Square data with the layout derived from the config.
    pub fn for_pairs(config: TrainConfig, set: &PairSet, n: usize) -> Result<Self> {
        let shape = [set.channels, set.height, set.width];
        let mc = config.model_config(shape, n);
        Self::new(config, mc)
    }

    /// Applies the configured supervision rate (if any) to a training split.
    pub fn prepare(&self, train: &PairSet) -> Result<TrainSet> {
        let set = match self.config.supervision_rate {
            Some(rate) => train.with_supervision_rate(rate, &mut rng_for(self.config.seed, stream::LABEL_MASK))?,
            None => train.clone(),
        };
        TrainSet::new(&set, self.model.layout().n)
    }

    fn step(&mut self, phase: Phase, k: usize, idx: &[usize], data: &TrainSet) -> Result<LossValues> {
        let (ia, ib) = data.batch(idx);
        let c = &self.config;
        let mut lg = match phase {
            Phase::Labeled => primary_graph(&self.model.config, k, c.alpha, c.reduction),
            Phase::Unlabeled => unlabeled_graph(&self.model.config, k, c.beta, c.unlabeled_objective, c.reduction),
        };
        let out = {
            let feeds = Feeds::new().with_params(&self.model.params).with("ia", &ia).with("ib", &ib);
            lg.graph.forward(&feeds)?
        };
        let grads = lg.graph.backward(lg.total)?;
        self.adam.update(&mut self.model.params, &grads)?;
        Ok(LossValues {
            l_o: out["l_o"].item(),
            l_swap: out.get("l_swap").map_or(0.0, Tensor::item),
            total: out["total"].item(),
        })
    }

    /// One epoch: a pass over the unlabeled pairs (or over the labeled ones
    /// when there are none), alternating a labeled and an unlabeled update
    /// per iteration.
    pub fn train_epoch(&mut self, data: &TrainSet) -> Result<Vec<StepReport>> {
        let n = self.model.layout().n;
        let batch = self.config.batch_size;
        let labeled = data.labeled_len();
        let unlabeled = data.unlabeled_len();
        if labeled + unlabeled == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        let mut rng = rng_for(self.config.seed, stream::EPOCH_BASE + self.epoch as u64);
        let mut group_queues: Vec<Cycler> = data.groups.iter().map(|g| Cycler::new(g.clone(), &mut rng)).collect();
        let nonempty: Vec<usize> = (0..n).filter(|&k| !data.groups[k].is_empty()).collect();
        let mut order = data.unlabeled.clone();
        order.shuffle(&mut rng);

        let iterations = if unlabeled > 0 {
            unlabeled.div_ceil(batch)
        } else {
            labeled.div_ceil(batch)
        };
        let mut reports = Vec::with_capacity(2 * iterations);
        for it in 0..iterations {
            let mut shared_k = None;
            if !nonempty.is_empty() {
                let k = nonempty[rng.random_range(0..nonempty.len())];
                let idx = group_queues[k].next(batch, &mut rng);
                reports.push(self.timed_step(Phase::Labeled, k, it, &idx, data)?);
                shared_k = Some(k);
            }
            if unlabeled > 0 {
                let k = match (self.config.swap_index, shared_k) {
                    (SwapIndex::Coupled, Some(k)) => k,
                    _ => rng.random_range(0..n),
                };
                let idx = &order[it * batch..((it + 1) * batch).min(unlabeled)];
                reports.push(self.timed_step(Phase::Unlabeled, k, it, idx, data)?);
            }
        }
        self.epoch += 1;
        Ok(reports)
    }

    fn timed_step(&mut self, phase: Phase, k: usize, step: usize, idx: &[usize], data: &TrainSet) -> Result<StepReport> {
        let start = Instant::now();
        let losses = self.step(phase, k, idx, data).map_err(|e| {
            if e.is_numerical() {
                Error::Numerical(format!(
                    "epoch {} step {step} ({phase:?}, k = {k}): {e}",
                    self.epoch
                ))
            } else {
                e
            }
        })?;
        Ok(StepReport {
            epoch: self.epoch,
            step,
            phase,
            k,
            batch: idx.len(),
            l_o: losses.l_o,
            l_swap: losses.l_swap,
            total: losses.total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Mean `L_o` and `L_s` over labeled pairs of `set`, grouped by label.
    pub fn validation_losses(&self, set: &TrainSet) -> Result<Option<(f64, f64)>> {
        let chunk = self.config.batch_size.max(1);
        let (mut lo, mut ls, mut count) = (0.0, 0.0, 0usize);
        for k in 0..self.model.layout().n {
            for idx in set.group(k).chunks(chunk) {
                let (ia, ib) = set.batch(idx);
                let v = loss_primary(&self.model, &ia, &ib, k, self.config.alpha, self.config.reduction)?;
                lo += v.l_o * idx.len() as f64;
                ls += v.l_swap * idx.len() as f64;
                count += idx.len();
            }
        }
        Ok((count > 0).then(|| (lo / count as f64, ls / count as f64)))
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn fit<F>(&mut self, train: &TrainSet, val: Option<&TrainSet>, mut on_epoch: F) -> Result<Vec<EpochSummary>>
    where
        F: FnMut(&Trainer, &EpochSummary, &[StepReport]) -> Result<()>,
    {
        let mut summaries = Vec::new();
        while self.epoch < self.config.epochs {
            let reports = self.train_epoch(train)?;
            let (val_l_o, val_l_s) = match val {
                Some(v) => self.validation_losses(v)?.unzip(),
                None => (None, None),
            };
            let summary = EpochSummary {
                epoch: self.epoch - 1,
                steps: reports.len(),
                train_total: reports.iter().map(|r| r.total).sum::<f64>() / reports.len().max(1) as f64,
                val_l_o,
                val_l_s,
            };
            on_epoch(self, &summary, &reports)?;
            summaries.push(summary);
        }
        Ok(summaries)
    }

    /// Writes the model, optimizer state, epoch counter and config to `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.model.save(dir)?;
        let mut state = self.adam.to_params();
        state.insert("trainer.epoch", Tensor::scalar(self.epoch as f64));
        checkpoint::save(dir.join("optimizer.dsdw"), &state)?;
        let mut w = BufWriter::new(File::create(dir.join("train_config.json"))?);
        serde_json::to_writer_pretty(&mut w, &self.config)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Restores a checkpoint. `config` replaces the stored config (so the
    /// epoch budget can be extended) but must keep the same seed.
    pub fn resume(dir: impl AsRef<Path>, config: Option<TrainConfig>) -> Result<Self> {
        let dir = dir.as_ref();
        let model = DsdModel::load(dir)?;
        let state = checkpoint::load(dir.join("optimizer.dsdw"))?;
        let adam = AdamState::from_params(&state)?;
        let epoch = state.require("trainer.epoch")?.item() as usize;
        let stored: TrainConfig = serde_json::from_reader(BufReader::new(File::open(dir.join("train_config.json"))?))?;
        let config = config.unwrap_or(stored);
        config.validate()?;
        Ok(Trainer {
            config,
            model,
            adam,
            epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, Geometry};
    use crate::rng::rng_for;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn reconstruction_loss_by_hand() {
        let i = v(&[1.0, 0.0]);
        let z = v(&[0.0, 0.0]);
        assert_eq!(loss_original(&i, &i, &z, &z, Reduction::Sum).unwrap(), 2.0);
        assert_eq!(loss_original(&i, &z, &i, &z, Reduction::Sum).unwrap(), 0.0);
        let a = v(&[0.3, -0.2]);
        let b = v(&[0.9, 0.1]);
        assert_eq!(
            loss_original(&a, &b, &z, &i, Reduction::Sum).unwrap(),
            loss_original(&b, &a, &i, &z, Reduction::Sum).unwrap()
        );
    }

    #[test]
    fn swap_loss_of_uniform_offset() {
        let eps = 0.5;
        let i = v(&[0.0, 0.25, -0.5, 1.0]);
        let off = i.map(|x| x + eps);
        // 2 images × 4 pixels × eps²
        assert_eq!(loss_swap(&i, &i, &off, &off, Reduction::Sum).unwrap(), 2.0 * 4.0 * eps * eps);
        assert_eq!(loss_swap(&i, &i, &off, &off, Reduction::MeanPerPixel).unwrap(), 2.0 * eps * eps);
    }

    #[test]
    fn weighted_totals_with_default_balances() {
        assert_eq!(weighted_total(0.1, 0.2, 5.0), 1.1);
        assert_eq!(weighted_total(0.1, 0.5, 0.2), 0.2);
        assert_eq!(weighted_total(0.37, 123.0, 0.0), 0.37);
    }

    #[test]
    fn shape_mismatch_in_pair_error() {
        let a = v(&[1.0, 2.0]);
        let b = v(&[1.0]);
        assert!(pair_error(&a, &a, &b, &a, Reduction::Sum).is_err());
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layout: CodeLayout { n: 3, m: 2 },
            image_shape: [1, 2, 2],
            hidden: vec![6],
        }
    }

    #[test]
    fn balance_zero_reduces_to_reconstruction() {
        let model = DsdModel::new(tiny_config(), &mut rng_for(1, 1)).unwrap();
        let ia = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.0]).unwrap();
        let ib = ia.map(|x| -x);
        let p = loss_primary(&model, &ia, &ib, 1, 0.0, Reduction::Sum).unwrap();
        assert_eq!(p.total, p.l_o);
        let d = loss_dual(&model, &ia, &ib, 2, 0.0, Reduction::Sum).unwrap();
        assert_eq!(d.total, d.l_o);
        assert_eq!(p.l_o, d.l_o);
        assert!(p.l_swap > 0.0 && d.l_swap > 0.0);
        assert!(loss_primary(&model, &ia, &ib, 3, 1.0, Reduction::Sum).is_err());
    }

    #[test]
    fn identical_inputs_make_swap_loss_equal_reconstruction() {
        let model = DsdModel::new(tiny_config(), &mut rng_for(2, 1)).unwrap();
        let ia = Tensor::matrix(1, 4, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        for k in 0..3 {
            let p = loss_primary(&model, &ia, &ia, k, 5.0, Reduction::Sum).unwrap();
            assert_eq!(p.l_swap, p.l_o);
        }
    }

    #[test]
    fn graph_losses_match_explicit_composition() {
        let model = DsdModel::new(tiny_config(), &mut rng_for(3, 1)).unwrap();
        let ia = Tensor::matrix(1, 4, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let ib = Tensor::matrix(1, 4, vec![-0.5, 0.6, 0.0, 0.9]).unwrap();
        let k = 1;
        let ra = model.encode(&ia.clone().reshape(vec![1, 2, 2]).unwrap()).unwrap();
        let rb = model.encode(&ib.clone().reshape(vec![1, 2, 2]).unwrap()).unwrap();
        let flat = |t: Tensor| t.reshape(vec![1, 4]).unwrap();
        let oa = flat(model.decode(&ra).unwrap());
        let ob = flat(model.decode(&rb).unwrap());
        let (ha, hb) = crate::model::swap_part(&ra, &rb, k).unwrap();
        let hya = flat(model.decode(&ha).unwrap());
        let hyb = flat(model.decode(&hb).unwrap());
        let l_o = loss_original(&ia, &ib, &oa, &ob, Reduction::Sum).unwrap();
        let l_s = loss_swap(&ia, &ib, &hya, &hyb, Reduction::Sum).unwrap();
        let p = loss_primary(&model, &ia, &ib, k, 5.0, Reduction::Sum).unwrap();
        assert_eq!(p.l_o, l_o);
        assert_eq!(p.l_swap, l_s);
        assert_eq!(p.total, weighted_total(l_o, l_s, 5.0));

        let ra2 = model.encode(&hya.clone().reshape(vec![1, 2, 2]).unwrap()).unwrap();
        let rb2 = model.encode(&hyb.clone().reshape(vec![1, 2, 2]).unwrap()).unwrap();
        let (ba, bb) = crate::model::swap_part(&ra2, &rb2, k).unwrap();
        let da = flat(model.decode(&ba).unwrap());
        let db = flat(model.decode(&bb).unwrap());
        let l_d = loss_dual_swap(&ia, &ib, &da, &db, Reduction::Sum).unwrap();
        let d = loss_dual(&model, &ia, &ib, k, 0.2, Reduction::Sum).unwrap();
        assert_eq!(d.l_swap, l_d);
        assert_eq!(d.total, weighted_total(l_o, l_d, 0.2));
    }

    fn toy_set(pairs: usize, rate: f64) -> PairSet {
        let geo = Geometry {
            canvas: crate::dataset::Canvas { height: 4, width: 4 },
            side: 2,
            stride: 2,
            palette: crate::dataset::default_palette(),
        };
        generate_split(&geo, pairs, rate, 0.0, 11, stream::TRAIN_SPLIT).unwrap()
    }

    fn toy_config(rate: f64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            hidden: vec![8],
            part_dims: 2,
            supervision_rate: Some(rate),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let set = toy_set(32, 1.0);
        let mut t = Trainer::for_pairs(TrainConfig { lr: 0.0, ..toy_config(0.5) }, &set, 3).unwrap();
        let data = t.prepare(&set).unwrap();
        let before = t.model.params.clone();
        let reports = t.train_epoch(&data).unwrap();
        assert!(!reports.is_empty());
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn phases_alternate_when_both_kinds_exist() {
        let set = toy_set(40, 1.0);
        let mut t = Trainer::for_pairs(toy_config(0.5), &set, 3).unwrap();
        let data = t.prepare(&set).unwrap();
        assert_eq!(data.labeled_len(), 20);
        let reports = t.train_epoch(&data).unwrap();
        assert_eq!(reports.len(), 2 * 20usize.div_ceil(8));
        for pair in reports.chunks(2) {
            assert_eq!(pair[0].phase, Phase::Labeled);
            assert_eq!(pair[1].phase, Phase::Unlabeled);
            assert_eq!(pair[0].k, pair[1].k, "coupled swap index");
        }
        for r in &reports {
            assert!(r.l_o >= 0.0 && r.l_swap >= 0.0 && r.total >= 0.0);
        }
    }

    #[test]
    fn rate_zero_runs_only_unlabeled_steps() {
        let set = toy_set(24, 1.0);
        let mut t = Trainer::for_pairs(toy_config(0.0), &set, 3).unwrap();
        let data = t.prepare(&set).unwrap();
        let reports = t.train_epoch(&data).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|r| r.phase == Phase::Unlabeled));
    }

    #[test]
    fn rate_one_runs_only_labeled_steps() {
        let set = toy_set(24, 1.0);
        let mut t = Trainer::for_pairs(toy_config(1.0), &set, 3).unwrap();
        let data = t.prepare(&set).unwrap();
        let reports = t.train_epoch(&data).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|r| r.phase == Phase::Labeled));
        for r in &reports {
            assert!(data.group(r.k).len() > 0);
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let set = toy_set(4, 1.0);
        let mut t = Trainer::for_pairs(toy_config(1.0), &set, 3).unwrap();
        let empty = PairSet { records: Vec::new(), ..set };
        let data = TrainSet::new(&empty, 3).unwrap();
        assert!(t.train_epoch(&data).is_err());
    }

    #[test]
    fn independent_swap_index_can_differ() {
        let set = toy_set(400, 1.0);
        let cfg = TrainConfig {
            swap_index: SwapIndex::Independent,
            lr: 0.0,
            ..toy_config(0.5)
        };
        let mut t = Trainer::for_pairs(cfg, &set, 3).unwrap();
        let data = t.prepare(&set).unwrap();
        let reports = t.train_epoch(&data).unwrap();
        assert!(reports.chunks(2).any(|p| p[0].k != p[1].k));
    }

    #[test]
    fn training_is_deterministic() {
        let set = toy_set(32, 1.0);
        let run = || {
            let mut t = Trainer::for_pairs(toy_config(0.5), &set, 3).unwrap();
            let data = t.prepare(&set).unwrap();
            let r = t.train_epoch(&data).unwrap();
            (t.model.params, r.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.batch_size), (5.0, 0.2, 64));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"alpah": 1}"#).is_err());
        assert!(TrainConfig { alpha: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { supervision_rate: Some(2.0), ..c }.validate().is_err());
    }
}
