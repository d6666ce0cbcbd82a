//! Linear sanity check of swap-based disentangling.
//!
//! Observations are an orthogonal mixing of `n` independent Gaussian
//! semantics. A linear autoencoder trained on `L_p` with every group labeled
//! should end with code part `i` explaining semantic `i` and nothing else,
//! which the semantic-rate matrix `λ` (regression R² of each semantic on
//! each code part) makes measurable.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, AdamState, Feeds, Graph, Params};
use crate::error::{Error, Result};
use crate::model::CodeLayout;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Largest tolerated off-diagonal rate for a pass.
pub const OFF_DIAGONAL_MAX: f64 = 0.05;
/// Smallest tolerated diagonal rate for a pass.
pub const DIAGONAL_MIN: f64 = 0.9;
/// Fewest samples [`measure_rates`] accepts.
pub const MIN_RATE_SAMPLES: usize = 1000;

/// `n` semantics of `d_s` dims each, observed through an orthogonal `mixing` map.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearWorld {
    pub n: usize,
    pub d_s: usize,
    /// `[dim, dim]`; observation `x = s · mixing`.
    pub mixing: Tensor,
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian one.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Tensor {
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // fix column signs so the distribution is uniform
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_dmatrix(&q)
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::matrix(m.nrows(), m.ncols(), data).expect("non-empty matrix")
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

impl LinearWorld {
    pub fn new<R: Rng + ?Sized>(n: usize, d_s: usize, rng: &mut R) -> Result<Self> {
        if n < 2 || d_s == 0 {
            return Err(Error::invalid(format!("need n >= 2 and d_s >= 1, got n = {n}, d_s = {d_s}")));
        }
        Ok(LinearWorld {
            n,
            d_s,
            mixing: random_orthogonal(rng, n * d_s),
        })
    }

    pub fn dim(&self) -> usize {
        self.n * self.d_s
    }

    pub fn layout(&self) -> CodeLayout {
        CodeLayout { n: self.n, m: self.d_s }
    }

    /// `[rows, dim]` standard-normal semantics.
    pub fn sample_semantics<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> Tensor {
        let data = (0..rows * self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::matrix(rows, self.dim(), data).expect("non-empty batch")
    }

    pub fn observe(&self, semantics: &Tensor) -> Result<Tensor> {
        Ok(from_dmatrix(&(to_dmatrix(semantics) * to_dmatrix(&self.mixing))))
    }

    /// Pairs sharing semantic `k`; every other semantic is drawn independently,
    /// or copied too when `identical` is set.
    pub fn sample_pairs<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize, k: usize, identical: bool) -> Result<(Tensor, Tensor)> {
        let sa = self.sample_semantics(rng, rows);
        let mut sb = if identical { sa.clone() } else { self.sample_semantics(rng, rows) };
        let (d, dim) = (self.d_s, self.dim());
        for r in 0..rows {
            let block = r * dim + k * d..r * dim + (k + 1) * d;
            sb.data_mut()[block.clone()].copy_from_slice(&sa.data()[block]);
        }
        Ok((self.observe(&sa)?, self.observe(&sb)?))
    }
}

/// `lambda[i][j]`: share of semantic `j`'s variance explained by code part `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticRateMatrix {
    pub lambda: Vec<Vec<f64>>,
}

impl SemanticRateMatrix {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.lambda[i][j])
            .fold(0.0, f64::max)
    }

    pub fn min_diagonal(&self) -> f64 {
        (0..self.n()).map(|i| self.lambda[i][i]).fold(1.0, f64::min)
    }

    pub fn passes(&self) -> bool {
        self.max_off_diagonal() < OFF_DIAGONAL_MAX && self.min_diagonal() > DIAGONAL_MIN
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.lambda.iter().map(|row| row[j]).sum()).collect()
    }
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// R² of the least-squares fit (with intercept) of `targets` on `features`,
/// pooled over the target columns.
fn r_squared(features: &DMatrix<f64>, targets: &DMatrix<f64>, what: &str) -> Result<f64> {
    let mut x = features.clone();
    let mut y = targets.clone();
    center_columns(&mut x);
    center_columns(&mut y);
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= max * 1e-10 {
        return Err(Error::Numerical(format!(
            "{what} is rank deficient: singular values {:?}",
            sv.as_slice()
        )));
    }
    let beta = svd.solve(&y, 0.0).map_err(|e| Error::Numerical(format!("{what}: {e}")))?;
    let resid = &y - &x * beta;
    let total = y.norm_squared();
    if total == 0.0 {
        return Err(Error::Numerical(format!("{what}: target has zero variance")));
    }
    Ok((1.0 - resid.norm_squared() / total).clamp(0.0, 1.0))
}

/// Semantic rates of a linear `encoder` (`[dim, total]`) over `samples` fresh draws.
pub fn measure_rates<R: Rng + ?Sized>(
    encoder: &Tensor,
    layout: CodeLayout,
    world: &LinearWorld,
    samples: usize,
    rng: &mut R,
) -> Result<SemanticRateMatrix> {
    if encoder.rank() != 2 || encoder.shape()[0] != world.dim() || encoder.shape()[1] != layout.total() {
        return Err(Error::invalid(format!(
            "encoder {:?} does not map {} observation dims to {} code dims",
            encoder.shape(),
            world.dim(),
            layout.total()
        )));
    }
    if layout.n != world.n {
        return Err(Error::invalid(format!("{} code parts for {} semantics", layout.n, world.n)));
    }
    if samples < MIN_RATE_SAMPLES {
        return Err(Error::invalid(format!("need at least {MIN_RATE_SAMPLES} samples, got {samples}")));
    }
    let s = to_dmatrix(&world.sample_semantics(rng, samples));
    let codes = &s * to_dmatrix(&world.mixing) * to_dmatrix(encoder);
    let mut lambda = vec![vec![0.0; world.n]; layout.n];
    for (i, row) in lambda.iter_mut().enumerate() {
        let part = codes.columns(i * layout.m, layout.m).into_owned();
        for (j, rate) in row.iter_mut().enumerate() {
            let target = s.columns(j * world.d_s, world.d_s).into_owned();
            *rate = r_squared(&part, &target, &format!("code part {i}"))?;
        }
    }
    Ok(SemanticRateMatrix { lambda })
}

fn default_n() -> usize {
    2
}
fn default_d_s() -> usize {
    1
}
fn default_alpha() -> f64 {
    5.0
}
fn default_lr() -> f64 {
    1e-2
}
fn default_steps() -> usize {
    5000
}
fn default_batch() -> usize {
    64
}
fn default_record_every() -> usize {
    100
}
fn default_eval_samples() -> usize {
    2000
}
fn default_patience() -> usize {
    100
}

/// Settings of one linear run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d_s")]
    pub d_s: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Measure `λ` every this many steps (and after the last one).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Abort after this many consecutive loss increases.
    #[serde(default = "default_patience")]
    pub divergence_patience: usize,
    /// Make both members of every pair identical.
    #[serde(default)]
    pub identical_pairs: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// One point of the `λ` trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub step: usize,
    pub loss: f64,
    pub max_off_diagonal: f64,
    pub min_diagonal: f64,
    pub lambda: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum OracleStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

/// Result of [`train_linear_dsd`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleRun {
    pub config: OracleConfig,
    pub status: OracleStatus,
    pub steps_run: usize,
    pub final_rates: SemanticRateMatrix,
    pub passed: bool,
    pub trajectory: Vec<RatePoint>,
    #[serde(skip)]
    pub encoder: Option<Tensor>,
    #[serde(skip)]
    pub decoder: Option<Tensor>,
}

impl OracleRun {
    /// The trajectory as JSON lines.
    pub fn write_trajectory<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.trajectory {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn linear_loss_graph(layout: CodeLayout, k: usize, alpha: f64) -> (Graph, crate::autodiff::NodeId) {
    let mut g = Graph::new();
    let xa = g.input("xa");
    let xb = g.input("xb");
    let enc = g.param("enc");
    let dec = g.param("dec");
    let ra = g.matmul(xa, enc);
    let rb = g.matmul(xb, enc);
    let oa = g.matmul(ra, dec);
    let ob = g.matmul(rb, dec);
    let ea = g.mse(xa, oa);
    let eb = g.mse(xb, ob);
    let l_o = g.add(ea, eb);
    let (ha, hb) = crate::model::swap_graph(&mut g, layout, ra, rb, k);
    let sa = g.matmul(ha, dec);
    let sb = g.matmul(hb, dec);
    let esa = g.mse(xa, sa);
    let esb = g.mse(xb, sb);
    let l_s = g.add(esa, esb);
    let weighted = g.scale(l_s, alpha);
    let total = g.add(l_o, weighted);
    g.mark_output("total", total);
    (g, total)
}

/// Trains a linear encoder/decoder on `L_p` with pairs from every group.
pub fn train_linear_dsd(config: &OracleConfig) -> Result<OracleRun> {
    if config.steps == 0 || config.batch_size == 0 || config.record_every == 0 {
        return Err(Error::invalid("steps, batch_size and record_every must be positive"));
    }
    if !(config.alpha >= 0.0) || !(config.lr > 0.0) {
        return Err(Error::invalid("alpha must be non-negative and lr positive"));
    }
    let world = LinearWorld::new(config.n, config.d_s, &mut rng_for(config.seed, stream::ORACLE))?;
    let layout = world.layout();
    let dim = world.dim();
    let mut init = rng_for(config.seed, stream::INIT);
    let mut params = Params::new();
    params.insert("enc", glorot_uniform(&mut init, dim, layout.total()));
    params.insert("dec", glorot_uniform(&mut init, layout.total(), dim));
    let mut graphs: Vec<_> = (0..layout.n).map(|k| linear_loss_graph(layout, k, config.alpha)).collect();
    let mut adam = AdamState::new(config.lr);
    let mut data_rng = rng_for(config.seed, stream::TRAIN_SPLIT);
    let mut eval_rng = rng_for(config.seed, stream::EVAL);

    let mut trajectory = Vec::new();
    let mut record = |step: usize, loss: f64, params: &Params| -> Result<SemanticRateMatrix> {
        let rates = measure_rates(params.require("enc")?, layout, &world, config.eval_samples, &mut eval_rng)?;
        trajectory.push(RatePoint {
            step,
            loss,
            max_off_diagonal: rates.max_off_diagonal(),
            min_diagonal: rates.min_diagonal(),
            lambda: rates.lambda.clone(),
        });
        Ok(rates)
    };
    let mut last_rates = record(0, f64::NAN, &params)?;
    let mut status = OracleStatus::Completed;
    let (mut prev, mut rising) = (f64::INFINITY, 0usize);
    let mut steps_run = 0;
    for step in 1..=config.steps {
        let k = data_rng.random_range(0..layout.n);
        let (xa, xb) = world.sample_pairs(&mut data_rng, config.batch_size, k, config.identical_pairs)?;
        let (g, total) = &mut graphs[k];
        let feeds = Feeds::new().with_params(&params).with("xa", &xa).with("xb", &xb);
        let loss = match g.forward(&feeds) {
            Ok(out) => out["total"].item(),
            Err(e) if e.is_numerical() => {
                status = OracleStatus::Diverged {
                    step,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let grads = g.backward(*total)?;
        adam.update(&mut params, &grads)?;
        steps_run = step;
        rising = if loss > prev { rising + 1 } else { 0 };
        prev = loss;
        if rising >= config.divergence_patience {
            status = OracleStatus::Diverged {
                step,
                reason: format!("loss rose for {rising} consecutive steps"),
            };
            break;
        }
        if step % config.record_every == 0 || step == config.steps {
            last_rates = record(step, loss, &params)?;
        }
    }
    let passed = status == OracleStatus::Completed && last_rates.passes();
    Ok(OracleRun {
        config: config.clone(),
        status,
        steps_run,
        passed,
        final_rates: last_rates,
        trajectory,
        encoder: params.get("enc").cloned(),
        decoder: params.get("dec").cloned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inverse_encoder(world: &LinearWorld) -> Tensor {
        // mixing is orthogonal, so its inverse is the transpose
        from_dmatrix(&to_dmatrix(&world.mixing).transpose())
    }

    #[test]
    fn mixing_is_orthogonal() {
        let w = LinearWorld::new(3, 2, &mut rng_for(1, 0)).unwrap();
        let m = to_dmatrix(&w.mixing);
        let err = (&m * m.transpose() - DMatrix::identity(6, 6)).abs().max();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn exact_inverse_gives_identity_rates() {
        let w = LinearWorld::new(3, 2, &mut rng_for(2, 0)).unwrap();
        let r = measure_rates(&inverse_encoder(&w), w.layout(), &w, 2000, &mut rng_for(2, 1)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r.lambda[i][j] - want).abs() < 0.01, "{:?}", r.lambda);
            }
        }
        assert!(r.passes());
    }

    #[test]
    fn permuted_inverse_gives_permutation_rates() {
        let w = LinearWorld::new(3, 1, &mut rng_for(3, 0)).unwrap();
        let inv = inverse_encoder(&w);
        let perm = [2usize, 0, 1];
        // part i reads semantic perm[i]
        let mut data = vec![0.0; 9];
        for r in 0..3 {
            for (i, &p) in perm.iter().enumerate() {
                data[r * 3 + i] = inv.data()[r * 3 + p];
            }
        }
        let enc = Tensor::matrix(3, 3, data).unwrap();
        let r = measure_rates(&enc, w.layout(), &w, 2000, &mut rng_for(3, 1)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..3 {
                let want = if j == p { 1.0 } else { 0.0 };
                assert!((r.lambda[i][j] - want).abs() < 0.01, "{:?}", r.lambda);
            }
        }
    }

    #[test]
    fn random_orthogonal_encoders_are_entangled() {
        // Monte Carlo over 200 random encoders with n = 3, d_s = 4
        let mut rng = rng_for(4, 0);
        let mut entangled = 0;
        let trials = 200;
        for _ in 0..trials {
            let w = LinearWorld::new(3, 4, &mut rng).unwrap();
            let enc = random_orthogonal(&mut rng, 12);
            let r = measure_rates(&enc, w.layout(), &w, 1000, &mut rng).unwrap();
            if r.lambda.iter().all(|row| row.iter().filter(|&&v| v > 0.05).count() >= 2) {
                entangled += 1;
            }
            for s in r.column_sums() {
                // finite-sample R² is biased upward by roughly m / samples per part
                assert!(s <= 1.0 + 0.1, "column sum {s}");
            }
        }
        assert_eq!(entangled, trials);
    }

    #[test]
    fn rejects_rank_deficiency_and_small_samples() {
        let w = LinearWorld::new(2, 2, &mut rng_for(5, 0)).unwrap();
        let mut enc = inverse_encoder(&w);
        for r in 0..4 {
            enc.data_mut()[r * 4 + 1] = 0.0;
        }
        let err = measure_rates(&enc, w.layout(), &w, 1000, &mut rng_for(5, 1)).unwrap_err();
        assert!(err.to_string().contains("rank deficient"), "{err}");
        assert!(measure_rates(&inverse_encoder(&w), w.layout(), &w, 999, &mut rng_for(5, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rates_ignore_part_scaling(seed in any::<u64>(), part in 0usize..2, scale in prop_oneof![-50.0..-0.01f64, 0.01..50.0f64]) {
            let mut rng = rng_for(seed, 0);
            let w = LinearWorld::new(2, 2, &mut rng).unwrap();
            let enc = random_orthogonal(&mut rng, 4);
            let mut scaled = enc.clone();
            for r in 0..4 {
                for c in part * 2..part * 2 + 2 {
                    scaled.data_mut()[r * 4 + c] *= scale;
                }
            }
            let a = measure_rates(&enc, w.layout(), &w, 1000, &mut rng_for(seed, 1)).unwrap();
            let b = measure_rates(&scaled, w.layout(), &w, 1000, &mut rng_for(seed, 1)).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((a.lambda[i][j] - b.lambda[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pairs_share_exactly_one_semantic() {
        let w = LinearWorld::new(3, 2, &mut rng_for(6, 0)).unwrap();
        let (xa, xb) = w.sample_pairs(&mut rng_for(6, 1), 5, 1, false).unwrap();
        // back to semantics through the transpose
        let inv = to_dmatrix(&w.mixing).transpose();
        let sa = to_dmatrix(&xa) * &inv;
        let sb = to_dmatrix(&xb) * &inv;
        for r in 0..5 {
            for c in 0..6 {
                let same = (sa[(r, c)] - sb[(r, c)]).abs() < 1e-12;
                assert_eq!(same, (2..4).contains(&c));
            }
        }
    }
}
