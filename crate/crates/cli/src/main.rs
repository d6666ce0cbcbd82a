//! `dsd`: dataset generation, training, evaluation, sweeps, hybrid demos and
//! the linear oracle from one binary.
//!
//! Exit codes: 0 on success, 1 for usage or input errors, 2 when training
//! hits a non-finite value.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use dsd_core::dataset::{build_dataset, DatasetManifest, SquareDataset, FACTOR_NAMES, N_FACTORS};
use dsd_core::eval::{
    ablation_primary_vs_dual, evaluate_model, hybrids, save_hybrid_grid, supervision_sweep, KnnConfig, Reference,
    RunResult, DEFAULT_K_NEIGHBORS,
};
use dsd_core::model::DsdModel;
use dsd_core::oracle::{train_linear_dsd, OracleConfig, OracleStatus, DIAGONAL_MIN, OFF_DIAGONAL_MAX};
use dsd_core::trainer::{StepReport, TrainConfig, TrainSet, Trainer};

#[derive(Parser)]
#[command(name = "dsd", version, about = "Dual swap disentangling on the Square dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a manifest.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a trained model with part-wise kNN accuracy.
    Eval(EvalArgs),
    /// Train and score one model per supervision rate and seed.
    Sweep(SweepArgs),
    /// Compare the dual framework with the primary one.
    Ablate(AblateArgs),
    /// Write a grid of inputs and part-swapped hybrids.
    SwapDemo(SwapDemoArgs),
    /// Run the linear disentangling check and its control.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the manifest supervision rate.
    #[arg(long)]
    rate: Option<f64>,
}

/// Options shared by every command that trains.
#[derive(Args)]
struct TrainOverrides {
    /// Training config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainOverrides,
    /// Overrides the config supervision rate.
    #[arg(long)]
    rate: Option<f64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long, default_value_t = DEFAULT_K_NEIGHBORS)]
    k_neighbors: usize,
    /// Let the classifier use every reference row, including exact twins of the query.
    #[arg(long)]
    all_references: bool,
}

impl KnnArgs {
    fn config(&self) -> KnnConfig {
        KnnConfig {
            k_neighbors: self.k_neighbors,
            reference: if self.all_references {
                Reference::All
            } else {
                Reference::HoldOutContext
            },
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Model directory (a training checkpoint).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    knn: KnnArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: TrainOverrides,
    /// Comma-separated supervision rates.
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    /// Comma-separated seeds; defaults to `--seed` or the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    knn: KnnArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: TrainOverrides,
    #[arg(long, default_value_t = 0.2)]
    rate: f64,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    knn: KnnArgs,
}

#[derive(Args)]
struct SwapDemoArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Code part to swap (0 square color, 1 position, 2 background color).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Number of test pairs (sharing factor `k`) to show.
    #[arg(long, default_value_t = 8)]
    pairs: usize,
}

#[derive(Args)]
struct OracleArgs {
    /// Oracle config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of optimization steps.
    #[arg(long)]
    steps: Option<usize>,
}

/// An error that maps to exit code 2.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let at = e.path().to_string();
        let inner = e.into_inner();
        if at == "." {
            anyhow::anyhow!("{}: {inner}", path.display())
        } else {
            anyhow::anyhow!("{}: key `{at}`: {inner}", path.display())
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_steps(w: &mut impl Write, steps: &[StepReport]) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_data(dir: &Path) -> Result<SquareDataset> {
    SquareDataset::load(dir).with_context(|| format!("cannot load dataset from {}", dir.display()))
}

fn apply_overrides(c: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(e) = o.epochs {
        c.epochs = e;
    }
}

fn train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut c = match &o.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut c, o);
    Ok(c)
}

fn seeds_or_default(seeds: &[u64], config: &TrainConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![config.seed]
    } else {
        seeds.to_vec()
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut manifest: DatasetManifest = read_json(&a.config)?;
    if let Some(s) = a.seed {
        manifest.seed = s;
    }
    if let Some(r) = a.rate {
        manifest.supervision_rate = r;
    }
    let summary = build_dataset(&manifest, &a.out)?;
    println!(
        "wrote {}: train {} pairs ({} labeled, {:.3}), val {}, test {}",
        a.out.display(),
        summary.train_pairs,
        summary.labeled_train_pairs,
        summary.labeled_train_pairs as f64 / summary.train_pairs.max(1) as f64,
        summary.val_pairs,
        summary.test_pairs
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.common.data)?;
    let mut trainer = match &a.resume {
        Some(dir) => {
            let t = Trainer::resume(dir, None).with_context(|| format!("cannot resume from {}", dir.display()))?;
            let stored_seed = t.config.seed;
            let mut config = match &a.common.config {
                Some(p) => read_json(p)?,
                None => t.config.clone(),
            };
            apply_overrides(&mut config, &a.common);
            if let Some(r) = a.rate {
                config.supervision_rate = Some(r);
            }
            if config.seed != stored_seed {
                bail!("checkpoint seed {stored_seed} differs from the requested seed {}", config.seed);
            }
            config.validate()?;
            Trainer { config, ..t }
        }
        None => {
            let mut config = train_config(&a.common)?;
            if let Some(r) = a.rate {
                config.supervision_rate = Some(r);
            }
            Trainer::for_pairs(config, &data.train, N_FACTORS)?
        }
    };
    let out = &a.common.out;
    create_out(out)?;
    let train_set = trainer.prepare(&data.train)?;
    let val = TrainSet::new(&data.val, N_FACTORS)?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut epochs = BufWriter::new(File::create(out.join("epochs.jsonl"))?);
    let every = trainer.config.checkpoint_every;
    let mut last_good = trainer.clone();
    let result = trainer.fit(&train_set, (!data.val.is_empty()).then_some(&val), |t, summary, steps| {
        let mut io = || -> Result<()> {
            write_steps(&mut metrics, steps)?;
            metrics.flush()?;
            serde_json::to_writer(&mut epochs, summary)?;
            epochs.write_all(b"\n")?;
            epochs.flush()?;
            if every > 0 && t.epoch % every == 0 {
                t.save_checkpoint(out.join(format!("checkpoint-epoch-{}", t.epoch)))?;
            }
            Ok(())
        };
        io().map_err(|e| dsd_core::Error::Format(format!("{e:#}")))?;
        last_good = t.clone();
        Ok(())
    });
    match result {
        Ok(_) => {
            trainer.save_checkpoint(out.join("checkpoint"))?;
            println!("trained {} epochs; checkpoint in {}", trainer.epoch, out.join("checkpoint").display());
            Ok(())
        }
        Err(e) if e.is_numerical() => {
            last_good.save_checkpoint(out.join("checkpoint"))?;
            Err(NumericalFailure(format!(
                "{e}; last good checkpoint (epoch {}) kept in {}",
                last_good.epoch,
                out.join("checkpoint").display()
            ))
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

fn load_model(dir: &Path) -> Result<DsdModel> {
    DsdModel::load(dir).with_context(|| format!("cannot load model from {}", dir.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let report = evaluate_model(&model, &data.train, &data.test, a.knn.config())?;
    create_out(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    for (k, name) in FACTOR_NAMES.iter().enumerate() {
        println!(
            "{name:>16}: own part {:.3}, whole code {:.3}",
            report.part[k][k], report.whole[k]
        );
    }
    println!("mean part-wise accuracy {:.3}", report.mean_partwise());
    Ok(())
}

fn write_curves(dir: &Path, name: &str, run: &RunResult) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(format!("{name}.jsonl")))?);
    write_steps(&mut w, &run.steps)?;
    w.flush()?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let config = train_config(&a.common)?;
    config.validate()?;
    let data = load_data(&a.common.data)?;
    let seeds = seeds_or_default(&a.seeds, &config);
    let report = supervision_sweep(&data, &config, &a.rates, &seeds, a.jobs, a.knn.config())?;
    let out = &a.common.out;
    let curves = out.join("curves");
    create_out(&curves)?;
    for entry in &report.entries {
        for run in &entry.runs {
            write_curves(&curves, &format!("rate-{}-seed-{}", entry.rate, run.seed), run)?;
        }
        println!(
            "rate {:.2}: mean part-wise accuracy {:.3} (min {:.3}, max {:.3})",
            entry.rate, entry.mean_partwise.mean, entry.mean_partwise.min, entry.mean_partwise.max
        );
    }
    write_json(&out.join("sweep.json"), &report)?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut config = train_config(&a.common)?;
    config.supervision_rate = Some(a.rate);
    config.validate()?;
    let data = load_data(&a.common.data)?;
    let seeds = seeds_or_default(&a.seeds, &config);
    let report = ablation_primary_vs_dual(&data, &config, &seeds, a.jobs, a.knn.config())?;
    let out = &a.common.out;
    let curves = out.join("curves");
    create_out(&curves)?;
    for run in report.dual.iter().chain(&report.primary) {
        write_curves(&curves, &run.label.replace([' ', '='], "-"), run)?;
    }
    write_json(&out.join("ablation.json"), &report)?;
    println!(
        "dual {:.3} vs primary {:.3} (margin {:+.3})",
        report.dual_mean_partwise.mean,
        report.primary_mean_partwise.mean,
        report.margin()
    );
    Ok(())
}

#[derive(Serialize)]
struct SwapDemoSummary {
    k: usize,
    factor: &'static str,
    pairs: usize,
    /// Mean squared error per pixel of the hybrids against the inputs.
    hybrid_mse: f64,
    /// Same for plain reconstructions.
    reconstruction_mse: f64,
}

fn swap_demo(a: SwapDemoArgs) -> Result<()> {
    if a.k >= N_FACTORS {
        bail!("--k must be below {N_FACTORS}");
    }
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let pairs: Vec<_> = data
        .test
        .records
        .iter()
        .filter(|r| r.factors_a[a.k] == r.factors_b[a.k])
        .take(a.pairs)
        .cloned()
        .collect();
    if pairs.is_empty() {
        bail!("the test split has no pair sharing factor {}", a.k);
    }
    create_out(&a.out)?;
    let path = a.out.join(format!("hybrids-k{}.ppm", a.k));
    save_hybrid_grid(&model, &pairs, a.k, &path)?;
    let hy = hybrids(&model, &pairs, a.k)?;
    let mse = |out_a: &dsd_core::Tensor, out_b: &dsd_core::Tensor| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (r, p) in pairs.iter().enumerate() {
            for (img, out) in [(&p.image_a, out_a), (&p.image_b, out_b)] {
                sum += img.data().iter().zip(out.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                count += img.len();
            }
        }
        sum / count as f64
    };
    let summary = SwapDemoSummary {
        k: a.k,
        factor: FACTOR_NAMES[a.k],
        pairs: pairs.len(),
        hybrid_mse: mse(&hy.hybrid_a, &hy.hybrid_b),
        reconstruction_mse: mse(&hy.recon_a, &hy.recon_b),
    };
    write_json(&a.out.join(format!("hybrids-k{}.json", a.k)), &summary)?;
    println!(
        "wrote {} ({} pairs sharing {}); hybrid mse {:.5}, reconstruction mse {:.5}",
        path.display(),
        summary.pairs,
        summary.factor,
        summary.hybrid_mse,
        summary.reconstruction_mse
    );
    Ok(())
}

#[derive(Serialize)]
struct OracleReport<'a> {
    thresholds: Thresholds,
    swap: &'a dsd_core::oracle::OracleRun,
    control: &'a dsd_core::oracle::OracleRun,
}

#[derive(Serialize)]
struct Thresholds {
    max_off_diagonal: f64,
    min_diagonal: f64,
}

fn oracle(a: OracleArgs) -> Result<()> {
    let mut config: OracleConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => OracleConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    let swap = train_linear_dsd(&config)?;
    let control = train_linear_dsd(&OracleConfig { alpha: 0.0, ..config.clone() })?;
    create_out(&a.out)?;
    for (name, run) in [("swap", &swap), ("control", &control)] {
        let mut w = BufWriter::new(File::create(a.out.join(format!("{name}-trajectory.jsonl")))?);
        run.write_trajectory(&mut w)?;
    }
    write_json(
        &a.out.join("oracle.json"),
        &OracleReport {
            thresholds: Thresholds {
                max_off_diagonal: OFF_DIAGONAL_MAX,
                min_diagonal: DIAGONAL_MIN,
            },
            swap: &swap,
            control: &control,
        },
    )?;
    for (name, run) in [("swap", &swap), ("control (alpha = 0)", &control)] {
        println!(
            "{}: {name}: max off-diagonal {:.4} (< {OFF_DIAGONAL_MAX}), min diagonal {:.4} (> {DIAGONAL_MIN}) after {} steps",
            if run.passed { "PASS" } else { "FAIL" },
            run.final_rates.max_off_diagonal(),
            run.final_rates.min_diagonal(),
            run.steps_run
        );
    }
    if let OracleStatus::Diverged { step, reason } = &swap.status {
        return Err(NumericalFailure(format!("swap run diverged at step {step}: {reason}")).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::SwapDemo(a) => swap_demo(a),
        Command::Oracle(a) => oracle(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.is::<NumericalFailure>() || e.downcast_ref::<dsd_core::Error>().is_some_and(dsd_core::Error::is_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
