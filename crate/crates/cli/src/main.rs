use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use guidedquant::checks;
use guidedquant::guidedquant::{
    build_hessians, eval_objectives, format_table, run_job, sweep, write_sweep_csv, QuantJob, ToySetup,
};
use guidedquant::io::{
    load_calibration, load_dataset, load_hessians, load_model, load_quantized, read_manifest, save_calibration,
    save_dataset, save_hessians, save_model, save_quantized, HessianCacheKey, RunConfig,
};
use guidedquant::model::{calibrate, end_loss, gen_dataset, train, Activation};
use guidedquant::{CdEngine, HessianKind, HessianSet, LossKind, Method, MlpModel};

#[derive(Parser, Debug)]
#[command(
    name = "gquant",
    version,
    about = "Gradient-guided non-uniform quantization of small MLPs"
)]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a teacher-labelled dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Layer widths; the first and last fix the input and target sizes.
        #[arg(long, value_delimiter = ',', default_value = "8,16,16,4")]
        dims: Vec<usize>,
        #[arg(long, default_value = "ce")]
        loss: LossKind,
    },
    /// Train a tanh MLP on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,16,16,4")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
    },
    /// Record layer inputs and output gradients.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and cache the Hessians a method needs.
    Hessian {
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        job: JobArgs,
    },
    /// Quantize a trained model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Hessian cache from `hessian`; rebuilt if absent or stale.
        #[arg(long)]
        hessians: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        job: JobArgs,
    },
    /// Report end loss and layer objectives.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Quantized artifacts to evaluate against the model.
        #[arg(long)]
        quantized: Option<PathBuf>,
    },
    /// Run several methods over freshly trained toy models.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "squeezellm,lnq_plain,lnq_guided")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        bits: Vec<u32>,
        /// Group count of guided runs.
        #[arg(long, default_value_t = 4)]
        groups: usize,
        /// Number of consecutive seeds, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the oracle property suite.
    Verify {
        /// Also run the 20-seed directional end-loss experiment.
        #[arg(long)]
        directional: bool,
    },
    /// Run gen-data, train, calibrate, hessian and quantize from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct JobArgs {
    #[arg(long, default_value = "lnq_guided")]
    method: Method,
    #[arg(long, default_value_t = 2)]
    bits: u32,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    cd_cycles: usize,
    #[arg(long, default_value = "lazy_batch")]
    cd_engine: CdEngine,
    #[arg(long, default_value_t = 128)]
    lazy_batch_size: usize,
    #[arg(long, default_value_t = guidedquant::hessian::DEFAULT_GRAD_SCALE)]
    grad_scale: f64,
    #[arg(long, default_value_t = guidedquant::hessian::DEFAULT_DAMPING_REL)]
    damping_rel: f64,
}

impl JobArgs {
    fn job(&self, seed: u64) -> QuantJob {
        let groups = if self.method == Method::LnqGuided {
            self.groups
        } else {
            1
        };
        let mut job = QuantJob::new(self.method, self.bits, groups, seed);
        job.grad_scale = self.grad_scale;
        job.damping_rel = self.damping_rel;
        if let Some(cfg) = job.lnq.as_mut() {
            cfg.iterations = self.iterations;
            cfg.cd_cycles = self.cd_cycles;
            cfg.cd_engine = self.cd_engine;
            cfg.lazy_batch_size = self.lazy_batch_size;
        }
        job
    }
}

/// Bad input detected before any computation. Exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(r: guidedquant::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| UsageError(e.to_string()).into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("Usage: gquant [--seed N] [--workers N] <COMMAND>; see gquant --help");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns `Ok(false)` when a check failed.
fn run(cli: Cli) -> anyhow::Result<bool> {
    if cli.workers > 1024 {
        bail!(UsageError(format!("--workers {} is too large", cli.workers)));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .context("starting worker pool")?;
    let (seed, workers) = (cli.seed, cli.workers);
    match cli.command {
        Command::GenData { out, n, dims, loss } => {
            check_dims(&dims)?;
            if n == 0 {
                bail!(UsageError("--n must be positive".into()));
            }
            let data = gen_dataset(seed, n, dims[0], dims[dims.len() - 1], loss)?;
            save_dataset(&out, &data)?;
            println!("wrote {} samples to {}", n, out.display());
        }
        Command::Train {
            data,
            out,
            dims,
            steps,
            lr,
        } => {
            check_dims(&dims)?;
            if !(lr > 0.0 && lr.is_finite()) {
                bail!(UsageError(format!("--lr {lr}")));
            }
            let data = load_dataset(&data)?;
            train_and_save(&data, &dims, steps, lr, seed, &out)?;
        }
        Command::Calibrate { model, data, out } => {
            let m = load_model(&model)?;
            let d = load_dataset(&data)?;
            let calibs = calibrate(&m, &d)?;
            save_calibration(&out, &calibs, &m.fingerprint(), d.seed)?;
            println!("calibrated {} layers on {} samples", calibs.len(), d.len());
        }
        Command::Hessian { calib, out, job } => {
            let job = job.job(seed);
            usage(job.validate())?;
            let calibs = load_calibration(&calib)?;
            let Some(key) = cache_key(&calib, &job)? else {
                bail!(UsageError(format!("{} needs no Hessians", job.method)));
            };
            let sets = build_hessians(&calibs, &job)?.unwrap_or_default();
            save_hessians(&out, &key, &sets)?;
            println!("wrote {} Hessian sets to {}", sets.len(), out.display());
        }
        Command::Quantize {
            model,
            data,
            calib,
            hessians,
            out,
            job,
        } => {
            let job = job.job(seed);
            usage(job.validate())?;
            quantize(&model, &data, &calib, hessians.as_deref(), &out, &job, workers)?;
        }
        Command::Eval { model, data, quantized } => {
            let m = load_model(&model)?;
            let d = load_dataset(&data)?;
            println!("end loss: {:.6}", end_loss(&m, &d)?);
            if let Some(q) = quantized {
                let (job, layers) = load_quantized(&q)?;
                let qm = m.with_layers(layers.iter().map(|l| l.dequantize()).collect())?;
                println!(
                    "quantized end loss ({}, {} bits): {:.6}",
                    job.method,
                    job.bits,
                    end_loss(&qm, &d)?
                );
                let calibs = calibrate(&m, &d)?;
                println!("layer  plain_objective  guided_objective  fisher_quadratic");
                for (l, c) in calibs.iter().enumerate() {
                    let o = eval_objectives(m.layer(l), qm.layer(l), c)?;
                    println!("{l:>5}  {:>15.6e}  {:>16.6e}  {:>16.6e}", o.plain, o.guided, o.fisher);
                }
            }
        }
        Command::Sweep {
            methods,
            bits,
            groups,
            seeds,
            csv,
        } => {
            let mut jobs = Vec::new();
            for s in seed..seed + seeds {
                for &b in &bits {
                    for &m in &methods {
                        let job = QuantJob::new(m, b, groups, s);
                        usage(job.validate())?;
                        jobs.push(job);
                    }
                }
            }
            let setup = ToySetup::default();
            let mut rows = Vec::new();
            for s in seed..seed + seeds {
                let t = setup.build(s)?;
                let mine: Vec<QuantJob> = jobs.iter().filter(|j| j.seed == s).cloned().collect();
                rows.extend(sweep(&t.model, &t.data, &t.calibs, &mine, workers)?);
            }
            print!("{}", format_table(&rows));
            if let Some(path) = csv {
                let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_sweep_csv(&rows, f)?;
            }
        }
        Command::Verify { directional } => {
            let mut results = checks::property_suite(seed);
            if directional {
                results.push(checks::directional_end_loss(workers));
            }
            for r in &results {
                println!("{}", r.line());
            }
            return Ok(results.iter().all(|r| r.passed));
        }
        Command::Run { config } => {
            let cfg = usage(RunConfig::load(&config))?;
            run_pipeline(&cfg)?;
        }
    }
    Ok(true)
}

fn check_dims(dims: &[usize]) -> anyhow::Result<()> {
    if dims.len() < 2 || dims.iter().any(|&d| d == 0 || d > 4096) {
        bail!(UsageError(format!(
            "--dims {dims:?}: need at least two sizes in 1..=4096"
        )));
    }
    Ok(())
}

fn train_and_save(
    data: &guidedquant::Dataset,
    dims: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
    out: &Path,
) -> anyhow::Result<MlpModel> {
    let init = MlpModel::init(dims, Activation::Tanh, data.task, seed)?;
    let t = train(&init, data, steps, lr)?;
    save_model(
        out,
        &t.model,
        serde_json::json!({
            "seed": seed,
            "steps": steps,
            "lr": lr,
            "initial_loss": t.initial_loss,
            "final_loss": t.final_loss,
        }),
    )?;
    println!(
        "trained {dims:?}: mean loss {:.6} -> {:.6} over {} steps",
        t.initial_loss, t.final_loss, t.steps_run
    );
    Ok(t.model)
}

/// Cache key for the job's Hessians, `None` if the method uses none.
fn cache_key(calib: &Path, job: &QuantJob) -> anyhow::Result<Option<HessianCacheKey>> {
    let kind = match job.method {
        Method::LnqPlain => HessianKind::Plain,
        Method::LnqGuided => HessianKind::Guided,
        _ => return Ok(None),
    };
    let m = read_manifest(calib, "calibration")?;
    let field = |k: &str| {
        m.meta
            .get(k)
            .cloned()
            .with_context(|| format!("calibration manifest lacks {k}"))
    };
    Ok(Some(HessianCacheKey {
        model_hash: serde_json::from_value(field("model_hash")?)?,
        dataset_seed: serde_json::from_value(field("dataset_seed")?)?,
        kind,
        groups: job.groups,
        grad_scale: if kind == HessianKind::Guided {
            job.grad_scale
        } else {
            1.0
        },
        damping_rel: job.damping_rel,
    }))
}

fn quantize(
    model: &Path,
    data: &Path,
    calib: &Path,
    hessians: Option<&Path>,
    out: &Path,
    job: &QuantJob,
    workers: usize,
) -> anyhow::Result<()> {
    let m = load_model(model)?;
    let d = load_dataset(data)?;
    let calibs = load_calibration(calib)?;
    let mut cached: Option<Vec<HessianSet>> = None;
    if let (Some(dir), Some(key)) = (hessians, cache_key(calib, job)?) {
        cached = load_hessians(dir, &key)?;
        if cached.is_none() {
            eprintln!(
                "note: Hessian cache in {} does not match this job; rebuilding",
                dir.display()
            );
        }
    }
    let outcome = run_job(&m, &d, &calibs, cached.as_deref(), job, workers)?;
    save_quantized(out, job, &outcome.layers, &outcome.report)?;
    let r = &outcome.report;
    println!(
        "{} {} bits, {} groups: end loss {:.6} -> {:.6}",
        r.method, r.bits, r.groups, r.end_loss_before, r.end_loss_after
    );
    println!(
        "time: hessian {:.3}s, quantize {:.3}s, eval {:.3}s",
        r.timings.hessian, r.timings.quantize, r.timings.eval
    );
    Ok(())
}

fn run_pipeline(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = &cfg.out_dir;
    let (data_dir, model_dir, calib_dir, hess_dir, quant_dir) = (
        root.join("data"),
        root.join("model"),
        root.join("calib"),
        root.join("hessians"),
        root.join("quantized"),
    );
    let data = gen_dataset(
        cfg.data_seed,
        cfg.n,
        cfg.dims[0],
        cfg.dims[cfg.dims.len() - 1],
        cfg.loss,
    )?;
    save_dataset(&data_dir, &data)?;
    let model = train_and_save(&data, &cfg.dims, cfg.train_steps, cfg.lr, cfg.seed, &model_dir)?;
    let calibs = calibrate(&model, &data)?;
    save_calibration(&calib_dir, &calibs, &model.fingerprint(), data.seed)?;
    let job = cfg.job();
    if let Some(key) = cache_key(&calib_dir, &job)? {
        let sets = build_hessians(&calibs, &job)?.unwrap_or_default();
        save_hessians(&hess_dir, &key, &sets)?;
    }
    quantize(
        &model_dir,
        &data_dir,
        &calib_dir,
        Some(hess_dir.as_path()),
        &quant_dir,
        &job,
        cfg.workers,
    )
}
