//! End-to-end layer-wise quantization of an MLP.
//!
//! Channels of every layer are partitioned into groups, each group gets its own
//! Hessian (plain `XᵀX` or the gradient-weighted average), and a layer-wise
//! quantizer runs on every (layer, group) block independently. Layers never
//! see each other's quantization error.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::fisher_block_oracle;
use crate::hessian::{guided_hessians, plain_hessian, ChannelPartition, HessianSet};
use crate::linalg::{quad_form, Matrix};
use crate::lnq::{lnq_quantize, LnqConfig};
use crate::mix_seed;
use crate::model::{
    calibrate, end_loss, gen_dataset, train, Activation, Dataset, LayerCalibration, LossKind, MlpModel,
};
use crate::quant::{ChannelQuantState, QuantizedLayer};
use crate::scalar_quant::{diag_fisher, rtn_quantize, squeezellm_quantize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rtn,
    Squeezellm,
    LnqPlain,
    LnqGuided,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rtn, Method::Squeezellm, Method::LnqPlain, Method::LnqGuided];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Squeezellm => "squeezellm",
            Method::LnqPlain => "lnq_plain",
            Method::LnqGuided => "lnq_guided",
        }
    }

    pub fn is_lnq(self) -> bool {
        matches!(self, Method::LnqPlain | Method::LnqGuided)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One quantization run over a whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantJob {
    pub method: Method,
    pub bits: u32,
    /// Channel groups per layer; always 1 unless the method is `lnq_guided`.
    /// Layers narrower than this use one group per channel.
    pub groups: usize,
    pub lnq: Option<LnqConfig>,
    pub grad_scale: f64,
    pub damping_rel: f64,
    pub seed: u64,
}

impl QuantJob {
    /// A job with default LNQ settings where applicable.
    pub fn new(method: Method, bits: u32, groups: usize, seed: u64) -> Self {
        let groups = if method == Method::LnqGuided { groups } else { 1 };
        let lnq = method.is_lnq().then(|| LnqConfig {
            bits,
            seed,
            damping_rel: 0.0,
            ..LnqConfig::default()
        });
        Self {
            method,
            bits,
            groups,
            lnq,
            grad_scale: crate::hessian::DEFAULT_GRAD_SCALE,
            damping_rel: crate::hessian::DEFAULT_DAMPING_REL,
            seed,
        }
    }

    /// Group count used for a layer with `d_out` channels.
    pub fn groups_for(&self, d_out: usize) -> usize {
        if self.method == Method::LnqGuided {
            self.groups.min(d_out)
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 8 {
            return Err(Error::Config(format!("bits must be in 1..=8, got {}", self.bits)));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be positive".into()));
        }
        if self.method != Method::LnqGuided && self.groups != 1 {
            return Err(Error::Config(format!("{} uses a single group", self.method)));
        }
        match (&self.lnq, self.method.is_lnq()) {
            (Some(cfg), true) => {
                cfg.validate()?;
                if cfg.bits != self.bits {
                    return Err(Error::Config(format!(
                        "LNQ bits {} != job bits {}",
                        cfg.bits, self.bits
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::Config(format!("{} takes no LNQ config", self.method))),
            (None, true) => return Err(Error::Config(format!("{} needs an LNQ config", self.method))),
        }
        if !(self.grad_scale > 0.0) || !self.grad_scale.is_finite() {
            return Err(Error::Config(format!("grad_scale {}", self.grad_scale)));
        }
        if !(self.damping_rel >= 0.0) || !self.damping_rel.is_finite() {
            return Err(Error::Config(format!("damping_rel {}", self.damping_rel)));
        }
        Ok(())
    }
}

/// Quantizes one block of channels that share a Hessian.
pub trait LayerQuantizer: Sync {
    fn quantize_block(
        &self,
        h: &Matrix,
        w_block: &Matrix,
        init: Vec<ChannelQuantState>,
    ) -> Result<Vec<ChannelQuantState>>;
}

/// LNQ on an already damped Hessian.
#[derive(Debug, Clone)]
pub struct LnqQuantizer {
    pub cfg: LnqConfig,
}

impl LayerQuantizer for LnqQuantizer {
    fn quantize_block(
        &self,
        h: &Matrix,
        w_block: &Matrix,
        init: Vec<ChannelQuantState>,
    ) -> Result<Vec<ChannelQuantState>> {
        lnq_quantize(h, w_block, &self.cfg, init)
    }
}

/// Proxy objectives of one quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerObjectives {
    /// `‖XW − XŴ‖²`
    pub plain: f64,
    /// `‖∂ℓ/∂Z ⊙ (XW − XŴ)‖²`, unscaled gradients.
    pub guided: f64,
    /// `n Σⱼ (wⱼ − ŵⱼ)ᵀ Fⱼ (wⱼ − ŵⱼ)` from explicit Fisher blocks.
    pub fisher: f64,
}

/// Computes every proxy from `X`, `∂ℓ/∂Z`, `W` and `Ŵ` directly.
pub fn eval_objectives(w: &Matrix, w_hat: &Matrix, calib: &LayerCalibration) -> Result<LayerObjectives> {
    if w.shape() != w_hat.shape() || w.rows() != calib.d_in() || w.cols() != calib.d_out() {
        return Err(Error::dims(format!(
            "W {:?}, Ŵ {:?}, calibration {}x{}",
            w.shape(),
            w_hat.shape(),
            calib.d_in(),
            calib.d_out()
        )));
    }
    let diff = calib.x.matmul(&w.sub(w_hat)?)?;
    let plain = diff.sum_of_squares();
    let guided = diff.hadamard(&calib.grad_z)?.sum_of_squares();
    let n = calib.n();
    let mut fisher = 0.0;
    for j in 0..w.cols() {
        let e: Vec<f64> = (0..w.rows()).map(|i| w[(i, j)] - w_hat[(i, j)]).collect();
        if e.iter().any(|&v| v != 0.0) {
            fisher += n as f64 * quad_form(&fisher_block_oracle(calib, j, n), &e)?;
        }
    }
    Ok(LayerObjectives { plain, guided, fisher })
}

/// `Σⱼ (wⱼ − ŵⱼ)ᵀ H_{k(j)} (wⱼ − ŵⱼ)` over the groups of a Hessian set.
pub fn hessian_objective(w: &Matrix, w_hat: &Matrix, hset: &HessianSet) -> Result<f64> {
    let mut total = 0.0;
    for (k, group) in hset.partition.groups().iter().enumerate() {
        for &j in group {
            let e: Vec<f64> = (0..w.rows()).map(|i| w[(i, j)] - w_hat[(i, j)]).collect();
            total += quad_form(&hset.hessians[k], &e)?;
        }
    }
    Ok(total)
}

/// True if every step of `trace` is non-increasing up to `1e-12·(1+f)`.
pub fn trace_is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|p| p[1] <= p[0] + 1e-12 * (1.0 + p[0].abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_idx: usize,
    pub objectives: LayerObjectives,
    /// Sum of the channels' final damped objectives (LNQ methods only).
    pub damped: Option<f64>,
    pub traces_monotone: bool,
}

/// Wall-clock seconds per phase. Never written to artifact files.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub hessian: f64,
    pub quantize: f64,
    pub eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub method: Method,
    pub bits: u32,
    pub groups: usize,
    pub seed: u64,
    pub layers: Vec<LayerReport>,
    pub end_loss_before: f64,
    pub end_loss_after: f64,
    /// Sum over layers of the Fisher-block quadratic form.
    pub quadratic_proxy: f64,
    #[serde(skip)]
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct QuantOutcome {
    pub model: MlpModel,
    pub layers: Vec<QuantizedLayer>,
    pub report: QuantReport,
}

/// Hessians the job's method needs, one set per layer (`None` for methods
/// that use no Hessian).
pub fn build_hessians(calibs: &[LayerCalibration], job: &QuantJob) -> Result<Option<Vec<HessianSet>>> {
    job.validate()?;
    if !job.method.is_lnq() {
        return Ok(None);
    }
    calibs
        .par_iter()
        .map(|c| {
            match job.method {
                Method::LnqPlain => plain_hessian(c, job.damping_rel),
                _ => {
                    let part = ChannelPartition::consecutive(c.d_out(), job.groups_for(c.d_out()))?;
                    guided_hessians(c, &part, job.grad_scale, job.damping_rel)
                }
            }
            .map_err(|e| e.context(format!("Hessian of layer {}", c.layer_idx)))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn check_hessians(model: &MlpModel, job: &QuantJob, hs: &[HessianSet]) -> Result<()> {
    if hs.len() != model.num_layers() {
        return Err(Error::dims(format!(
            "{} Hessian sets for {} layers",
            hs.len(),
            model.num_layers()
        )));
    }
    for (l, h) in hs.iter().enumerate() {
        let w = model.layer(l);
        let want_g = job.groups_for(w.cols());
        if h.partition.d_out() != w.cols() || h.partition.num_groups() != want_g {
            return Err(Error::PartitionMismatch(format!(
                "layer {l}: Hessian set has {} groups over {} channels, job wants {want_g} over {}",
                h.partition.num_groups(),
                h.partition.d_out(),
                w.cols()
            )));
        }
        if h.hessians.iter().any(|m| m.shape() != (w.rows(), w.rows())) {
            return Err(Error::dims(format!("layer {l}: Hessian is not {0}x{0}", w.rows())));
        }
    }
    Ok(())
}

/// Initial (non-LNQ) quantization of layer `l`.
fn scalar_init(model: &MlpModel, calib: &LayerCalibration, job: &QuantJob, l: usize) -> Result<QuantizedLayer> {
    let w = model.layer(l);
    let seed = mix_seed(job.seed, l as u64);
    let mut q = match job.method {
        Method::Rtn => rtn_quantize(w, job.bits, seed)?,
        _ => squeezellm_quantize(w, &diag_fisher(calib), job.bits, seed)?,
    };
    q.layer_idx = l;
    Ok(q)
}

/// Quantizes a single layer. Results do not depend on other layers.
pub fn quantize_layer(
    model: &MlpModel,
    calib: &LayerCalibration,
    hset: Option<&HessianSet>,
    job: &QuantJob,
    l: usize,
) -> Result<QuantizedLayer> {
    let mut init = scalar_init(model, calib, job, l)?;
    let (Some(hset), Some(cfg)) = (hset, job.lnq.as_ref()) else {
        return Ok(init);
    };
    let quantizer = LnqQuantizer { cfg: cfg.clone() };
    let w = model.layer(l);
    let blocks = hset
        .partition
        .groups()
        .par_iter()
        .enumerate()
        .map(|(k, group)| {
            let states: Vec<ChannelQuantState> = group.iter().map(|&j| init.channels[j].clone()).collect();
            quantizer
                .quantize_block(&hset.hessians[k], &w.select_cols(group), states)
                .map_err(|e| e.context(format!("layer {l} group {k}")))
        })
        .collect::<Result<Vec<_>>>()?;
    for (group, states) in hset.partition.groups().iter().zip(blocks) {
        for (&j, s) in group.iter().zip(states) {
            init.channels[j] = s;
        }
    }
    Ok(init)
}

/// Runs a job on a worker pool of `workers` threads (0 = rayon default).
///
/// `hessians` may come from a cache; they are built when absent.
pub fn run_job(
    model: &MlpModel,
    data: &Dataset,
    calibs: &[LayerCalibration],
    hessians: Option<&[HessianSet]>,
    job: &QuantJob,
    workers: usize,
) -> Result<QuantOutcome> {
    job.validate()?;
    if calibs.len() != model.num_layers() {
        return Err(Error::dims(format!(
            "{} calibrations for {} layers",
            calibs.len(),
            model.num_layers()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_job_inner(model, data, calibs, hessians, job))
}

fn run_job_inner(
    model: &MlpModel,
    data: &Dataset,
    calibs: &[LayerCalibration],
    hessians: Option<&[HessianSet]>,
    job: &QuantJob,
) -> Result<QuantOutcome> {
    let mut timings = Timings::default();
    let t0 = Instant::now();
    let built;
    let hessians = match hessians {
        Some(h) => Some(h),
        None => {
            built = build_hessians(calibs, job)?;
            built.as_deref()
        }
    };
    if let Some(hs) = hessians {
        check_hessians(model, job, hs)?;
    }
    timings.hessian = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let layers = (0..model.num_layers())
        .into_par_iter()
        .map(|l| quantize_layer(model, &calibs[l], hessians.map(|h| &h[l]), job, l))
        .collect::<Result<Vec<_>>>()?;
    timings.quantize = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let quantized = model.with_layers(layers.iter().map(QuantizedLayer::dequantize).collect())?;
    let mut reports = Vec::with_capacity(layers.len());
    for (l, q) in layers.iter().enumerate() {
        let objectives = eval_objectives(model.layer(l), quantized.layer(l), &calibs[l])?;
        let damped = job.method.is_lnq().then(|| {
            q.channels
                .iter()
                .map(|c| c.objective_trace.last().copied().unwrap_or(0.0))
                .sum()
        });
        let traces_monotone = q.channels.iter().all(|c| trace_is_monotone(&c.objective_trace));
        reports.push(LayerReport {
            layer_idx: l,
            objectives,
            damped,
            traces_monotone,
        });
    }
    let report = QuantReport {
        method: job.method,
        bits: job.bits,
        groups: job.groups,
        seed: job.seed,
        quadratic_proxy: reports.iter().map(|r| r.objectives.fisher).sum(),
        layers: reports,
        end_loss_before: end_loss(model, data)?,
        end_loss_after: end_loss(&quantized, data)?,
        timings: Timings {
            eval: t2.elapsed().as_secs_f64(),
            ..timings
        },
    };
    Ok(QuantOutcome {
        model: quantized,
        layers,
        report,
    })
}

/// One row of a sweep table. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub bits: u32,
    pub groups: usize,
    pub seed: u64,
    pub end_loss_before: f64,
    pub end_loss_after: f64,
    pub plain_objective: f64,
    pub guided_objective: f64,
    pub quadratic_proxy: f64,
}

impl SweepRow {
    pub fn from_report(r: &QuantReport) -> Self {
        Self {
            method: r.method,
            bits: r.bits,
            groups: r.groups,
            seed: r.seed,
            end_loss_before: r.end_loss_before,
            end_loss_after: r.end_loss_after,
            plain_objective: r.layers.iter().map(|l| l.objectives.plain).sum(),
            guided_objective: r.layers.iter().map(|l| l.objectives.guided).sum(),
            quadratic_proxy: r.quadratic_proxy,
        }
    }
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "method",
    "bits",
    "groups",
    "seed",
    "end_loss_before",
    "end_loss_after",
    "plain_objective",
    "guided_objective",
    "quadratic_proxy",
];

/// Runs every job against the same model and calibration, in order.
pub fn sweep(
    model: &MlpModel,
    data: &Dataset,
    calibs: &[LayerCalibration],
    jobs: &[QuantJob],
    workers: usize,
) -> Result<Vec<SweepRow>> {
    jobs.iter()
        .map(|job| run_job(model, data, calibs, None, job, workers).map(|o| SweepRow::from_report(&o.report)))
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    wtr.write_record(SWEEP_COLUMNS).map_err(csv_err)?;
    for row in rows {
        wtr.serialize(row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn format_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<11} {:>4} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "method", "bits", "groups", "seed", "loss_before", "loss_after", "plain_obj", "guided_obj"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<11} {:>4} {:>6} {:>6} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
            r.method.as_str(),
            r.bits,
            r.groups,
            r.seed,
            r.end_loss_before,
            r.end_loss_after,
            r.plain_objective,
            r.guided_objective
        );
    }
    s
}

/// The toy model used by the directional experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySetup {
    pub dims: Vec<usize>,
    pub loss: LossKind,
    pub n: usize,
    pub train_steps: usize,
    pub lr: f64,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            dims: vec![8, 16, 16, 4],
            loss: LossKind::SoftmaxCrossEntropy,
            n: 256,
            train_steps: 2000,
            lr: 0.5,
        }
    }
}

/// Trained model, its data and calibration for a seed.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub model: MlpModel,
    pub data: Dataset,
    pub calibs: Vec<LayerCalibration>,
}

impl ToySetup {
    pub fn build(&self, seed: u64) -> Result<ToyInstance> {
        let d0 = self.dims[0];
        let dt = *self.dims.last().unwrap();
        let data = gen_dataset(seed, self.n, d0, dt, self.loss)?;
        let init = MlpModel::init(&self.dims, Activation::Tanh, self.loss, seed)?;
        let model = train(&init, &data, self.train_steps, self.lr)?.model;
        let calibs = calibrate(&model, &data)?;
        Ok(ToyInstance { model, data, calibs })
    }
}
