//! On-disk formats: the binary tensor container, per-directory manifests,
//! checkpoints, caches and the run configuration.
//!
//! Tensor layout: magic `GQTENSR1`, one dtype byte (0 f32, 1 f64, 2 u8), the
//! dimension count as u32 LE, every dimension as u64 LE, then the row-major
//! little-endian payload.
//!
//! Every artifact directory holds a `manifest.json` listing each file with its
//! SHA-256. Files are written to a temporary name and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidedquant::{Method, QuantJob, QuantReport, ToySetup};
use crate::hessian::{ChannelPartition, HessianKind, HessianSet};
use crate::linalg::Matrix;
use crate::lnq::CdEngine;
use crate::model::{Activation, Dataset, LayerCalibration, LossKind, MlpModel};
use crate::quant::QuantizedLayer;

pub const MAGIC: &[u8; 8] = b"GQTENSR1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let count = element_count(&dims).ok_or_else(|| Error::InvalidSize(format!("dims {dims:?} overflow")))?;
        if count != data.len() as u64 {
            return Err(Error::dims(format!(
                "dims {dims:?} hold {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::F64(v), &[r, c]) => Matrix::new(r as usize, c as usize, v.clone()),
            _ => Err(Error::dims(format!(
                "expected a 2-D f64 tensor, found {:?} with dims {:?}",
                self.data.dtype(),
                self.dims
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dt = self.data.dtype();
        let mut out = Vec::with_capacity(13 + 8 * self.dims.len() + self.data.len() * dt.size());
        out.extend_from_slice(MAGIC);
        out.push(dt as u8);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 13 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let dt = DType::from_tag(bytes[8])?;
        let ndim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let header = 13usize
            .checked_add(ndim.checked_mul(8).ok_or_else(|| corrupt("dimension count overflow"))?)
            .ok_or_else(|| corrupt("dimension count overflow"))?;
        if bytes.len() < header {
            return Err(corrupt("truncated header"));
        }
        let dims: Vec<u64> = bytes[13..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = element_count(&dims).ok_or_else(|| corrupt("dimensions overflow"))?;
        let payload = &bytes[header..];
        let expected = count
            .checked_mul(dt.size() as u64)
            .ok_or_else(|| corrupt("payload size overflow"))?;
        if payload.len() as u64 != expected {
            return Err(corrupt(&format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = match dt {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    atomic_write(path, &tensor.encode())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    Tensor::decode(&bytes, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of one artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub meta: serde_json::Value,
    pub files: Vec<ManifestEntry>,
}

/// Accumulates files for one artifact directory and writes the manifest last.
pub struct ArtifactWriter {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn put_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if self.files.iter().any(|f| f.file == name) || name == MANIFEST {
            return Err(Error::Config(format!("artifact {name} written twice")));
        }
        atomic_write(&self.dir.join(name), bytes)?;
        self.files.push(ManifestEntry {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.put_bytes(name, &t.encode())
    }

    pub fn put_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.put_tensor(name, &Tensor::from_matrix(m))
    }

    pub fn finish(self, kind: &str, meta: serde_json::Value) -> Result<Manifest> {
        let manifest = Manifest {
            kind: kind.to_string(),
            meta,
            files: self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        atomic_write(&self.dir.join(MANIFEST), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Reads a manifest and checks its kind.
pub fn read_manifest(dir: &Path, kind: &str) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.kind != kind {
        return Err(Error::CorruptFile {
            path,
            reason: format!("manifest kind {:?}, expected {kind:?}", m.kind),
        });
    }
    Ok(m)
}

/// Reads a file listed in `manifest`, verifying its hash.
pub fn read_verified(dir: &Path, manifest: &Manifest, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let entry = manifest
        .files
        .iter()
        .find(|f| f.file == name)
        .ok_or_else(|| Error::CorruptFile {
            path: path.clone(),
            reason: "not listed in manifest".into(),
        })?;
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::CorruptFile {
            path,
            reason: "content hash does not match manifest".into(),
        });
    }
    Ok(bytes)
}

fn read_matrix(dir: &Path, manifest: &Manifest, name: &str) -> Result<Matrix> {
    let bytes = read_verified(dir, manifest, name)?;
    Tensor::decode(&bytes, &dir.join(name))?.to_matrix()
}

fn meta_field<T: serde::de::DeserializeOwned>(m: &Manifest, key: &str) -> Result<T> {
    let v = m
        .meta
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Config(format!("manifest lacks {key:?}")))?;
    Ok(serde_json::from_value(v)?)
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<Manifest> {
    let mut w = ArtifactWriter::create(dir)?;
    w.put_matrix("inputs.gqt", &data.inputs)?;
    w.put_matrix("targets.gqt", &data.targets)?;
    w.finish("dataset", serde_json::json!({ "seed": data.seed, "task": data.task }))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir, "dataset")?;
    Dataset::new(
        read_matrix(dir, &m, "inputs.gqt")?,
        read_matrix(dir, &m, "targets.gqt")?,
        meta_field(&m, "seed")?,
        meta_field(&m, "task")?,
    )
}

pub fn save_model(dir: &Path, model: &MlpModel, extra: serde_json::Value) -> Result<Manifest> {
    let mut w = ArtifactWriter::create(dir)?;
    for (l, layer) in model.layers().iter().enumerate() {
        w.put_matrix(&format!("layer.{l}.weight"), layer)?;
    }
    w.finish(
        "model",
        serde_json::json!({
            "activation": model.activation,
            "loss": model.loss,
            "num_layers": model.num_layers(),
            "dims": model.dims(),
            "fingerprint": model.fingerprint(),
            "extra": extra,
        }),
    )
}

pub fn load_model(dir: &Path) -> Result<MlpModel> {
    let m = read_manifest(dir, "model")?;
    let n: usize = meta_field(&m, "num_layers")?;
    let activation: Activation = meta_field(&m, "activation")?;
    let loss: LossKind = meta_field(&m, "loss")?;
    let layers = (0..n)
        .map(|l| read_matrix(dir, &m, &format!("layer.{l}.weight")))
        .collect::<Result<Vec<_>>>()?;
    MlpModel::new(layers, activation, loss)
}

pub fn save_calibration(
    dir: &Path,
    calibs: &[LayerCalibration],
    model_hash: &str,
    dataset_seed: u64,
) -> Result<Manifest> {
    let mut w = ArtifactWriter::create(dir)?;
    for c in calibs {
        w.put_matrix(&format!("calib.L{}.x.gqt", c.layer_idx), &c.x)?;
        w.put_matrix(&format!("calib.L{}.gradz.gqt", c.layer_idx), &c.grad_z)?;
    }
    w.finish(
        "calibration",
        serde_json::json!({
            "num_layers": calibs.len(),
            "model_hash": model_hash,
            "dataset_seed": dataset_seed,
        }),
    )
}

pub fn load_calibration(dir: &Path) -> Result<Vec<LayerCalibration>> {
    let m = read_manifest(dir, "calibration")?;
    let n: usize = meta_field(&m, "num_layers")?;
    (0..n)
        .map(|l| {
            LayerCalibration::new(
                l,
                read_matrix(dir, &m, &format!("calib.L{l}.x.gqt"))?,
                read_matrix(dir, &m, &format!("calib.L{l}.gradz.gqt"))?,
            )
        })
        .collect()
}

/// Identifies a set of cached Hessians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianCacheKey {
    pub model_hash: String,
    pub dataset_seed: u64,
    pub kind: HessianKind,
    pub groups: usize,
    pub grad_scale: f64,
    pub damping_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HessianLayerMeta {
    layer_idx: usize,
    groups: Vec<Vec<usize>>,
    lambdas: Vec<f64>,
}

pub fn save_hessians(dir: &Path, key: &HessianCacheKey, sets: &[HessianSet]) -> Result<Manifest> {
    let mut w = ArtifactWriter::create(dir)?;
    let mut layers = Vec::with_capacity(sets.len());
    for s in sets {
        for (k, h) in s.hessians.iter().enumerate() {
            w.put_matrix(&format!("hess.L{}.G{k}.gqt", s.layer_idx), h)?;
        }
        layers.push(HessianLayerMeta {
            layer_idx: s.layer_idx,
            groups: s.partition.groups().to_vec(),
            lambdas: s.lambdas.clone(),
        });
    }
    w.finish("hessians", serde_json::json!({ "key": key, "layers": layers }))
}

/// Loads cached Hessians, or `None` if the directory holds a different key.
pub fn load_hessians(dir: &Path, key: &HessianCacheKey) -> Result<Option<Vec<HessianSet>>> {
    let m = read_manifest(dir, "hessians")?;
    let stored: HessianCacheKey = meta_field(&m, "key")?;
    if &stored != key {
        return Ok(None);
    }
    let layers: Vec<HessianLayerMeta> = meta_field(&m, "layers")?;
    layers
        .into_iter()
        .map(|meta| {
            let d_out = meta.groups.iter().map(Vec::len).sum();
            let partition = ChannelPartition::from_groups(d_out, meta.groups)?;
            let hessians = (0..partition.num_groups())
                .map(|k| read_matrix(dir, &m, &format!("hess.L{}.G{k}.gqt", meta.layer_idx)))
                .collect::<Result<Vec<_>>>()?;
            Ok(HessianSet {
                layer_idx: meta.layer_idx,
                partition,
                hessians,
                lambdas: meta.lambdas,
                grad_scale: key.grad_scale,
                damping_rel: key.damping_rel,
                kind: key.kind,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn save_quantized(dir: &Path, job: &QuantJob, layers: &[QuantizedLayer], report: &QuantReport) -> Result<Manifest> {
    let mut w = ArtifactWriter::create(dir)?;
    let mut traces = Vec::with_capacity(layers.len());
    for q in layers {
        let l = q.layer_idx;
        w.put_matrix(&format!("codebook.L{l}.gqt"), &q.codebook_table())?;
        let assign = Tensor::new(
            vec![q.d_in() as u64, q.d_out() as u64],
            TensorData::U8(q.assignment_table()),
        )?;
        w.put_tensor(&format!("assign.L{l}.gqt"), &assign)?;
        traces.push(q.channels.iter().map(|c| c.objective_trace.clone()).collect::<Vec<_>>());
    }
    let mut trace_text = serde_json::to_string_pretty(&traces)?;
    trace_text.push('\n');
    w.put_bytes("traces.json", trace_text.as_bytes())?;
    let mut report_text = serde_json::to_string_pretty(report)?;
    report_text.push('\n');
    w.put_bytes("report.json", report_text.as_bytes())?;
    w.finish(
        "quantized",
        serde_json::json!({ "job": job, "num_layers": layers.len(), "bits": job.bits }),
    )
}

pub fn load_quantized(dir: &Path) -> Result<(QuantJob, Vec<QuantizedLayer>)> {
    let m = read_manifest(dir, "quantized")?;
    let job: QuantJob = meta_field(&m, "job")?;
    let n: usize = meta_field(&m, "num_layers")?;
    let traces: Vec<Vec<Vec<f64>>> = serde_json::from_slice(&read_verified(dir, &m, "traces.json")?)?;
    let layers = (0..n)
        .map(|l| {
            let cb = read_matrix(dir, &m, &format!("codebook.L{l}.gqt"))?;
            let name = format!("assign.L{l}.gqt");
            let t = Tensor::decode(&read_verified(dir, &m, &name)?, &dir.join(&name))?;
            let (TensorData::U8(assign), &[d_in, _]) = (&t.data, t.dims.as_slice()) else {
                return Err(Error::CorruptFile {
                    path: dir.join(&name),
                    reason: "assignments must be a 2-D u8 tensor".into(),
                });
            };
            let mut q = QuantizedLayer::from_tables(l, job.bits, &cb, assign, d_in as usize)?;
            if let Some(tr) = traces.get(l) {
                for (c, t) in q.channels.iter_mut().zip(tr) {
                    c.objective_trace = t.clone();
                }
            }
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((job, layers))
}

/// Settings for a full pipeline run, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub dims: Vec<usize>,
    pub n: usize,
    pub loss: LossKind,
    pub train_steps: usize,
    pub lr: f64,
    pub method: Method,
    pub bits: u32,
    pub groups: usize,
    pub iterations: usize,
    pub cd_cycles: usize,
    pub grad_scale: f64,
    pub damping_rel: f64,
    pub cd_engine: CdEngine,
    pub lazy_batch_size: usize,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToySetup::default();
        Self {
            seed: 0,
            data_seed: 0,
            dims: toy.dims,
            n: toy.n,
            loss: toy.loss,
            train_steps: toy.train_steps,
            lr: toy.lr,
            method: Method::LnqGuided,
            bits: 2,
            groups: 4,
            iterations: 2,
            cd_cycles: 4,
            grad_scale: crate::hessian::DEFAULT_GRAD_SCALE,
            damping_rel: crate::hessian::DEFAULT_DAMPING_REL,
            cd_engine: CdEngine::LazyBatch,
            lazy_batch_size: 128,
            workers: 1,
            out_dir: PathBuf::from("gq-out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0 || d > 4096) {
            return bad(format!("dims {:?}: need at least two sizes in 1..=4096", self.dims));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {}", self.lr));
        }
        if self.workers > 1024 {
            return bad(format!("workers {}", self.workers));
        }
        if self.groups == 0 || self.groups > *self.dims[1..].iter().max().unwrap() {
            return bad(format!("groups {} exceeds every layer width", self.groups));
        }
        if self.method != Method::LnqGuided && self.groups != 1 {
            return bad(format!("{} uses a single group", self.method));
        }
        self.job().validate()
    }

    pub fn toy(&self) -> ToySetup {
        ToySetup {
            dims: self.dims.clone(),
            loss: self.loss,
            n: self.n,
            train_steps: self.train_steps,
            lr: self.lr,
        }
    }

    pub fn job(&self) -> QuantJob {
        let mut job = QuantJob::new(self.method, self.bits, self.groups, self.seed);
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
