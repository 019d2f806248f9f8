//! Layer-wise non-uniform quantization (LNQ).
//!
//! Each output channel alternates between the closed-form optimal codebook
//! for its current assignment and cyclic coordinate descent over the
//! assignment with the codebook fixed. Both half-steps minimize the same
//! damped objective `(w − ŵ)ᵀ (H + λI) (w − ŵ)`, so every channel's objective
//! trace is non-increasing.
//!
//! Four interchangeable CD engines are provided. They visit coordinates in
//! ascending order and make identical decisions whenever no rounding is an
//! exact tie:
//!
//! * [`CdEngine::Naive`] evaluates the full quadratic for every candidate value.
//! * [`CdEngine::ClosedForm`] rounds the per-coordinate minimizer, one row of `Ŵ` at a time.
//! * [`CdEngine::Precompute`] keeps a correction buffer `B` seeded with the
//!   not-yet-visited terms and updates it incrementally.
//! * [`CdEngine::LazyBatch`] does the same but defers buffer updates outside
//!   the current block of coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, least_squares, quad_form, CholeskyFactor, Matrix};
use crate::quant::{ChannelQuantState, Codebook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdEngine {
    Naive,
    ClosedForm,
    Precompute,
    LazyBatch,
}

impl CdEngine {
    pub const ALL: [CdEngine; 4] = [
        CdEngine::Naive,
        CdEngine::ClosedForm,
        CdEngine::Precompute,
        CdEngine::LazyBatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CdEngine::Naive => "naive",
            CdEngine::ClosedForm => "closed_form",
            CdEngine::Precompute => "precompute",
            CdEngine::LazyBatch => "lazy_batch",
        }
    }
}

impl std::str::FromStr for CdEngine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CdEngine::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown CD engine {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LnqConfig {
    /// Alternations between codebook and assignment updates (`T`).
    pub iterations: usize,
    /// CD cycles per alternation (`K`).
    pub cd_cycles: usize,
    pub bits: u32,
    pub cd_engine: CdEngine,
    /// Block size of the lazy-batch engine, clipped to `d_in`.
    pub lazy_batch_size: usize,
    /// Damping added to `H`, relative to its mean diagonal.
    pub damping_rel: f64,
    pub seed: u64,
}

impl Default for LnqConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            cd_cycles: 4,
            bits: 3,
            cd_engine: CdEngine::LazyBatch,
            lazy_batch_size: 128,
            damping_rel: 1e-7,
            seed: 0,
        }
    }
}

impl LnqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.cd_cycles == 0 {
            return Err(Error::Config("LNQ needs T >= 1 and K >= 1".into()));
        }
        if self.bits == 0 || self.bits > 8 {
            return Err(Error::Config(format!("bits must be in 1..=8, got {}", self.bits)));
        }
        if self.lazy_batch_size == 0 {
            return Err(Error::Config("lazy batch size must be positive".into()));
        }
        if !(self.damping_rel >= 0.0) || !self.damping_rel.is_finite() {
            return Err(Error::Config(format!("damping_rel {}", self.damping_rel)));
        }
        Ok(())
    }

    pub fn codebook_size(&self) -> usize {
        1 << self.bits
    }
}

/// `H + λI` with `λ = damping_rel · mean(diag H)`.
pub fn damped(h: &Matrix, damping_rel: f64) -> (Matrix, f64) {
    let lambda = damping_rel * h.mean_diagonal();
    (h.add_diagonal(lambda), lambda)
}

/// `(w − ŵ)ᵀ H (w − ŵ)`
pub fn channel_objective(h: &Matrix, w: &[f64], w_hat: &[f64]) -> f64 {
    let e: Vec<f64> = w_hat.iter().zip(w).map(|(a, b)| a - b).collect();
    quad_form(h, &e).expect("dimensions checked by caller")
}

/// Optimal codebook for a fixed assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormCodebook {
    /// Values in slot order (not sorted).
    pub values: Vec<f64>,
    /// Slots with no weight assigned; their value is zero.
    pub empty: Vec<bool>,
}

/// Solves `min_c ‖Lᵀ(w − P c)‖²` where `L Lᵀ` is the damped Hessian.
///
/// Empty slots do not enter the solve and get the value zero, the
/// minimum-norm choice for a column of `LᵀP` that is identically zero.
pub fn codebook_closed_form(chol: &CholeskyFactor, w: &[f64], assign: &[u8], m: usize) -> Result<ClosedFormCodebook> {
    let d = chol.dim();
    if w.len() != d || assign.len() != d {
        return Err(Error::dims(format!(
            "closed-form codebook: d_in {d}, w {}, assignment {}",
            w.len(),
            assign.len()
        )));
    }
    let l = &chol.l;
    let mut empty = vec![true; m];
    for &q in assign {
        let q = q as usize;
        if q >= m {
            return Err(Error::InvalidSize(format!("assignment index {q} >= {m}")));
        }
        empty[q] = false;
    }
    // only occupied slots enter the solve, so the system is never wider than d
    let used: Vec<usize> = (0..m).filter(|&q| !empty[q]).collect();
    let mut col_of = vec![usize::MAX; m];
    for (c, &q) in used.iter().enumerate() {
        col_of[q] = c;
    }
    // (LᵀP)[r, q] = Σ_{i : a_i = q} L[i, r]
    let mut a = Matrix::zeros(d, used.len());
    for (i, &q) in assign.iter().enumerate() {
        let c = col_of[q as usize];
        for r in 0..=i {
            a[(r, c)] += l[(i, r)];
        }
    }
    let b = chol.lt_mul_vec(w);
    let solved = least_squares(&a, &b)?;
    let mut values = vec![0.0; m];
    for (&q, v) in used.iter().zip(solved) {
        values[q] = v;
    }
    Ok(ClosedFormCodebook { values, empty })
}

/// Replaces the channel's codebook with the closed-form optimum, re-sorting
/// values and remapping indices so the quantized weights are unchanged by
/// the permutation.
pub fn update_codebook(chol: &CholeskyFactor, w: &[f64], state: &mut ChannelQuantState) -> Result<()> {
    let m = state.codebook.len();
    let solved = codebook_closed_form(chol, w, &state.assign, m)?;
    let (codebook, map) = Codebook::sorted_with_map(solved.values)?;
    for q in state.assign.iter_mut() {
        *q = map[*q as usize];
    }
    state.set_codebook(codebook);
    Ok(())
}

/// One exhaustive CD update of coordinate `i` for a single channel.
///
/// Candidates are scanned in ascending value order and only a strictly
/// smaller objective replaces the incumbent.
pub fn cd_step_naive(h: &Matrix, w: &[f64], state: &mut ChannelQuantState, i: usize) {
    let m = state.codebook.len();
    let mut best_q = 0u8;
    let mut best_f = f64::INFINITY;
    for q in 0..m as u8 {
        state.set(i, q);
        let f = channel_objective(h, w, &state.w_hat);
        if f < best_f {
            best_f = f;
            best_q = q;
        }
    }
    state.set(i, best_q);
}

/// Precomputed matrices for the buffered CD engines.
#[derive(Debug, Clone)]
pub struct CdWorkspace {
    /// `diag(H)⁻¹ H`
    pub h_tilde: Matrix,
    /// Strict upper triangle of `h_tilde`: coefficients of not-yet-visited coordinates.
    pub upper: Matrix,
    /// Strict lower triangle of `h_tilde`: coefficients of already-visited coordinates.
    pub lower: Matrix,
    /// Correction buffer, `d_in × channels`.
    pub b: Matrix,
}

impl CdWorkspace {
    pub fn new(h: &Matrix) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::dims(format!("CD Hessian {:?}", h.shape())));
        }
        let d = h.rows();
        for i in 0..d {
            if !(h[(i, i)] > 0.0) {
                return Err(Error::ZeroDiagonal {
                    index: i,
                    value: h[(i, i)],
                });
            }
        }
        let h_tilde = Matrix::from_fn(d, d, |r, c| h[(r, c)] / h[(r, r)]);
        let upper = Matrix::from_fn(d, d, |r, c| if c > r { h_tilde[(r, c)] } else { 0.0 });
        let lower = Matrix::from_fn(d, d, |r, c| if c < r { h_tilde[(r, c)] } else { 0.0 });
        Ok(Self {
            h_tilde,
            upper,
            lower,
            b: Matrix::zeros(d, 0),
        })
    }

    pub fn dim(&self) -> usize {
        self.h_tilde.rows()
    }
}

fn error_matrix(w: &Matrix, states: &[ChannelQuantState]) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |i, j| states[j].w_hat[i] - w[(i, j)])
}

fn check_block(w: &Matrix, states: &[ChannelQuantState], d: usize) -> Result<()> {
    if w.rows() != d || w.cols() != states.len() || states.iter().any(|s| s.d_in() != d) {
        return Err(Error::dims(format!(
            "CD block: H is {d}x{d}, W is {:?}, {} channel states",
            w.shape(),
            states.len()
        )));
    }
    Ok(())
}

/// Updates row `i` of `Ŵ` for every channel with the rounded coordinate-wise
/// minimizer `W_ij − Σ_{k≠i} (H_ik / H_ii)(Ŵ_kj − W_kj)`.
pub fn cd_step_closed_form(h: &Matrix, w: &Matrix, states: &mut [ChannelQuantState], i: usize) -> Result<()> {
    check_block(w, states, h.rows())?;
    let hii = h[(i, i)];
    if !(hii > 0.0) {
        return Err(Error::ZeroDiagonal { index: i, value: hii });
    }
    let hrow = h.row(i);
    for (j, state) in states.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &hik) in hrow.iter().enumerate() {
            if k != i {
                acc += hik / hii * (state.w_hat[k] - w[(k, j)]);
            }
        }
        let target = w[(i, j)] - acc;
        let q = state.codebook.nearest(target);
        state.set(i, q);
    }
    Ok(())
}

/// Cyclic CD with the precomputed correction buffer.
pub fn cd_cycle_precompute(
    ws: &mut CdWorkspace,
    w: &Matrix,
    states: &mut [ChannelQuantState],
    cycles: usize,
) -> Result<()> {
    let d = ws.dim();
    check_block(w, states, d)?;
    for _ in 0..cycles {
        ws.b = ws.upper.matmul(&error_matrix(w, states))?;
        for i in 0..d {
            let e_row = round_row(ws, w, states, i);
            for r in (i + 1)..d {
                let coef = ws.lower[(r, i)];
                if coef != 0.0 {
                    for (b, e) in ws.b.row_mut(r).iter_mut().zip(&e_row) {
                        *b += coef * e;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Cyclic CD with the correction buffer and lazy block updates.
pub fn cd_cycle_lazy_batch(
    ws: &mut CdWorkspace,
    w: &Matrix,
    states: &mut [ChannelQuantState],
    cycles: usize,
    batch: usize,
) -> Result<()> {
    let d = ws.dim();
    check_block(w, states, d)?;
    if batch == 0 {
        return Err(Error::Config("lazy batch size must be positive".into()));
    }
    let batch = batch.min(d.max(1));
    let c = w.cols();
    for _ in 0..cycles {
        ws.b = ws.upper.matmul(&error_matrix(w, states))?;
        let mut start = 0;
        while start < d {
            let end = (start + batch).min(d);
            let mut block_err = Matrix::zeros(end - start, c);
            for i in start..end {
                let e_row = round_row(ws, w, states, i);
                for r in (i + 1)..end {
                    let coef = ws.lower[(r, i)];
                    if coef != 0.0 {
                        for (b, e) in ws.b.row_mut(r).iter_mut().zip(&e_row) {
                            *b += coef * e;
                        }
                    }
                }
                block_err.row_mut(i - start).copy_from_slice(&e_row);
            }
            // deferred correction for everything after the block
            for r in end..d {
                let coefs = &ws.lower.row(r)[start..end];
                let mut delta = vec![0.0; c];
                for (k, &coef) in coefs.iter().enumerate() {
                    if coef != 0.0 {
                        for (dv, e) in delta.iter_mut().zip(block_err.row(k)) {
                            *dv += coef * e;
                        }
                    }
                }
                for (b, dv) in ws.b.row_mut(r).iter_mut().zip(delta) {
                    *b += dv;
                }
            }
            start = end;
        }
    }
    Ok(())
}

/// Rounds `W_i,: − B_i,:` per channel and returns the new error row `Ŵ_i,: − W_i,:`.
#[inline]
fn round_row(ws: &CdWorkspace, w: &Matrix, states: &mut [ChannelQuantState], i: usize) -> Vec<f64> {
    let b_row = ws.b.row(i);
    let w_row = w.row(i);
    states
        .iter_mut()
        .enumerate()
        .map(|(j, state)| {
            let q = state.codebook.nearest(w_row[j] - b_row[j]);
            state.set(i, q);
            state.w_hat[i] - w_row[j]
        })
        .collect()
}

/// Runs `cycles` CD cycles on a block with the selected engine.
pub fn run_cd(
    h: &Matrix,
    ws: &mut CdWorkspace,
    w: &Matrix,
    states: &mut [ChannelQuantState],
    cycles: usize,
    engine: CdEngine,
    batch: usize,
) -> Result<()> {
    let d = h.rows();
    check_block(w, states, d)?;
    match engine {
        CdEngine::Naive => {
            for _ in 0..cycles {
                for i in 0..d {
                    for (j, state) in states.iter_mut().enumerate() {
                        let col = w.col(j);
                        cd_step_naive(h, &col, state, i);
                    }
                }
            }
            Ok(())
        }
        CdEngine::ClosedForm => {
            for _ in 0..cycles {
                for i in 0..d {
                    cd_step_closed_form(h, w, states, i)?;
                }
            }
            Ok(())
        }
        CdEngine::Precompute => cd_cycle_precompute(ws, w, states, cycles),
        CdEngine::LazyBatch => cd_cycle_lazy_batch(ws, w, states, cycles, batch),
    }
}

/// LNQ on one block of channels sharing the Hessian `h`.
///
/// `h` is damped here by `cfg.damping_rel`; pass zero if it already is.
/// Runs `T` alternations of {closed-form codebook, `K` CD cycles} and a final
/// codebook solve. Each channel's trace records the damped objective at the
/// start and after every half-step.
pub fn lnq_quantize(
    h: &Matrix,
    w_block: &Matrix,
    cfg: &LnqConfig,
    init: Vec<ChannelQuantState>,
) -> Result<Vec<ChannelQuantState>> {
    cfg.validate()?;
    let d = h.rows();
    let mut states = init;
    check_block(w_block, &states, d)?;
    let m = cfg.codebook_size();
    if let Some(s) = states.iter().find(|s| s.codebook.len() != m) {
        return Err(Error::InvalidSize(format!(
            "initial codebook has {} values, expected {m}",
            s.codebook.len()
        )));
    }

    let lambda = cfg.damping_rel * h.mean_diagonal();
    let chol = cholesky(h, lambda)?;
    let hd = h.add_diagonal(lambda);
    let mut ws = CdWorkspace::new(&hd)?;
    let cols: Vec<Vec<f64>> = (0..w_block.cols()).map(|j| w_block.col(j)).collect();

    let record = |states: &mut [ChannelQuantState]| {
        for (s, w) in states.iter_mut().zip(&cols) {
            let f = channel_objective(&hd, w, &s.w_hat);
            s.objective_trace.push(f);
        }
    };

    for s in states.iter_mut() {
        s.objective_trace.clear();
    }
    record(&mut states);
    for _ in 0..cfg.iterations {
        for (s, w) in states.iter_mut().zip(&cols) {
            update_codebook(&chol, w, s)?;
        }
        record(&mut states);
        run_cd(
            &hd,
            &mut ws,
            w_block,
            &mut states,
            cfg.cd_cycles,
            cfg.cd_engine,
            cfg.lazy_batch_size,
        )?;
        record(&mut states);
    }
    for (s, w) in states.iter_mut().zip(&cols) {
        update_codebook(&chol, w, s)?;
    }
    record(&mut states);
    Ok(states)
}
