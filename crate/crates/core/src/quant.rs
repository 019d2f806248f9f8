//! Codebooks, assignments and the per-channel / per-layer quantization state
//! shared by every quantizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAX_CODEBOOK: usize = 256;

/// Scalar codebook, values sorted ascending.
///
/// Repeated values are allowed (degenerate channels with fewer distinct
/// weights than `2^b` pad with copies); lookups always resolve to the lowest
/// index holding a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    values: Vec<f64>,
}

impl Codebook {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() > MAX_CODEBOOK {
            return Err(Error::InvalidSize(format!(
                "codebook of {} values (1..={MAX_CODEBOOK})",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite codebook value".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    /// Sorts `values` and returns, for every input slot, its position in the
    /// sorted codebook.
    pub fn sorted_with_map(values: Vec<f64>) -> Result<(Self, Vec<u8>)> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let mut map = vec![0u8; values.len()];
        for (pos, &slot) in order.iter().enumerate() {
            map[slot] = pos as u8;
        }
        let cb = Self::new(values)?;
        Ok((cb, map))
    }

    /// `2^bits` evenly spaced values covering `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, bits: u32) -> Result<Self> {
        let m = 1usize << bits;
        if m == 1 {
            return Self::new(vec![0.5 * (lo + hi)]);
        }
        let step = (hi - lo) / (m - 1) as f64;
        Self::new((0..m).map(|k| lo + step * k as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn value(&self, idx: u8) -> f64 {
        self.values[idx as usize]
    }

    /// Index of the nearest value. Exact midpoints go to the smaller value.
    #[inline]
    pub fn nearest(&self, x: f64) -> u8 {
        let v = &self.values;
        let hi = v.partition_point(|&c| c < x);
        if hi == 0 {
            return 0;
        }
        let mut lo = hi - 1;
        let pick_hi = hi < v.len() && (v[hi] - x) < (x - v[lo]);
        if pick_hi {
            return hi as u8;
        }
        while lo > 0 && v[lo - 1] == v[lo] {
            lo -= 1;
        }
        lo as u8
    }

    pub fn distinct(&self) -> usize {
        1 + self.values.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

/// Nearest codebook index for `x`; ties resolve to the smaller value.
pub fn round_to_codebook(x: f64, cb: &Codebook) -> u8 {
    cb.nearest(x)
}

/// Quantization state of one output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelQuantState {
    pub codebook: Codebook,
    pub assign: Vec<u8>,
    pub w_hat: Vec<f64>,
    /// Objective value after each recorded half-step.
    pub objective_trace: Vec<f64>,
}

impl ChannelQuantState {
    pub fn new(codebook: Codebook, assign: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = assign.iter().find(|&&q| q as usize >= codebook.len()) {
            return Err(Error::InvalidSize(format!(
                "assignment index {bad} for codebook of {}",
                codebook.len()
            )));
        }
        let w_hat = assign.iter().map(|&q| codebook.value(q)).collect();
        Ok(Self {
            codebook,
            assign,
            w_hat,
            objective_trace: Vec::new(),
        })
    }

    /// Rounds every weight to its nearest codebook value.
    pub fn nearest(codebook: Codebook, w: &[f64]) -> Self {
        let assign: Vec<u8> = w.iter().map(|&x| codebook.nearest(x)).collect();
        Self::new(codebook, assign).expect("nearest indices are valid")
    }

    pub fn d_in(&self) -> usize {
        self.assign.len()
    }

    #[inline]
    pub fn set(&mut self, i: usize, q: u8) {
        self.assign[i] = q;
        self.w_hat[i] = self.codebook.value(q);
    }

    /// Replaces the codebook, keeping the assignment.
    pub fn set_codebook(&mut self, codebook: Codebook) {
        debug_assert_eq!(codebook.len(), self.codebook.len());
        self.codebook = codebook;
        for (w, &q) in self.w_hat.iter_mut().zip(&self.assign) {
            *w = self.codebook.value(q);
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.assign
            .iter()
            .zip(&self.w_hat)
            .all(|(&q, &w)| (q as usize) < self.codebook.len() && self.codebook.value(q) == w)
    }
}

/// All channel states of one layer, in output-channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub layer_idx: usize,
    pub bits: u32,
    pub channels: Vec<ChannelQuantState>,
}

impl QuantizedLayer {
    pub fn d_in(&self) -> usize {
        self.channels.first().map_or(0, ChannelQuantState::d_in)
    }

    pub fn d_out(&self) -> usize {
        self.channels.len()
    }

    /// The dequantized weight matrix `Ŵ` (`d_in × d_out`).
    pub fn dequantize(&self) -> Matrix {
        let mut w = Matrix::zeros(self.d_in(), self.d_out());
        for (j, ch) in self.channels.iter().enumerate() {
            w.set_col(j, &ch.w_hat);
        }
        w
    }

    /// `d_out × m` codebook table.
    pub fn codebook_table(&self) -> Matrix {
        let m = self.channels.first().map_or(0, |c| c.codebook.len());
        Matrix::from_fn(self.d_out(), m, |j, q| self.channels[j].codebook.values()[q])
    }

    /// `d_in × d_out` assignment indices, row-major.
    pub fn assignment_table(&self) -> Vec<u8> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let mut out = vec![0u8; d_in * d_out];
        for (j, ch) in self.channels.iter().enumerate() {
            for (i, &q) in ch.assign.iter().enumerate() {
                out[i * d_out + j] = q;
            }
        }
        out
    }

    /// Rebuilds a layer from a codebook table and assignment indices.
    pub fn from_tables(layer_idx: usize, bits: u32, codebooks: &Matrix, assign: &[u8], d_in: usize) -> Result<Self> {
        let d_out = codebooks.rows();
        if assign.len() != d_in * d_out {
            return Err(Error::dims(format!(
                "{} assignment entries for {d_in}x{d_out}",
                assign.len()
            )));
        }
        let channels = (0..d_out)
            .map(|j| {
                let cb = Codebook::new(codebooks.row(j).to_vec())?;
                let a = (0..d_in).map(|i| assign[i * d_out + j]).collect();
                ChannelQuantState::new(cb, a)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layer_idx,
            bits,
            channels,
        })
    }
}
