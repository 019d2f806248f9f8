//! Scalar baselines and initializers: weighted k-means in 1D (k-means++ and
//! Lloyd), an exact dynamic-programming solver, and the diagonal-Fisher
//! weighted k-means quantizer used to initialize LNQ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mix_seed;
use crate::model::LayerCalibration;
use crate::quant::{ChannelQuantState, Codebook, QuantizedLayer};

/// Lloyd iterations used by the per-channel quantizers.
pub const LLOYD_ITERS: usize = 100;

/// Points on the real line with non-negative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoints {
    x: Vec<f64>,
    wgt: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(x: Vec<f64>, wgt: Vec<f64>) -> Result<Self> {
        if x.len() != wgt.len() {
            return Err(Error::dims(format!("{} points, {} weights", x.len(), wgt.len())));
        }
        if x.is_empty() {
            return Err(Error::InvalidSize("no points".into()));
        }
        if x.iter().chain(&wgt).any(|v| !v.is_finite()) || wgt.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        if wgt.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("all point weights are zero".into()));
        }
        Ok(Self { x, wgt })
    }

    pub fn unweighted(x: Vec<f64>) -> Result<Self> {
        let n = x.len();
        Self::new(x, vec![1.0; n])
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn wgt(&self) -> &[f64] {
        &self.wgt
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn distinct_count(&self) -> usize {
        distinct_sorted(&self.x).len()
    }

    /// `Σ wᵢ (xᵢ − c[aᵢ])²`
    pub fn sse(&self, cb: &Codebook, assign: &[u8]) -> f64 {
        self.x
            .iter()
            .zip(&self.wgt)
            .zip(assign)
            .map(|((&x, &w), &q)| {
                let r = x - cb.value(q);
                w * r * r
            })
            .sum()
    }
}

fn distinct_sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Codebook plus assignment with its weighted SSE.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub codebook: Codebook,
    pub assign: Vec<u8>,
    pub objective: f64,
    /// SSE after the initial assignment and after every Lloyd iteration.
    pub trace: Vec<f64>,
}

/// Weighted k-means++ seeding: the first center is drawn with probability
/// proportional to weight, later ones proportional to `weight · D²`.
///
/// If every remaining candidate has zero weighted mass, the draw falls back
/// to plain `D²` so that `m` distinct centers are always produced.
pub fn kmeans_pp_init(pts: &WeightedPoints, m: usize, seed: u64) -> Result<Codebook> {
    let available = pts.distinct_count();
    if m == 0 || m > available {
        return Err(Error::TooFewDistinctPoints {
            requested: m,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pts.len();
    let mut centers = Vec::with_capacity(m);
    let first = sample_index(&mut rng, pts.wgt()).expect("some weight is positive");
    centers.push(pts.x[first]);

    let mut d2: Vec<f64> = pts.x.iter().map(|&x| (x - centers[0]).powi(2)).collect();
    while centers.len() < m {
        let mass: Vec<f64> = (0..n).map(|i| pts.wgt[i] * d2[i]).collect();
        let idx = sample_index(&mut rng, &mass)
            .or_else(|| sample_index(&mut rng, &d2))
            .expect("a distinct point remains");
        let c = pts.x[idx];
        centers.push(c);
        for (d, &x) in d2.iter_mut().zip(&pts.x) {
            *d = d.min((x - c).powi(2));
        }
    }
    Codebook::new(centers)
}

fn sample_index(rng: &mut ChaCha8Rng, mass: &[f64]) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            acc += m;
            last_positive = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last_positive
}

fn nearest_assign(pts: &WeightedPoints, cb: &Codebook) -> Vec<u8> {
    pts.x.iter().map(|&x| cb.nearest(x)).collect()
}

/// Lloyd's algorithm: nearest assignment alternating with weighted-mean
/// center updates. Clusters with zero total weight keep their center.
pub fn lloyd(pts: &WeightedPoints, cb: &Codebook, iters: usize) -> Clustering {
    let mut codebook = cb.clone();
    let mut assign = nearest_assign(pts, &codebook);
    let mut trace = vec![pts.sse(&codebook, &assign)];
    for _ in 0..iters {
        let m = codebook.len();
        let mut wsum = vec![0.0; m];
        let mut xsum = vec![0.0; m];
        for ((&x, &w), &q) in pts.x.iter().zip(&pts.wgt).zip(&assign) {
            wsum[q as usize] += w;
            xsum[q as usize] += w * x;
        }
        let centers: Vec<f64> = (0..m)
            .map(|q| {
                if wsum[q] > 0.0 {
                    xsum[q] / wsum[q]
                } else {
                    codebook.values()[q]
                }
            })
            .collect();
        let next = Codebook::new(centers).expect("finite centers");
        let next_assign = nearest_assign(pts, &next);
        let stalled = next == codebook && next_assign == assign;
        codebook = next;
        assign = next_assign;
        trace.push(pts.sse(&codebook, &assign));
        if stalled {
            break;
        }
    }
    Clustering {
        objective: *trace.last().unwrap(),
        codebook,
        assign,
        trace,
    }
}

/// Globally optimal weighted 1D k-means.
///
/// Optimal clusters are contiguous in sorted order, so a DP over
/// `(clusters used, prefix length)` with stable per-segment costs finds the
/// minimum in `O(m n²)`. Fewer than `m` points pad the codebook by repeating
/// the last center.
pub fn kmeans_1d_exact(pts: &WeightedPoints, m: usize) -> Result<Clustering> {
    if m == 0 || m > crate::quant::MAX_CODEBOOK {
        return Err(Error::InvalidSize(format!("{m} clusters")));
    }
    let n = pts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts.x[a].total_cmp(&pts.x[b]).then(a.cmp(&b)));
    let xs: Vec<f64> = order.iter().map(|&i| pts.x[i]).collect();
    let ws: Vec<f64> = order.iter().map(|&i| pts.wgt[i]).collect();

    // cost[a][b]: weighted SSE of sorted points a..b (exclusive), via weighted Welford
    let mut cost = vec![vec![0.0; n + 1]; n + 1];
    for a in 0..n {
        let (mut wsum, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for b in a..n {
            let w = ws[b];
            if w > 0.0 {
                wsum += w;
                let delta = xs[b] - mean;
                mean += delta * w / wsum;
                m2 += w * delta * (xs[b] - mean);
            }
            cost[a][b + 1] = m2.max(0.0);
        }
    }

    let k_max = m.min(n);
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; n + 1]; k_max + 1];
    let mut split = vec![vec![0usize; n + 1]; k_max + 1];
    best[0][0] = 0.0;
    for k in 1..=k_max {
        for b in k..=n {
            for a in (k - 1)..b {
                let v = best[k - 1][a] + cost[a][b];
                if v < best[k][b] {
                    best[k][b] = v;
                    split[k][b] = a;
                }
            }
        }
    }

    let mut bounds = Vec::with_capacity(k_max);
    let mut b = n;
    for k in (1..=k_max).rev() {
        let a = split[k][b];
        bounds.push((a, b));
        b = a;
    }
    bounds.reverse();

    let mut centers = Vec::with_capacity(m);
    let mut sorted_label = vec![0u8; n];
    for (q, &(a, b)) in bounds.iter().enumerate() {
        let wsum: f64 = ws[a..b].iter().sum();
        let c = if wsum > 0.0 {
            (a..b).map(|i| ws[i] * xs[i]).sum::<f64>() / wsum
        } else {
            xs[a..b].iter().sum::<f64>() / (b - a) as f64
        };
        centers.push(c);
        for l in &mut sorted_label[a..b] {
            *l = q as u8;
        }
    }
    while centers.len() < m {
        centers.push(*centers.last().unwrap());
    }
    let codebook = Codebook::new(centers)?;
    let mut assign = vec![0u8; n];
    for (pos, &orig) in order.iter().enumerate() {
        assign[orig] = sorted_label[pos];
    }
    let objective = pts.sse(&codebook, &assign);
    Ok(Clustering {
        codebook,
        assign,
        objective,
        trace: vec![objective],
    })
}

/// Diagonal of the empirical Fisher for every weight of a layer:
/// `F[i, j] = (1/n) Σₛ (∂ℓₛ/∂Z_{sj} · X_{si})²`.
pub fn diag_fisher(calib: &LayerCalibration) -> Matrix {
    let (n, d_in, d_out) = (calib.n(), calib.d_in(), calib.d_out());
    let mut f = Matrix::zeros(d_in, d_out);
    for s in 0..n {
        let x = calib.x.row(s);
        let g = calib.grad_z.row(s);
        for i in 0..d_in {
            let row = f.row_mut(i);
            for j in 0..d_out {
                let v = g[j] * x[i];
                row[j] += v * v;
            }
        }
    }
    if n > 0 {
        f.scale(1.0 / n as f64)
    } else {
        f
    }
}

/// Weighted k-means for a single column: k-means++ then Lloyd, or the exact
/// distinct values when the column has no more than `m` of them.
pub fn cluster_column(pts: &WeightedPoints, m: usize, seed: u64) -> Result<Clustering> {
    let distinct = distinct_sorted(pts.x());
    if distinct.len() <= m {
        let mut values = distinct;
        while values.len() < m {
            values.push(*values.last().unwrap());
        }
        let codebook = Codebook::new(values)?;
        let assign = nearest_assign(pts, &codebook);
        let objective = pts.sse(&codebook, &assign);
        return Ok(Clustering {
            codebook,
            assign,
            objective,
            trace: vec![objective],
        });
    }
    let init = kmeans_pp_init(pts, m, seed)?;
    Ok(lloyd(pts, &init, LLOYD_ITERS))
}

fn check_bits(bits: u32) -> Result<usize> {
    if bits == 0 || bits > 8 {
        return Err(Error::Config(format!("bits must be in 1..=8, got {bits}")));
    }
    Ok(1usize << bits)
}

/// Per-channel weighted k-means on the diagonal Fisher (SqueezeLLM-style).
///
/// Channels whose Fisher weights are all zero fall back to uniform weights.
pub fn squeezellm_quantize(w: &Matrix, diag_fisher: &Matrix, bits: u32, seed: u64) -> Result<QuantizedLayer> {
    if w.shape() != diag_fisher.shape() {
        return Err(Error::dims(format!(
            "weights {:?} vs Fisher diagonal {:?}",
            w.shape(),
            diag_fisher.shape()
        )));
    }
    let m = check_bits(bits)?;
    let channels = (0..w.cols())
        .into_par_iter()
        .map(|j| {
            let x = w.col(j);
            let mut wgt = diag_fisher.col(j);
            if wgt.iter().all(|&v| v == 0.0) {
                wgt = vec![1.0; x.len()];
            }
            let pts = WeightedPoints::new(x, wgt)?;
            let c = cluster_column(&pts, m, mix_seed(seed, j as u64))?;
            let mut state = ChannelQuantState::new(c.codebook, c.assign)?;
            state.objective_trace = c.trace;
            Ok(state)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedLayer {
        layer_idx: 0,
        bits,
        channels,
    })
}

/// Round-to-nearest on a per-channel unweighted k-means codebook.
pub fn rtn_quantize(w: &Matrix, bits: u32, seed: u64) -> Result<QuantizedLayer> {
    let ones = Matrix::from_fn(w.rows(), w.cols(), |_, _| 1.0);
    squeezellm_quantize(w, &ones, bits, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exhaustive_kmeans_1d;

    fn pts(x: &[f64]) -> WeightedPoints {
        WeightedPoints::unweighted(x.to_vec()).unwrap()
    }

    #[test]
    fn weighted_points_validation() {
        assert!(WeightedPoints::new(vec![1.0], vec![-1.0]).is_err());
        assert!(WeightedPoints::new(vec![1.0, 2.0], vec![0.0, 0.0]).is_err());
        assert!(WeightedPoints::new(vec![1.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn kmeans_pp_uses_all_distinct_points_when_m_matches() {
        let p = pts(&[3.0, 1.0, 2.0, 1.0, 3.0]);
        let cb = kmeans_pp_init(&p, 3, 7).unwrap();
        assert_eq!(cb.values(), &[1.0, 2.0, 3.0]);
        assert!(matches!(
            kmeans_pp_init(&p, 4, 7),
            Err(Error::TooFewDistinctPoints {
                requested: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn kmeans_pp_skips_zero_weight_first_center() {
        let p = WeightedPoints::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        for seed in 0..50 {
            let cb = kmeans_pp_init(&p, 1, seed).unwrap();
            assert_eq!(cb.values(), &[2.0]);
        }
        // more centers than positive-weight points still succeed
        let cb = kmeans_pp_init(&p, 3, 1).unwrap();
        assert_eq!(cb.distinct(), 3);
    }

    #[test]
    fn kmeans_pp_is_deterministic() {
        let p = pts(&[0.1, 0.5, -0.3, 2.0, 1.1, -1.7, 0.9]);
        assert_eq!(kmeans_pp_init(&p, 3, 42).unwrap(), kmeans_pp_init(&p, 3, 42).unwrap());
    }

    #[test]
    fn lloyd_examples() {
        let p = pts(&[0.0, 0.0, 10.0, 10.0]);
        let c = lloyd(&p, &Codebook::new(vec![1.0, 9.0]).unwrap(), 10);
        assert_eq!(c.codebook.values(), &[0.0, 10.0]);
        assert_eq!(c.objective, 0.0);

        let init = Codebook::new(vec![0.0, 10.0]).unwrap();
        let c = lloyd(&p, &init, 5);
        assert_eq!(c.codebook, init);
        assert_eq!(c.trace, vec![0.0, 0.0]);

        let init = Codebook::new(vec![1.0, 9.0]).unwrap();
        let c = lloyd(&p, &init, 0);
        assert_eq!(c.codebook, init);
        assert_eq!(c.assign, vec![0, 0, 1, 1]);
    }

    #[test]
    fn lloyd_keeps_empty_cluster_center() {
        let p = pts(&[0.0, 0.1, 0.2]);
        let c = lloyd(&p, &Codebook::new(vec![0.1, 50.0]).unwrap(), 3);
        assert_eq!(c.codebook.values()[1], 50.0);
    }

    #[test]
    fn exact_kmeans_examples() {
        let p = WeightedPoints::new(vec![1.0, 2.0, 6.0], vec![1.0, 2.0, 1.0]).unwrap();
        let c = kmeans_1d_exact(&p, 1).unwrap();
        let mean = (1.0 + 4.0 + 6.0) / 4.0;
        assert!((c.codebook.values()[0] - mean).abs() < 1e-15);
        let var: f64 = [(1.0, 1.0), (2.0, 2.0), (6.0, 1.0)]
            .iter()
            .map(|(x, w)| w * (x - mean) * (x - mean))
            .sum();
        assert!((c.objective - var).abs() < 1e-12);

        let c = kmeans_1d_exact(&pts(&[0.0, 1.0, 4.0, 5.0]), 2).unwrap();
        assert_eq!(c.codebook.values(), &[0.5, 4.5]);
        assert_eq!(c.assign, vec![0, 0, 1, 1]);
        assert!((c.objective - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_kmeans_pads_when_points_are_scarce() {
        let c = kmeans_1d_exact(&pts(&[2.0, -1.0]), 4).unwrap();
        assert_eq!(c.codebook.len(), 4);
        assert_eq!(c.objective, 0.0);
    }

    #[test]
    fn exact_kmeans_beats_lloyd_and_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(2..=12);
            let m = rng.random_range(1..=4).min(n);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let p = WeightedPoints::new(x, w).unwrap();
            let exact = kmeans_1d_exact(&p, m).unwrap();
            let init = kmeans_pp_init(&p, m, rng.random()).unwrap();
            let l = lloyd(&p, &init, 50);
            assert!(l.objective >= exact.objective - 1e-12);
            if n <= 8 {
                let brute = exhaustive_kmeans_1d(&p, m).unwrap();
                assert!((brute.objective - exact.objective).abs() <= 1e-12 * (1.0 + brute.objective));
            }
        }
    }

    #[test]
    fn squeezellm_uniform_weights_equal_unweighted_kmeans() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
        let a = squeezellm_quantize(&w, &Matrix::from_fn(12, 3, |_, _| 2.5), 2, 5).unwrap();
        let b = rtn_quantize(&w, 2, 5).unwrap();
        for (x, y) in a.channels.iter().zip(&b.channels) {
            assert_eq!(x.assign, y.assign);
            for (u, v) in x.codebook.values().iter().zip(y.codebook.values()) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn squeezellm_zero_weight_points_do_not_count() {
        let w = Matrix::from_rows(&[[0.0], [0.1], [5.0], [100.0]]);
        let f = Matrix::from_rows(&[[1.0], [1.0], [1.0], [0.0]]);
        let q = squeezellm_quantize(&w, &f, 1, 0).unwrap();
        let ch = &q.channels[0];
        let p = WeightedPoints::new(w.col(0), f.col(0)).unwrap();
        let obj = p.sse(&ch.codebook, &ch.assign);
        // the best 2-means of {0, 0.1, 5} with weight on those three only
        assert!((obj - 0.005).abs() < 1e-12, "{obj}");
    }

    #[test]
    fn squeezellm_four_dim_vs_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 1.0;
        for _ in 0..50 {
            let w = Matrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0));
            let f = Matrix::from_fn(4, 1, |_, _| rng.random_range(0.1..1.0));
            let q = squeezellm_quantize(&w, &f, 1, rng.random()).unwrap();
            let p = WeightedPoints::new(w.col(0), f.col(0)).unwrap();
            let got = p.sse(&q.channels[0].codebook, &q.channels[0].assign);
            let best = exhaustive_kmeans_1d(&p, 2).unwrap().objective;
            assert!(got >= best - 1e-12);
            worst = worst.max(got / best.max(1e-300));
        }
        // Lloyd from k-means++ is not always optimal; the ratio stays bounded
        assert!(worst < 10.0, "worst ratio {worst}");
    }

    #[test]
    fn squeezellm_rejects_bad_shapes_and_bits() {
        let w = Matrix::zeros(3, 2);
        assert!(matches!(
            squeezellm_quantize(&w, &Matrix::zeros(2, 2), 2, 0),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(squeezellm_quantize(&w, &w, 9, 0).is_err());
    }

    #[test]
    fn diag_fisher_matches_definition() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]);
        let g = Matrix::from_rows(&[[2.0], [0.5]]);
        let c = LayerCalibration::new(0, x, g).unwrap();
        let f = diag_fisher(&c);
        assert_eq!(f, Matrix::from_rows(&[[(4.0 + 2.25) / 2.0], [(16.0 + 0.25) / 2.0]]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn lloyd_is_monotone(seed in any::<u64>(), n in 2usize..30, m in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                prop_assume!(w.iter().any(|&v| v > 0.0));
                let p = WeightedPoints::new(x, w).unwrap();
                let m = m.min(p.distinct_count());
                let init = kmeans_pp_init(&p, m, seed).unwrap();
                let c = lloyd(&p, &init, 30);
                for pair in c.trace.windows(2) {
                    prop_assert!(pair[1] <= pair[0] + 1e-12 * (1.0 + pair[0]));
                }
            }

            #[test]
            fn exact_kmeans_is_scale_equivariant(seed in any::<u64>(), n in 2usize..10, m in 1usize..4,
                                                  sx in 0.1f64..10.0, sw in 0.1f64..10.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
                let base = kmeans_1d_exact(&WeightedPoints::new(x.clone(), w.clone()).unwrap(), m).unwrap();
                let xs: Vec<f64> = x.iter().map(|v| v * sx).collect();
                let ws: Vec<f64> = w.iter().map(|v| v * sw).collect();
                let scaled = kmeans_1d_exact(&WeightedPoints::new(xs, ws).unwrap(), m).unwrap();
                let expect = base.objective * sx * sx * sw;
                prop_assert!((scaled.objective - expect).abs() <= 1e-9 * (1.0 + expect));
                // assignments agree up to ties; compare induced partitions
                let same_cluster = |a: &[u8], i: usize, j: usize| a[i] == a[j];
                let tie_free = base.objective > 1e-9;
                if tie_free {
                    for i in 0..n {
                        for j in 0..n {
                            prop_assert_eq!(same_cluster(&base.assign, i, j), same_cluster(&scaled.assign, i, j));
                        }
                    }
                }
            }
        }
    }
}
