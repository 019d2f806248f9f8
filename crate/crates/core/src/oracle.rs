//! Brute-force and analytic reference implementations.
//!
//! Everything here is deliberately simple and independent of the fast paths
//! it checks: explicit enumeration, scalar loops, finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, quad_form, Matrix};
use crate::lnq::{channel_objective, update_codebook, LnqConfig};
use crate::model::{calibrate, end_loss, Activation, Dataset, LossKind, MlpModel};
use crate::quant::{ChannelQuantState, Codebook};
use crate::scalar_quant::{Clustering, WeightedPoints};

pub const MAX_ENUMERATION: usize = 1_000_000;
pub const MAX_FISHER_WEIGHTS: usize = 5000;

fn enumeration_size(m: usize, d: usize) -> Option<usize> {
    let mut total = 1usize;
    for _ in 0..d {
        total = total.checked_mul(m)?;
        if total > MAX_ENUMERATION {
            return None;
        }
    }
    Some(total)
}

/// Writes the `k`-th assignment in lexicographic order (coordinate 0 most significant).
fn decode(mut k: usize, m: usize, out: &mut [u8]) {
    for slot in out.iter_mut().rev() {
        *slot = (k % m) as u8;
        k /= m;
    }
}

/// Global optimum of one channel's quantization problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub best_assign: Vec<u8>,
    pub best_codebook: Codebook,
    pub best_objective: f64,
    pub enumerated: usize,
}

/// Enumerates every assignment of `w` to `m` slots, solving the closed-form
/// codebook for each. `h_damped` is used as given.
///
/// Ties keep the lexicographically smallest assignment.
pub fn exhaustive_lnq(h_damped: &Matrix, w: &[f64], m: usize) -> Result<ExhaustiveResult> {
    let d = w.len();
    if h_damped.shape() != (d, d) {
        return Err(Error::dims(format!("H {:?} for {d} weights", h_damped.shape())));
    }
    if m == 0 || m > crate::quant::MAX_CODEBOOK {
        return Err(Error::InvalidSize(format!("codebook size {m}")));
    }
    let total = enumeration_size(m, d)
        .ok_or_else(|| Error::TooLarge(format!("{m}^{d} assignments exceeds {MAX_ENUMERATION}")))?;
    let chol = cholesky(h_damped, 0.0)?;
    let zero_cb = Codebook::new(vec![0.0; m])?;
    let mut assign = vec![0u8; d];
    let mut best: Option<ChannelQuantState> = None;
    let mut best_f = f64::INFINITY;
    for k in 0..total {
        decode(k, m, &mut assign);
        let mut s = ChannelQuantState::new(zero_cb.clone(), assign.clone())?;
        update_codebook(&chol, w, &mut s)?;
        let f = channel_objective(h_damped, w, &s.w_hat);
        if f < best_f {
            best_f = f;
            best = Some(s);
        }
    }
    let best = best.expect("at least one assignment");
    Ok(ExhaustiveResult {
        best_assign: best.assign,
        best_codebook: best.codebook,
        best_objective: best_f,
        enumerated: total,
    })
}

/// Optimal weighted 1D clustering by enumerating every labelling of the points.
pub fn exhaustive_kmeans_1d(pts: &WeightedPoints, m: usize) -> Result<Clustering> {
    let n = pts.len();
    if m == 0 || m > crate::quant::MAX_CODEBOOK {
        return Err(Error::InvalidSize(format!("codebook size {m}")));
    }
    let total = enumeration_size(m, n)
        .ok_or_else(|| Error::TooLarge(format!("{m}^{n} labellings exceeds {MAX_ENUMERATION}")))?;
    let (x, wgt) = (pts.x(), pts.wgt());
    let mut labels = vec![0u8; n];
    let mut best: Option<(f64, Vec<f64>, Vec<u8>)> = None;
    for k in 0..total {
        decode(k, m, &mut labels);
        let mut sw = vec![0.0; m];
        let mut swx = vec![0.0; m];
        let mut first = vec![None; m];
        for ((&l, &xi), &wi) in labels.iter().zip(x).zip(wgt) {
            sw[l as usize] += wi;
            swx[l as usize] += wi * xi;
            first[l as usize].get_or_insert(xi);
        }
        let centers: Vec<f64> = (0..m)
            .map(|q| {
                if sw[q] > 0.0 {
                    swx[q] / sw[q]
                } else {
                    first[q].unwrap_or(x[0])
                }
            })
            .collect();
        let f: f64 = labels
            .iter()
            .zip(x)
            .zip(wgt)
            .map(|((&l, &xi), &wi)| wi * (xi - centers[l as usize]).powi(2))
            .sum();
        if best.as_ref().is_none_or(|b| f < b.0) {
            best = Some((f, centers, labels.clone()));
        }
    }
    let (objective, centers, labels) = best.expect("at least one labelling");
    let (codebook, map) = Codebook::sorted_with_map(centers)?;
    let assign: Vec<u8> = labels.iter().map(|&l| map[l as usize]).collect();
    Ok(Clustering {
        codebook,
        assign,
        objective,
        trace: vec![objective],
    })
}

/// Gap between the second-nearest distinct codebook value and the nearest one.
pub fn rounding_margin(cb: &Codebook, x: f64) -> f64 {
    let v = cb.value(cb.nearest(x));
    let d1 = (x - v).abs();
    let d2 = cb
        .values()
        .iter()
        .filter(|&&c| c != v)
        .map(|c| (x - c).abs())
        .fold(f64::INFINITY, f64::min);
    d2 - d1
}

/// Runs `cycles` sequential closed-form CD cycles on copies of `states` and
/// returns the smallest rounding margin met along the way.
pub fn min_rounding_margin_closed_form(h: &Matrix, w: &Matrix, states: &[ChannelQuantState], cycles: usize) -> f64 {
    let mut states = states.to_vec();
    let mut margin = f64::INFINITY;
    for _ in 0..cycles {
        cd_cycle_with_margin(h, w, &mut states, &mut margin);
    }
    margin
}

fn cd_cycle_with_margin(h: &Matrix, w: &Matrix, states: &mut [ChannelQuantState], margin: &mut f64) {
    let d = h.rows();
    for i in 0..d {
        for (j, s) in states.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..d {
                if k != i {
                    acc += h[(i, k)] / h[(i, i)] * (s.w_hat[k] - w[(k, j)]);
                }
            }
            let t = w[(i, j)] - acc;
            *margin = margin.min(rounding_margin(&s.codebook, t));
            let q = s.codebook.nearest(t);
            s.set(i, q);
        }
    }
}

/// Replays LNQ with the sequential closed-form CD and returns the smallest
/// rounding margin of any assignment decision. `h` is damped by
/// `cfg.damping_rel` as in the solver.
pub fn lnq_min_margin(h: &Matrix, w: &Matrix, cfg: &LnqConfig, init: &[ChannelQuantState]) -> Result<f64> {
    let lambda = cfg.damping_rel * h.mean_diagonal();
    let chol = cholesky(h, lambda)?;
    let hd = h.add_diagonal(lambda);
    let mut states = init.to_vec();
    let mut margin = f64::INFINITY;
    for _ in 0..cfg.iterations {
        for (j, s) in states.iter_mut().enumerate() {
            update_codebook(&chol, &w.col(j), s)?;
        }
        for _ in 0..cfg.cd_cycles {
            cd_cycle_with_margin(&hd, w, &mut states, &mut margin);
        }
    }
    Ok(margin)
}

/// Per-sample forward pass with scalar loops. Returns the input of every
/// layer followed by the final output.
pub fn scalar_forward(model: &MlpModel, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    let nl = model.num_layers();
    for l in 0..nl {
        let w = model.layer(l);
        let input = acts.last().unwrap();
        let mut z = vec![0.0; w.cols()];
        for (j, zj) in z.iter_mut().enumerate() {
            for (i, xi) in input.iter().enumerate() {
                *zj += xi * w[(i, j)];
            }
        }
        if l + 1 < nl {
            match model.activation {
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
            }
        }
        acts.push(z);
    }
    acts
}

fn scalar_loss(kind: LossKind, z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    match kind {
        LossKind::SquaredError => {
            let loss = z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            let grad = z.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect();
            (loss, grad)
        }
        LossKind::SoftmaxCrossEntropy => {
            let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let ysum: f64 = y.iter().sum();
            let mut loss = 0.0;
            let mut grad = vec![0.0; z.len()];
            for k in 0..z.len() {
                let p = exps[k] / total;
                loss -= y[k] * p.ln();
                grad[k] = p * ysum - y[k];
            }
            (loss, grad)
        }
    }
}

/// Summed loss over the samples listed in `idx`, computed with scalar loops.
pub fn scalar_end_loss(model: &MlpModel, data: &Dataset, idx: &[usize]) -> f64 {
    idx.iter()
        .map(|&i| {
            let acts = scalar_forward(model, data.inputs.row(i));
            scalar_loss(model.loss, acts.last().unwrap(), data.targets.row(i)).0
        })
        .sum()
}

/// `∂ℓᵢ/∂W⁽ˡ⁾` for one sample, every layer, by scalar backprop.
fn per_sample_weight_grads(model: &MlpModel, x: &[f64], y: &[f64]) -> Vec<Matrix> {
    let acts = scalar_forward(model, x);
    let nl = model.num_layers();
    let (_, mut delta) = scalar_loss(model.loss, &acts[nl], y);
    let mut grads = vec![Matrix::zeros(0, 0); nl];
    for l in (0..nl).rev() {
        let input = &acts[l];
        grads[l] = Matrix::from_fn(input.len(), delta.len(), |i, j| input[i] * delta[j]);
        if l > 0 {
            let w = model.layer(l);
            let mut up = vec![0.0; input.len()];
            for (i, u) in up.iter_mut().enumerate() {
                for (j, dj) in delta.iter().enumerate() {
                    *u += w[(i, j)] * dj;
                }
                // input is tanh of the previous pre-activation
                *u *= 1.0 - input[i] * input[i];
            }
            delta = up;
        }
    }
    grads
}

/// `n Σ_l Σ_j (w_j − ŵ_j)ᵀ F_j (w_j − ŵ_j)` with every Fisher block built
/// explicitly from per-sample weight gradients.
pub fn full_fisher_quadratic(model: &MlpModel, data: &Dataset, w_hat_all: &[Matrix]) -> Result<f64> {
    let total: usize = model.layers().iter().map(|w| w.rows() * w.cols()).sum();
    if total > MAX_FISHER_WEIGHTS {
        return Err(Error::TooLarge(format!("{total} weights exceeds {MAX_FISHER_WEIGHTS}")));
    }
    if w_hat_all.len() != model.num_layers()
        || w_hat_all
            .iter()
            .zip(model.layers())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::dims("quantized weights do not match the model".to_string()));
    }
    let n = data.len();
    let per_sample: Vec<Vec<Matrix>> = (0..n)
        .map(|i| per_sample_weight_grads(model, data.inputs.row(i), data.targets.row(i)))
        .collect();
    let mut sum = 0.0;
    for (l, (w, w_hat)) in model.layers().iter().zip(w_hat_all).enumerate() {
        let d_in = w.rows();
        for j in 0..w.cols() {
            let mut f = Matrix::zeros(d_in, d_in);
            for g in &per_sample {
                let gj = g[l].col(j);
                for a in 0..d_in {
                    for b in 0..d_in {
                        f[(a, b)] += gj[a] * gj[b] / n as f64;
                    }
                }
            }
            let e: Vec<f64> = (0..d_in).map(|i| w[(i, j)] - w_hat[(i, j)]).collect();
            sum += quad_form(&f, &e)?;
        }
    }
    Ok(n as f64 * sum)
}

/// Central differences of the summed loss against backprop on `samples`
/// randomly chosen weights. Returns the worst relative error, with
/// denominators floored at `1e-3`.
pub fn fd_gradient_check(model: &MlpModel, data: &Dataset, samples: usize, h: f64, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidSize("fd check needs at least one sample".into()));
    }
    let calib = calibrate(model, data)?;
    let grads: Vec<Matrix> = calib.iter().map(|c| c.weight_gradient()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let l = rng.random_range(0..model.num_layers());
        let (r, c) = model.layer(l).shape();
        let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
        let mut plus = model.clone();
        let mut minus = model.clone();
        let mut wp = model.layer(l).clone();
        let mut wm = wp.clone();
        wp[(i, j)] += h;
        wm[(i, j)] -= h;
        plus.set_layer(l, wp)?;
        minus.set_layer(l, wm)?;
        let fd = (end_loss(&plus, data)? - end_loss(&minus, data)?) / (2.0 * h);
        let bp = grads[l][(i, j)];
        let rel = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_dataset;
    use crate::scalar_quant::kmeans_1d_exact;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let a = Matrix::from_fn(d + 3, d, |_, _| rng.random_range(-1.0..1.0));
        a.transpose().matmul(&a).unwrap()
    }

    #[test]
    fn exhaustive_single_weight_is_exact() {
        let h = Matrix::from_rows(&[[2.5]]);
        let r = exhaustive_lnq(&h, &[0.37], 4).unwrap();
        assert!(r.best_objective <= 1e-30);
        assert_eq!(r.enumerated, 4);
        assert!((r.best_codebook.value(r.best_assign[0]) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn exhaustive_identity_matches_exact_kmeans() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.random_range(2..=6);
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = exhaustive_lnq(&Matrix::identity(d), &w, 2).unwrap();
            let dp = kmeans_1d_exact(&WeightedPoints::unweighted(w).unwrap(), 2).unwrap();
            assert!((r.best_objective - dp.objective).abs() <= 1e-10 * (1.0 + dp.objective));
            assert_eq!(r.enumerated, 1 << d);
        }
    }

    #[test]
    fn exhaustive_rejects_large_problems() {
        let h = Matrix::identity(21);
        assert!(matches!(exhaustive_lnq(&h, &[0.0; 21], 2), Err(Error::TooLarge(_))));
        let p = WeightedPoints::unweighted(vec![0.0; 13]).unwrap();
        assert!(matches!(exhaustive_kmeans_1d(&p, 3), Err(Error::TooLarge(_))));
    }

    #[test]
    fn exhaustive_is_a_lower_bound_for_any_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_spd(&mut rng, 5);
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let best = exhaustive_lnq(&h, &w, 2).unwrap().best_objective;
        let chol = cholesky(&h, 0.0).unwrap();
        for _ in 0..20 {
            let a = (0..5).map(|_| rng.random_range(0..2u8)).collect();
            let mut s = ChannelQuantState::new(Codebook::new(vec![0.0, 0.0]).unwrap(), a).unwrap();
            update_codebook(&chol, &w, &mut s).unwrap();
            assert!(channel_objective(&h, &w, &s.w_hat) >= best - 1e-12);
        }
    }

    #[test]
    fn margin_of_midpoint_is_zero() {
        let cb = Codebook::new(vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(rounding_margin(&cb, 0.5), 0.0);
        assert!((rounding_margin(&cb, 0.2) - 0.6).abs() < 1e-15);
        assert_eq!(rounding_margin(&Codebook::new(vec![2.0]).unwrap(), 0.0), f64::INFINITY);
    }

    #[test]
    fn scalar_forward_matches_batched_loss() {
        let data = gen_dataset(5, 16, 8, 4, LossKind::SoftmaxCrossEntropy).unwrap();
        let model = MlpModel::init(&[8, 16, 16, 4], Activation::Tanh, LossKind::SoftmaxCrossEntropy, 5).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let a = scalar_end_loss(&model, &data, &idx);
        let b = end_loss(&model, &data).unwrap();
        assert!((a - b).abs() <= 1e-12 * b.abs());
    }

    #[test]
    fn per_sample_grads_sum_to_batched_gradient() {
        let data = gen_dataset(6, 12, 8, 4, LossKind::SquaredError).unwrap();
        let model = MlpModel::init(&[8, 16, 4], Activation::Tanh, LossKind::SquaredError, 6).unwrap();
        let calib = calibrate(&model, &data).unwrap();
        let mut acc: Vec<Matrix> = model
            .layers()
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        for i in 0..data.len() {
            let g = per_sample_weight_grads(&model, data.inputs.row(i), data.targets.row(i));
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a = a.add(gi).unwrap();
            }
        }
        for (a, c) in acc.iter().zip(&calib) {
            let bp = c.weight_gradient();
            assert!(a.relative_error(&bp, &bp) < 1e-12);
        }
    }

    #[test]
    fn fisher_quadratic_of_exact_weights_is_zero() {
        let data = gen_dataset(7, 8, 8, 4, LossKind::SquaredError).unwrap();
        let model = MlpModel::init(&[8, 16, 4], Activation::Tanh, LossKind::SquaredError, 7).unwrap();
        let w: Vec<Matrix> = model.layers().to_vec();
        assert_eq!(full_fisher_quadratic(&model, &data, &w).unwrap(), 0.0);
    }

    #[test]
    fn fisher_quadratic_doubles_with_duplicated_samples() {
        let data = gen_dataset(8, 10, 8, 4, LossKind::SoftmaxCrossEntropy).unwrap();
        let model = MlpModel::init(&[8, 16, 4], Activation::Tanh, LossKind::SoftmaxCrossEntropy, 8).unwrap();
        let w_hat: Vec<Matrix> = model
            .layers()
            .iter()
            .map(|w| w.map(|v| (v * 4.0).round() / 4.0))
            .collect();
        let single = full_fisher_quadratic(&model, &data, &w_hat).unwrap();
        let idx: Vec<usize> = (0..10).chain(0..10).collect();
        let doubled = full_fisher_quadratic(&model, &data.subset(&idx), &w_hat).unwrap();
        assert!((doubled - 2.0 * single).abs() <= 1e-10 * single);
    }

    #[test]
    fn fd_check_linear_model_is_tight() {
        let data = gen_dataset(9, 32, 8, 4, LossKind::SquaredError).unwrap();
        let model = MlpModel::init(&[8, 4], Activation::Tanh, LossKind::SquaredError, 9).unwrap();
        // central differences are exact on a quadratic, so a wider step only
        // shrinks the rounding error
        let err = fd_gradient_check(&model, &data, 20, 1e-3, 0).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn fd_check_mlp() {
        let data = gen_dataset(10, 64, 8, 4, LossKind::SoftmaxCrossEntropy).unwrap();
        let model = MlpModel::init(&[8, 16, 16, 4], Activation::Tanh, LossKind::SoftmaxCrossEntropy, 10).unwrap();
        let err = fd_gradient_check(&model, &data, 30, 1e-5, 1).unwrap();
        assert!(err <= 1e-5, "{err}");
        // a coarse step is only diagnostic
        let coarse = fd_gradient_check(&model, &data, 5, 1e-1, 1).unwrap();
        assert!(coarse.is_finite());
    }
}
