//! Layer-wise Hessians: the plain `XᵀX` and the gradient-guided grouped
//! Hessians `H̄ₖ = Xᵀ Diag(sₖ) X`, where `sₖ` averages the squared output
//! gradients over the channels of group `k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::LayerCalibration;

/// Default multiplier applied to output gradients before squaring.
pub const DEFAULT_GRAD_SCALE: f64 = 1e3;
/// Default damping, relative to the mean Hessian diagonal.
pub const DEFAULT_DAMPING_REL: f64 = 1e-7;

/// Partition of the output channels `0..d_out` into `g` groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPartition {
    groups: Vec<Vec<usize>>,
    d_out: usize,
}

impl ChannelPartition {
    /// Consecutive blocks of `d_out / g` channels. When `g` does not divide
    /// `d_out`, the first `d_out % g` groups take one extra channel.
    pub fn consecutive(d_out: usize, g: usize) -> Result<Self> {
        if g == 0 || g > d_out {
            return Err(Error::PartitionMismatch(format!("{g} groups for {d_out} channels")));
        }
        let base = d_out / g;
        let extra = d_out % g;
        let mut groups = Vec::with_capacity(g);
        let mut start = 0;
        for k in 0..g {
            let len = base + usize::from(k < extra);
            groups.push((start..start + len).collect());
            start += len;
        }
        Ok(Self { groups, d_out })
    }

    /// Any explicit partition; groups must be non-empty, disjoint and cover `0..d_out`.
    pub fn from_groups(d_out: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; d_out];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::PartitionMismatch("empty group".into()));
            }
            for &j in g {
                if j >= d_out || seen[j] {
                    return Err(Error::PartitionMismatch(format!(
                        "channel {j} out of range or repeated"
                    )));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::PartitionMismatch("partition does not cover all channels".into()));
        }
        Ok(Self { groups, d_out })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, k: usize) -> &[usize] {
        &self.groups[k]
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Group index of every channel.
    pub fn group_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.d_out];
        for (k, g) in self.groups.iter().enumerate() {
            for &j in g {
                out[j] = k;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianKind {
    Plain,
    Guided,
}

/// Damped Hessians for one layer, one per channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianSet {
    pub layer_idx: usize,
    pub partition: ChannelPartition,
    /// `H̄ₖ + λₖ I`, one `d_in×d_in` matrix per group.
    pub hessians: Vec<Matrix>,
    /// The absolute damping `λₖ` that was added to each group.
    pub lambdas: Vec<f64>,
    pub grad_scale: f64,
    pub damping_rel: f64,
    pub kind: HessianKind,
}

impl HessianSet {
    /// The Hessian governing output channel `j`.
    pub fn for_channel(&self, j: usize) -> &Matrix {
        let k = self
            .partition
            .groups()
            .iter()
            .position(|g| g.contains(&j))
            .expect("channel in partition");
        &self.hessians[k]
    }
}

/// Per-sample squared-gradient averages, one column per group.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredGradAverages {
    pub s: Matrix,
}

/// `Xᵀ Diag(weights) X`, accumulated in sample order and mirrored.
pub fn weighted_gram(x: &Matrix, weights: Option<&[f64]>) -> Matrix {
    let (n, d) = x.shape();
    let mut h = Matrix::zeros(d, d);
    for i in 0..n {
        let s = weights.map_or(1.0, |w| w[i]);
        if s == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..d {
            let sa = s * row[a];
            if sa == 0.0 {
                continue;
            }
            let hrow = h.row_mut(a);
            for b in a..d {
                hrow[b] += sa * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    h
}

fn damp(h: Matrix, damping_rel: f64) -> (Matrix, f64) {
    let lambda = damping_rel * h.mean_diagonal();
    (h.add_diagonal(lambda), lambda)
}

fn check_damping(damping_rel: f64) -> Result<()> {
    if !(damping_rel >= 0.0) || !damping_rel.is_finite() {
        return Err(Error::Config(format!("damping_rel {damping_rel}")));
    }
    Ok(())
}

/// `H = XᵀX + λI` with `λ = damping_rel · mean(diag(XᵀX))`.
pub fn plain_hessian(calib: &LayerCalibration, damping_rel: f64) -> Result<HessianSet> {
    check_damping(damping_rel)?;
    if calib.n() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let (h, lambda) = damp(weighted_gram(&calib.x, None), damping_rel);
    Ok(HessianSet {
        layer_idx: calib.layer_idx,
        partition: ChannelPartition::consecutive(calib.d_out(), 1)?,
        hessians: vec![h],
        lambdas: vec![lambda],
        grad_scale: 1.0,
        damping_rel,
        kind: HessianKind::Plain,
    })
}

/// Entry `(i, k)` is `(1/|Jₖ|) Σ_{j∈Jₖ} (grad_scale · ∂ℓ/∂Z_{ij})²`.
pub fn squared_grad_averages(
    calib: &LayerCalibration,
    partition: &ChannelPartition,
    grad_scale: f64,
) -> Result<SquaredGradAverages> {
    if partition.d_out() != calib.d_out() {
        return Err(Error::PartitionMismatch(format!(
            "partition over {} channels, layer has {}",
            partition.d_out(),
            calib.d_out()
        )));
    }
    let n = calib.n();
    let g = partition.num_groups();
    let mut s = Matrix::zeros(n, g);
    for i in 0..n {
        let row = calib.grad_z.row(i);
        for (k, group) in partition.groups().iter().enumerate() {
            let total: f64 = group
                .iter()
                .map(|&j| {
                    let v = grad_scale * row[j];
                    v * v
                })
                .sum();
            s[(i, k)] = total / group.len() as f64;
        }
    }
    Ok(SquaredGradAverages { s })
}

/// `H̄ₖ = Xᵀ Diag(sₖ) X + λₖ I` for every group, built in parallel.
pub fn guided_hessians(
    calib: &LayerCalibration,
    partition: &ChannelPartition,
    grad_scale: f64,
    damping_rel: f64,
) -> Result<HessianSet> {
    check_damping(damping_rel)?;
    if calib.n() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let avg = squared_grad_averages(calib, partition, grad_scale)?;
    let built: Vec<(Matrix, f64)> = (0..partition.num_groups())
        .into_par_iter()
        .map(|k| {
            let s = avg.s.col(k);
            damp(weighted_gram(&calib.x, Some(&s)), damping_rel)
        })
        .collect();
    let (hessians, lambdas) = built.into_iter().unzip();
    Ok(HessianSet {
        layer_idx: calib.layer_idx,
        partition: partition.clone(),
        hessians,
        lambdas,
        grad_scale,
        damping_rel,
        kind: HessianKind::Guided,
    })
}

/// Explicit Fisher block of output channel `j`,
/// `F_j = (1/n) Σᵢ (∂ℓᵢ/∂w_j)(∂ℓᵢ/∂w_j)ᵀ` with `∂ℓᵢ/∂w_j = (∂ℓᵢ/∂Z_{ij}) Xᵢ,:ᵀ`.
///
/// Built from per-sample outer products; `n` is the normalizer, normally the
/// number of calibration samples.
pub fn fisher_block_oracle(calib: &LayerCalibration, j: usize, n: usize) -> Matrix {
    let d = calib.d_in();
    let mut f = Matrix::zeros(d, d);
    for i in 0..calib.n() {
        let g: Vec<f64> = calib.x.row(i).iter().map(|&x| calib.grad_z[(i, j)] * x).collect();
        for a in 0..d {
            for b in 0..d {
                f[(a, b)] += g[a] * g[b];
            }
        }
    }
    f.scale(1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_calib(seed: u64, n: usize, d_in: usize, d_out: usize) -> LayerCalibration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, d_in, |_, _| rng.random_range(-1.0..1.0));
        let g = Matrix::from_fn(n, d_out, |_, _| rng.random_range(-1.0..1.0));
        LayerCalibration::new(0, x, g).unwrap()
    }

    #[test]
    fn partition_consecutive() {
        let p = ChannelPartition::consecutive(8, 4).unwrap();
        assert_eq!(p.groups(), &[vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        let p = ChannelPartition::consecutive(7, 3).unwrap();
        assert_eq!(p.groups(), &[vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
        assert!(ChannelPartition::consecutive(3, 4).is_err());
        assert!(ChannelPartition::consecutive(3, 0).is_err());
        assert!(ChannelPartition::from_groups(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(ChannelPartition::from_groups(3, vec![vec![0, 1]]).is_err());
    }

    #[test]
    fn plain_hessian_examples() {
        let c = LayerCalibration::new(0, Matrix::identity(2), Matrix::zeros(2, 1)).unwrap();
        assert_eq!(plain_hessian(&c, 0.0).unwrap().hessians[0], Matrix::identity(2));
        let damped = plain_hessian(&c, 1e-2).unwrap();
        assert_eq!(damped.hessians[0].diag(), vec![1.01, 1.01]);
        assert_eq!(damped.kind, HessianKind::Plain);

        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let c = LayerCalibration::new(0, x, Matrix::zeros(2, 3)).unwrap();
        let h = plain_hessian(&c, 0.0).unwrap();
        assert_eq!(h.hessians[0], Matrix::from_rows(&[[10.0, 14.0], [14.0, 20.0]]));
        assert_eq!(h.partition.num_groups(), 1);
    }

    #[test]
    fn empty_calibration_is_rejected() {
        let c = LayerCalibration::new(0, Matrix::zeros(0, 2), Matrix::zeros(0, 2)).unwrap();
        assert!(matches!(plain_hessian(&c, 0.0), Err(Error::EmptyCalibration)));
        let p = ChannelPartition::consecutive(2, 1).unwrap();
        assert!(matches!(
            guided_hessians(&c, &p, 1.0, 0.0),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn squared_grad_average_examples() {
        let c = LayerCalibration::new(0, Matrix::zeros(2, 1), Matrix::from_fn(2, 4, |_, _| 1.0)).unwrap();
        for g in [1, 2, 4] {
            let p = ChannelPartition::consecutive(4, g).unwrap();
            let s = squared_grad_averages(&c, &p, 1.0).unwrap();
            assert!(s.s.as_slice().iter().all(|&v| v == 1.0));
        }
        let c = LayerCalibration::new(0, Matrix::zeros(1, 1), Matrix::from_rows(&[[1.0, 3.0]])).unwrap();
        let p = ChannelPartition::consecutive(2, 1).unwrap();
        assert_eq!(squared_grad_averages(&c, &p, 1.0).unwrap().s[(0, 0)], 5.0);

        let c = random_calib(1, 5, 2, 6);
        let p = ChannelPartition::consecutive(6, 3).unwrap();
        let a = squared_grad_averages(&c, &p, 1.0).unwrap().s;
        let b = squared_grad_averages(&c, &p, 1e3).unwrap().s;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((y - 1e6 * x).abs() <= 1e-12 * y.abs());
        }
        let wrong = ChannelPartition::consecutive(5, 1).unwrap();
        assert!(matches!(
            squared_grad_averages(&c, &wrong, 1.0),
            Err(Error::PartitionMismatch(_))
        ));
    }

    #[test]
    fn uniform_gradients_reduce_to_plain() {
        let mut c = random_calib(2, 20, 5, 6);
        c.grad_z = Matrix::from_fn(20, 6, |_, _| 1.0);
        let plain = plain_hessian(&c, 1e-3).unwrap();
        for g in [1, 2, 3, 6] {
            let p = ChannelPartition::consecutive(6, g).unwrap();
            let guided = guided_hessians(&c, &p, 1.0, 1e-3).unwrap();
            assert_eq!(guided.kind, HessianKind::Guided);
            for h in &guided.hessians {
                assert!(h.relative_error(&plain.hessians[0], &plain.hessians[0]) <= 1e-10);
            }
        }
    }

    #[test]
    fn two_by_two_hand_expansion() {
        // X = [[1,2],[3,-1]], gradZ = [[2],[0.5]] → s = (4, 0.25)
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]);
        let g = Matrix::from_rows(&[[2.0], [0.5]]);
        let c = LayerCalibration::new(0, x, g).unwrap();
        let p = ChannelPartition::consecutive(1, 1).unwrap();
        let h = guided_hessians(&c, &p, 1.0, 0.0).unwrap();
        // 4*[1,2]ᵀ[1,2] + 0.25*[3,-1]ᵀ[3,-1]
        let expected = Matrix::from_rows(&[[4.0 + 2.25, 8.0 - 0.75], [8.0 - 0.75, 16.0 + 0.25]]);
        assert!(h.hessians[0].relative_error(&expected, &expected) < 1e-12);
    }

    #[test]
    fn singleton_groups_match_fisher_blocks() {
        let c = random_calib(3, 30, 4, 5);
        let p = ChannelPartition::consecutive(5, 5).unwrap();
        let h = guided_hessians(&c, &p, 1.0, 0.0).unwrap();
        for j in 0..5 {
            let nf = fisher_block_oracle(&c, j, c.n()).scale(c.n() as f64);
            assert!(h.hessians[j].relative_error(&nf, &nf) <= 1e-12);
        }
    }

    #[test]
    fn fisher_block_edge_cases() {
        let c = random_calib(4, 1, 3, 2);
        let f = fisher_block_oracle(&c, 1, 1);
        let g: Vec<f64> = c.x.row(0).iter().map(|x| x * c.grad_z[(0, 1)]).collect();
        let outer = Matrix::from_fn(3, 3, |a, b| g[a] * g[b]);
        assert_eq!(f, outer);

        let mut c = random_calib(5, 6, 3, 2);
        for i in 0..6 {
            c.grad_z[(i, 0)] = 0.0;
        }
        assert_eq!(fisher_block_oracle(&c, 0, 6).max_abs(), 0.0);
    }

    #[test]
    fn grouped_hessian_is_average_of_channel_hessians() {
        let c = random_calib(6, 25, 4, 6);
        let p = ChannelPartition::consecutive(6, 2).unwrap();
        let h = guided_hessians(&c, &p, 1.0, 0.0).unwrap();
        for (k, group) in p.groups().iter().enumerate() {
            let mut avg = Matrix::zeros(4, 4);
            for &j in group {
                avg = avg.add(&fisher_block_oracle(&c, j, 1)).unwrap();
            }
            let avg = avg.scale(1.0 / group.len() as f64);
            assert!(h.hessians[k].relative_error(&avg, &avg) <= 1e-10);
        }
    }

    mod props {
        use super::*;
        use crate::linalg::{cholesky, quad_form};
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn guided_hessians_are_symmetric_psd(seed in any::<u64>(), n in 1usize..20, d in 1usize..8, g in 1usize..4) {
                let c = random_calib(seed, n, d, 4);
                let p = ChannelPartition::consecutive(4, g).unwrap();
                let set = guided_hessians(&c, &p, 1.0, 0.0).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
                for h in &set.hessians {
                    prop_assert!(h.relative_asymmetry() <= 1e-10);
                    prop_assert!(h.diag().iter().all(|&v| v >= 0.0));
                    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    prop_assert!(quad_form(h, &v).unwrap() >= -1e-10);
                    let tiny = 1e-9 * (1.0 + h.mean_diagonal());
                    prop_assert!(cholesky(h, tiny).is_ok());
                }
            }
        }
    }
}
