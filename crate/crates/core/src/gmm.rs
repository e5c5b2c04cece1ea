//! Diagonal-covariance Gaussian mixture used as the latent base density.
//!
//! Parameterization: weights are `softmax(logits)` and variances are
//! `exp(log_vars)`, so the simplex and positivity constraints hold for any
//! real parameter values. Training additionally keeps every variance above
//! [`VARIANCE_FLOOR`] via [`GmmParams::clamp_variances`].

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    bind_constants, logsumexp, take_var, Parameters, Tape, Tensor, TensorError, Var,
};

pub const VARIANCE_FLOOR: f64 = 1e-4;
const MAX_LLOYD_ITERATIONS: usize = 50;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("dimension mismatch: mixture is {expected}-dimensional, input has {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("need at least {k} distinct rows to seed {k} components, found {distinct}")]
    TooFewRows { k: usize, distinct: usize },
    #[error("invalid mixture: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    /// `1 × K`
    logits: Tensor,
    /// `K × d`
    means: Tensor,
    /// `K × d`
    log_vars: Tensor,
}

impl GmmParams {
    pub fn new(logits: Tensor, means: Tensor, log_vars: Tensor) -> Result<Self, GmmError> {
        let k = means.rows();
        if k == 0 || means.cols() == 0 {
            return Err(GmmError::Invalid("empty mixture".into()));
        }
        if logits.shape() != (1, k) || log_vars.shape() != means.shape() {
            return Err(GmmError::Invalid(format!(
                "inconsistent shapes: logits {:?}, means {:?}, log_vars {:?}",
                logits.shape(),
                means.shape(),
                log_vars.shape()
            )));
        }
        if !(logits.all_finite() && means.all_finite() && log_vars.all_finite()) {
            return Err(GmmError::Invalid("non-finite parameter".into()));
        }
        Ok(GmmParams {
            logits,
            means,
            log_vars,
        })
    }

    /// Builds a mixture from weights, means and variances given in natural units.
    pub fn from_moments(
        weights: &[f64],
        means: &[Vec<f64>],
        variances: &[Vec<f64>],
    ) -> Result<Self, GmmError> {
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(GmmError::Invalid("weights must be positive".into()));
        }
        if variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(GmmError::Invalid("variances must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let logits = Tensor::row_vector(weights.iter().map(|w| (w / total).ln()).collect());
        let means = Tensor::from_rows(means)?;
        let var_rows: Vec<Vec<f64>> = variances
            .iter()
            .map(|r| r.iter().map(|v| v.ln()).collect())
            .collect();
        let log_vars = Tensor::from_rows(&var_rows)?;
        GmmParams::new(logits, means, log_vars)
    }

    /// Single standard normal component in `d` dimensions.
    pub fn standard_normal(d: usize) -> Self {
        GmmParams {
            logits: Tensor::zeros(1, 1),
            means: Tensor::zeros(1, d),
            log_vars: Tensor::zeros(1, d),
        }
    }

    pub fn components(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn log_vars(&self) -> &Tensor {
        &self.log_vars
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn weights(&self) -> Vec<f64> {
        let lse = logsumexp(self.logits.data());
        self.logits.data().iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn variance(&self, k: usize, j: usize) -> f64 {
        self.log_vars.get(k, j).exp()
    }

    /// Raises every log-variance to at least `ln(VARIANCE_FLOOR)`.
    pub fn clamp_variances(&mut self) {
        let floor = VARIANCE_FLOOR.ln();
        for v in self.log_vars.data_mut() {
            if *v < floor {
                *v = floor;
            }
        }
    }

    /// Affine change of one latent coordinate, `z_j ← scale · z_j + shift`,
    /// applied to every component.
    pub fn transform_coordinate(&mut self, j: usize, scale: f64, shift: f64) {
        let log_s2 = (scale * scale).ln();
        for k in 0..self.components() {
            let m = self.means.get(k, j);
            self.means.set(k, j, scale * m + shift);
            let lv = self.log_vars.get(k, j);
            self.log_vars.set(k, j, lv + log_s2);
        }
    }

    pub fn bind(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundGmm, TensorError> {
        Ok(BoundGmm {
            logits: take_var(vars)?,
            means: take_var(vars)?,
            log_vars: take_var(vars)?,
            dim: self.dim(),
        })
    }

    /// Log-density of each row of a `batch × d` tensor, as a `batch × 1` tensor.
    pub fn log_density_batch(&self, z: &Tensor) -> Result<Tensor, GmmError> {
        if z.cols() != self.dim() {
            return Err(GmmError::Dimension {
                expected: self.dim(),
                actual: z.cols(),
            });
        }
        let mut tape = Tape::new();
        let vars = bind_constants(&mut tape, self);
        let bound = self.bind(&mut vars.into_iter())?;
        let zv = tape.constant(z.clone());
        let out = bound.log_density(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Draws one index per component according to the mixture weights.
    fn component_sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.weights()).expect("softmax weights are positive")
    }

    /// Draws one coordinate's marginal, which is itself a 1-D mixture.
    pub fn sample_coordinate<R: Rng + ?Sized>(&self, j: usize, count: usize, rng: &mut R) -> Vec<f64> {
        let picker = self.component_sampler();
        (0..count)
            .map(|_| {
                let k = picker.sample(rng);
                let e: f64 = StandardNormal.sample(rng);
                self.means.get(k, j) + self.variance(k, j).sqrt() * e
            })
            .collect()
    }
}

impl Parameters for GmmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.logits, &self.means, &self.log_vars]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.logits, &mut self.means, &mut self.log_vars]
    }
}

/// Mixture parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundGmm {
    logits: Var,
    means: Var,
    log_vars: Var,
    dim: usize,
}

impl BoundGmm {
    /// `batch × d → batch × 1` log-density.
    ///
    /// The per-component quadratic form is expanded as
    /// `Σ_j z_j²/σ²_kj − 2 z_j μ_kj/σ²_kj + μ_kj²/σ²_kj` so the whole batch
    /// is three matrix products.
    pub fn log_density(&self, tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
        let neg_lv = tape.neg(self.log_vars)?;
        let precision = tape.exp(neg_lv)?;
        let precision_t = tape.transpose(precision)?;

        let z2 = tape.square(z)?;
        let quad_a = tape.matmul(z2, precision_t)?;

        let scaled_means = tape.mul(self.means, precision)?;
        let scaled_means_t = tape.transpose(scaled_means)?;
        let cross = tape.matmul(z, scaled_means_t)?;
        let cross2 = tape.scale(cross, -2.0)?;

        let mu2 = tape.square(self.means)?;
        let mu2p = tape.mul(mu2, precision)?;
        let offset_col = tape.row_sums(mu2p)?;
        let lv_col = tape.row_sums(self.log_vars)?;
        let per_comp_col = tape.add(offset_col, lv_col)?;
        let per_comp_row = tape.transpose(per_comp_col)?;

        let quad = tape.add(quad_a, cross2)?;
        let quad = tape.add_row(quad, per_comp_row)?;
        let half = tape.scale(quad, -0.5)?;
        let with_weights = tape.add_row(half, self.logits)?;
        let lse = tape.logsumexp_rows(with_weights)?;
        let norm = tape.logsumexp_rows(self.logits)?;
        let neg_norm = tape.neg(norm)?;
        let out = tape.add_row(lse, neg_norm)?;
        tape.add_const(out, -0.5 * self.dim as f64 * (2.0 * PI).ln())
    }
}

/// `log Σ_k π_k N(z; μ_k, diag σ²_k)` for a single point.
pub fn gmm_log_density(params: &GmmParams, z: &[f64]) -> Result<f64, GmmError> {
    let out = params.log_density_batch(&Tensor::row_vector(z.to_vec()))?;
    Ok(out.data()[0])
}

/// `count × d` i.i.d. draws.
pub fn gmm_sample<R: Rng + ?Sized>(params: &GmmParams, count: usize, rng: &mut R) -> Tensor {
    let d = params.dim();
    let picker = params.component_sampler();
    let mut out = Tensor::zeros(count, d);
    for r in 0..count {
        let k = picker.sample(rng);
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            out.set(r, j, params.means.get(k, j) + params.variance(k, j).sqrt() * e);
        }
    }
    out
}

/// k-means++ seeding followed by Lloyd iterations. Returns the centers and
/// each row's cluster.
pub fn kmeans<R: Rng + ?Sized>(data: &Tensor, k: usize, rng: &mut R) -> Result<(Vec<Vec<f64>>, Vec<usize>), GmmError> {
    let (n, d) = data.shape();
    if k == 0 {
        return Err(GmmError::Invalid("need at least one component".into()));
    }
    let distinct = count_distinct_rows(data, k);
    if distinct < k {
        return Err(GmmError::TooFewRows { k, distinct });
    }

    let mut centers = kmeans_plus_plus(data, k, rng);
    let mut assign = vec![0usize; n];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        for (r, slot) in assign.iter_mut().enumerate() {
            let best = nearest(data.row(r), &centers).0;
            if best != *slot {
                *slot = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(data.row(r)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok((centers, assign))
}

/// k-means clusters of `data`; their moments become the mixture parameters.
pub fn gmm_init<R: Rng + ?Sized>(data: &Tensor, k: usize, rng: &mut R) -> Result<GmmParams, GmmError> {
    let (n, d) = data.shape();
    let (centers, assign) = kmeans(data, k, rng)?;
    let mut counts = vec![0usize; k];
    let mut scatter = vec![vec![0.0; d]; k];
    for (r, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (j, v) in data.row(r).iter().enumerate() {
            let diff = v - centers[c][j];
            scatter[c][j] += diff * diff;
        }
    }
    let weight_floor = 1.0 / (10.0 * k as f64);
    let weights: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / n as f64).max(weight_floor))
        .collect();
    let variances: Vec<Vec<f64>> = scatter
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            s.iter()
                .map(|v| if c > 0 { (v / c as f64).max(VARIANCE_FLOOR) } else { 1.0 })
                .collect()
        })
        .collect();
    GmmParams::from_moments(&weights, &centers, &variances)
}

/// Grid of `K_L · K_Q` components where component `(l, q)`, stored at row
/// `l K_Q + q`, has a cause block depending only on `l` and an effect
/// coordinate (the last column) depending only on `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorShape {
    pub k_l: usize,
    pub k_q: usize,
}

impl FactorShape {
    pub fn components(&self) -> usize {
        self.k_l * self.k_q
    }

    /// Replaces every tied entry of a `K × d` table with its group mean.
    /// Applied to gradients, this keeps tied parameters equal under any
    /// elementwise optimizer.
    pub fn average(&self, table: &mut Tensor) {
        let d = table.cols();
        let row = |l: usize, q: usize| l * self.k_q + q;
        for l in 0..self.k_l {
            for j in 0..d - 1 {
                let m = (0..self.k_q).map(|q| table.get(row(l, q), j)).sum::<f64>() / self.k_q as f64;
                (0..self.k_q).for_each(|q| table.set(row(l, q), j, m));
            }
        }
        for q in 0..self.k_q {
            let m = (0..self.k_l).map(|l| table.get(row(l, q), d - 1)).sum::<f64>() / self.k_l as f64;
            (0..self.k_l).for_each(|l| table.set(row(l, q), d - 1, m));
        }
    }

    pub fn is_tied(&self, params: &GmmParams) -> bool {
        let check = |t: &Tensor| {
            let mut avg = t.clone();
            self.average(&mut avg);
            avg == *t
        };
        params.components() == self.components() && check(&params.means) && check(&params.log_vars)
    }
}

/// Factored initialization: k-means with `K_L` clusters on the cause
/// columns and `K_Q` clusters on the effect column, combined on the grid
/// with product weights.
pub fn gmm_init_factored<R: Rng + ?Sized>(
    data: &Tensor,
    shape: FactorShape,
    rng: &mut R,
) -> Result<GmmParams, GmmError> {
    let d = data.cols();
    if d < 2 {
        return Err(GmmError::Invalid("factored mixture needs a cause and an effect column".into()));
    }
    let cause = gmm_init(&data.select_cols(&(0..d - 1).collect::<Vec<_>>())?, shape.k_l, rng)?;
    let effect = gmm_init(&data.select_cols(&[d - 1])?, shape.k_q, rng)?;
    let (wl, wq) = (cause.weights(), effect.weights());
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for l in 0..shape.k_l {
        for q in 0..shape.k_q {
            weights.push(wl[l] * wq[q]);
            let mut m = cause.means.row(l).to_vec();
            m.push(effect.means.get(q, 0));
            means.push(m);
            let mut v: Vec<f64> = (0..d - 1).map(|j| cause.variance(l, j)).collect();
            v.push(effect.variance(q, 0));
            vars.push(v);
        }
    }
    GmmParams::from_moments(&weights, &means, &vars)
}

fn count_distinct_rows(data: &Tensor, stop_at: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for r in 0..data.rows() {
        let row = data.row(r);
        if !seen.contains(&row) {
            seen.push(row);
            if seen.len() >= stop_at {
                break;
            }
        }
    }
    seen.len()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(point, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one center")
}

fn kmeans_plus_plus<R: Rng + ?Sized>(data: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = data.rows();
    let mut centers = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|r| sq_dist(data.row(r), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        // Distinct rows were verified, so some point has positive distance.
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (r, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = Some(r);
                break;
            }
            target -= w;
        }
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("distinct rows"));
        let c = data.row(pick).to_vec();
        for (r, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(data.row(r), &c));
        }
        centers.push(c);
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = GmmParams::standard_normal(1);
        let lp = gmm_log_density(&p, &[0.0]).unwrap();
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
        assert!((lp + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn symmetric_pair_matches_direct_two_term_sum() {
        let mu = 1.3;
        let p = GmmParams::from_moments(&[0.5, 0.5], &[vec![-mu], vec![mu]], &[vec![0.7], vec![0.7]]).unwrap();
        let direct = (0.5 * normal_pdf(0.0, -mu, 0.7) + 0.5 * normal_pdf(0.0, mu, 0.7)).ln();
        let got = gmm_log_density(&p, &[0.0]).unwrap();
        assert!((got - direct).abs() < 1e-13);
        // At the midpoint both components contribute equally.
        assert!((got - normal_pdf(0.0, mu, 0.7).ln()).abs() < 1e-13);
    }

    #[test]
    fn quadrature_normalization_in_one_dimension() {
        let p = GmmParams::from_moments(
            &[0.2, 0.5, 0.3],
            &[vec![-3.0], vec![0.5], vec![4.0]],
            &[vec![0.3], vec![1.5], vec![0.05]],
        )
        .unwrap();
        let h = 1e-3;
        let grid: Vec<f64> = (0..=40_000).map(|i| -20.0 + h * i as f64).collect();
        let z = Tensor::column_vector(grid);
        let lp = p.log_density_batch(&z).unwrap();
        let mass: f64 = lp.data().iter().map(|l| l.exp() * h).sum();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn quadrature_normalization_in_two_dimensions() {
        let p = GmmParams::from_moments(
            &[0.6, 0.4],
            &[vec![-1.0, 2.0], vec![1.5, -0.5]],
            &[vec![0.5, 0.8], vec![1.2, 0.3]],
        )
        .unwrap();
        let h = 0.02;
        let steps = 700;
        let mut rows = Vec::with_capacity(steps * steps);
        for i in 0..steps {
            for j in 0..steps {
                rows.push(vec![-7.0 + h * i as f64, -7.0 + h * j as f64]);
            }
        }
        let lp = p.log_density_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let mass: f64 = lp.data().iter().map(|l| l.exp() * h * h).sum();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn far_tails_stay_finite() {
        let p = GmmParams::from_moments(&[0.5, 0.5], &[vec![0.0], vec![1.0]], &[vec![1e-4], vec![1e-4]]).unwrap();
        let lp = gmm_log_density(&p, &[1e3]).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn dimension_mismatch() {
        let p = GmmParams::standard_normal(2);
        assert!(matches!(
            gmm_log_density(&p, &[0.0]),
            Err(GmmError::Dimension { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn near_degenerate_sampling() {
        let p = GmmParams::from_moments(&[1.0], &[vec![3.0, 3.0]], &[vec![1e-6, 1e-6]]).unwrap();
        let s = gmm_sample(&p, 1000, &mut ChaCha8Rng::seed_from_u64(3));
        for j in 0..2 {
            let mean = s.column(j).iter().sum::<f64>() / 1000.0;
            assert!((mean - 3.0).abs() < 1e-2);
        }
        assert_eq!(gmm_sample(&p, 1, &mut ChaCha8Rng::seed_from_u64(4)).shape(), (1, 2));
    }

    #[test]
    fn component_frequencies_within_binomial_bounds() {
        let p = GmmParams::from_moments(&[0.5, 0.5], &[vec![-10.0], vec![10.0]], &[vec![1.0], vec![1.0]]).unwrap();
        let n = 4000;
        let s = gmm_sample(&p, n, &mut ChaCha8Rng::seed_from_u64(5));
        let right = s.data().iter().filter(|&&v| v > 0.0).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((right - n as f64 * 0.5).abs() < 3.0 * sd);
    }

    #[test]
    fn single_cluster_init_uses_column_moments() {
        let data = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0], vec![6.0, 5.0]]).unwrap();
        let p = gmm_init(&data, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((p.means().get(0, 0) - 3.0).abs() < 1e-12);
        assert!((p.variance(0, 0) - 3.5).abs() < 1e-12);
        assert!((p.variance(0, 1) - VARIANCE_FLOOR).abs() < 1e-16);
        assert!((p.weights()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_far_clusters_recover_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        for c in [(-5.0, 0.0), (5.0, 3.0)] {
            for _ in 0..200 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                rows.push(vec![c.0 + 0.1 * a, c.1 + 0.1 * b]);
            }
        }
        let data = Tensor::from_rows(&rows).unwrap();
        let p = gmm_init(&data, 2, &mut rng).unwrap();
        let mut found: Vec<(f64, f64)> = (0..2).map(|k| (p.means().get(k, 0), p.means().get(k, 1))).collect();
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((found[0].0 + 5.0).abs() < 0.1 && found[0].1.abs() < 0.1);
        assert!((found[1].0 - 5.0).abs() < 0.1 && (found[1].1 - 3.0).abs() < 0.1);
    }

    #[test]
    fn duplicated_points_become_exact_means() {
        let pts = [vec![0.0, 1.0], vec![4.0, -2.0], vec![9.0, 9.0]];
        let rows: Vec<Vec<f64>> = pts.iter().flat_map(|p| std::iter::repeat(p.clone()).take(10)).collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let p = gmm_init(&data, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for pt in &pts {
            assert!((0..3).any(|k| p.means().row(k) == pt.as_slice()));
        }
        for w in p.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_distinct_rows() {
        let data = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert!(matches!(
            gmm_init(&data, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(GmmError::TooFewRows { k: 2, distinct: 1 })
        ));
    }

    #[test]
    fn score_has_zero_mean_under_the_model() {
        let p = GmmParams::from_moments(
            &[0.3, 0.7],
            &[vec![-1.0, 0.5], vec![2.0, -1.0]],
            &[vec![0.4, 1.0], vec![0.9, 0.2]],
        )
        .unwrap();
        let count = 20_000;
        let s = gmm_sample(&p, count, &mut ChaCha8Rng::seed_from_u64(8));
        let mut tape = Tape::new();
        let vars = bind_constants(&mut tape, &p);
        let bound = p.bind(&mut vars.into_iter()).unwrap();
        let z = tape.param(s);
        let lp = bound.log_density(&mut tape, z).unwrap();
        let total = tape.sum(lp).unwrap();
        let g = tape.backward(total).unwrap();
        let score = g.get(z).unwrap();
        for j in 0..2 {
            let col = score.column(j);
            let mean = col.iter().sum::<f64>() / count as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64).sqrt();
            assert!(mean.abs() < 5.0 * sd / (count as f64).sqrt(), "coord {j}: {mean}");
        }
    }

    #[test]
    fn factored_init_is_tied_and_averaging_preserves_ties() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let l = (i % 2) as f64;
                let q = ((i / 2) % 2) as f64;
                vec![3.0 * l + 0.1 * r.random::<f64>(), -l + 0.1 * r.random::<f64>(), 5.0 * q + 0.1 * r.random::<f64>()]
            })
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let shape = FactorShape { k_l: 2, k_q: 2 };
        let p = gmm_init_factored(&data, shape, &mut r).unwrap();
        assert!(shape.is_tied(&p));
        let mut ys: Vec<f64> = (0..4).map(|k| p.means().get(k, 2)).collect();
        ys.sort_by(f64::total_cmp);
        assert!((ys[0] - 0.05).abs() < 0.1 && (ys[3] - 5.05).abs() < 0.1);

        let mut g = Tensor::from_vec(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        shape.average(&mut g);
        // rows (0,0),(0,1),(1,0),(1,1): cause block shared by l, effect by q
        assert_eq!(g.row(0)[..2], g.row(1)[..2]);
        assert_eq!(g.row(2)[..2], g.row(3)[..2]);
        assert_eq!(g.get(0, 2), g.get(2, 2));
        assert_eq!(g.get(0, 0), 1.5);
        assert_eq!(g.get(1, 2), 8.0);
    }
}
