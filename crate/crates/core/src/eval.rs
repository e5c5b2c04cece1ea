//! Error metrics against the ground-truth interventional mean, mutual
//! information, and the multi-seed sweep driver.

use thiserror::Error;

use crate::autodiff::Tensor;

mod sweep;

pub use sweep::{
    read_ledger, run_cell, run_sweep, write_plot_data, CellFailure, CellSpec, EvalReport, SweepConfig, SweepError,
    SweepOutcome, LEDGER_HEADER,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("no points to evaluate")]
    Empty,
    #[error("degenerate kernel bandwidth in column {column}")]
    Bandwidth { column: usize },
    #[error("weights must be non-negative with a positive sum")]
    Weights,
}

/// `√(Σ w_i (θ̂_i − θ*_i)² / Σ w_i)`, unweighted when `weights` is `None`.
pub fn rmse_do(estimates: &[f64], truth: &[f64], weights: Option<&[f64]>) -> Result<f64, EvalError> {
    if estimates.len() != truth.len() {
        return Err(EvalError::Length(estimates.len(), truth.len()));
    }
    if estimates.is_empty() {
        return Err(EvalError::Empty);
    }
    let uniform = vec![1.0; estimates.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != estimates.len() {
        return Err(EvalError::Length(w.len(), estimates.len()));
    }
    let total: f64 = w.iter().sum();
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) || !(total > 0.0) {
        return Err(EvalError::Weights);
    }
    let sq: f64 = estimates
        .iter()
        .zip(truth)
        .zip(w)
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum();
    Ok((sq / total).sqrt())
}

/// Nadaraya–Watson regression with a product Gaussian kernel.
#[derive(Clone, Debug)]
pub struct KernelRegression {
    x: Tensor,
    y: Vec<f64>,
    bandwidth: Vec<f64>,
}

/// Per-column `σ_j · (4 / ((d + 2) N))^{1/(d+4)}`.
pub fn silverman_bandwidth(x: &Tensor) -> Vec<f64> {
    let (n, d) = x.shape();
    let factor = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    (0..d)
        .map(|j| {
            let col = x.column(j);
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
            var.sqrt() * factor
        })
        .collect()
}

/// Kernel estimate at one point with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl KernelRegression {
    /// Uses Silverman's rule unless `bandwidth` is given.
    pub fn new(x: Tensor, y: Vec<f64>, bandwidth: Option<Vec<f64>>) -> Result<Self, EvalError> {
        if x.rows() != y.len() {
            return Err(EvalError::Length(x.rows(), y.len()));
        }
        if y.is_empty() {
            return Err(EvalError::Empty);
        }
        let bandwidth = bandwidth.unwrap_or_else(|| silverman_bandwidth(&x));
        if bandwidth.len() != x.cols() {
            return Err(EvalError::Length(bandwidth.len(), x.cols()));
        }
        if let Some(column) = bandwidth.iter().position(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(EvalError::Bandwidth { column });
        }
        Ok(KernelRegression { x, y, bandwidth })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    /// `Ê[Y | x]` and `√(Σ w_i² (y_i − Ê)²)` with normalized weights `w`.
    pub fn predict(&self, point: &[f64]) -> KernelEstimate {
        let logk: Vec<f64> = (0..self.x.rows())
            .map(|r| {
                -0.5 * self
                    .x
                    .row(r)
                    .iter()
                    .zip(point)
                    .zip(&self.bandwidth)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let top = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logk.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mean = w.iter().zip(&self.y).map(|(w, y)| w * y).sum::<f64>() / total;
        let var = w
            .iter()
            .zip(&self.y)
            .map(|(w, y)| (w / total).powi(2) * (y - mean).powi(2))
            .sum::<f64>();
        KernelEstimate {
            mean,
            stderr: var.sqrt(),
        }
    }

    pub fn predict_many(&self, points: &Tensor) -> Vec<KernelEstimate> {
        use rayon::prelude::*;
        (0..points.rows())
            .into_par_iter()
            .map(|r| self.predict(points.row(r)))
            .collect()
    }
}

/// RMSE of the conditional mean `Ê[Y | x_i]` (kernel regression over all of
/// `data`) against `truth`, at every observed `x_i`.
pub fn rmse_naive(data: &Tensor, truth: &[f64], bandwidth: Option<Vec<f64>>) -> Result<f64, EvalError> {
    let n = data.cols() - 1;
    let x = data
        .select_cols(&(0..n).collect::<Vec<_>>())
        .expect("cause columns exist");
    let kr = KernelRegression::new(x.clone(), data.column(n), bandwidth)?;
    let est: Vec<f64> = kr.predict_many(&x).into_iter().map(|e| e.mean).collect();
    rmse_do(&est, truth, None)
}

/// `Σ p(l,q) log(p(l,q) / (p(l) p(q)))` in nats, with `0 log 0 = 0`.
/// Rows are `l`, columns `q`; the table is normalized first.
pub fn mutual_information(table: &[Vec<f64>]) -> f64 {
    let total: f64 = table.iter().flatten().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let cols = table.first().map_or(0, Vec::len);
    let pl: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let pq: Vec<f64> = (0..cols)
        .map(|q| table.iter().map(|r| r[q]).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for (l, row) in table.iter().enumerate() {
        for (q, &v) in row.iter().enumerate() {
            let p = v / total;
            if p > 0.0 {
                mi += p * (p / (pl[l] * pq[q])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Plug-in mutual information of paired discrete labels.
pub fn mutual_information_labels(labels: &[(usize, usize)]) -> f64 {
    let kl = labels.iter().map(|p| p.0 + 1).max().unwrap_or(0);
    let kq = labels.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    let mut table = vec![vec![0.0; kq]; kl];
    for &(l, q) in labels {
        table[l][q] += 1.0;
    }
    mutual_information(&table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_hand_cases() {
        assert_eq!(rmse_do(&[1.0, 2.0], &[1.0, 2.0], None).unwrap(), 0.0);
        assert!((rmse_do(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0], None).unwrap() - 0.5).abs() < 1e-15);
        let r = rmse_do(&[2.0, 2.0, 5.0], &[1.0, 2.0, 3.0], None).unwrap();
        assert!((r - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let r = rmse_do(&[1.0, 2.0, 5.0], &[1.0, 2.0, 3.0], None).unwrap();
        assert!((r - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(matches!(rmse_do(&[1.0], &[1.0, 2.0], None), Err(EvalError::Length(1, 2))));
        let w = rmse_do(&[0.0, 3.0], &[0.0, 0.0], Some(&[3.0, 1.0])).unwrap();
        assert!((w - 1.5).abs() < 1e-15);
    }

    #[test]
    fn mi_reference_values() {
        assert_eq!(mutual_information(&[vec![0.25, 0.25], vec![0.25, 0.25]]), 0.0);
        assert!((mutual_information(&[vec![0.5, 0.0], vec![0.0, 0.5]]) - 2f64.ln()).abs() < 1e-15);
        // 0.8 ln 1.6 + 0.2 ln 0.4
        let direct = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let mi = mutual_information(&[vec![0.4, 0.1], vec![0.1, 0.4]]);
        assert!((mi - direct).abs() < 1e-15);
        assert!((mi - 0.1927).abs() < 1e-4);
    }

    #[test]
    fn label_mi_matches_table() {
        let labels = [(0, 0), (0, 0), (1, 1), (1, 1), (0, 1), (1, 0), (0, 0), (1, 1)];
        let table = vec![vec![3.0, 1.0], vec![1.0, 3.0]];
        assert_eq!(mutual_information_labels(&labels), mutual_information(&table));
    }

    #[test]
    fn kernel_regression_reproduces_constant_and_errors_on_zero_spread() {
        let x = Tensor::column_vector(vec![0.0, 1.0, 2.0, 3.0]);
        let kr = KernelRegression::new(x.clone(), vec![2.5; 4], None).unwrap();
        let e = kr.predict(&[1.3]);
        assert!((e.mean - 2.5).abs() < 1e-15);
        assert!(e.stderr.abs() < 1e-15);
        let flat = Tensor::column_vector(vec![1.0; 4]);
        assert!(matches!(
            KernelRegression::new(flat, vec![0.0; 4], None),
            Err(EvalError::Bandwidth { column: 0 })
        ));
    }

    #[test]
    fn naive_rmse_vanishes_when_truth_is_the_kernel_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                vec![x, 2.0 * x + rng.random_range(-0.1..0.1)]
            })
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let x = data.select_cols(&[0]).unwrap();
        let kr = KernelRegression::new(x.clone(), data.column(1), None).unwrap();
        let truth: Vec<f64> = kr.predict_many(&x).into_iter().map(|e| e.mean).collect();
        assert_eq!(rmse_naive(&data, &truth, None).unwrap(), 0.0);
    }

    #[test]
    fn naive_rmse_on_unconfounded_linear_data_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..1.0);
                vec![x, 1.5 * x + 0.1 * (rng.random::<f64>() - 0.5)]
            })
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let truth: Vec<f64> = rows.iter().map(|r| 1.5 * r[0]).collect();
        // Interior points only: the kernel estimate is biased at the edges.
        let interior: Vec<usize> = (0..rows.len()).filter(|&i| (0.1..0.9).contains(&rows[i][0])).collect();
        let kr = KernelRegression::new(data.select_cols(&[0]).unwrap(), data.column(1), None).unwrap();
        let est: Vec<f64> = interior.iter().map(|&i| kr.predict(&rows[i][..1]).mean).collect();
        let t: Vec<f64> = interior.iter().map(|&i| truth[i]).collect();
        assert!(rmse_do(&est, &t, None).unwrap() < 0.01);
    }

    #[test]
    fn confounded_slope_bias_shows_in_naive_rmse() {
        // Observed slope 1.5 against a causal slope of 1: the naive error is
        // 0.5 (x - x̄), whose RMS is 0.5 std(x).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..4000).map(|_| rng.random_range(0.0..1.0)).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .map(|&x| vec![x, 1.5 * x - 0.5 * mx + 0.01 * (rng.random::<f64>() - 0.5)])
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let truth = xs.clone();
        let r = rmse_naive(&data, &truth, Some(vec![0.01])).unwrap();
        assert!((r - 0.5 * sd).abs() < 0.01 * sd + 0.002, "{r} vs {}", 0.5 * sd);
    }

    proptest! {
        #[test]
        fn mi_is_nonnegative(cells in proptest::collection::vec(0.0f64..1.0, 9)) {
            let table: Vec<Vec<f64>> = cells.chunks(3).map(|c| c.to_vec()).collect();
            prop_assert!(mutual_information(&table) >= 0.0);
        }

        #[test]
        fn product_tables_have_zero_mi(
            a in proptest::collection::vec(0.01f64..1.0, 3),
            b in proptest::collection::vec(0.01f64..1.0, 4),
        ) {
            let table: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x * y).collect()).collect();
            prop_assert!(mutual_information(&table) < 1e-12);
        }

        #[test]
        fn rmse_is_permutation_invariant_and_homogeneous(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30),
            c in 0.1f64..10.0,
            seed in 0u64..1000,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let base = rmse_do(&a, &b, None).unwrap();
            let mut idx: Vec<usize> = (0..a.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            prop_assert!((rmse_do(&pa, &pb, None).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
            let sa: Vec<f64> = a.iter().map(|v| c * v).collect();
            let sb: Vec<f64> = b.iter().map(|v| c * v).collect();
            prop_assert!((rmse_do(&sa, &sb, None).unwrap() - c * base).abs() <= 1e-10 * (1.0 + c * base));
        }
    }
}
