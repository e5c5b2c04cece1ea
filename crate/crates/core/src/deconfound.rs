//! Interventional means by resampling the effect-side latent, and the
//! least-squares slope summaries built on them.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::flow::{FlowError, FlowModel};

/// Largest accepted gap between the cause latents recovered from two
/// different effect values at the same cause.
const CAUSAL_ORDER_TOL: f64 = 1e-8;

/// Relative singular-value cutoff below which a design is rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DeconfoundError {
    #[error("dimension mismatch: expected {expected} columns, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("resample count must be at least 1")]
    NoResamples,
    #[error("cannot draw {requested} latents without replacement from a pool of {pool}")]
    PoolTooSmall { requested: usize, pool: usize },
    #[error("the latent pool is empty")]
    EmptyPool,
    #[error("cause latent depends on the effect value (gap {gap:e}); the model is not causally ordered")]
    CausalOrder { gap: f64 },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("length mismatch: {0} rows vs {1} targets")]
    Length(usize, usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z_x: Vec<f64>,
    pub z_y: f64,
    pub row: usize,
}

/// Row-wise normalizing map of `data`, in row order.
pub fn encode_dataset(model: &FlowModel, data: &Tensor) -> Result<Vec<LatentSample>, DeconfoundError> {
    if data.cols() != model.dim() {
        return Err(DeconfoundError::Dimension {
            expected: model.dim(),
            actual: data.cols(),
        });
    }
    let z = model.inverse(data)?;
    let n = model.n();
    Ok((0..z.rows())
        .map(|r| {
            let row = z.row(r);
            LatentSample {
                z_x: row[..n].to_vec(),
                z_y: row[n],
                row: r,
            }
        })
        .collect())
}

/// Source of the resampled effect latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// Draw from the encoded pool with replacement.
    #[default]
    WithReplacement,
    /// Draw distinct pool entries in a random order.
    WithoutReplacement,
    /// Draw from the fitted base mixture's effect marginal.
    BaseMarginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoEstimate {
    pub x: Vec<f64>,
    pub theta_hat: f64,
    pub n_p: usize,
    /// Sample standard deviation of the resampled outcomes over `√N_p`.
    pub mc_stderr: f64,
    /// `x` lies outside the per-coordinate range of the observed causes.
    pub out_of_support: bool,
}

/// Encodes a dataset once and answers `E[Y | do(X = x)]` queries against it.
#[derive(Clone, Debug)]
pub struct DoSampler<'a> {
    model: &'a FlowModel,
    pool: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    y_probes: [f64; 2],
}

impl<'a> DoSampler<'a> {
    pub fn new(model: &'a FlowModel, data: &Tensor) -> Result<Self, DeconfoundError> {
        let latents = encode_dataset(model, data)?;
        if latents.is_empty() {
            return Err(DeconfoundError::EmptyPool);
        }
        let n = model.n();
        let mut lower = vec![f64::INFINITY; n];
        let mut upper = vec![f64::NEG_INFINITY; n];
        for r in 0..data.rows() {
            for (j, &v) in data.row(r)[..n].iter().enumerate() {
                lower[j] = lower[j].min(v);
                upper[j] = upper[j].max(v);
            }
        }
        let y = data.column(n);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        Ok(DoSampler {
            model,
            pool: latents.into_iter().map(|l| l.z_y).collect(),
            lower,
            upper,
            y_probes: [mean, mean + sd.max(1.0)],
        })
    }

    pub fn pool(&self) -> &[f64] {
        &self.pool
    }

    pub fn model(&self) -> &FlowModel {
        self.model
    }

    pub fn in_support(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// `z_X*` for a cause value, after checking that it does not depend on
    /// the effect coordinate used to invert.
    pub fn latent_cause(&self, x: &[f64]) -> Result<Vec<f64>, DeconfoundError> {
        let n = self.model.n();
        if x.len() != n {
            return Err(DeconfoundError::Dimension {
                expected: n,
                actual: x.len(),
            });
        }
        let rows: Vec<Vec<f64>> = self
            .y_probes
            .iter()
            .map(|&y0| x.iter().copied().chain(std::iter::once(y0)).collect())
            .collect();
        let z = self
            .model
            .inverse(&Tensor::from_rows(&rows).map_err(FlowError::from)?)?;
        let (a, b) = (&z.row(0)[..n], &z.row(1)[..n]);
        let gap = a
            .iter()
            .zip(b)
            .map(|(u, v)| (u - v).abs() / u.abs().max(1.0))
            .fold(0.0, f64::max);
        if gap > CAUSAL_ORDER_TOL {
            return Err(DeconfoundError::CausalOrder { gap });
        }
        Ok(a.to_vec())
    }

    fn draw<R: Rng + ?Sized>(&self, n_p: usize, mode: ResampleMode, rng: &mut R) -> Result<Vec<f64>, DeconfoundError> {
        Ok(match mode {
            ResampleMode::WithReplacement => (0..n_p).map(|_| self.pool[rng.random_range(0..self.pool.len())]).collect(),
            ResampleMode::WithoutReplacement => {
                if n_p > self.pool.len() {
                    return Err(DeconfoundError::PoolTooSmall {
                        requested: n_p,
                        pool: self.pool.len(),
                    });
                }
                index::sample(rng, self.pool.len(), n_p)
                    .into_iter()
                    .map(|i| self.pool[i])
                    .collect()
            }
            ResampleMode::BaseMarginal => self.model.base().sample_coordinate(self.model.n(), n_p, rng),
        })
    }

    /// `θ̂(x)`: the mean effect coordinate of the generative map applied to
    /// `(z_X*, z̃_Y)` over `n_p` resampled `z̃_Y`.
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        n_p: usize,
        mode: ResampleMode,
        rng: &mut R,
    ) -> Result<DoEstimate, DeconfoundError> {
        if n_p == 0 {
            return Err(DeconfoundError::NoResamples);
        }
        let z_x = self.latent_cause(x)?;
        let draws = self.draw(n_p, mode, rng)?;
        let d = self.model.dim();
        let mut z = Vec::with_capacity(n_p * d);
        for zy in &draws {
            z.extend_from_slice(&z_x);
            z.push(*zy);
        }
        let w = self
            .model
            .forward(&Tensor::from_vec(n_p, d, z).map_err(FlowError::from)?)?;
        let ys = w.column(d - 1);
        let mean = ys.iter().sum::<f64>() / n_p as f64;
        let stderr = if n_p > 1 {
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n_p - 1) as f64;
            (var / n_p as f64).sqrt()
        } else {
            0.0
        };
        let out_of_support = !self.in_support(x);
        if out_of_support {
            log::warn!("query {x:?} lies outside the observed range of X; the estimate extrapolates");
        }
        Ok(DoEstimate {
            x: x.to_vec(),
            theta_hat: mean,
            n_p,
            mc_stderr: stderr,
            out_of_support,
        })
    }

    /// Estimates at every row of `queries`. Query `i` draws from stream `i`
    /// of a generator seeded with `seed`, so results do not depend on the
    /// thread schedule.
    pub fn estimate_many(
        &self,
        queries: &Tensor,
        n_p: usize,
        mode: ResampleMode,
        seed: u64,
    ) -> Result<Vec<DoEstimate>, DeconfoundError> {
        (0..queries.rows())
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.estimate(queries.row(i), n_p, mode, &mut rng)
            })
            .collect()
    }
}

/// One-shot `θ̂(x)` with resampling from the empirical pool.
pub fn do_expectation<R: Rng + ?Sized>(
    model: &FlowModel,
    data: &Tensor,
    x: &[f64],
    n_p: usize,
    rng: &mut R,
) -> Result<DoEstimate, DeconfoundError> {
    DoSampler::new(model, data)?.estimate(x, n_p, ResampleMode::WithReplacement, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

/// Least squares of `y` on `[1, design]`.
///
/// Columns are centered and scaled to unit norm before an SVD solve; a
/// singular value below `1e-10` of the largest is reported as rank
/// deficiency.
pub fn ols(design: &Tensor, y: &[f64]) -> Result<OlsFit, DeconfoundError> {
    let (rows, p) = design.shape();
    if rows != y.len() {
        return Err(DeconfoundError::Length(rows, y.len()));
    }
    if rows <= p {
        return Err(DeconfoundError::RankDeficient);
    }
    let y_mean = y.iter().sum::<f64>() / rows as f64;
    if p == 0 {
        return Ok(OlsFit {
            intercept: y_mean,
            slopes: Vec::new(),
        });
    }
    let means: Vec<f64> = (0..p).map(|j| design.column(j).iter().sum::<f64>() / rows as f64).collect();
    let mut x = DMatrix::from_fn(rows, p, |r, j| design.get(r, j) - means[j]);
    let mut norms = Vec::with_capacity(p);
    for mut col in x.column_iter_mut() {
        let norm = col.norm();
        if !(norm > 0.0) {
            return Err(DeconfoundError::RankDeficient);
        }
        col /= norm;
        norms.push(norm);
    }
    let svd = x.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= RANK_TOL * sv.max() {
        return Err(DeconfoundError::RankDeficient);
    }
    let target = DVector::from_iterator(rows, y.iter().map(|v| v - y_mean));
    let coef = svd
        .solve(&target, 0.0)
        .map_err(|_| DeconfoundError::RankDeficient)?;
    let slopes: Vec<f64> = coef.iter().zip(&norms).map(|(c, s)| c / s).collect();
    let intercept = y_mean - slopes.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    Ok(OlsFit { intercept, slopes })
}

/// Indicator columns for every level but the smallest of each discrete column.
pub fn one_hot(columns: &Tensor) -> Tensor {
    let rows = columns.rows();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); rows];
    for j in 0..columns.cols() {
        let col = columns.column(j);
        let mut levels = col.clone();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for level in levels.iter().skip(1) {
            for (r, v) in col.iter().enumerate() {
                out[r].push(if v == level { 1.0 } else { 0.0 });
            }
        }
    }
    let cols = out.first().map_or(0, Vec::len);
    Tensor::from_vec(rows, cols, out.concat()).expect("consistent one-hot width")
}

/// Slopes of `y` on the causes alone.
pub fn naive_slopes(causes: &Tensor, y: &[f64]) -> Result<Vec<f64>, DeconfoundError> {
    Ok(ols(causes, y)?.slopes)
}

/// Slopes of `y` on the causes while controlling for one-hot encoded
/// discrete confounders.
pub fn controlled_slopes(causes: &Tensor, confounders: &Tensor, y: &[f64]) -> Result<Vec<f64>, DeconfoundError> {
    if confounders.rows() != causes.rows() {
        return Err(DeconfoundError::Length(confounders.rows(), causes.rows()));
    }
    let design = Tensor::concat_cols(&[causes, &one_hot(confounders)]).map_err(FlowError::from)?;
    let mut slopes = ols(&design, y)?.slopes;
    slopes.truncate(causes.cols());
    Ok(slopes)
}

/// Regresses `θ̂` at the given query points on those points.
pub fn slopes_at(
    sampler: &DoSampler<'_>,
    queries: &Tensor,
    n_p: usize,
    mode: ResampleMode,
    seed: u64,
) -> Result<(OlsFit, Vec<DoEstimate>), DeconfoundError> {
    let estimates = sampler.estimate_many(queries, n_p, mode, seed)?;
    let theta: Vec<f64> = estimates.iter().map(|e| e.theta_hat).collect();
    Ok((ols(queries, &theta)?, estimates))
}

/// Deconfounded slopes `β̃`: `θ̂` at every observed cause value, regressed
/// on the cause columns.
pub fn adjusted_slopes(model: &FlowModel, data: &Tensor, n_p: usize, seed: u64) -> Result<Vec<f64>, DeconfoundError> {
    let sampler = DoSampler::new(model, data)?;
    let causes = data
        .select_cols(&(0..model.n()).collect::<Vec<_>>())
        .map_err(FlowError::from)?;
    Ok(slopes_at(&sampler, &causes, n_p, ResampleMode::WithReplacement, seed)?.0.slopes)
}
