//! Maximum-likelihood fitting of a [`FlowModel`] with Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{bind_trainable, Parameters, Tape, Tensor, TensorError};
use crate::deconfound::ols;
use crate::flow::{Architecture, FlowError, FlowModel, Standardizer};
use crate::gmm::{gmm_init, gmm_init_factored, kmeans, FactorShape, GmmError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least {needed} rows for {components} base components, got {rows}")]
    TooFewRows {
        rows: usize,
        components: usize,
        needed: usize,
    },
    #[error("data must have at least two columns and only finite values")]
    BadData,
    #[error("non-finite loss in restart {restart}, epoch {epoch}: {detail}")]
    NonFinite {
        restart: usize,
        epoch: usize,
        detail: String,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Base mixture components `K`.
    pub components: usize,
    pub architecture: Architecture,
    pub seed: u64,
    pub val_fraction: f64,
    pub restarts: usize,
    /// Tie the base mixture to a `K_L × K_Q` grid; `components` must equal
    /// `k_l · k_q`. Untied when absent.
    pub factors: Option<FactorShape>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 500,
            patience: 20,
            clip_norm: 10.0,
            components: 4,
            architecture: Architecture::default(),
            seed: 0,
            val_fraction: 0.1,
            restarts: 4,
            factors: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.components == 0 || self.restarts == 0 {
            return bad("components and restarts must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return bad("val_fraction must lie in (0, 0.5]");
        }
        if let Some(f) = self.factors {
            if f.k_l == 0 || f.k_q == 0 || f.components() != self.components {
                return bad("factors must satisfy k_l * k_q = components");
            }
        }
        if let Architecture::Blocks { count, hidden } = &self.architecture {
            if *count == 0 || hidden.contains(&0) {
                return bad("block count and hidden widths must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean NLL per row in original data units.
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartLog {
    pub restart: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub restarts: Vec<RestartLog>,
    pub best_restart: usize,
}

impl TrainLog {
    pub fn best(&self) -> &RestartLog {
        &self.restarts[self.best_restart]
    }

    pub fn best_val_nll(&self) -> f64 {
        self.best().best_val_nll
    }

    /// One row per (restart, epoch); `best` marks the selected restart.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["restart", "seed", "epoch", "train_nll", "val_nll", "best"])?;
        for r in &self.restarts {
            let best = if r.restart == self.best_restart { "1" } else { "0" };
            for e in &r.epochs {
                w.write_record([
                    r.restart.to_string(),
                    r.seed.to_string(),
                    e.epoch.to_string(),
                    e.train_nll.to_string(),
                    e.val_nll.to_string(),
                    best.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(lr: f64, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (p, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Mean negative log-likelihood and its gradient for one batch, in
/// standardized units.
pub fn batch_loss_and_grad(model: &FlowModel, batch: &Tensor) -> Result<(f64, Vec<Tensor>), TensorError> {
    let mut tape = Tape::new();
    let vars = bind_trainable(&mut tape, model);
    let bound = model.bind(&mut vars.iter().copied())?;
    let w = tape.constant(batch.clone());
    let ll = bound.log_likelihood(&mut tape, w)?;
    let mean = tape.mean(ll)?;
    let loss = tape.neg(mean)?;
    let grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).data()[0];
    Ok((loss_value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect()))
}

fn clip(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

fn mean_nll(model: &FlowModel, data: &Tensor) -> Result<f64, FlowError> {
    let ll = model.log_likelihood_batch(data)?;
    Ok(-ll.sum() / data.rows() as f64)
}

struct RestartOutcome {
    model: Option<FlowModel>,
    log: RestartLog,
}

/// Least-squares slopes of the effect on the causes after removing the
/// cluster means, with clusters from k-means on the causes. `None` when the
/// causes have no within-cluster spread.
fn within_cluster_slopes<R: Rng + ?Sized>(data: &Tensor, k: usize, rng: &mut R) -> Option<Vec<f64>> {
    let n = data.cols() - 1;
    let causes = data.select_cols(&(0..n).collect::<Vec<_>>()).ok()?;
    let (_, assign) = kmeans(&causes, k, rng).ok()?;
    let mut sums = vec![vec![0.0; n + 1]; k];
    let mut counts = vec![0usize; k];
    for (r, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(data.row(r)) {
            *s += v;
        }
    }
    let mut centered = data.clone();
    for (r, &c) in assign.iter().enumerate() {
        for j in 0..=n {
            centered.set(r, j, data.get(r, j) - sums[c][j] / counts[c] as f64);
        }
    }
    let x = centered.select_cols(&(0..n).collect::<Vec<_>>()).ok()?;
    ols(&x, &centered.column(n)).ok().map(|f| f.slopes)
}

fn run_restart(
    train: &Tensor,
    val: &Tensor,
    config: &TrainConfig,
    restart: usize,
    seed: u64,
    offset: f64,
) -> Result<RestartOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = train.cols() - 1;
    let placeholder = crate::gmm::GmmParams::standard_normal(n + 1);
    let mut model = FlowModel::init(n, &config.architecture, placeholder, &mut rng)?;
    let groups = config.factors.map_or(config.components, |f| f.k_l);
    if let Some(slopes) = within_cluster_slopes(train, groups, &mut rng) {
        model.seed_effect_readout(&slopes)?;
    }
    let encoded = model.inverse(train)?;
    *model.base_mut() = match config.factors {
        Some(shape) => gmm_init_factored(&encoded, shape, &mut rng)?,
        None => gmm_init(&encoded, config.components, &mut rng)?,
    };

    let mut adam = Adam::new(config.learning_rate, &model.tensors());
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut best = model.clone();
    let mut best_val = mean_nll(&model, val)?;
    let mut log = RestartLog {
        restart,
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_nll: best_val + offset,
        failure: None,
    };
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.select_rows(chunk).map_err(FlowError::from)?;
            let (loss, mut grads) = batch_loss_and_grad(&model, &batch).map_err(|e| TrainError::NonFinite {
                restart,
                epoch,
                detail: e.to_string(),
            })?;
            if let Some(shape) = config.factors {
                // base tensors come first: logits, means, log_vars
                shape.average(&mut grads[1]);
                shape.average(&mut grads[2]);
            }
            let norm = clip(&mut grads, config.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    restart,
                    epoch,
                    detail: format!("loss {loss}, gradient norm {norm}"),
                });
            }
            adam.update(model.tensors_mut(), &grads);
            model.base_mut().clamp_variances();
            total += loss * chunk.len() as f64;
        }
        let val_nll = mean_nll(&model, val).map_err(|e| TrainError::NonFinite {
            restart,
            epoch,
            detail: format!("validation: {e}"),
        })?;
        if !val_nll.is_finite() {
            return Err(TrainError::NonFinite {
                restart,
                epoch,
                detail: "validation NLL is not finite".into(),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_nll: total / train.rows() as f64 + offset,
            val_nll: val_nll + offset,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best = model.clone();
            log.best_epoch = epoch;
            log.best_val_nll = val_nll + offset;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::debug!("restart {restart}: early stop at epoch {epoch}");
                break;
            }
        }
    }
    Ok(RestartOutcome { model: Some(best), log })
}

/// Fits a flow to `data` (`N × (n+1)`, effect in the last column).
///
/// Columns are standardized internally and the standardization is stored in
/// the returned model, so it evaluates in original units. Restarts draw their
/// seeds from `rng` and run concurrently; the one with the lowest validation
/// NLL wins. A restart that diverges is logged and skipped, and the fit
/// fails only if every restart does.
pub fn fit<R: Rng + ?Sized>(data: &Tensor, config: &TrainConfig, rng: &mut R) -> Result<(FlowModel, TrainLog), TrainError> {
    config.validate()?;
    if data.cols() < 2 || !data.all_finite() {
        return Err(TrainError::BadData);
    }
    let needed = 10 * config.components;
    if data.rows() < needed {
        return Err(TrainError::TooFewRows {
            rows: data.rows(),
            components: config.components,
            needed,
        });
    }
    let standardizer = Standardizer::fit(data);
    let scaled = standardizer.apply(data);
    let offset = standardizer.log_det();

    let mut idx: Vec<usize> = (0..data.rows()).collect();
    idx.shuffle(rng);
    let n_val = ((data.rows() as f64 * config.val_fraction).round() as usize).clamp(1, data.rows() - 1);
    let val = scaled.select_rows(&idx[..n_val]).map_err(FlowError::from)?;
    let train = scaled.select_rows(&idx[n_val..]).map_err(FlowError::from)?;

    let seeds: Vec<u64> = (0..config.restarts).map(|_| rng.random()).collect();
    let outcomes: Vec<Result<RestartOutcome, TrainError>> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| run_restart(&train, &val, config, r, seed, offset))
        .collect();

    let mut restarts = Vec::with_capacity(outcomes.len());
    let mut models = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                restarts.push(o.log);
                models.push(o.model);
            }
            Err(e) => {
                log::warn!("restart {r} failed: {e}");
                restarts.push(RestartLog {
                    restart: r,
                    seed: seeds[r],
                    epochs: Vec::new(),
                    best_epoch: 0,
                    best_val_nll: f64::INFINITY,
                    failure: Some(e.to_string()),
                });
                models.push(None);
                first_error.get_or_insert(e);
            }
        }
    }
    let best_restart = (0..restarts.len())
        .filter(|&r| models[r].is_some())
        .min_by(|&a, &b| restarts[a].best_val_nll.total_cmp(&restarts[b].best_val_nll));
    let Some(best_restart) = best_restart else {
        return Err(first_error.expect("all restarts failed"));
    };
    let mut model = models[best_restart].take().expect("selected restart has a model");
    model.set_standardizer(standardizer)?;
    Ok((model, TrainLog { restarts, best_restart }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::gmm_sample;
    use crate::gmm::GmmParams;
    use std::f64::consts::{E, PI};

    fn quick(arch: Architecture, k: usize) -> TrainConfig {
        TrainConfig {
            components: k,
            architecture: arch,
            restarts: 1,
            max_epochs: 60,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn standard_normal_data_reaches_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = gmm_sample(&GmmParams::standard_normal(2), 20_000, &mut rng);
        let (model, log) = fit(&data, &quick(Architecture::Linear, 1), &mut rng).unwrap();
        let entropy = (2.0 * PI * E).ln();
        let nll = -model.log_likelihood_batch(&data).unwrap().sum() / data.rows() as f64;
        assert!((nll - entropy).abs() < 0.05, "nll {nll} vs entropy {entropy}");
        assert!((log.best_val_nll() - entropy).abs() < 0.05);
    }

    #[test]
    fn best_validation_sequence_is_monotone_and_seed_fixes_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = gmm_sample(&GmmParams::standard_normal(3), 600, &mut rng);
        let cfg = TrainConfig {
            restarts: 2,
            max_epochs: 8,
            ..quick(Architecture::Blocks { count: 2, hidden: vec![8] }, 2)
        };
        let (_, a) = fit(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, b) = fit(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        for r in &a.restarts {
            let mut best = f64::INFINITY;
            let mut seq = Vec::new();
            for e in &r.epochs {
                best = best.min(e.val_nll);
                seq.push(best);
            }
            assert!(seq.windows(2).all(|w| w[1] <= w[0]));
        }
        let best = a.best_val_nll();
        assert!(a.restarts.iter().all(|r| r.best_val_nll >= best));
    }

    #[test]
    fn too_few_rows_is_rejected() {
        let data = Tensor::zeros(30, 2);
        let err = fit(&data, &quick(Architecture::Linear, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, TrainError::TooFewRows { needed: 40, .. }));
    }

    #[test]
    fn duplicated_point_never_leaks_nan() {
        let data = Tensor::from_vec(50, 2, [1.5, -0.5].repeat(50)).unwrap();
        for k in [1, 2] {
            match fit(&data, &quick(Architecture::Linear, k), &mut ChaCha8Rng::seed_from_u64(0)) {
                Ok((model, log)) => {
                    assert!(log.best_val_nll().is_finite());
                    let ll = model.log_likelihood_batch(&data).unwrap();
                    assert!(ll.all_finite());
                }
                Err(e) => assert!(matches!(e, TrainError::Gmm(_) | TrainError::NonFinite { .. }), "{e}"),
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.val_fraction = 0.6;
        assert!(c.validate().is_err());
        c.val_fraction = 0.5;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_reads_partial_toml() {
        let c: TrainConfig = toml::from_str(
            "learning_rate = 0.01\n[architecture]\nkind = \"linear\"\n",
        )
        .unwrap();
        assert_eq!(c.architecture, Architecture::Linear);
        assert_eq!(c.batch_size, 256);
    }
}
