//! Slope comparison on a named-column table: naive OLS, OLS controlling for
//! observed confounders, and the flow-adjusted slopes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::deconfound::{adjusted_slopes, controlled_slopes, naive_slopes, DeconfoundError};
use crate::flow::{Architecture, FlowModel};
use crate::io::{Table, TableError};
use crate::train::{fit, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum TabularError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("no cause columns given")]
    NoCauses,
    #[error("column {0:?} is both a cause and a confounder or target")]
    Overlap(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Deconfound(#[from] DeconfoundError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub causes: Vec<String>,
    pub confounders: Vec<String>,
    pub target: String,
    /// Causes that receive uniform jitter. `None` jitters every
    /// integer-valued cause.
    pub ordinal: Option<Vec<String>>,
    /// Jitter is `U(-a, a)`.
    pub jitter_amplitude: f64,
    pub jitter_seed: u64,
    pub n_p: usize,
    pub train: TrainConfig,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig {
            causes: Vec::new(),
            confounders: Vec::new(),
            target: String::new(),
            ordinal: None,
            jitter_amplitude: 0.5,
            jitter_seed: 0,
            n_p: 1000,
            train: TrainConfig {
                architecture: Architecture::Linear,
                components: 3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct TabularReport {
    pub causes: Vec<String>,
    pub jittered: Vec<String>,
    pub beta_naive: Vec<f64>,
    /// Absent when no confounder columns were given.
    pub beta_controlled: Option<Vec<f64>>,
    pub beta_adjusted: Vec<f64>,
    pub model: FlowModel,
    pub log: TrainLog,
}

impl TabularReport {
    /// One row per cause: `cause, beta_naive, beta_adjusted[, beta_controlled]`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["cause", "beta_naive", "beta_adjusted"];
        if self.beta_controlled.is_some() {
            header.push("beta_controlled");
        }
        w.write_record(&header)?;
        for (j, cause) in self.causes.iter().enumerate() {
            let mut rec = vec![
                cause.clone(),
                format!("{:?}", self.beta_naive[j]),
                format!("{:?}", self.beta_adjusted[j]),
            ];
            if let Some(c) = &self.beta_controlled {
                rec.push(format!("{:?}", c[j]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Jitters, fits and compares. The jitter and the fit are seeded from the
/// config, so the result is reproducible.
pub fn run_tabular(table: &Table, config: &TabularConfig) -> Result<TabularReport, TabularError> {
    if config.causes.is_empty() {
        return Err(TabularError::NoCauses);
    }
    for c in &config.causes {
        if config.confounders.contains(c) || *c == config.target {
            return Err(TabularError::Overlap(c.clone()));
        }
    }
    let mut causes = table.select(&config.causes)?;
    let y = table.select(std::slice::from_ref(&config.target))?.into_data();
    let confounders = if config.confounders.is_empty() {
        None
    } else {
        Some(table.select(&config.confounders)?)
    };

    let jittered: Vec<String> = match &config.ordinal {
        Some(names) => {
            for n in names {
                if !config.causes.contains(n) {
                    return Err(TableError::MissingColumn(n.clone()).into());
                }
            }
            names.clone()
        }
        None => config
            .causes
            .iter()
            .enumerate()
            .filter(|(j, _)| causes.column(*j).iter().all(|v| v.fract() == 0.0))
            .map(|(_, n)| n.clone())
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.jitter_seed);
    let a = config.jitter_amplitude;
    for r in 0..causes.rows() {
        for (j, name) in config.causes.iter().enumerate() {
            if jittered.contains(name) && a > 0.0 {
                let v = causes.get(r, j) + rng.random_range(-a..a);
                causes.set(r, j, v);
            }
        }
    }

    let beta_naive = naive_slopes(&causes, &y)?;
    let beta_controlled = match &confounders {
        Some(c) => Some(controlled_slopes(&causes, c, &y)?),
        None => None,
    };
    let data = Tensor::concat_cols(&[&causes, &Tensor::column_vector(y)]).expect("rows agree");
    let mut fit_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let (model, log) = fit(&data, &config.train, &mut fit_rng)?;
    let beta_adjusted = adjusted_slopes(&model, &data, config.n_p, config.train.seed)?;
    Ok(TabularReport {
        causes: config.causes.clone(),
        jittered,
        beta_naive,
        beta_controlled,
        beta_adjusted,
        model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::tabular_standin;

    fn quick() -> TabularConfig {
        TabularConfig {
            causes: vec!["mother_age".into(), "gestation".into(), "education".into()],
            confounders: vec!["v1".into(), "v2".into()],
            target: "birth_weight".into(),
            n_p: 50,
            train: TrainConfig {
                architecture: Architecture::Linear,
                components: 3,
                max_epochs: 5,
                restarts: 1,
                ..TrainConfig::default()
            },
            ..TabularConfig::default()
        }
    }

    fn table(rows: usize, seed: u64) -> Table {
        let t = tabular_standin(rows, seed);
        Table::new(t.headers, t.rows).unwrap()
    }

    #[test]
    fn integer_causes_are_jittered_by_default_and_reproducibly() {
        let t = table(400, 1);
        let cfg = quick();
        let a = run_tabular(&t, &cfg).unwrap();
        assert_eq!(a.jittered, cfg.causes);
        let b = run_tabular(&t, &cfg).unwrap();
        assert_eq!(a.beta_adjusted, b.beta_adjusted);
        assert_eq!(a.beta_naive, b.beta_naive);
    }

    #[test]
    fn controlled_slopes_are_omitted_without_confounders() {
        let t = table(400, 2);
        let mut cfg = quick();
        cfg.confounders.clear();
        let r = run_tabular(&t, &cfg).unwrap();
        assert!(r.beta_controlled.is_none());
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("cause,beta_naive,beta_adjusted\n"));
    }

    #[test]
    fn missing_and_overlapping_columns_are_rejected() {
        let t = table(100, 3);
        let mut cfg = quick();
        cfg.target = "nope".into();
        assert!(matches!(run_tabular(&t, &cfg), Err(TabularError::Table(TableError::MissingColumn(_)))));
        let mut cfg = quick();
        cfg.confounders.push("gestation".into());
        assert!(matches!(run_tabular(&t, &cfg), Err(TabularError::Overlap(_))));
    }
}
