//! Deconfounding with causally constrained normalizing flows.
//!
//! A flow with a Gaussian-mixture base is fit to joint samples of a cause
//! `X` and an effect `Y`. Its triangular structure makes the effect latent
//! `z_Y` a proxy for the unobserved confounder, and interventional means
//! `E[Y | do(X = x)]` follow by resampling `z_Y` from the data.

pub mod autodiff;
pub mod flow;
pub mod gmm;
pub mod checkpoint;
pub mod train;
pub mod deconfound;
pub mod eval;
pub mod sim;
pub mod io;
pub mod tabular;
