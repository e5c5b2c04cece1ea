//! Bijection between observations `w = (x, y)` and latents `z = (z_X, z_Y)`.
//!
//! "Forward" always means the generative direction `z → w`; "inverse" is the
//! normalizing direction used by the likelihood. The first `n` coordinates
//! of both `w` and `z` belong to the cause, the last one to the effect.

mod block;
mod linear;

pub use block::{block_forward, block_inverse, rotation, split_index, BoundBlock, FlowBlock};
pub use linear::{BoundLinear, LinearFlow};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{bind_constants, Parameters, Tape, Tensor, TensorError, Var};
use crate::gmm::{BoundGmm, GmmError, GmmParams};

/// Rows processed per tape when evaluating large batches.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: model expects {expected} columns, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("operation needs a one-layer linear flow with n = 1")]
    NotLinear,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

/// Shape of the bijection, without parameter values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Blocks { count: usize, hidden: Vec<usize> },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Blocks {
            count: 6,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layout {
    Linear(LinearFlow),
    Blocks(Vec<FlowBlock>),
}

/// Per-column affine standardization `(w - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self, FlowError> {
        if mean.len() != scale.len() || scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(FlowError::Invalid("standardizer needs positive finite scales".into()));
        }
        Ok(Standardizer { mean, scale })
    }

    /// Column means and standard deviations; zero spreads fall back to 1.
    pub fn fit(data: &Tensor) -> Self {
        let (rows, cols) = data.shape();
        let count = rows.max(1) as f64;
        let mut mean = vec![0.0; cols];
        let mut scale = vec![0.0; cols];
        for j in 0..cols {
            let col = data.column(j);
            let m = col.iter().sum::<f64>() / count;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[j] = m;
            scale[j] = if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
        }
        Standardizer { mean, scale }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// `Σ log scale`, the log-volume of the destandardizing map.
    pub fn log_det(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    pub fn apply(&self, w: &Tensor) -> Tensor {
        let mut out = w.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn undo(&self, w: &Tensor) -> Tensor {
        let mut out = w.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.mean[j];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    n: usize,
    base: GmmParams,
    layout: Layout,
    standardizer: Standardizer,
}

impl FlowModel {
    pub fn new(base: GmmParams, layout: Layout, standardizer: Standardizer) -> Result<Self, FlowError> {
        let n = match &layout {
            Layout::Linear(l) => l.n(),
            Layout::Blocks(blocks) => {
                let n = blocks
                    .first()
                    .map(FlowBlock::n)
                    .ok_or_else(|| FlowError::Invalid("block layout needs at least one block".into()))?;
                if blocks.iter().any(|b| b.n() != n) {
                    return Err(FlowError::Invalid("blocks disagree on n".into()));
                }
                n
            }
        };
        if n == 0 {
            return Err(FlowError::Invalid("cause dimension must be at least 1".into()));
        }
        if base.dim() != n + 1 {
            return Err(FlowError::Dimension {
                expected: n + 1,
                actual: base.dim(),
            });
        }
        if standardizer.mean.len() != n + 1 {
            return Err(FlowError::Dimension {
                expected: n + 1,
                actual: standardizer.mean.len(),
            });
        }
        Ok(FlowModel {
            n,
            base,
            layout,
            standardizer,
        })
    }

    /// Model whose bijection starts at the identity (coupling nets output 0).
    pub fn init<R: Rng + ?Sized>(n: usize, arch: &Architecture, base: GmmParams, rng: &mut R) -> Result<Self, FlowError> {
        let layout = match arch {
            Architecture::Linear => Layout::Linear(LinearFlow::identity(n)),
            Architecture::Blocks { count, hidden } => {
                Layout::Blocks((0..*count).map(|_| FlowBlock::init(n, hidden, rng)).collect())
            }
        };
        FlowModel::new(base, layout, Standardizer::identity(n + 1))
    }

    /// Model with every parameter randomized, for diagnostics and tests.
    pub fn random<R: Rng + ?Sized>(n: usize, arch: &Architecture, k: usize, rng: &mut R) -> Result<Self, FlowError> {
        let layout = match arch {
            Architecture::Linear => Layout::Linear(LinearFlow::random(n, rng)),
            Architecture::Blocks { count, hidden } => {
                Layout::Blocks((0..*count).map(|_| FlowBlock::random(n, hidden, rng)).collect())
            }
        };
        let d = n + 1;
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let vars: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(0.3..1.5)).collect())
            .collect();
        let base = GmmParams::from_moments(&weights, &means, &vars)?;
        FlowModel::new(base, layout, Standardizer::identity(d))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n + 1
    }

    pub fn base(&self) -> &GmmParams {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut GmmParams {
        &mut self.base
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn layout_mut(&mut self) -> &mut Layout {
        &mut self.layout
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<(), FlowError> {
        if s.mean.len() != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                actual: s.mean.len(),
            });
        }
        self.standardizer = s;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match &self.layout {
            Layout::Linear(_) => Architecture::Linear,
            Layout::Blocks(blocks) => Architecture::Blocks {
                count: blocks.len(),
                hidden: blocks[0]
                    .coupling()
                    .map(|c| {
                        let dims = c.dims();
                        dims[1..dims.len() - 1].to_vec()
                    })
                    .unwrap_or_default(),
            },
        }
    }

    fn check_cols(&self, t: &Tensor) -> Result<(), FlowError> {
        if t.cols() != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                actual: t.cols(),
            });
        }
        Ok(())
    }

    pub fn bind(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundModel, TensorError> {
        let base = self.base.bind(vars)?;
        let layout = match &self.layout {
            Layout::Linear(l) => BoundLayout::Linear(l.bind(vars)?),
            Layout::Blocks(blocks) => BoundLayout::Blocks(
                blocks
                    .iter()
                    .map(|b| b.bind(vars))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        Ok(BoundModel {
            base,
            layout,
            standardizer: self.standardizer.clone(),
        })
    }

    fn with_constant_tape<T>(
        &self,
        f: impl FnOnce(&mut Tape, &BoundModel) -> Result<T, TensorError>,
    ) -> Result<T, FlowError> {
        let mut tape = Tape::new();
        let vars = bind_constants(&mut tape, self);
        let bound = self.bind(&mut vars.into_iter())?;
        Ok(f(&mut tape, &bound)?)
    }

    fn chunked(
        &self,
        data: &Tensor,
        f: impl Fn(&mut Tape, &BoundModel, Var) -> Result<Var, TensorError>,
    ) -> Result<Tensor, FlowError> {
        self.check_cols(data)?;
        let mut out: Option<Tensor> = None;
        let rows: Vec<usize> = (0..data.rows()).collect();
        for chunk in rows.chunks(EVAL_CHUNK) {
            let part = data.select_rows(chunk)?;
            let res = self.with_constant_tape(|tape, bound| {
                let x = tape.constant(part);
                let y = f(tape, bound, x)?;
                Ok(tape.value(y).clone())
            })?;
            out = Some(match out {
                None => res,
                Some(prev) => {
                    let mut all = prev.into_data();
                    let cols = res.cols();
                    all.extend_from_slice(res.data());
                    Tensor::from_vec(all.len() / cols.max(1), cols, all)?
                }
            });
        }
        Ok(out.unwrap_or_else(|| Tensor::zeros(0, 1)))
    }

    /// Generative map `z → w` on a `batch × (n+1)` tensor, in original units.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor, FlowError> {
        self.chunked(z, |tape, bound, z| bound.forward(tape, z))
    }

    /// Normalizing map `w → z`.
    pub fn inverse(&self, w: &Tensor) -> Result<Tensor, FlowError> {
        self.chunked(w, |tape, bound, w| Ok(bound.inverse(tape, w)?.0))
    }

    /// `log p_w(w)` for every row, as a `batch × 1` tensor.
    pub fn log_likelihood_batch(&self, w: &Tensor) -> Result<Tensor, FlowError> {
        self.chunked(w, |tape, bound, w| bound.log_likelihood(tape, w))
    }

    /// Total generative log|det J|, including standardization. Constant
    /// because every layer's Jacobian determinant is.
    pub fn log_det(&self) -> f64 {
        let layers = match &self.layout {
            Layout::Linear(l) => l.log_det(),
            Layout::Blocks(blocks) => blocks.iter().map(FlowBlock::log_det).sum(),
        };
        layers + self.standardizer.log_det()
    }

    /// Slope `a21 / a11` of a one-layer linear flow with `n = 1`, expressed
    /// in original data units.
    pub fn linear_slope(&self) -> Result<f64, FlowError> {
        match &self.layout {
            Layout::Linear(l) if self.n == 1 => {
                let ratio = l.a21()[0] / l.a11().get(0, 0);
                Ok(ratio * self.standardizer.scale[1] / self.standardizer.scale[0])
            }
            _ => Err(FlowError::NotLinear),
        }
    }

    /// Reparameterizes the effect latent as `z'_Y = scale · z_Y + shift`:
    /// the base mixture moves to the new coordinates and the first generative
    /// layer absorbs the inverse, so the observational model is unchanged.
    pub fn reparameterize_effect_latent(&mut self, scale: f64, shift: f64) -> Result<(), FlowError> {
        if scale == 0.0 || !scale.is_finite() || !shift.is_finite() {
            return Err(FlowError::Invalid("affine reparameterization must be invertible".into()));
        }
        self.base.transform_coordinate(self.n, scale, shift);
        match &mut self.layout {
            Layout::Linear(l) => l.absorb_effect_affine(scale, shift),
            Layout::Blocks(blocks) => blocks[0].absorb_effect_affine(scale, shift),
        }
        Ok(())
    }

    /// Sets the `z_X → y` row of the last generative layer. On a model fresh
    /// from [`FlowModel::init`] this makes `y = slopes · x + z_Y` in model
    /// coordinates.
    pub fn seed_effect_readout(&mut self, slopes: &[f64]) -> Result<(), FlowError> {
        if slopes.len() != self.n || !slopes.iter().all(|v| v.is_finite()) {
            return Err(FlowError::Invalid(format!("expected {} finite slopes", self.n)));
        }
        match &mut self.layout {
            Layout::Linear(l) => l.set_a21(slopes),
            Layout::Blocks(blocks) => {
                let last = blocks.last_mut().expect("at least one block");
                // output x[i] is the block's internal coordinate perm[i]
                let mut row = vec![0.0; slopes.len()];
                for (i, &p) in last.perm().iter().enumerate() {
                    row[p] = slopes[i];
                }
                last.set_b(&row);
            }
        }
        Ok(())
    }

    /// `(section name, tensor)` for every trainable tensor, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("base.logits".into(), self.base.logits()),
            ("base.means".into(), self.base.means()),
            ("base.log_vars".into(), self.base.log_vars()),
        ];
        match &self.layout {
            Layout::Linear(l) => {
                out.extend(l.named_tensors().into_iter().map(|(k, t)| (format!("linear.{k}"), t)));
            }
            Layout::Blocks(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    out.extend(b.named_tensors().into_iter().map(|(k, t)| (format!("block{i}.{k}"), t)));
                }
            }
        }
        out
    }
}

impl Parameters for FlowModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.base.tensors();
        match &self.layout {
            Layout::Linear(l) => out.extend(l.tensors()),
            Layout::Blocks(blocks) => out.extend(blocks.iter().flat_map(|b| b.tensors())),
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.base.tensors_mut();
        match &mut self.layout {
            Layout::Linear(l) => out.extend(l.tensors_mut()),
            Layout::Blocks(blocks) => out.extend(blocks.iter_mut().flat_map(|b| b.tensors_mut())),
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum BoundLayout {
    Linear(BoundLinear),
    Blocks(Vec<BoundBlock>),
}

/// A [`FlowModel`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    base: BoundGmm,
    layout: BoundLayout,
    standardizer: Standardizer,
}

impl BoundModel {
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
        let w = match &self.layout {
            BoundLayout::Linear(l) => l.forward(tape, z)?,
            BoundLayout::Blocks(blocks) => {
                let mut h = z;
                for b in blocks {
                    h = b.forward(tape, h)?.0;
                }
                h
            }
        };
        let scale = tape.constant(Tensor::row_vector(self.standardizer.scale.clone()));
        let mean = tape.constant(Tensor::row_vector(self.standardizer.mean.clone()));
        let w = tape.mul_row(w, scale)?;
        tape.add_row(w, mean)
    }

    /// Normalizing map plus the `1 × 1` log|det J⁻¹| (standardization included).
    pub fn inverse(&self, tape: &mut Tape, w: Var) -> Result<(Var, Var), TensorError> {
        let mean = tape.constant(Tensor::row_vector(self.standardizer.mean.clone()));
        let inv_scale = tape.constant(Tensor::row_vector(
            self.standardizer.scale.iter().map(|s| 1.0 / s).collect(),
        ));
        let w = tape.sub_row(w, mean)?;
        let w = tape.mul_row(w, inv_scale)?;
        let (z, ld) = match &self.layout {
            BoundLayout::Linear(l) => l.inverse(tape, w)?,
            BoundLayout::Blocks(blocks) => {
                let mut h = w;
                let mut total: Option<Var> = None;
                for b in blocks.iter().rev() {
                    let (next, ld) = b.inverse(tape, h)?;
                    h = next;
                    total = Some(match total {
                        None => ld,
                        Some(t) => tape.add(t, ld)?,
                    });
                }
                (h, total.expect("at least one block"))
            }
        };
        let ld = tape.add_const(ld, -self.standardizer.log_det())?;
        Ok((z, ld))
    }

    /// Exact `log p_w(w) = log p_z(T⁻¹ w) + log|det J_{T⁻¹}|`, `batch × 1`.
    pub fn log_likelihood(&self, tape: &mut Tape, w: Var) -> Result<Var, TensorError> {
        let (z, ld) = self.inverse(tape, w)?;
        let lp = self.base.log_density(tape, z)?;
        tape.add_row(lp, ld)
    }
}

/// Single-point generative map.
pub fn model_forward(model: &FlowModel, z: &[f64]) -> Result<Vec<f64>, FlowError> {
    Ok(model.forward(&Tensor::row_vector(z.to_vec()))?.into_data())
}

/// Single-point normalizing map.
pub fn model_inverse(model: &FlowModel, w: &[f64]) -> Result<Vec<f64>, FlowError> {
    Ok(model.inverse(&Tensor::row_vector(w.to_vec()))?.into_data())
}

/// Single-point exact log-likelihood.
pub fn model_log_likelihood(model: &FlowModel, w: &[f64]) -> Result<f64, FlowError> {
    Ok(model.log_likelihood_batch(&Tensor::row_vector(w.to_vec()))?.data()[0])
}

/// `β̂ = a21 / a11` of a one-layer linear flow.
pub fn extract_linear_slope(model: &FlowModel) -> Result<f64, FlowError> {
    model.linear_slope()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn linear_model(a11: f64, a21: f64, a22: f64) -> FlowModel {
        let flow = LinearFlow::from_matrix(&Tensor::scalar(a11), &[a21], a22, &[0.0, 0.0]).unwrap();
        FlowModel::new(GmmParams::standard_normal(2), Layout::Linear(flow), Standardizer::identity(2)).unwrap()
    }

    #[test]
    fn identity_flow_standard_normal_at_origin() {
        let m = linear_model(1.0, 0.0, 1.0);
        let ll = model_log_likelihood(&m, &[0.0, 0.0]).unwrap();
        assert!((ll + (2.0 * PI).ln()).abs() < 1e-14);
        assert!((ll + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn diagonal_linear_flow_change_of_variables() {
        let m = linear_model(2.0, 0.0, 3.0);
        let ll = model_log_likelihood(&m, &[0.0, 0.0]).unwrap();
        let expected = -(2.0 * PI).ln() - 2f64.ln() - 3f64.ln();
        assert!((ll - expected).abs() < 1e-14);
    }

    #[test]
    fn slope_readout() {
        assert_eq!(extract_linear_slope(&linear_model(1.0, 1.7, 1.0)).unwrap(), 1.7);
        assert_eq!(extract_linear_slope(&linear_model(2.0, 4.0, 1.0)).unwrap(), 2.0);
        let blocks = FlowModel::random(1, &Architecture::Blocks { count: 2, hidden: vec![] }, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(extract_linear_slope(&blocks), Err(FlowError::NotLinear)));
    }

    #[test]
    fn linear_forward_is_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = FlowModel::random(3, &Architecture::Linear, 2, &mut rng).unwrap();
        let Layout::Linear(l) = m.layout() else { unreachable!() };
        let a11 = l.a11();
        let z = [0.3, -1.1, 0.8, 2.0];
        let w = model_forward(&m, &z).unwrap();
        for i in 0..3 {
            let direct: f64 = (0..3).map(|j| a11.get(i, j) * z[j]).sum::<f64>() + l.bias()[i];
            assert!((w[i] - direct).abs() < 1e-12);
        }
        let wy: f64 = (0..3).map(|j| l.a21()[j] * z[j]).sum::<f64>() + l.a22() * z[3] + l.bias()[3];
        assert!((w[3] - wy).abs() < 1e-12);
    }

    #[test]
    fn identity_model_is_identity() {
        let m = FlowModel::init(2, &Architecture::default(), GmmParams::standard_normal(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // Init applies the z_X rotation once per block; six rotations of two
        // coordinates compose to the identity.
        let z = [0.5, -0.25, 2.0];
        let w = model_forward(&m, &z).unwrap();
        for (a, b) in w.iter().zip(&z) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn seeded_readout_adds_a_linear_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in [Architecture::Linear, Architecture::Blocks { count: 3, hidden: vec![4] }] {
            let mut m = FlowModel::init(3, &arch, GmmParams::standard_normal(4), &mut rng).unwrap();
            m.seed_effect_readout(&[0.5, -2.0, 1.5]).unwrap();
            let z = [0.3, -1.1, 0.8, 2.0];
            let w = model_forward(&m, &z).unwrap();
            let expected = 0.5 * w[0] - 2.0 * w[1] + 1.5 * w[2] + 2.0;
            assert!((w[3] - expected).abs() < 1e-12, "{arch:?}");
        }
    }

    #[test]
    fn reparameterization_preserves_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for arch in [Architecture::Linear, Architecture::Blocks { count: 3, hidden: vec![5] }] {
            let m = FlowModel::random(2, &arch, 3, &mut rng).unwrap();
            let mut r = m.clone();
            r.reparameterize_effect_latent(-1.7, 0.4).unwrap();
            let w = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.5]]).unwrap();
            let a = m.log_likelihood_batch(&w).unwrap();
            let b = r.log_likelihood_batch(&w).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn standardization_shifts_likelihood_by_log_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = FlowModel::random(1, &Architecture::Linear, 2, &mut rng).unwrap();
        let mut s = m.clone();
        let st = Standardizer::new(vec![1.0, -2.0], vec![3.0, 0.5]).unwrap();
        s.set_standardizer(st.clone()).unwrap();
        let w = Tensor::from_rows(&[vec![0.7, 0.1], vec![4.0, -3.0]]).unwrap();
        let std_w = st.apply(&w);
        let a = s.log_likelihood_batch(&w).unwrap();
        let b = m.log_likelihood_batch(&std_w).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - (y - st.log_det())).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let m = linear_model(1.0, 0.0, 1.0);
        assert!(matches!(
            model_inverse(&m, &[1.0, 2.0, 3.0]),
            Err(FlowError::Dimension { expected: 2, actual: 3 })
        ));
    }
}
