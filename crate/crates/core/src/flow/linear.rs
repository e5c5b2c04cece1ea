//! One-layer block lower-triangular linear flow.
//!
//! Generative map: `w_X = A11 z_X + c_X`, `w_Y = a21 · z_X + a22 z_Y + c_Y`
//! with `A11` lower triangular. Diagonal entries of `A11` and `a22` are
//! `sign · exp(raw)` with the sign fixed at construction.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{take_var, Parameters, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFlow {
    n: usize,
    /// `n × n`; only the strictly lower triangle is used.
    a11_lower: Tensor,
    /// `1 × n`, log-magnitudes of the `A11` diagonal.
    a11_log_diag: Tensor,
    a11_signs: Vec<f64>,
    /// `1 × n`
    a21: Tensor,
    /// `1 × 1`, log-magnitude of `a22`.
    a22_log: Tensor,
    a22_sign: f64,
    /// `1 × (n + 1)`
    bias: Tensor,
}

impl LinearFlow {
    pub fn identity(n: usize) -> Self {
        LinearFlow {
            n,
            a11_lower: Tensor::zeros(n, n),
            a11_log_diag: Tensor::zeros(1, n),
            a11_signs: vec![1.0; n],
            a21: Tensor::zeros(1, n),
            a22_log: Tensor::zeros(1, 1),
            a22_sign: 1.0,
            bias: Tensor::zeros(1, n + 1),
        }
    }

    /// Builds the flow from an explicit matrix `[[A11, 0], [a21, a22]]` and bias.
    /// `A11` must be lower triangular with a non-zero diagonal.
    pub fn from_matrix(a11: &Tensor, a21: &[f64], a22: f64, bias: &[f64]) -> Result<Self, TensorError> {
        let n = a11.rows();
        if a11.cols() != n || a21.len() != n || bias.len() != n + 1 {
            return Err(TensorError::Invalid("inconsistent linear flow dimensions".into()));
        }
        let mut lower = Tensor::zeros(n, n);
        let mut log_diag = Vec::with_capacity(n);
        let mut signs = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..n {
                let v = a11.get(i, j);
                if j > i && v != 0.0 {
                    return Err(TensorError::Invalid("a11 must be lower triangular".into()));
                }
                if j < i {
                    lower.set(i, j, v);
                }
            }
            let d = a11.get(i, i);
            if d == 0.0 {
                return Err(TensorError::Singular);
            }
            log_diag.push(d.abs().ln());
            signs.push(d.signum());
        }
        if a22 == 0.0 {
            return Err(TensorError::Singular);
        }
        Ok(LinearFlow {
            n,
            a11_lower: lower,
            a11_log_diag: Tensor::row_vector(log_diag),
            a11_signs: signs,
            a21: Tensor::row_vector(a21.to_vec()),
            a22_log: Tensor::scalar(a22.abs().ln()),
            a22_sign: a22.signum(),
            bias: Tensor::row_vector(bias.to_vec()),
        })
    }

    /// Random well-conditioned flow, mostly for diagnostics and tests.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.5).expect("valid");
        let mut f = LinearFlow::identity(n);
        for i in 0..n {
            for j in 0..i {
                f.a11_lower.set(i, j, normal.sample(rng));
            }
            f.a11_log_diag.set(0, i, 0.5 * normal.sample(rng));
            f.a11_signs[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        for v in f.a21.data_mut().iter_mut().chain(f.bias.data_mut()) {
            *v = normal.sample(rng);
        }
        f.a22_log.set(0, 0, 0.5 * normal.sample(rng));
        f.a22_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        f
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Dense `A11`.
    pub fn a11(&self) -> Tensor {
        let mut m = self.a11_lower.clone();
        for i in 0..self.n {
            for j in i..self.n {
                m.set(i, j, 0.0);
            }
            m.set(i, i, self.a11_signs[i] * self.a11_log_diag.get(0, i).exp());
        }
        m
    }

    pub fn a21(&self) -> &[f64] {
        self.a21.data()
    }

    pub(crate) fn set_a21(&mut self, row: &[f64]) {
        self.a21.data_mut().copy_from_slice(row);
    }

    pub fn a22(&self) -> f64 {
        self.a22_sign * self.a22_log.data()[0].exp()
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.data()
    }

    pub(crate) fn signs(&self) -> (Vec<f64>, f64) {
        (self.a11_signs.clone(), self.a22_sign)
    }

    pub(crate) fn set_signs(&mut self, a11: Vec<f64>, a22: f64) {
        self.a11_signs = a11;
        self.a22_sign = a22;
    }

    /// Generative log|det|.
    pub fn log_det(&self) -> f64 {
        self.a11_log_diag.sum() + self.a22_log.data()[0]
    }

    /// Absorbs `z_Y = (z'_Y - shift) / scale` into the `y` row.
    pub(crate) fn absorb_effect_affine(&mut self, scale: f64, shift: f64) {
        let a22 = self.a22();
        let new = a22 / scale;
        self.a22_log.set(0, 0, new.abs().ln());
        self.a22_sign = new.signum();
        let by = self.bias.get(0, self.n);
        self.bias.set(0, self.n, by - a22 * shift / scale);
    }

    pub fn bind(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundLinear, TensorError> {
        Ok(BoundLinear {
            n: self.n,
            a11_lower: take_var(vars)?,
            a11_log_diag: take_var(vars)?,
            a21: take_var(vars)?,
            a22_log: take_var(vars)?,
            bias: take_var(vars)?,
            a11_signs: self.a11_signs.clone(),
            a22_sign: self.a22_sign,
        })
    }

    pub(crate) fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("a11_lower", &self.a11_lower),
            ("a11_log_diag", &self.a11_log_diag),
            ("a21", &self.a21),
            ("a22_log", &self.a22_log),
            ("bias", &self.bias),
        ]
    }
}

impl Parameters for LinearFlow {
    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.a11_lower,
            &mut self.a11_log_diag,
            &mut self.a21,
            &mut self.a22_log,
            &mut self.bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BoundLinear {
    n: usize,
    a11_lower: Var,
    a11_log_diag: Var,
    a21: Var,
    a22_log: Var,
    bias: Var,
    a11_signs: Vec<f64>,
    a22_sign: f64,
}

impl BoundLinear {
    fn a11(&self, tape: &mut Tape) -> Result<Var, TensorError> {
        let n = self.n;
        let mut mask = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                mask.set(i, j, 1.0);
            }
        }
        let mask = tape.constant(mask);
        let lower = tape.mul(self.a11_lower, mask)?;
        let mag = tape.exp(self.a11_log_diag)?;
        let signs = tape.constant(Tensor::row_vector(self.a11_signs.clone()));
        let diag_row = tape.mul(mag, signs)?;
        let eye = tape.constant(Tensor::identity(n));
        let diag = tape.mul_row(eye, diag_row)?;
        tape.add(lower, diag)
    }

    fn bias_parts(&self, tape: &mut Tape) -> Result<(Var, Var), TensorError> {
        let bx = tape.select_cols(self.bias, &(0..self.n).collect::<Vec<_>>())?;
        let by = tape.select_cols(self.bias, &[self.n])?;
        Ok((bx, by))
    }

    /// Generative direction on a `batch × (n+1)` latent.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
        let n = self.n;
        let zx = tape.select_cols(z, &(0..n).collect::<Vec<_>>())?;
        let zy = tape.select_cols(z, &[n])?;
        let a11 = self.a11(tape)?;
        let a11_t = tape.transpose(a11)?;
        let wx = tape.matmul(zx, a11_t)?;
        let a21_t = tape.transpose(self.a21)?;
        let cross = tape.matmul(zx, a21_t)?;
        let a22 = tape.exp(self.a22_log)?;
        let a22 = tape.scale(a22, self.a22_sign)?;
        let own = tape.mul_row(zy, a22)?;
        let wy = tape.add(cross, own)?;
        let w = tape.concat_cols(&[wx, wy])?;
        tape.add_row(w, self.bias)
    }

    /// Normalizing direction. Returns the latent and the scalar log|det| of
    /// the inverse Jacobian.
    pub fn inverse(&self, tape: &mut Tape, w: Var) -> Result<(Var, Var), TensorError> {
        let n = self.n;
        let (bx, by) = self.bias_parts(tape)?;
        let wx = tape.select_cols(w, &(0..n).collect::<Vec<_>>())?;
        let wy = tape.select_cols(w, &[n])?;
        let wx = tape.sub_row(wx, bx)?;
        let wy = tape.sub_row(wy, by)?;
        let a11 = self.a11(tape)?;
        let inv = tape.inverse(a11)?;
        let inv_t = tape.transpose(inv)?;
        let zx = tape.matmul(wx, inv_t)?;
        let a21_t = tape.transpose(self.a21)?;
        let cross = tape.matmul(zx, a21_t)?;
        let resid = tape.sub(wy, cross)?;
        let neg = tape.neg(self.a22_log)?;
        let recip = tape.exp(neg)?;
        let recip = tape.scale(recip, self.a22_sign)?;
        let zy = tape.mul_row(resid, recip)?;
        let z = tape.concat_cols(&[zx, zy])?;
        let ld = tape.sum(self.a11_log_diag)?;
        let ld = tape.add(ld, self.a22_log)?;
        let ld = tape.neg(ld)?;
        Ok((z, ld))
    }
}
