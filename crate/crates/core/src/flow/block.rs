//! One causally constrained transformation block.
//!
//! Generative direction, on `z = (z_X, z_Y)` with `z_X ∈ R^n`:
//!
//! 1. split `z_X` at `s = ⌈n/2⌉` into `(z_a, z_b)`
//! 2. additive coupling `z_b ← z_b + f_t(z_a)` (skipped when `n = 1`)
//! 3. causal linear map `z ← B z + c` with
//!    `B = [[diag(a), 0], [b, b_dd]]`
//! 4. permute the `z_X` coordinates, leaving `z_Y` in place
//!
//! `z_Y` never feeds the coupling network and `B` has no `z_Y → z_X` entry,
//! so the `x` outputs do not depend on `z_Y`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bind_constants, take_var, BoundMlp, MlpParams, Parameters, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowBlock {
    n: usize,
    coupling: Option<MlpParams>,
    /// `1 × n`, log-magnitudes of `diag(a)`.
    log_a: Tensor,
    a_signs: Vec<f64>,
    /// `1 × n`, the `z_X → z_Y` row of `B`.
    b: Tensor,
    /// `1 × 1`
    log_b_dd: Tensor,
    b_dd_sign: f64,
    /// `1 × (n + 1)`, added after `B`.
    bias: Tensor,
    /// Output `z_X[i]` takes input coordinate `perm[i]`.
    perm: Vec<usize>,
}

/// `⌈n/2⌉`, the width of `z_a`.
pub fn split_index(n: usize) -> usize {
    n.div_ceil(2)
}

/// Shift-by-one rotation of `n` coordinates.
pub fn rotation(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

impl FlowBlock {
    /// Block that starts as the identity map on its linear part and whose
    /// coupling network outputs zero (hidden layers randomly initialized).
    pub fn init<R: Rng + ?Sized>(n: usize, hidden: &[usize], rng: &mut R) -> Self {
        let coupling = (n >= 2).then(|| {
            let s = split_index(n);
            let dims: Vec<usize> = std::iter::once(s)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(n - s))
                .collect();
            MlpParams::init(&dims, true, rng)
        });
        FlowBlock {
            n,
            coupling,
            log_a: Tensor::zeros(1, n),
            a_signs: vec![1.0; n],
            b: Tensor::zeros(1, n),
            log_b_dd: Tensor::zeros(1, 1),
            b_dd_sign: 1.0,
            bias: Tensor::zeros(1, n + 1),
            perm: rotation(n),
        }
    }

    /// Fully random block, for diagnostics and tests.
    pub fn random<R: Rng + ?Sized>(n: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut block = FlowBlock::init(n, hidden, rng);
        if let Some(c) = block.coupling.as_mut() {
            let dims = c.dims();
            *c = MlpParams::init(&dims, false, rng);
            let normal = Normal::new(0.0, 0.3).expect("valid");
            for bias in c.tensors_mut().into_iter().skip(1).step_by(2) {
                bias.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        }
        let normal = Normal::new(0.0, 0.4).expect("valid");
        for v in block
            .log_a
            .data_mut()
            .iter_mut()
            .chain(block.log_b_dd.data_mut())
            .chain(block.b.data_mut())
            .chain(block.bias.data_mut())
        {
            *v = normal.sample(rng);
        }
        for s in block.a_signs.iter_mut().chain(std::iter::once(&mut block.b_dd_sign)) {
            *s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        block.perm = perm;
        block
    }

    /// Assembles a block from explicit parts. `a` and `b_dd` must be non-zero
    /// and `perm` must be a permutation of `0..n`.
    pub fn from_parts(
        coupling: Option<MlpParams>,
        a: &[f64],
        b: &[f64],
        b_dd: f64,
        bias: &[f64],
        perm: Vec<usize>,
    ) -> Result<Self, TensorError> {
        let n = a.len();
        if n == 0 || b.len() != n || bias.len() != n + 1 || perm.len() != n {
            return Err(TensorError::Invalid("inconsistent block dimensions".into()));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(TensorError::Invalid(format!("{perm:?} is not a permutation")));
            }
        }
        if a.iter().chain(std::iter::once(&b_dd)).any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(TensorError::Singular);
        }
        let s = split_index(n);
        match &coupling {
            None if n >= 2 => return Err(TensorError::Invalid("n >= 2 needs a coupling network".into())),
            Some(_) if n == 1 => return Err(TensorError::Invalid("n = 1 has no coupling split".into())),
            Some(c) if c.input_dim() != s || c.output_dim() != n - s => {
                return Err(TensorError::Invalid(format!(
                    "coupling must map {s} → {}, got {} → {}",
                    n - s,
                    c.input_dim(),
                    c.output_dim()
                )))
            }
            _ => {}
        }
        Ok(FlowBlock {
            n,
            coupling,
            log_a: Tensor::row_vector(a.iter().map(|v| v.abs().ln()).collect()),
            a_signs: a.iter().map(|v| v.signum()).collect(),
            b: Tensor::row_vector(b.to_vec()),
            log_b_dd: Tensor::scalar(b_dd.abs().ln()),
            b_dd_sign: b_dd.signum(),
            bias: Tensor::row_vector(bias.to_vec()),
            perm,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coupling(&self) -> Option<&MlpParams> {
        self.coupling.as_ref()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn a(&self) -> Vec<f64> {
        self.log_a
            .data()
            .iter()
            .zip(&self.a_signs)
            .map(|(l, s)| s * l.exp())
            .collect()
    }

    pub fn b(&self) -> &[f64] {
        self.b.data()
    }

    pub(crate) fn set_b(&mut self, row: &[f64]) {
        self.b.data_mut().copy_from_slice(row);
    }

    pub fn b_dd(&self) -> f64 {
        self.b_dd_sign * self.log_b_dd.data()[0].exp()
    }

    /// Generative log|det B|; coupling and permutation are volume preserving.
    pub fn log_det(&self) -> f64 {
        self.log_a.sum() + self.log_b_dd.data()[0]
    }

    pub(crate) fn signs(&self) -> (Vec<f64>, f64) {
        (self.a_signs.clone(), self.b_dd_sign)
    }

    pub(crate) fn set_signs(&mut self, a: Vec<f64>, b_dd: f64) {
        self.a_signs = a;
        self.b_dd_sign = b_dd;
    }

    pub(crate) fn set_perm(&mut self, perm: Vec<usize>) {
        self.perm = perm;
    }

    pub(crate) fn absorb_effect_affine(&mut self, scale: f64, shift: f64) {
        let b_dd = self.b_dd();
        let new = b_dd / scale;
        self.log_b_dd.set(0, 0, new.abs().ln());
        self.b_dd_sign = new.signum();
        let by = self.bias.get(0, self.n);
        self.bias.set(0, self.n, by - b_dd * shift / scale);
    }

    pub fn bind(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundBlock, TensorError> {
        let coupling = match &self.coupling {
            Some(c) => Some(c.bind(vars)?),
            None => None,
        };
        let mut inv_perm = vec![0; self.n];
        for (i, &p) in self.perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        Ok(BoundBlock {
            n: self.n,
            coupling,
            log_a: take_var(vars)?,
            b: take_var(vars)?,
            log_b_dd: take_var(vars)?,
            bias: take_var(vars)?,
            a_signs: self.a_signs.clone(),
            b_dd_sign: self.b_dd_sign,
            perm: self.perm.clone(),
            inv_perm,
        })
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(c) = &self.coupling {
            for (l, (w, b)) in c.weights().iter().zip(c.biases()).enumerate() {
                out.push((format!("coupling.w{l}"), w));
                out.push((format!("coupling.b{l}"), b));
            }
        }
        out.push(("log_a".into(), &self.log_a));
        out.push(("b".into(), &self.b));
        out.push(("log_b_dd".into(), &self.log_b_dd));
        out.push(("bias".into(), &self.bias));
        out
    }

    fn run(&self, z: &Tensor, generative: bool) -> Result<(Tensor, f64), TensorError> {
        if z.cols() != self.n + 1 {
            return Err(TensorError::Shape {
                op: "flow block",
                lhs: z.shape(),
                rhs: (1, self.n + 1),
            });
        }
        let mut tape = Tape::new();
        let vars = bind_constants(&mut tape, self);
        let bound = self.bind(&mut vars.into_iter())?;
        let input = tape.constant(z.clone());
        let (out, ld) = if generative {
            bound.forward(&mut tape, input)?
        } else {
            bound.inverse(&mut tape, input)?
        };
        Ok((tape.value(out).clone(), tape.value(ld).data()[0]))
    }

    /// Generative direction on a batch; also returns log|det J|.
    pub fn forward_batch(&self, z: &Tensor) -> Result<(Tensor, f64), TensorError> {
        self.run(z, true)
    }

    /// Normalizing direction on a batch; also returns log|det J⁻¹|.
    pub fn inverse_batch(&self, w: &Tensor) -> Result<(Tensor, f64), TensorError> {
        self.run(w, false)
    }
}

impl Parameters for FlowBlock {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.coupling.as_ref().map(|c| c.tensors()).unwrap_or_default();
        out.extend([&self.log_a, &self.b, &self.log_b_dd, &self.bias]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self
            .coupling
            .as_mut()
            .map(|c| c.tensors_mut())
            .unwrap_or_default();
        out.extend([&mut self.log_a, &mut self.b, &mut self.log_b_dd, &mut self.bias]);
        out
    }
}

/// Generative step on a single latent vector.
pub fn block_forward(block: &FlowBlock, z: &[f64]) -> Result<(Vec<f64>, f64), TensorError> {
    let (w, ld) = block.forward_batch(&Tensor::row_vector(z.to_vec()))?;
    Ok((w.into_data(), ld))
}

/// Exact inverse of [`block_forward`].
pub fn block_inverse(block: &FlowBlock, w: &[f64]) -> Result<(Vec<f64>, f64), TensorError> {
    let (z, ld) = block.inverse_batch(&Tensor::row_vector(w.to_vec()))?;
    Ok((z.into_data(), ld))
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    n: usize,
    coupling: Option<BoundMlp>,
    log_a: Var,
    b: Var,
    log_b_dd: Var,
    bias: Var,
    a_signs: Vec<f64>,
    b_dd_sign: f64,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

impl BoundBlock {
    fn a(&self, tape: &mut Tape, invert: bool) -> Result<Var, TensorError> {
        let la = if invert { tape.neg(self.log_a)? } else { self.log_a };
        let mag = tape.exp(la)?;
        let signs = tape.constant(Tensor::row_vector(self.a_signs.clone()));
        tape.mul(mag, signs)
    }

    fn b_dd(&self, tape: &mut Tape, invert: bool) -> Result<Var, TensorError> {
        let l = if invert { tape.neg(self.log_b_dd)? } else { self.log_b_dd };
        let mag = tape.exp(l)?;
        tape.scale(mag, self.b_dd_sign)
    }

    fn log_det(&self, tape: &mut Tape) -> Result<Var, TensorError> {
        let s = tape.sum(self.log_a)?;
        tape.add(s, self.log_b_dd)
    }

    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var), TensorError> {
        let n = self.n;
        let zx_cols: Vec<usize> = (0..n).collect();
        let mut zx = tape.select_cols(z, &zx_cols)?;
        let zy = tape.select_cols(z, &[n])?;
        if let Some(net) = &self.coupling {
            let s = split_index(n);
            let za = tape.select_cols(zx, &(0..s).collect::<Vec<_>>())?;
            let zb = tape.select_cols(zx, &(s..n).collect::<Vec<_>>())?;
            let shift = net.forward(tape, za)?;
            let zb = tape.add(zb, shift)?;
            zx = tape.concat_cols(&[za, zb])?;
        }
        let a = self.a(tape, false)?;
        let x_out = tape.mul_row(zx, a)?;
        let b_t = tape.transpose(self.b)?;
        let cross = tape.matmul(zx, b_t)?;
        let bdd = self.b_dd(tape, false)?;
        let own = tape.mul_row(zy, bdd)?;
        let y_out = tape.add(cross, own)?;
        let w = tape.concat_cols(&[x_out, y_out])?;
        let w = tape.add_row(w, self.bias)?;
        let mut order = self.perm.clone();
        order.push(n);
        let w = tape.select_cols(w, &order)?;
        let ld = self.log_det(tape)?;
        Ok((w, ld))
    }

    pub fn inverse(&self, tape: &mut Tape, w: Var) -> Result<(Var, Var), TensorError> {
        let n = self.n;
        let mut order = self.inv_perm.clone();
        order.push(n);
        let w = tape.select_cols(w, &order)?;
        let w = tape.sub_row(w, self.bias)?;
        let x = tape.select_cols(w, &(0..n).collect::<Vec<_>>())?;
        let y = tape.select_cols(w, &[n])?;
        let inv_a = self.a(tape, true)?;
        let mut zx = tape.mul_row(x, inv_a)?;
        let b_t = tape.transpose(self.b)?;
        let cross = tape.matmul(zx, b_t)?;
        let resid = tape.sub(y, cross)?;
        let inv_bdd = self.b_dd(tape, true)?;
        let zy = tape.mul_row(resid, inv_bdd)?;
        if let Some(net) = &self.coupling {
            let s = split_index(n);
            let za = tape.select_cols(zx, &(0..s).collect::<Vec<_>>())?;
            let zb = tape.select_cols(zx, &(s..n).collect::<Vec<_>>())?;
            let shift = net.forward(tape, za)?;
            let zb = tape.sub(zb, shift)?;
            zx = tape.concat_cols(&[za, zb])?;
        }
        let z = tape.concat_cols(&[zx, zy])?;
        let ld = self.log_det(tape)?;
        let ld = tape.neg(ld)?;
        Ok((z, ld))
    }
}
