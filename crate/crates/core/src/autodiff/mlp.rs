//! Fully connected ReLU networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{take_var, Parameters, Tape, Tensor, TensorError, Var};

/// Weights are stored `in × out` so a batch `X` maps to `X·W + b`.
/// Hidden layers use ReLU, the last layer is affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl MlpParams {
    pub fn new(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self, TensorError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(TensorError::Invalid(format!(
                "mlp needs matching non-empty layer lists, got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if b.shape() != (1, w.cols()) {
                return Err(TensorError::Shape {
                    op: "mlp bias",
                    lhs: w.shape(),
                    rhs: b.shape(),
                });
            }
            if i > 0 && weights[i - 1].cols() != w.rows() {
                return Err(TensorError::Shape {
                    op: "mlp layers",
                    lhs: weights[i - 1].shape(),
                    rhs: w.shape(),
                });
            }
        }
        Ok(MlpParams { weights, biases })
    }

    /// He-initialized network over `dims = [input, hidden.., output]`.
    /// With `zero_output` the last layer starts at zero, so the network is
    /// initially the constant 0.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], zero_output: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp needs an input and an output dimension");
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = if zero_output && l == layers - 1 {
                Tensor::zeros(fan_in, fan_out)
            } else {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Tensor::from_vec(fan_in, fan_out, data).expect("sized above")
            };
            weights.push(w);
            biases.push(Tensor::zeros(1, fan_out));
        }
        MlpParams { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }

    /// Layer widths `[input, hidden.., output]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.weights.iter().map(Tensor::cols))
            .collect()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn bind(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundMlp, TensorError> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for _ in 0..self.weights.len() {
            weights.push(take_var(vars)?);
            biases.push(take_var(vars)?);
        }
        Ok(BoundMlp { weights, biases })
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// An [`MlpParams`] whose tensors live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, TensorError> {
        let mut h = input;
        let last = self.weights.len() - 1;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if l < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Evaluates the network on a `batch × input` tensor (or a single row).
pub fn forward_mlp(params: &MlpParams, input: &Tensor) -> Result<Tensor, TensorError> {
    if input.cols() != params.input_dim() {
        return Err(TensorError::Shape {
            op: "forward_mlp",
            lhs: input.shape(),
            rhs: params.weights[0].shape(),
        });
    }
    let mut tape = Tape::new();
    let vars = super::bind_constants(&mut tape, params);
    let bound = params.bind(&mut vars.into_iter())?;
    let x = tape.constant(input.clone());
    let out = bound.forward(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_annihilates() {
        let mut p = MlpParams::init(&[3, 5, 2], false, &mut ChaCha8Rng::seed_from_u64(0));
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = forward_mlp(&p, &Tensor::row_vector(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_identity_layer_is_identity() {
        let p = MlpParams::new(vec![Tensor::identity(3)], vec![Tensor::zeros(1, 3)]).unwrap();
        let v = Tensor::row_vector(vec![0.5, -7.0, 2.0]);
        assert_eq!(forward_mlp(&p, &v).unwrap(), v);
    }

    #[test]
    fn two_layer_hand_evaluation() {
        // W1 = [[1, 2, -1], [0, 1, 1]] (2 → 3), b1 = (0.5, 0, -1)
        // W2 = [[1], [-1], [2]] (3 → 1), b2 = (0.25)
        // v = (1, -1): W1ᵀ v + b1 = (1.5, 1, -3) → relu (1.5, 1, 0)
        // → 1.5 - 1 + 0 + 0.25 = 0.75
        let w1 = Tensor::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.0, 1.0, 1.0]).unwrap();
        let b1 = Tensor::row_vector(vec![0.5, 0.0, -1.0]);
        let w2 = Tensor::from_vec(3, 1, vec![1.0, -1.0, 2.0]).unwrap();
        let b2 = Tensor::row_vector(vec![0.25]);
        let p = MlpParams::new(vec![w1, w2], vec![b1, b2]).unwrap();
        let out = forward_mlp(&p, &Tensor::row_vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(out.data(), &[0.75]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let p = MlpParams::init(&[2, 4, 1], false, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(forward_mlp(&p, &Tensor::row_vector(vec![1.0, 2.0, 3.0])).is_err());
        assert!(MlpParams::new(vec![Tensor::zeros(2, 3), Tensor::zeros(2, 1)], vec![
            Tensor::zeros(1, 3),
            Tensor::zeros(1, 1)
        ])
        .is_err());
    }

    #[test]
    fn affine_on_a_segment_with_constant_activation_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::init(&[2, 8, 8, 1], false, &mut rng);
        let a = Tensor::row_vector(vec![0.3, -0.2]);
        let b = Tensor::row_vector(vec![0.3 + 1e-4, -0.2 + 2e-4]);
        let mid = Tensor::row_vector(vec![0.3 + 0.5e-4, -0.2 + 1e-4]);
        let fa = forward_mlp(&p, &a).unwrap().data()[0];
        let fb = forward_mlp(&p, &b).unwrap().data()[0];
        let fm = forward_mlp(&p, &mid).unwrap().data()[0];
        assert!((fm - 0.5 * (fa + fb)).abs() < 1e-12);
    }
}
