use deconflow::autodiff::{Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Op = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

const H: f64 = 1e-5;

/// Random entries of magnitude in [0.1, 1] with random sign, so ReLU kinks
/// are never within a finite-difference step.
fn signed(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(r, c, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// `sum(op(inputs) * weights)` on a fresh tape.
fn contract(op: Op, inputs: &[Tensor], weights: &Tensor) -> Result<(Tape, Vec<Var>, Var), TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let root = tape.sum(prod)?;
    Ok((tape, vars, root))
}

fn value(op: Op, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let (tape, _, root) = contract(op, inputs, weights).unwrap();
    tape.value(root).scalar_value().unwrap()
}

fn check(op: Op, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Result<(), TestCaseError> {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars).unwrap();
        tape.value(out).shape()
    };
    let weights = signed(rng, shape.0, shape.1);
    let (tape, vars, root) = contract(op, &inputs, &weights).unwrap();
    let grads = tape.backward(root).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.wrt(&tape, *var);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fd = (value(op, &plus, &weights) - value(op, &minus, &weights)) / (2.0 * H);
            let a = g.data()[i];
            prop_assert!((a - fd).abs() / (1.0 + a.abs()) < 1e-4, "input {k} entry {i}: tape {a} vs fd {fd}");
        }
    }
    Ok(())
}

fn ops() -> Vec<(&'static str, Op)> {
    vec![
        ("add", |t, v| t.add(v[0], v[1])),
        ("sub", |t, v| t.sub(v[0], v[1])),
        ("mul", |t, v| t.mul(v[0], v[1])),
        ("add_row", |t, v| t.add_row(v[0], v[2])),
        ("sub_row", |t, v| t.sub_row(v[0], v[2])),
        ("mul_row", |t, v| t.mul_row(v[0], v[2])),
        ("matmul", |t, v| t.matmul(v[0], v[3])),
        ("transpose", |t, v| t.transpose(v[0])),
        ("scale", |t, v| t.scale(v[0], -1.7)),
        ("neg", |t, v| t.neg(v[0])),
        ("add_const", |t, v| t.add_const(v[0], 0.3)),
        ("relu", |t, v| t.relu(v[0])),
        ("exp", |t, v| t.exp(v[0])),
        ("log", |t, v| t.log(v[4])),
        ("square", |t, v| t.square(v[0])),
        ("sum", |t, v| t.sum(v[0])),
        ("mean", |t, v| t.mean(v[0])),
        ("row_sums", |t, v| t.row_sums(v[0])),
        ("logsumexp_rows", |t, v| t.logsumexp_rows(v[0])),
        ("select_cols", |t, v| t.select_cols(v[0], &[2, 0, 2])),
        ("concat_cols", |t, v| t.concat_cols(&[v[0], v[1], v[0]])),
        ("inverse", |t, v| t.inverse(v[5])),
    ]
}

/// Inputs shared by every op: two 4x3 matrices, a 1x3 row, a 3x2 matrix,
/// a positive 4x3 matrix and a well-conditioned 3x3 matrix.
fn inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut near_identity = signed(rng, 3, 3).map(|v| 0.3 * v);
    for i in 0..3 {
        near_identity.set(i, i, near_identity.get(i, i) + 1.0);
    }
    vec![
        signed(rng, 4, 3),
        signed(rng, 4, 3),
        signed(rng, 1, 3),
        signed(rng, 3, 2),
        positive(rng, 4, 3),
        near_identity,
    ]
}

fn composite(t: &mut Tape, v: &[Var]) -> Result<Var, TensorError> {
    let a = t.matmul(v[0], v[3])?;
    let a = t.relu(a)?;
    let b = t.exp(v[1])?;
    let b = t.add_row(b, v[2])?;
    let b = t.logsumexp_rows(b)?;
    let c = t.concat_cols(&[a, b])?;
    let c = t.square(c)?;
    t.mean(c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = inputs(&mut rng);
        for (name, op) in ops() {
            check(op, xs.clone(), &mut rng).map_err(|e| TestCaseError::fail(format!("{name}: {e}")))?;
        }
    }

    #[test]
    fn composite_graph_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(composite, inputs(&mut rng), &mut rng)?;
    }

    #[test]
    fn repeated_backward_is_bitwise_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = inputs(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let root = composite(&mut tape, &vars).unwrap();
        let first = tape.backward(root).unwrap();
        let second = tape.backward(root).unwrap();
        for v in &vars {
            let a: Vec<u64> = first.wrt(&tape, *v).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = second.wrt(&tape, *v).data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
