//! Synthetic confounded data with a known interventional mean.
//!
//! A discrete pair `(L, Q)` with a chosen mutual information selects the
//! Gaussian means of `Z_X` and `Z_Y`. Observations are
//! `X = τ₁(Z_X)` and `Y = β τ₂(Z_X) + τ₃(Z_Y) + ε`, with each `τ` a random
//! piecewise-affine residual network.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::eval::mutual_information;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const RESIDUAL_BLOCKS: usize = 5;
/// Hidden width of each residual branch.
pub const BRANCH_WIDTH: usize = 16;
/// Spectral norm of every residual-branch weight matrix.
pub const BRANCH_NORM: f64 = 0.9;
pub const MAX_CONDITION: f64 = 10.0;
pub const VALIDATION_PROBES: usize = 10_000;
pub const MAX_NET_RETRIES: usize = 20;
/// Variance of every Gaussian in the generator, and of `ε`.
pub const NOISE_VARIANCE: f64 = 0.01;

const INVERT_TOL: f64 = 1e-8;
const FIXED_POINT_MAX_ITER: usize = 2000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("target mutual information {target} is out of reach (maximum {max})")]
    Unreachable { target: f64, max: f64 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("network inversion did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("no invertible network found after {0} attempts")]
    Validation(usize),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario file: {0}")]
    Format(String),
}

/// Mixing weights and conditionals of a factorization through `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointFactors {
    pub pi: Vec<f64>,
    /// `K_H × K_L`
    pub l_given_h: Vec<Vec<f64>>,
    /// `K_H × K_Q`
    pub q_given_h: Vec<Vec<f64>>,
}

/// Joint law of the discrete confounders, `p(l, q)` stored as `K_L × K_Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderJoint {
    table: Vec<Vec<f64>>,
    factors: Option<JointFactors>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), SimError> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SimError::Invalid(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl ConfounderJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self, SimError> {
        let kq = table.first().map_or(0, Vec::len);
        if kq == 0 || table.iter().any(|r| r.len() != kq) {
            return Err(SimError::Invalid("joint table must be a non-empty rectangle".into()));
        }
        check_distribution(&table.concat(), "joint table")?;
        Ok(ConfounderJoint { table, factors: None })
    }

    /// Table `Σ_h π_h p(l|h) p(q|h)`, keeping the factors.
    pub fn from_factors(factors: JointFactors) -> Result<Self, SimError> {
        check_distribution(&factors.pi, "pi")?;
        let kh = factors.pi.len();
        if factors.l_given_h.len() != kh || factors.q_given_h.len() != kh {
            return Err(SimError::Invalid("factor tables need one row per h".into()));
        }
        for (l, q) in factors.l_given_h.iter().zip(&factors.q_given_h) {
            check_distribution(l, "p(l|h)")?;
            check_distribution(q, "p(q|h)")?;
        }
        let kl = factors.l_given_h[0].len();
        let kq = factors.q_given_h[0].len();
        let mut table = vec![vec![0.0; kq]; kl];
        for h in 0..kh {
            for (l, row) in table.iter_mut().enumerate() {
                for (q, cell) in row.iter_mut().enumerate() {
                    *cell += factors.pi[h] * factors.l_given_h[h][l] * factors.q_given_h[h][q];
                }
            }
        }
        let mut joint = ConfounderJoint::new(table)?;
        joint.factors = Some(factors);
        Ok(joint)
    }

    pub fn k_l(&self) -> usize {
        self.table.len()
    }

    pub fn k_q(&self) -> usize {
        self.table[0].len()
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    pub fn factors(&self) -> Option<&JointFactors> {
        self.factors.as_ref()
    }

    pub fn l_marginal(&self) -> Vec<f64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn q_marginal(&self) -> Vec<f64> {
        (0..self.k_q()).map(|q| self.table.iter().map(|r| r[q]).sum()).collect()
    }

    pub fn mutual_information(&self) -> f64 {
        mutual_information(&self.table)
    }

    /// Draws `(l, q)` pairs.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let kq = self.k_q();
        let dist = WeightedIndex::new(self.table.concat()).expect("valid joint table");
        (0..count)
            .map(|_| {
                let i = dist.sample(rng);
                (i / kq, i % kq)
            })
            .collect()
    }
}

/// Joint with the requested mutual information.
///
/// Each level of the larger variable is paired with one level of the smaller
/// one through a random permutation, giving a deterministic coupling `D`.
/// The product `P` of its marginals has zero information, and the mixture
/// `(1 − λ) P + λ D` keeps the marginals fixed while its information grows
/// monotonically in `λ`, so `λ` is found by bisection. The result factors
/// through `H` with `K_H = 1 + max(K_L, K_Q)`: one product component and one
/// point mass per pair.
pub fn sample_confounder_joint<R: Rng + ?Sized>(
    k_l: usize,
    k_q: usize,
    target_mi: f64,
    rng: &mut R,
) -> Result<ConfounderJoint, SimError> {
    if k_l == 0 || k_q == 0 {
        return Err(SimError::Invalid("K_L and K_Q must be positive".into()));
    }
    let k_max = k_l.max(k_q);
    let mut perm: Vec<usize> = (0..k_max).collect();
    perm.shuffle(rng);
    // pairs[j] = (l, q) for the j-th point mass of D.
    let pairs: Vec<(usize, usize)> = (0..k_max)
        .map(|j| {
            if k_q >= k_l {
                (perm[j] % k_l, j)
            } else {
                (j, perm[j] % k_q)
            }
        })
        .collect();
    let mass = 1.0 / k_max as f64;
    let mut pl = vec![0.0; k_l];
    let mut pq = vec![0.0; k_q];
    for &(l, q) in &pairs {
        pl[l] += mass;
        pq[q] += mass;
    }
    let build = |lambda: f64| -> JointFactors {
        let mut pi = vec![1.0 - lambda];
        let mut l_given_h = vec![pl.clone()];
        let mut q_given_h = vec![pq.clone()];
        for &(l, q) in &pairs {
            pi.push(lambda * mass);
            let mut lh = vec![0.0; k_l];
            lh[l] = 1.0;
            let mut qh = vec![0.0; k_q];
            qh[q] = 1.0;
            l_given_h.push(lh);
            q_given_h.push(qh);
        }
        JointFactors { pi, l_given_h, q_given_h }
    };
    let mi_at = |lambda: f64| ConfounderJoint::from_factors(build(lambda)).map(|j| j.mutual_information());
    let max = mi_at(1.0)?;
    if !(target_mi >= 0.0) || target_mi > max + 1e-12 {
        return Err(SimError::Unreachable { target: target_mi, max });
    }
    let lambda = if target_mi == 0.0 {
        0.0
    } else if target_mi >= max {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mi_at(mid)? < target_mi {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    ConfounderJoint::from_factors(build(lambda))
}

fn leaky(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn singular_values(t: &Tensor) -> (f64, f64) {
    let sv = to_dmatrix(t).singular_values();
    (sv.max(), sv.min())
}

fn gaussian(rows: usize, cols: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let v: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, v).expect("sized")
}

/// Square Gaussian matrix with condition number below [`MAX_CONDITION`],
/// scaled to unit spectral norm.
fn well_conditioned(d: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    loop {
        let m = gaussian(d, d, rng);
        let (hi, lo) = singular_values(&m);
        if lo > 0.0 && hi / lo < MAX_CONDITION {
            return m.map(|v| v / hi);
        }
    }
}

/// `h + leaky(leaky(h W1 + b1) W2 + b2)` in row-vector convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl ResidualBlock {
    fn branch(&self, h: &Tensor) -> Tensor {
        let u = h.matmul(&self.w1).and_then(|u| u.add_row(&self.b1)).expect("shapes").map(leaky);
        u.matmul(&self.w2).and_then(|v| v.add_row(&self.b2)).expect("shapes").map(leaky)
    }

    fn apply(&self, h: &Tensor) -> Tensor {
        h.zip_map(&self.branch(h), "residual", |a, b| a + b).expect("shapes")
    }

    /// Solves `h + g(h) = target` by fixed-point iteration; `g` is a
    /// contraction, so the iteration converges from any start.
    fn invert(&self, target: &Tensor) -> Result<Tensor, SimError> {
        let mut h = target.clone();
        for _ in 0..FIXED_POINT_MAX_ITER {
            let next = target.zip_map(&self.branch(&h), "residual", |t, g| t - g).expect("shapes");
            let change = next
                .data()
                .iter()
                .zip(h.data())
                .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
                .fold(0.0, f64::max);
            h = next;
            if change < 1e-15 {
                return Ok(h);
            }
        }
        let residual = self
            .apply(&h)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if residual < INVERT_TOL {
            Ok(h)
        } else {
            Err(SimError::NonConvergence { residual })
        }
    }
}

/// Input linear layer, residual blocks, output linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPwaNet {
    input_w: Tensor,
    input_b: Tensor,
    blocks: Vec<ResidualBlock>,
    output_w: Tensor,
    output_b: Tensor,
}

impl ResidualPwaNet {
    /// Affine map `z ↦ z W + b` with no residual blocks.
    pub fn affine(w: Tensor, b: Vec<f64>) -> Result<Self, SimError> {
        if b.len() != w.cols() {
            return Err(SimError::Invalid("bias width does not match the weight matrix".into()));
        }
        let d = w.cols();
        Ok(ResidualPwaNet {
            input_w: w,
            input_b: Tensor::row_vector(b),
            blocks: Vec::new(),
            output_w: Tensor::identity(d),
            output_b: Tensor::zeros(1, d),
        })
    }

    /// Random network `R^{d_in} → R^{d_out}` of width `d_in`, with `d_out`
    /// either `d_in` or 1. Biases follow the usual `U(±1/√fan_in)` layer
    /// initialization, so the kinks sit near the origin of each layer's
    /// input and the map bends between well-separated clusters rather than
    /// inside them.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let width = d_in;
        let bias = |fan_in: usize, cols: usize, rng: &mut R| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::row_vector((0..cols).map(|_| rng.random_range(-bound..bound)).collect())
        };
        let input_w = well_conditioned(d_in, rng);
        let input_b = bias(d_in, width, rng);
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|_| {
                let w1 = gaussian(width, BRANCH_WIDTH, rng);
                let w1 = w1.map(|v| v * BRANCH_NORM / singular_values(&w1).0);
                let b1 = bias(width, BRANCH_WIDTH, rng);
                let w2 = gaussian(BRANCH_WIDTH, width, rng);
                let w2 = w2.map(|v| v * BRANCH_NORM / singular_values(&w2).0);
                let b2 = bias(BRANCH_WIDTH, width, rng);
                ResidualBlock { w1, b1, w2, b2 }
            })
            .collect();
        let output_w = if d_out == width {
            well_conditioned(width, rng)
        } else {
            let w = gaussian(width, d_out, rng);
            let norm = singular_values(&w).0;
            w.map(|v| v / norm)
        };
        let output_b = bias(width, d_out, rng);
        ResidualPwaNet {
            input_w,
            input_b,
            blocks,
            output_w,
            output_b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.output_w.cols()
    }

    pub fn forward(&self, z: &Tensor) -> Tensor {
        let mut h = z.matmul(&self.input_w).and_then(|h| h.add_row(&self.input_b)).expect("input width");
        for b in &self.blocks {
            h = b.apply(&h);
        }
        h.matmul(&self.output_w).and_then(|o| o.add_row(&self.output_b)).expect("width")
    }

    /// Inverse of a square network, row-wise, checked by re-applying it.
    pub fn inverse(&self, y: &Tensor) -> Result<Tensor, SimError> {
        if self.input_dim() != self.output_dim() || y.cols() != self.output_dim() {
            return Err(SimError::Invalid("only square networks are invertible".into()));
        }
        let singular = |_| SimError::Invalid("singular linear layer".into());
        let shifted = y.add_row(&self.output_b.map(|v| -v)).expect("width");
        let mut h = shifted.matmul(&self.output_w.inverse().map_err(singular)?).expect("width");
        for b in self.blocks.iter().rev() {
            h = b.invert(&h)?;
        }
        let shifted = h.add_row(&self.input_b.map(|v| -v)).expect("width");
        let z = shifted.matmul(&self.input_w.inverse().map_err(singular)?).expect("width");
        let residual = self
            .forward(&z)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        if residual > INVERT_TOL {
            return Err(SimError::NonConvergence { residual });
        }
        Ok(z)
    }

    /// Round trip on the probes, plus conditioning of the linear layers.
    pub fn validate(&self, probes: &Tensor) -> bool {
        let conditioned = |t: &Tensor| {
            let (hi, lo) = singular_values(t);
            lo > 0.0 && hi / lo < MAX_CONDITION
        };
        if !conditioned(&self.input_w) || !conditioned(&self.output_w) {
            return false;
        }
        let branch_ok = self.blocks.iter().all(|b| singular_values(&b.w1).0 * singular_values(&b.w2).0 < 1.0);
        branch_ok && self.inverse(&self.forward(probes)).is_ok()
    }
}

/// A mechanism `τ`, either the identity or a residual network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tau {
    Identity,
    Net(ResidualPwaNet),
}

impl Tau {
    pub fn apply(&self, z: &Tensor) -> Tensor {
        match self {
            Tau::Identity => z.clone(),
            Tau::Net(net) => net.forward(z),
        }
    }

    pub fn invert(&self, y: &Tensor) -> Result<Tensor, SimError> {
        match self {
            Tau::Identity => Ok(y.clone()),
            Tau::Net(net) => net.inverse(y),
        }
    }
}

fn validated_net<R: Rng + ?Sized>(d: usize, probes: &Tensor, rng: &mut R) -> Result<ResidualPwaNet, SimError> {
    for attempt in 0..MAX_NET_RETRIES {
        let net = ResidualPwaNet::random(d, d, rng);
        if net.validate(probes) {
            return Ok(net);
        }
        log::debug!("network attempt {attempt} failed validation");
    }
    Err(SimError::Validation(MAX_NET_RETRIES))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n: usize,
    pub k_l: usize,
    pub k_q: usize,
    pub beta: f64,
    pub target_mi: f64,
    /// All three mechanisms are the identity (requires `n = 1`).
    #[serde(default)]
    pub identity_tau: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub schema_version: u32,
    pub seed: u64,
    pub spec: ScenarioSpec,
    pub joint: ConfounderJoint,
    /// `K_L × n` means of `Z_X`.
    pub mu_x: Vec<Vec<f64>>,
    /// `K_Q` means of `Z_Y`.
    pub nu_y: Vec<f64>,
    pub var_x: f64,
    pub var_y: f64,
    pub var_eps: f64,
    pub tau1: Tau,
    pub tau2: Tau,
    pub tau3: Tau,
}

/// Ground truth and hidden variables behind a simulated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SimData {
    /// `N × (n+1)`: causes then effect.
    pub data: Tensor,
    pub labels: Vec<(usize, usize)>,
    pub z_x: Tensor,
    pub z_y: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Draws every ground-truth parameter from `seed`.
pub fn make_scenario(spec: &ScenarioSpec, seed: u64) -> Result<SimScenario, SimError> {
    if spec.n == 0 {
        return Err(SimError::Invalid("n must be at least 1".into()));
    }
    if spec.identity_tau && spec.n != 1 {
        return Err(SimError::Invalid("identity mechanisms need n = 1".into()));
    }
    if !spec.beta.is_finite() {
        return Err(SimError::Invalid("beta must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint = sample_confounder_joint(spec.k_l, spec.k_q, spec.target_mi, &mut rng)?;
    let mu_x: Vec<Vec<f64>> = (0..spec.k_l)
        .map(|_| (0..spec.n).map(|_| rng.random_range(1.0..4.0)).collect())
        .collect();
    let nu_y: Vec<f64> = (0..spec.k_q).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut scenario = SimScenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        seed,
        spec: spec.clone(),
        joint,
        mu_x,
        nu_y,
        var_x: NOISE_VARIANCE,
        var_y: NOISE_VARIANCE,
        var_eps: NOISE_VARIANCE,
        tau1: Tau::Identity,
        tau2: Tau::Identity,
        tau3: Tau::Identity,
    };
    if !spec.identity_tau {
        let latent = scenario.sample_latents(VALIDATION_PROBES, &mut rng);
        let zy = Tensor::column_vector(latent.z_y.clone());
        scenario.tau1 = Tau::Net(validated_net(spec.n, &latent.z_x, &mut rng)?);
        scenario.tau2 = Tau::Net(ResidualPwaNet::random(spec.n, 1, &mut rng));
        scenario.tau3 = Tau::Net(validated_net(1, &zy, &mut rng)?);
    }
    Ok(scenario)
}

struct Latents {
    labels: Vec<(usize, usize)>,
    z_x: Tensor,
    z_y: Vec<f64>,
}

impl SimScenario {
    pub fn n(&self) -> usize {
        self.spec.n
    }

    fn sample_latents<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Latents {
        let labels = self.joint.sample(count, rng);
        let sx = Normal::new(0.0, self.var_x.sqrt()).expect("positive variance");
        let sy = Normal::new(0.0, self.var_y.sqrt()).expect("positive variance");
        let n = self.n();
        let mut zx = Vec::with_capacity(count * n);
        let mut zy = Vec::with_capacity(count);
        for &(l, q) in &labels {
            zx.extend(self.mu_x[l].iter().map(|m| m + sx.sample(rng)));
            zy.push(self.nu_y[q] + sy.sample(rng));
        }
        Latents {
            labels,
            z_x: Tensor::from_vec(count, n, zx).expect("sized"),
            z_y: zy,
        }
    }

    /// `X = τ₁(Z_X)`, `Y = β τ₂(Z_X) + τ₃(Z_Y) + ε` for `count` rows.
    pub fn simulate<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> SimData {
        let latent = self.sample_latents(count, rng);
        let se = Normal::new(0.0, self.var_eps.sqrt()).expect("positive variance");
        let eps: Vec<f64> = (0..count).map(|_| se.sample(rng)).collect();
        let x = self.tau1.apply(&latent.z_x);
        let t2 = self.tau2.apply(&latent.z_x);
        let t3 = self.tau3.apply(&Tensor::column_vector(latent.z_y.clone()));
        let y: Vec<f64> = (0..count)
            .map(|i| self.spec.beta * t2.data()[i] + t3.data()[i] + eps[i])
            .collect();
        let data = Tensor::concat_cols(&[&x, &Tensor::column_vector(y)]).expect("rows agree");
        SimData {
            data,
            labels: latent.labels,
            z_x: latent.z_x,
            z_y: latent.z_y,
            eps,
        }
    }

    /// `z_X = τ₁⁻¹(x)` for each row of `x`.
    pub fn invert_tau1(&self, x: &Tensor) -> Result<Tensor, SimError> {
        if x.cols() != self.n() {
            return Err(SimError::Invalid(format!("expected {} cause columns", self.n())));
        }
        self.tau1.invert(x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SimError::Format(e.to_string()))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCENARIO_SCHEMA_VERSION as u64) {
            return Err(SimError::Format(format!(
                "unsupported scenario schema version {version:?}, expected {SCENARIO_SCHEMA_VERSION}"
            )));
        }
        serde_json::from_value(value).map_err(|e| SimError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        fs::write(path, self.to_json()).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    /// Monte-Carlo draws for `E[τ₃(Z_Y)]` when `τ₃` is not the identity.
    pub draws: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings { draws: 100_000, seed: 0 }
    }
}

/// `θ*(x) = β τ₂(τ₁⁻¹(x)) + E[τ₃(Z_Y)]`.
#[derive(Clone, Debug)]
pub struct GroundTruthOracle<'a> {
    scenario: &'a SimScenario,
    effect_mean: f64,
    effect_stderr: f64,
}

impl<'a> GroundTruthOracle<'a> {
    pub fn new(scenario: &'a SimScenario, settings: OracleSettings) -> Result<Self, SimError> {
        let q = scenario.joint.q_marginal();
        let (effect_mean, effect_stderr) = match &scenario.tau3 {
            Tau::Identity => (q.iter().zip(&scenario.nu_y).map(|(p, v)| p * v).sum(), 0.0),
            Tau::Net(_) => {
                if settings.draws < 100_000 {
                    return Err(SimError::Invalid("the oracle needs at least 1e5 draws".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                let pick = WeightedIndex::new(&q).expect("valid marginal");
                let noise = Normal::new(0.0, scenario.var_y.sqrt()).expect("positive variance");
                let zy: Vec<f64> = (0..settings.draws)
                    .map(|_| scenario.nu_y[pick.sample(&mut rng)] + noise.sample(&mut rng))
                    .collect();
                let t = scenario.tau3.apply(&Tensor::column_vector(zy));
                let m = t.data().iter().sum::<f64>() / settings.draws as f64;
                let var = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (settings.draws - 1) as f64;
                (m, (var / settings.draws as f64).sqrt())
            }
        };
        Ok(GroundTruthOracle {
            scenario,
            effect_mean,
            effect_stderr,
        })
    }

    /// `E[τ₃(Z_Y)]` and its Monte-Carlo standard error (0 when exact).
    pub fn effect_mean(&self) -> (f64, f64) {
        (self.effect_mean, self.effect_stderr)
    }

    pub fn theta_star_batch(&self, x: &Tensor) -> Result<Vec<f64>, SimError> {
        let z = self.scenario.invert_tau1(x)?;
        let t2 = self.scenario.tau2.apply(&z);
        Ok(t2
            .data()
            .iter()
            .map(|v| self.scenario.spec.beta * v + self.effect_mean)
            .collect())
    }

    pub fn theta_star(&self, x: &[f64]) -> Result<f64, SimError> {
        Ok(self.theta_star_batch(&Tensor::row_vector(x.to_vec()))?[0])
    }
}

/// Synthetic table in the shape of a birth-records study: three ordinal
/// causes, six discrete covariates of which three read out a hidden group,
/// and a continuous outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularStandIn {
    pub headers: Vec<String>,
    /// Row-major, `headers.len()` values per row; ordinals and codes are
    /// integer valued.
    pub rows: Vec<Vec<f64>>,
    pub causes: Vec<String>,
    pub confounders: Vec<String>,
    pub target: String,
    /// Coefficients of the causes in the outcome equation.
    pub beta: Vec<f64>,
}

pub fn tabular_standin(rows: usize, seed: u64) -> TabularStandIn {
    const GROUPS: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..GROUPS).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let group = WeightedIndex::new(raw.iter().map(|v| v / total)).expect("positive weights");
    // Group means of each ordinal cause, on a 0..=12 scale.
    let means: Vec<Vec<f64>> = {
        let mut m = vec![vec![0.0; 3]; GROUPS];
        for j in 0..3 {
            let mut order: Vec<usize> = (0..GROUPS).collect();
            order.shuffle(&mut rng);
            for (h, &rank) in order.iter().enumerate() {
                m[h][j] = 3.0 + 3.0 * rank as f64 + rng.random_range(-0.5..0.5);
            }
        }
        m
    };
    let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shift: Vec<f64> = (0..GROUPS).map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
    let covariate_levels = [2usize, 3, 4];
    let covariate_effect: Vec<Vec<f64>> = covariate_levels
        .iter()
        .map(|&k| (0..k).map(|_| rng.random_range(-0.1..0.1)).collect())
        .collect();
    let spread = Normal::new(0.0, 1.2).expect("valid");
    let noise = Normal::new(0.0, 0.5).expect("valid");
    let readout = |h: usize, keep: f64, rng: &mut ChaCha8Rng| -> f64 {
        if rng.random::<f64>() < keep {
            h as f64
        } else {
            rng.random_range(0..GROUPS) as f64
        }
    };
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let h = group.sample(&mut rng);
        let x: Vec<f64> = (0..3)
            .map(|j| (means[h][j] + spread.sample(&mut rng)).round().clamp(0.0, 12.0))
            .collect();
        let v1 = h as f64;
        let v2 = readout((h + 1) % GROUPS, 0.9, &mut rng);
        let v3 = readout((h + 2) % GROUPS, 0.8, &mut rng);
        let cov: Vec<usize> = covariate_levels.iter().map(|&k| rng.random_range(0..k)).collect();
        let y = 10.0
            + beta.iter().zip(&x).map(|(b, x)| b * x).sum::<f64>()
            + shift[h]
            + cov.iter().enumerate().map(|(i, &c)| covariate_effect[i][c]).sum::<f64>()
            + noise.sample(&mut rng);
        let mut row = x;
        row.extend([v1, v2, v3]);
        row.extend(cov.iter().map(|&c| c as f64));
        row.push(y);
        out.push(row);
    }
    let causes: Vec<String> = ["mother_age", "gestation", "education"].map(String::from).to_vec();
    let confounders: Vec<String> = ["v1", "v2", "v3", "v4", "v5", "v6"].map(String::from).to_vec();
    let target = "birth_weight".to_string();
    let headers = causes
        .iter()
        .chain(&confounders)
        .cloned()
        .chain(std::iter::once(target.clone()))
        .collect();
    TabularStandIn {
        headers,
        rows: out,
        causes,
        confounders,
        target,
        beta,
    }
}
