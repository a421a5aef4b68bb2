//! Sensitivity bounds for MPTCNs and their empirical verification.
//!
//! A bound factorizes into a node factor and a step factor:
//! `(c_xi theta_m)^{L L_S} (S^{L L_S})_{uv} * (c_sigma w)^{L L_T} (R^{L L_T})_{ij}`.

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::layers::effective_shift;
use crate::engine::{EngineError, Model, ModelConfig};
use crate::linalg::{matrix_power, SpectralNormError};
use crate::spatial::{message_passing_matrix_from_shift, GraphError};
use crate::temporal::{layer_product, TemporalOperator, TopologyError};

pub use crate::linalg::spectral_norm;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error(
        "bound violated at (u={u}, v={v}, i={i}, j={j}): empirical {empirical:.6e} > bound {bound:.6e}"
    )]
    BoundViolated {
        u: usize,
        v: usize,
        i: usize,
        j: usize,
        empirical: f64,
        bound: f64,
    },
    #[error("nonzero Jacobian outside the receptive field at (u={u}, v={v}, i={i}, j={j})")]
    SupportViolated { u: usize, v: usize, i: usize, j: usize },
    #[error("index ({0}) out of range")]
    IndexOutOfRange(String),
    #[error("factorization needs a single outer layer, model has {0}")]
    NotDecoupled(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    SpectralNorm(#[from] SpectralNormError),
}

/// Absolute tolerance on `bound - empirical`.
pub const SLACK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c_sigma: f64,
    pub w: f64,
    pub c_xi: f64,
    pub theta_m: f64,
    pub theta_u: f64,
    pub c1: f64,
    pub c2: f64,
}

impl BoundConstants {
    /// Measures weight norms of a model. Messages are `phi(h_v, h_u) = h_u`,
    /// so `c1 = 0` and `c2 = 1`.
    pub fn from_model(model: &Model) -> Result<Self, SensitivityError> {
        let weights = &model.params().weights;
        let mut w: f64 = 0.0;
        let mut theta_u: f64 = 0.0;
        let mut theta_m: f64 = 0.0;
        for block in &weights.blocks {
            for layer in &block.temporal {
                for k in &layer.kernels {
                    w = w.max(spectral_norm(k.view())?);
                }
            }
            for layer in &block.spatial {
                theta_u = theta_u.max(spectral_norm(layer.update.view())?);
                for m in &layer.messages {
                    theta_m = theta_m.max(spectral_norm(m.view())?);
                }
            }
        }
        let c = model.config().activation.derivative_bound();
        Ok(Self {
            c_sigma: c,
            w,
            c_xi: c,
            theta_m,
            theta_u,
            c1: 0.0,
            c2: 1.0,
        })
    }
}

/// `(c_sigma w)^{L_T}` times the product of the stacked operators.
pub fn tcn_bound(stack: &[TemporalOperator], constants: &BoundConstants) -> Result<Array2<f64>, SensitivityError> {
    let product = layer_product(stack)?;
    let scale = (constants.c_sigma * constants.w).powi(stack.len() as i32);
    Ok(product.mapv(|v| scale * v.abs()))
}

/// Homogeneous stack: `(c_sigma w)^{L_T} R^{L_T}`.
pub fn tcn_bound_power(op: &TemporalOperator, layers: usize, constants: &BoundConstants) -> Array2<f64> {
    let scale = (constants.c_sigma * constants.w).powi(layers as i32);
    matrix_power(&op.entries().mapv(f64::abs), layers).mapv(|v| scale * v)
}

/// Bound on `|| d h_{t-j}^{v(L)} / d h_{t-i}^{u(0)} ||` for `L` blocks of
/// `L_T` temporal and `L_S` spatial layers sharing the operators `S` and `R`.
#[allow(clippy::too_many_arguments)]
pub fn mptcn_bound(
    s: &Array2<f64>,
    r: &Array2<f64>,
    outer: usize,
    temporal_layers: usize,
    spatial_layers: usize,
    constants: &BoundConstants,
    (u, v): (usize, usize),
    (i, j): (usize, usize),
) -> Result<f64, SensitivityError> {
    if u >= s.nrows() || v >= s.nrows() || i >= r.nrows() || j >= r.nrows() {
        return Err(SensitivityError::IndexOutOfRange(format!("u={u}, v={v}, i={i}, j={j}")));
    }
    let bs = outer * spatial_layers;
    let bt = outer * temporal_layers;
    let space = (constants.c_xi * constants.theta_m).powi(bs as i32) * matrix_power(s, bs)[[u, v]];
    let time = (constants.c_sigma * constants.w).powi(bt as i32) * matrix_power(r, bt)[[i, j]];
    Ok(space * time)
}

/// Node and step factors of a model's bound; `bound = space[u,v] * time[i,j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBound {
    pub constants: BoundConstants,
    pub space: Array2<f64>,
    pub time: Array2<f64>,
}

impl ModelBound {
    pub fn new(model: &Model) -> Result<Self, SensitivityError> {
        let constants = BoundConstants::from_model(model)?;
        let config = model.config();
        let nodes = config.nodes;
        let spatial_budget = config.spatial_budget();
        let shift = effective_shift(model.propagation(), nodes);
        let space = if spatial_budget == 0 {
            Array2::eye(nodes)
        } else if constants.theta_m > 0.0 {
            let s = message_passing_matrix_from_shift(
                &shift,
                constants.theta_u / constants.theta_m,
                constants.c1,
                constants.c2,
            )?;
            let scale = (constants.c_xi * constants.theta_m).powi(spatial_budget as i32);
            s.power(spatial_budget).mapv(|x| scale * x)
        } else {
            // without message weights only the self term remains
            let mut s = shift.mapv(|x| constants.theta_m * x);
            s.diag_mut().mapv_inplace(|x| x + constants.theta_u);
            let scale = constants.c_xi.powi(spatial_budget as i32);
            matrix_power(&s, spatial_budget).mapv(|x| scale * x)
        };
        let time = tcn_bound(&config.temporal_stack()?, &constants)?;
        Ok(Self {
            constants,
            space,
            time,
        })
    }

    pub fn bound(&self, (u, v): (usize, usize), (i, j): (usize, usize)) -> f64 {
        self.space[[u, v]] * self.time[[i, j]]
    }
}

fn check_state(model: &Model, state: ArrayView3<f64>) -> Result<(), SensitivityError> {
    let c = model.config();
    if state.dim() != (c.window, c.nodes, c.hidden_dim) {
        return Err(EngineError::Shape(format!(
            "state is {:?}, expected [{}, {}, {}]",
            state.dim(),
            c.window,
            c.nodes,
            c.hidden_dim
        ))
        .into());
    }
    Ok(())
}

fn all_layers(model: &Model) -> Range<usize> {
    0..model.layers().len()
}

/// `d h_{t-j}^{v(L)} / d h_{t-i}^{u(0)}` as a `d x d` matrix, for a
/// post-encoder state `[step, node, feature]`.
pub fn empirical_jacobian(
    model: &Model,
    state: ArrayView3<f64>,
    (v, j): (usize, usize),
    (u, i): (usize, usize),
) -> Result<Array2<f64>, SensitivityError> {
    check_state(model, state)?;
    if u >= model.config().nodes || i >= model.config().window {
        return Err(SensitivityError::IndexOutOfRange(format!("source ({u}, {i})")));
    }
    let jac = model.jacobians(state, all_layers(model), (v, j))?;
    Ok(jac.slice(s![i, u, .., ..]).to_owned())
}

/// The same Jacobian by central finite differences.
pub fn finite_difference_jacobian(
    model: &Model,
    state: ArrayView3<f64>,
    (v, j): (usize, usize),
    (u, i): (usize, usize),
    step: f64,
) -> Result<Array2<f64>, SensitivityError> {
    check_state(model, state)?;
    let d = model.config().hidden_dim;
    let range = all_layers(model);
    let mut jac = Array2::zeros((d, d));
    let mut probe = state.to_owned();
    for b in 0..d {
        let original = probe[[i, u, b]];
        probe[[i, u, b]] = original + step;
        let plus = model.propagate(probe.view(), range.clone())?;
        probe[[i, u, b]] = original - step;
        let minus = model.propagate(probe.view(), range.clone())?;
        probe[[i, u, b]] = original;
        for a in 0..d {
            jac[[a, b]] = (plus[[j, v, a]] - minus[[j, v, a]]) / (2.0 * step);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub u: usize,
    pub v: usize,
    pub i: usize,
    pub j: usize,
    /// Largest Jacobian spectral norm over the probed inputs.
    pub empirical: f64,
    pub bound: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub fingerprint: String,
    pub constants: BoundConstants,
    pub inputs: usize,
    pub worst_slack: f64,
    pub entries: Vec<ReportEntry>,
}

impl SensitivityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,i,j,empirical,bound,slack\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{:.16e},{:.16e},{:.16e}\n",
                e.u, e.v, e.i, e.j, e.empirical, e.bound, e.slack
            ));
        }
        out
    }
}

/// SHA-256 of the model's parameter bundle.
pub fn fingerprint(model: &Model) -> String {
    let json = serde_json::to_vec(&model.params().to_bundle()).expect("bundle serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// `(u, v, i, j)` index quadruple.
pub type Quad = (usize, usize, usize, usize);

/// Compares the bound with Jacobians at `inputs` random post-encoder states
/// (uniform on `[-1, 1]`), over `indices` or every `(u, v, i, j)`.
///
/// Fails on the first entry whose slack is below `-1e-9`, and on any nonzero
/// Jacobian where the bound is exactly zero.
pub fn verify_bounds(
    model: &Model,
    inputs: usize,
    seed: u64,
    indices: Option<&[Quad]>,
) -> Result<SensitivityReport, SensitivityError> {
    let c = model.config();
    let (n, t, d) = (c.nodes, c.window, c.hidden_dim);
    let all: Vec<Quad>;
    let indices = match indices {
        Some(q) => q,
        None => {
            all = (0..n)
                .flat_map(|u| (0..n).flat_map(move |v| (0..t).flat_map(move |i| (0..t).map(move |j| (u, v, i, j)))))
                .collect();
            &all
        }
    };
    if let Some(q) = indices.iter().find(|&&(u, v, i, j)| u >= n || v >= n || i >= t || j >= t) {
        return Err(SensitivityError::IndexOutOfRange(format!("{q:?}")));
    }
    let bounds = ModelBound::new(model)?;
    let mut empirical = vec![0.0f64; indices.len()];
    let mut targets: Vec<(usize, usize)> = indices.iter().map(|&(_, v, _, j)| (v, j)).collect();
    targets.sort_unstable();
    targets.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..inputs {
        let state = Array3::from_shape_fn((t, n, d), |_| rng.gen_range(-1.0..1.0));
        for &(v, j) in &targets {
            let jac = model.jacobians(state.view(), all_layers(model), (v, j))?;
            for (slot, &(u, qv, i, qj)) in indices.iter().enumerate() {
                if (qv, qj) != (v, j) {
                    continue;
                }
                let block = jac.slice(s![i, u, .., ..]);
                let bound = bounds.bound((u, v), (i, j));
                if bound == 0.0 && block.iter().any(|&x| x != 0.0) {
                    return Err(SensitivityError::SupportViolated { u, v, i, j });
                }
                empirical[slot] = empirical[slot].max(spectral_norm(block)?);
            }
        }
    }
    let mut entries = Vec::with_capacity(indices.len());
    let mut worst_slack = f64::INFINITY;
    for (&(u, v, i, j), &emp) in indices.iter().zip(&empirical) {
        let bound = bounds.bound((u, v), (i, j));
        let slack = bound - emp;
        if slack < -SLACK_TOLERANCE {
            return Err(SensitivityError::BoundViolated {
                u,
                v,
                i,
                j,
                empirical: emp,
                bound,
            });
        }
        worst_slack = worst_slack.min(slack);
        entries.push(ReportEntry {
            u,
            v,
            i,
            j,
            empirical: emp,
            bound,
            slack,
        });
    }
    Ok(SensitivityReport {
        fingerprint: fingerprint(model),
        constants: bounds.constants,
        inputs,
        worst_slack,
        entries,
    })
}

/// `max |J_end_to_end - J_space J_time|` for a single-block model, where
/// `J_time = d z_{t-j}^u / d h_{t-i}^u` crosses the temporal stack and
/// `J_space = d h_{t-j}^v / d z_{t-j}^u` the message-passing stack.
pub fn factorization_check(
    model: &Model,
    state: ArrayView3<f64>,
    (v, j): (usize, usize),
    (u, i): (usize, usize),
) -> Result<f64, SensitivityError> {
    let c = model.config();
    if c.outer_layers != 1 {
        return Err(SensitivityError::NotDecoupled(c.outer_layers));
    }
    check_state(model, state)?;
    if u >= c.nodes || v >= c.nodes || i >= c.window || j >= c.window {
        return Err(SensitivityError::IndexOutOfRange(format!("({v}, {j}), ({u}, {i})")));
    }
    let split = c.temporal_layers;
    let end = all_layers(model).end;
    let z = model.propagate(state, 0..split)?;
    let time = model.jacobians(state, 0..split, (u, j))?;
    let space = model.jacobians(z.view(), split..end, (v, j))?;
    let full = model.jacobians(state, 0..end, (v, j))?;
    let j_time = time.slice(s![i, u, .., ..]);
    let j_space = space.slice(s![j, u, .., ..]);
    let product = j_space.dot(&j_time);
    Ok(full
        .slice(s![i, u, .., ..])
        .iter()
        .zip(product.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Message passing on every step of every block.
    Naive,
    /// Message passing restricted to the most recent step in the last block.
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub temporal_ops: u128,
    pub spatial_ops: u128,
}

/// Multiply-accumulate counts for one forward pass.
///
/// Temporal: `L L_T N P d^2`. Spatial per layer and step: `|E| d^2 + 2 N d^2`,
/// applied on `L L_S T` layer-steps (naive) or `((L - 1) L_S T + L_S)`
/// layer-steps (optimized).
pub fn complexity_estimate(config: &ModelConfig, num_edges: usize, mode: CostMode) -> OpCounts {
    let (l, lt, ls) = (
        config.outer_layers as u128,
        config.temporal_layers as u128,
        config.spatial_layers as u128,
    );
    let (n, t, p, d) = (
        config.nodes as u128,
        config.window as u128,
        config.kernel_size as u128,
        config.hidden_dim as u128,
    );
    let per_layer = num_edges as u128 * d * d + 2 * n * d * d;
    let layer_steps = match mode {
        CostMode::Naive => l * ls * t,
        CostMode::Optimized if l == 0 => 0,
        CostMode::Optimized => (l - 1) * ls * t + ls,
    };
    OpCounts {
        temporal_ops: l * lt * n * p * d * d,
        spatial_ops: layer_steps * per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::build_causal;

    fn unit() -> BoundConstants {
        BoundConstants {
            c_sigma: 1.0,
            w: 1.0,
            c_xi: 1.0,
            theta_m: 1.0,
            theta_u: 1.0,
            c1: 0.0,
            c2: 1.0,
        }
    }

    #[test]
    fn tcn_bound_examples() {
        let r = build_causal(5, 2, None).unwrap();
        assert_eq!(tcn_bound(&[r.clone()], &unit()).unwrap(), *r.entries());
        let b = tcn_bound(&vec![r.clone(); 4], &unit()).unwrap();
        assert_eq!(b.column(0).to_vec(), vec![1.0, 4.0, 6.0, 4.0, 1.0]);
        assert_eq!(tcn_bound_power(&r, 4, &unit()), b);
        let scaled = BoundConstants { w: 3.0, ..unit() };
        assert_eq!(tcn_bound_power(&r, 2, &scaled)[[4, 0]], 0.0);
    }

    #[test]
    fn complexity_examples() {
        let c = ModelConfig {
            outer_layers: 2,
            temporal_layers: 2,
            spatial_layers: 1,
            window: 12,
            nodes: 10,
            hidden_dim: 4,
            ..Default::default()
        };
        assert_eq!(complexity_estimate(&c, 20, CostMode::Naive).spatial_ops, 15360);
        let tts = ModelConfig { outer_layers: 1, ..c.clone() };
        let naive = complexity_estimate(&tts, 20, CostMode::Naive);
        let opt = complexity_estimate(&tts, 20, CostMode::Optimized);
        assert_eq!(opt.spatial_ops * 12, naive.spatial_ops);
        assert_eq!(opt.temporal_ops, naive.temporal_ops);
        let none = ModelConfig { spatial_layers: 0, ..c };
        assert_eq!(complexity_estimate(&none, 20, CostMode::Naive).spatial_ops, 0);
    }
}
