use std::ops::Range;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    activate, activate_with_slope, apply_slope, encode, finite_or, propagation_operators, spatial_backward,
    spatial_preactivation, temporal_backward, temporal_preactivation, Propagation, SpatialGrads,
};
use super::params::{ModelParams, Weights};
use super::EngineError;
use crate::spatial::SpatialGraph;
use crate::temporal::{Tap, TemporalOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Every layer on every step.
    Full,
    /// Only the steps the step-0 readout depends on. For time-then-space
    /// models this runs message passing on the most recent step alone.
    Readout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Temporal { block: usize, index: usize },
    Spatial { block: usize, index: usize },
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array3<f64>,
    /// `act'` at the pre-activation; empty for the identity.
    slope: Array3<f64>,
}

/// Result of a forward pass, holding what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    caches: Vec<LayerCache>,
    hidden: Array3<f64>,
    predictions: Array2<f64>,
    batch: usize,
    nodes: usize,
}

impl ForwardPass {
    /// Predictions as `[batch, node, output]`.
    pub fn predictions(&self) -> Array3<f64> {
        let (rows, dy) = self.predictions.dim();
        debug_assert_eq!(rows, self.batch * self.nodes);
        self.predictions
            .to_shape((self.batch, self.nodes, dy))
            .expect("row count is batch * nodes")
            .into_owned()
    }

    /// Final hidden state `[step, row, feature]` (only the computed steps).
    pub fn hidden(&self) -> &Array3<f64> {
        &self.hidden
    }
}

/// An MPTCN bound to a graph and a parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    graph: SpatialGraph,
    params: ModelParams,
    operators: Vec<TemporalOperator>,
    taps: Vec<Vec<Tap>>,
    propagation: Vec<Propagation>,
}

impl Model {
    /// Builds a model with parameters drawn from `config.seed`.
    pub fn init(config: ModelConfig, graph: SpatialGraph) -> Result<Self, EngineError> {
        config.validate()?;
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        Self::new(config, graph, params)
    }

    pub fn new(
        config: ModelConfig,
        graph: SpatialGraph,
        params: ModelParams,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if graph.num_nodes() != config.nodes {
            return Err(EngineError::Config(format!(
                "graph has {} nodes, config expects {}",
                graph.num_nodes(),
                config.nodes
            )));
        }
        let operators = config.temporal_operators()?;
        let taps = operators.iter().map(TemporalOperator::taps).collect();
        let propagation = propagation_operators(&graph, config.message_passing);
        let model = Self {
            config,
            graph,
            params,
            operators,
            taps,
            propagation,
        };
        model.check_params(&model.params)?;
        Ok(model)
    }

    fn check_params(&self, p: &ModelParams) -> Result<(), EngineError> {
        let c = &self.config;
        let (d, dx) = (c.hidden_dim, c.input_dim);
        let bad = |what: &str| Err(EngineError::Shape(format!("parameter layout mismatch: {what}")));
        if p.encoder.dim() != (dx, d) {
            return bad("encoder");
        }
        let w = &p.weights;
        if w.blocks.len() != c.outer_layers || w.readout.len() != c.horizon {
            return bad("block or readout count");
        }
        for block in &w.blocks {
            if block.temporal.len() != c.temporal_layers || block.spatial.len() != c.spatial_layers {
                return bad("layer count");
            }
            for (layer, op) in block.temporal.iter().zip(&self.operators) {
                if layer.kernels.len() != op.kernel_count()
                    || layer.kernels.iter().any(|k| k.dim() != (d, d))
                {
                    return bad("temporal kernels");
                }
            }
            for layer in &block.spatial {
                if layer.update.dim() != (d, d)
                    || layer.messages.len() != self.propagation.len()
                    || layer.messages.iter().any(|m| m.dim() != (d, d))
                {
                    return bad("spatial weights");
                }
            }
        }
        if w.readout.iter().any(|r| r.dim() != (d, dx)) {
            return bad("readout");
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &SpatialGraph {
        &self.graph
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Replaces the trainable weights; the layout must match.
    pub fn set_weights(&mut self, weights: Weights) -> Result<(), EngineError> {
        let candidate = ModelParams {
            encoder: self.params.encoder.clone(),
            weights,
        };
        self.check_params(&candidate)?;
        self.params = candidate;
        Ok(())
    }

    pub fn set_params(&mut self, params: ModelParams) -> Result<(), EngineError> {
        self.check_params(&params)?;
        self.params = params;
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Weights {
        &mut self.params.weights
    }

    /// Temporal operators of one block, in order.
    pub fn temporal_operators(&self) -> &[TemporalOperator] {
        &self.operators
    }

    pub fn propagation(&self) -> &[Propagation] {
        &self.propagation
    }

    /// Flat layer sequence: per block, `L_T` temporal layers then `L_S` spatial.
    pub fn layers(&self) -> Vec<LayerKind> {
        let c = &self.config;
        (0..c.outer_layers)
            .flat_map(|block| {
                (0..c.temporal_layers)
                    .map(move |index| LayerKind::Temporal { block, index })
                    .chain((0..c.spatial_layers).map(move |index| LayerKind::Spatial { block, index }))
            })
            .collect()
    }

    /// Number of output steps each layer in `range` must produce.
    fn step_plan(&self, range: Range<usize>, mode: ForwardMode) -> Vec<usize> {
        let steps = self.config.window;
        let layers = self.layers();
        match mode {
            ForwardMode::Full => vec![steps; range.len()],
            ForwardMode::Readout => {
                let mut plan = vec![0; range.len()];
                let mut needed = 1;
                for (slot, l) in range.clone().enumerate().rev() {
                    plan[slot] = needed;
                    if let LayerKind::Temporal { index, .. } = layers[l] {
                        needed = steps.min(needed + self.operators[index].reach());
                    }
                }
                plan
            }
        }
    }

    fn run(
        &self,
        mut state: Array3<f64>,
        range: Range<usize>,
        mode: ForwardMode,
        keep: bool,
    ) -> Result<(Array3<f64>, Vec<LayerCache>), EngineError> {
        let layers = self.layers();
        let plan = self.step_plan(range.clone(), mode);
        let act = self.config.activation;
        let mut caches = Vec::with_capacity(if keep { range.len() } else { 0 });
        for (slot, l) in range.enumerate() {
            let out_steps = plan[slot];
            let (input, pre) = match layers[l] {
                LayerKind::Temporal { block, index } => {
                    let kernels = &self.params.weights.blocks[block].temporal[index].kernels;
                    let pre = temporal_preactivation(state.view(), &self.taps[index], kernels, out_steps);
                    (state, pre)
                }
                LayerKind::Spatial { block, index } => {
                    let p = &self.params.weights.blocks[block].spatial[index];
                    if state.dim().0 > out_steps {
                        state = state.slice(s![0..out_steps, .., ..]).to_owned();
                    }
                    let pre =
                        spatial_preactivation(state.view(), &p.update, &p.messages, &self.propagation);
                    (state, pre)
                }
            };
            if keep {
                let (out, slope) = activate_with_slope(&pre, act);
                state = finite_or(out, l)?;
                caches.push(LayerCache { input, slope });
            } else {
                state = finite_or(activate(&pre, act), l)?;
            }
        }
        Ok((state, caches))
    }

    /// Reverse pass over the layers whose caches are given, ending at layer
    /// `first`. Returns the gradient with respect to the input of `first`.
    fn backprop(
        &self,
        caches: &[LayerCache],
        first: usize,
        mut grad: Array3<f64>,
        mut grads: Option<&mut Weights>,
        input_grad: bool,
    ) -> Option<Array3<f64>> {
        let layers = self.layers();
        let act = self.config.activation;
        for (slot, cache) in caches.iter().enumerate().rev() {
            let l = first + slot;
            let need_input = input_grad || slot > 0;
            apply_slope(&mut grad, &cache.slope, act);
            let next = match layers[l] {
                LayerKind::Temporal { block, index } => {
                    let kernels = &self.params.weights.blocks[block].temporal[index].kernels;
                    let g = grads
                        .as_deref_mut()
                        .map(|w| w.blocks[block].temporal[index].kernels.as_mut_slice());
                    temporal_backward(
                        cache.input.view(),
                        &self.taps[index],
                        kernels,
                        grad.view(),
                        g,
                        need_input,
                    )
                }
                LayerKind::Spatial { block, index } => {
                    let p = &self.params.weights.blocks[block].spatial[index];
                    let g = grads.as_deref_mut().map(|w| {
                        let layer = &mut w.blocks[block].spatial[index];
                        SpatialGrads {
                            update: &mut layer.update,
                            messages: layer.messages.as_mut_slice(),
                        }
                    });
                    spatial_backward(
                        cache.input.view(),
                        &p.update,
                        &p.messages,
                        &self.propagation,
                        grad.view(),
                        g,
                        need_input,
                    )
                }
            };
            match next {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    fn check_input(&self, x: &ArrayView4<f64>) -> Result<(), EngineError> {
        let (_, n, t, dx) = x.dim();
        let c = &self.config;
        if (n, t, dx) != (c.nodes, c.window, c.input_dim) {
            return Err(EngineError::Shape(format!(
                "input is [_, {n}, {t}, {dx}], model expects [_, {}, {}, {}]",
                c.nodes, c.window, c.input_dim
            )));
        }
        Ok(())
    }

    /// Post-encoder state `[step, row, feature]` for inputs `[batch, node, step, feature]`.
    pub fn encode(&self, x: ArrayView4<f64>) -> Result<Array3<f64>, EngineError> {
        self.check_input(&x)?;
        encode(x, self.params.encoder.view())
    }

    fn readout(&self, hidden: &Array3<f64>) -> Array2<f64> {
        let last = hidden.index_axis(Axis(0), 0);
        let views: Vec<_> = self.params.weights.readout.iter().map(|r| last.dot(r)).collect();
        let views: Vec<_> = views.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("readout blocks share the row count")
    }

    /// Encoder, all STMP blocks and the step-0 readout.
    pub fn forward(&self, x: ArrayView4<f64>, mode: ForwardMode) -> Result<ForwardPass, EngineError> {
        let h0 = self.encode(x)?;
        let (hidden, caches) = self.run(h0, 0..self.layers().len(), mode, true)?;
        let predictions = self.readout(&hidden);
        Ok(ForwardPass {
            caches,
            hidden,
            predictions,
            batch: x.dim().0,
            nodes: self.config.nodes,
        })
    }

    /// Predictions `[batch, node, output]` without keeping caches.
    pub fn predict(&self, x: ArrayView4<f64>) -> Result<Array3<f64>, EngineError> {
        let h0 = self.encode(x)?;
        let (hidden, _) = self.run(h0, 0..self.layers().len(), ForwardMode::Readout, false)?;
        let p = self.readout(&hidden);
        let dy = p.ncols();
        Ok(p.to_shape((x.dim().0, self.config.nodes, dy))
            .expect("row count is batch * nodes")
            .into_owned())
    }

    /// Gradients of a scalar loss with respect to every trainable tensor,
    /// given `dLoss/dPrediction` as `[batch, node, output]`.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_pred: ArrayView3<f64>,
    ) -> Result<Weights, EngineError> {
        if pass.caches.len() != self.layers().len() {
            return Err(EngineError::MissingCache);
        }
        let (b, n, dy) = grad_pred.dim();
        if (b, n, dy) != (pass.batch, pass.nodes, self.config.output_dim()) {
            return Err(EngineError::Shape(format!(
                "prediction gradient is [{b}, {n}, {dy}], expected [{}, {}, {}]",
                pass.batch,
                pass.nodes,
                self.config.output_dim()
            )));
        }
        let gp = grad_pred
            .to_shape((b * n, dy))
            .expect("reshape of prediction gradient");
        let mut grads = self.params.weights.zeros_like();
        let last = pass.hidden.index_axis(Axis(0), 0);
        let dx = self.config.input_dim;
        let mut g_last = Array2::<f64>::zeros(last.raw_dim());
        for (k, r) in self.params.weights.readout.iter().enumerate() {
            let block = gp.slice(s![.., k * dx..(k + 1) * dx]);
            grads.readout[k] = last.t().dot(&block);
            g_last += &block.dot(&r.t());
        }
        let mut g_hidden = Array3::zeros(pass.hidden.raw_dim());
        g_hidden.index_axis_mut(Axis(0), 0).assign(&g_last);
        self.backprop(&pass.caches, 0, g_hidden, Some(&mut grads), false);
        if !grads.is_finite() {
            return Err(EngineError::NanGradient);
        }
        Ok(grads)
    }

    /// Runs layers `range` on a post-encoder state, computing every step.
    pub fn propagate(
        &self,
        state: ArrayView3<f64>,
        range: Range<usize>,
    ) -> Result<Array3<f64>, EngineError> {
        self.check_range(&range, state)?;
        Ok(self.run(state.to_owned(), range, ForwardMode::Full, false)?.0)
    }

    /// One STMP block (`block` is 0-based) applied on every step.
    pub fn stmp_layer(&self, state: ArrayView3<f64>, block: usize) -> Result<Array3<f64>, EngineError> {
        let per_block = self.config.temporal_layers + self.config.spatial_layers;
        if block >= self.config.outer_layers {
            return Err(EngineError::Shape(format!("no block {block}")));
        }
        self.propagate(state, block * per_block..(block + 1) * per_block)
    }

    fn check_range(&self, range: &Range<usize>, state: ArrayView3<f64>) -> Result<(), EngineError> {
        let (t, rows, d) = state.dim();
        if range.start > range.end || range.end > self.layers().len() {
            return Err(EngineError::Shape(format!("layer range {range:?} out of bounds")));
        }
        if t != self.config.window || rows % self.config.nodes != 0 || d != self.config.hidden_dim {
            return Err(EngineError::Shape(format!(
                "state is [{t}, {rows}, {d}], expected [{}, k*{}, {}]",
                self.config.window, self.config.nodes, self.config.hidden_dim
            )));
        }
        Ok(())
    }

    /// Jacobians of the output of layers `range` at `(node v, step j)` with
    /// respect to the single-sample input state `[step, node, feature]`.
    ///
    /// Returns `J[i, u, a, b] = d out[j, v, a] / d state[i, u, b]`. All output
    /// coordinates are handled in one reverse pass by replicating the sample.
    pub fn jacobians(
        &self,
        state: ArrayView3<f64>,
        range: Range<usize>,
        target: (usize, usize),
    ) -> Result<Array4<f64>, EngineError> {
        let (v, j) = target;
        let (t, n, d) = state.dim();
        if n != self.config.nodes {
            return Err(EngineError::Shape(format!("state must hold a single sample of {} nodes", self.config.nodes)));
        }
        self.check_range(&range, state)?;
        if v >= n || j >= t {
            return Err(EngineError::Shape(format!("target ({v}, {j}) out of range")));
        }
        if range.is_empty() {
            let mut jac = Array4::zeros((t, n, d, d));
            for a in 0..d {
                jac[[j, v, a, a]] = 1.0;
            }
            return Ok(jac);
        }
        let mut replicated = Array3::zeros((t, d * n, d));
        for a in 0..d {
            replicated.slice_mut(s![.., a * n..(a + 1) * n, ..]).assign(&state);
        }
        let (out, caches) = self.run(replicated, range.clone(), ForwardMode::Full, true)?;
        let mut seed = Array3::zeros(out.raw_dim());
        for a in 0..d {
            seed[[j, a * n + v, a]] = 1.0;
        }
        let g = self
            .backprop(&caches, range.start, seed, None, true)
            .expect("input gradient requested");
        let mut jac = Array4::zeros((t, n, d, d));
        for a in 0..d {
            jac.slice_mut(s![.., .., a, ..])
                .assign(&g.slice(s![.., a * n..(a + 1) * n, ..]));
        }
        Ok(jac)
    }
}
