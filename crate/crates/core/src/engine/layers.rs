//! Layer kernels on hidden states laid out as `[step, row, feature]`.
//!
//! Step 0 is the most recent time step. Rows enumerate `batch * nodes + node`.
//! All maps are row-vector products `h W`, without bias.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::activation::Activation;
use super::config::MessagePassing;
use super::EngineError;
use crate::spatial::{incoming_transition, outgoing_transition, SpatialGraph};
use crate::temporal::{Tap, TemporalOperator};

fn flat(v: ArrayView3<'_, f64>) -> ArrayView2<'_, f64> {
    let (a, b, c) = v.dim();
    v.into_shape_with_order((a * b, c))
        .expect("step slices of a standard-layout state are contiguous")
}

/// `x E` for every node and step. Input is `[batch, node, step, feature]`.
pub fn encode(x: ArrayView4<f64>, encoder: ArrayView2<f64>) -> Result<Array3<f64>, EngineError> {
    let (batch, nodes, steps, dx) = x.dim();
    if dx != encoder.nrows() {
        return Err(EngineError::Shape(format!(
            "input has {dx} features, encoder expects {}",
            encoder.nrows()
        )));
    }
    let d = encoder.ncols();
    let mut h = Array3::zeros((steps, batch * nodes, d));
    for t in 0..steps {
        let xt = x.slice(s![.., .., t, ..]);
        let xt = xt.to_shape((batch * nodes, dx)).expect("reshape of a 3-d slice");
        general_mat_mul(1.0, &xt, &encoder, 0.0, &mut h.index_axis_mut(Axis(0), t));
    }
    Ok(h)
}

pub fn activate(z: &Array3<f64>, act: Activation) -> Array3<f64> {
    match act {
        Activation::Identity => z.clone(),
        _ => z.mapv(|v| act.apply(v)),
    }
}

/// `(act(z), act'(z))`; the slope is empty for the identity.
pub fn activate_with_slope(z: &Array3<f64>, act: Activation) -> (Array3<f64>, Array3<f64>) {
    if act == Activation::Identity {
        return (z.clone(), Array3::zeros((0, 0, 0)));
    }
    let mut out = Array3::zeros(z.raw_dim());
    let mut slope = Array3::zeros(z.raw_dim());
    ndarray::Zip::from(&mut out).and(&mut slope).and(z).for_each(|o, s, &v| {
        (*o, *s) = act.apply_with_derivative(v);
    });
    (out, slope)
}

/// Multiplies an upstream gradient by a slope from [`activate_with_slope`].
pub fn apply_slope(grad: &mut Array3<f64>, slope: &Array3<f64>, act: Activation) {
    if act != Activation::Identity {
        *grad *= slope;
    }
}

/// Pre-activation of a causal convolution for output steps `0..out_steps`.
///
/// Output step `j` collects `coeff * h[j + offset] W_kernel` over all taps;
/// inputs beyond the available steps are treated as zero.
pub fn temporal_preactivation(
    h: ArrayView3<f64>,
    taps: &[Tap],
    kernels: &[Array2<f64>],
    out_steps: usize,
) -> Array3<f64> {
    let (steps, rows, d) = h.dim();
    let mut z = Array3::zeros((out_steps, rows, kernels.first().map_or(d, |k| k.ncols())));
    for tap in taps {
        let count = out_steps.min(steps.saturating_sub(tap.offset));
        if count == 0 {
            continue;
        }
        let src = flat(h.slice(s![tap.offset..tap.offset + count, .., ..]));
        let w = &kernels[tap.kernel];
        match tap.uniform() {
            Some(c) => {
                let mut dst = z.slice_mut(s![0..count, .., ..]);
                let mut dst = dst
                    .view_mut()
                    .into_shape_with_order((count * rows, w.ncols()))
                    .expect("contiguous prefix");
                general_mat_mul(c, &src, w, 1.0, &mut dst);
            }
            None => {
                let y = src.dot(w);
                for j in 0..count {
                    let c = tap.coeffs[j];
                    if c != 0.0 {
                        z.index_axis_mut(Axis(0), j)
                            .scaled_add(c, &y.slice(s![j * rows..(j + 1) * rows, ..]));
                    }
                }
            }
        }
    }
    z
}

/// Backward of [`temporal_preactivation`] given `gz = dLoss/dz`.
///
/// Accumulates kernel gradients when `grads` is given and returns the input
/// gradient when `input_grad` is set.
pub fn temporal_backward(
    h: ArrayView3<f64>,
    taps: &[Tap],
    kernels: &[Array2<f64>],
    gz: ArrayView3<f64>,
    mut grads: Option<&mut [Array2<f64>]>,
    input_grad: bool,
) -> Option<Array3<f64>> {
    let (steps, rows, _) = h.dim();
    let out_steps = gz.dim().0;
    let mut gh = input_grad.then(|| Array3::zeros(h.raw_dim()));
    for tap in taps {
        let count = out_steps.min(steps.saturating_sub(tap.offset));
        if count == 0 {
            continue;
        }
        let w = &kernels[tap.kernel];
        let g_slice = gz.slice(s![0..count, .., ..]);
        let (alpha, scaled) = match tap.uniform() {
            Some(c) => (c, None),
            None => {
                let mut g = g_slice.to_owned();
                for (j, mut step) in g.outer_iter_mut().enumerate() {
                    step *= tap.coeffs[j];
                }
                (1.0, Some(g))
            }
        };
        let g2 = match &scaled {
            Some(g) => flat(g.view()),
            None => flat(g_slice),
        };
        if let Some(grads) = grads.as_deref_mut() {
            let src = flat(h.slice(s![tap.offset..tap.offset + count, .., ..]));
            general_mat_mul(alpha, &src.t(), &g2, 1.0, &mut grads[tap.kernel]);
        }
        if let Some(gh) = gh.as_mut() {
            let mut dst = gh.slice_mut(s![tap.offset..tap.offset + count, .., ..]);
            let mut dst = dst
                .view_mut()
                .into_shape_with_order((count * rows, w.nrows()))
                .expect("contiguous slice");
            general_mat_mul(alpha, &g2, &w.t(), 1.0, &mut dst);
        }
    }
    gh
}

/// Sparse propagation operator on `nodes` nodes: `(target, source, weight)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    nodes: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Propagation {
    /// From a dense matrix whose row `v` aggregates into node `v`.
    pub fn from_dense(m: &Array2<f64>) -> Self {
        let entries = m
            .indexed_iter()
            .filter(|(_, &w)| w != 0.0)
            .map(|((v, u), &w)| (v, u, w))
            .collect();
        Self {
            nodes: m.nrows(),
            entries,
        }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    fn apply(&self, x: ArrayView3<f64>, transpose: bool) -> Array3<f64> {
        let (steps, rows, d) = x.dim();
        let batch = rows / self.nodes;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array3::zeros((steps, rows, d));
        let dst = out.as_slice_mut().expect("fresh array");
        for t in 0..steps {
            for b in 0..batch {
                let base = (t * rows + b * self.nodes) * d;
                for &(v, u, w) in &self.entries {
                    let (to, from) = if transpose { (u, v) } else { (v, u) };
                    let to = base + to * d;
                    let from = base + from * d;
                    for k in 0..d {
                        dst[to + k] += w * src[from + k];
                    }
                }
            }
        }
        out
    }

    /// `(Q x)_v = sum_u Q[v][u] x_u` for every step and batch element.
    pub fn propagate(&self, x: ArrayView3<f64>) -> Array3<f64> {
        self.apply(x, false)
    }

    /// `(Q^T g)_u = sum_v Q[v][u] g_v`.
    pub fn propagate_transpose(&self, g: ArrayView3<f64>) -> Array3<f64> {
        self.apply(g, true)
    }
}

/// Propagation operators of one message-passing variant, one per message weight.
///
/// The simple variant sums raw in-neighbour features, `Q = A^T`. The diffusion
/// variant uses powers `1..=K` of the incoming transition matrix followed by
/// powers `1..=K` of the outgoing one.
pub fn propagation_operators(graph: &SpatialGraph, variant: MessagePassing) -> Vec<Propagation> {
    match variant {
        MessagePassing::Simple => vec![Propagation::from_dense(&graph.adjacency().reversed_axes())],
        MessagePassing::Diffusion { hops } => {
            let mut ops = Vec::with_capacity(2 * hops);
            for base in [incoming_transition(graph), outgoing_transition(graph)] {
                let mut power = base.clone();
                for k in 1..=hops {
                    if k > 1 {
                        power = power.dot(&base);
                    }
                    ops.push(Propagation::from_dense(&power));
                }
            }
            ops
        }
    }
}

/// `sum_h |Q_h^T|`, the effective graph shift operator seen by the bounds:
/// entry `(u, v)` is the total weight with which node `u` feeds node `v`.
pub fn effective_shift(ops: &[Propagation], nodes: usize) -> Array2<f64> {
    let mut a = Array2::zeros((nodes, nodes));
    for op in ops {
        for &(v, u, w) in op.entries() {
            a[[u, v]] += w.abs();
        }
    }
    a
}

/// Pre-activation of a message-passing layer: `h U + sum_h (Q_h h) M_h`.
pub fn spatial_preactivation(
    h: ArrayView3<f64>,
    update: &Array2<f64>,
    messages: &[Array2<f64>],
    ops: &[Propagation],
) -> Array3<f64> {
    let (steps, rows, _) = h.dim();
    let d_out = update.ncols();
    let mut z = Array3::zeros((steps, rows, d_out));
    {
        let mut zf = z
            .view_mut()
            .into_shape_with_order((steps * rows, d_out))
            .expect("fresh array");
        general_mat_mul(1.0, &flat(h), update, 0.0, &mut zf);
        for (op, m) in ops.iter().zip(messages) {
            let agg = op.propagate(h);
            general_mat_mul(1.0, &flat(agg.view()), m, 1.0, &mut zf);
        }
    }
    z
}

pub struct SpatialGrads<'a> {
    pub update: &'a mut Array2<f64>,
    pub messages: &'a mut [Array2<f64>],
}

pub fn spatial_backward(
    h: ArrayView3<f64>,
    update: &Array2<f64>,
    messages: &[Array2<f64>],
    ops: &[Propagation],
    gz: ArrayView3<f64>,
    grads: Option<SpatialGrads<'_>>,
    input_grad: bool,
) -> Option<Array3<f64>> {
    let g2 = flat(gz);
    let h2 = flat(h);
    if let Some(grads) = grads {
        general_mat_mul(1.0, &h2.t(), &g2, 1.0, grads.update);
        for (op, gm) in ops.iter().zip(grads.messages.iter_mut()) {
            let agg = op.propagate(h);
            general_mat_mul(1.0, &flat(agg.view()).t(), &g2, 1.0, gm);
        }
    }
    if !input_grad {
        return None;
    }
    let (steps, rows, d_in) = h.dim();
    let mut gh = Array3::zeros((steps, rows, d_in));
    {
        let mut ghf = gh
            .view_mut()
            .into_shape_with_order((steps * rows, d_in))
            .expect("fresh array");
        general_mat_mul(1.0, &g2, &update.t(), 0.0, &mut ghf);
    }
    for (op, m) in ops.iter().zip(messages) {
        let mut gm = Array3::zeros((steps, rows, d_in));
        {
            let mut f = gm
                .view_mut()
                .into_shape_with_order((steps * rows, d_in))
                .expect("fresh array");
            general_mat_mul(1.0, &g2, &m.t(), 0.0, &mut f);
        }
        gh += &op.propagate_transpose(gm.view());
    }
    Some(gh)
}

/// One TCN layer, `sigma(sum_p diag_p(R)^T h W_p)`, on all steps.
pub fn tcn_layer(
    h: ArrayView3<f64>,
    op: &TemporalOperator,
    kernels: &[Array2<f64>],
    act: Activation,
) -> Result<Array3<f64>, EngineError> {
    if h.dim().0 != op.size() {
        return Err(EngineError::Shape(format!(
            "state has {} steps, operator has size {}",
            h.dim().0,
            op.size()
        )));
    }
    let taps = op.taps();
    if let Some(tap) = taps.iter().find(|t| t.kernel >= kernels.len()) {
        return Err(EngineError::Shape(format!(
            "operator needs kernel {}, only {} given",
            tap.kernel,
            kernels.len()
        )));
    }
    let out = activate(&temporal_preactivation(h, &taps, kernels, op.size()), act);
    finite_or(out, 0)
}

/// One message-passing layer on a single step, `H` being `[node, feature]`.
pub fn mpnn_layer(
    h: ArrayView2<f64>,
    ops: &[Propagation],
    update: &Array2<f64>,
    messages: &[Array2<f64>],
    act: Activation,
) -> Result<Array2<f64>, EngineError> {
    if ops.len() != messages.len() {
        return Err(EngineError::Shape(format!(
            "{} propagation operators but {} message weights",
            ops.len(),
            messages.len()
        )));
    }
    let h3 = h.insert_axis(Axis(0));
    let z = spatial_preactivation(h3, update, messages, ops);
    let out = finite_or(activate(&z, act), 0)?;
    Ok(out.index_axis_move(Axis(0), 0))
}

pub(crate) fn finite_or(x: Array3<f64>, layer: usize) -> Result<Array3<f64>, EngineError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(EngineError::NonFinite { layer })
    }
}
