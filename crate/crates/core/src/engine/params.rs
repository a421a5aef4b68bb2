use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::EngineError;
use crate::linalg::spectral_norm;

/// Kernels `W_0..W_{P-1}` of one causal convolution, each applied as `h W`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalLayerParams {
    pub kernels: Vec<Array2<f64>>,
}

/// Update weight `Θ_U` and one message weight per propagation operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLayerParams {
    pub update: Array2<f64>,
    pub messages: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub temporal: Vec<TemporalLayerParams>,
    pub spatial: Vec<SpatialLayerParams>,
}

/// Every trainable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub blocks: Vec<BlockParams>,
    /// One `d x d_x` projection per horizon step.
    pub readout: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Frozen `d_x x d` encoder with orthonormal rows.
    pub encoder: Array2<f64>,
    pub weights: Weights,
}

impl Weights {
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for layer in &block.temporal {
                out.extend(layer.kernels.iter());
            }
            for layer in &block.spatial {
                out.push(&layer.update);
                out.extend(layer.messages.iter());
            }
        }
        out.extend(self.readout.iter());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for layer in &mut block.temporal {
                out.extend(layer.kernels.iter_mut());
            }
            for layer in &mut block.spatial {
                out.push(&mut layer.update);
                out.extend(layer.messages.iter_mut());
            }
        }
        out.extend(self.readout.iter_mut());
        out
    }

    /// Names in the same order as [`Weights::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, layer) in block.temporal.iter().enumerate() {
                for k in 0..layer.kernels.len() {
                    out.push(format!("block{b}.temporal{l}.kernel{k}"));
                }
            }
            for (l, layer) in block.spatial.iter().enumerate() {
                out.push(format!("block{b}.spatial{l}.update"));
                for h in 0..layer.messages.len() {
                    out.push(format!("block{b}.spatial{l}.message{h}"));
                }
            }
        }
        for k in 0..self.readout.len() {
            out.push(format!("readout{k}"));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Rescales a group of matrices so that their vertical stack has unit
/// spectral norm.
fn normalize_group(group: &mut [Array2<f64>]) -> Result<(), EngineError> {
    let views: Vec<_> = group.iter().map(|m| m.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| EngineError::Shape(e.to_string()))?;
    let norm = spectral_norm(stacked.view())?;
    if norm > 0.0 {
        for m in group.iter_mut() {
            m.mapv_inplace(|v| v / norm);
        }
    }
    Ok(())
}

/// Rows of a seeded Gaussian matrix, orthonormalized by Gram-Schmidt.
pub fn semi_orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    assert!(rows <= cols, "need rows <= cols for orthonormal rows");
    loop {
        let mut m = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
        let mut ok = true;
        for r in 0..rows {
            for prev in 0..r {
                let proj = m.row(r).dot(&m.row(prev));
                let prev_row = m.row(prev).to_owned();
                m.row_mut(r).scaled_add(-proj, &prev_row);
            }
            let norm = m.row(r).dot(&m.row(r)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.row_mut(r).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

impl ModelParams {
    /// Seeded initialization: every temporal layer's stacked kernel, every
    /// spatial layer's stacked `[Θ_U; Θ_M...]` and every readout map is
    /// rescaled to unit spectral norm.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, EngineError> {
        let d = config.hidden_dim;
        let encoder = semi_orthogonal(rng, config.input_dim, d);
        let kernel_counts: Vec<usize> = config
            .temporal_operators()?
            .iter()
            .map(|op| op.kernel_count())
            .collect();
        let mut blocks = Vec::with_capacity(config.outer_layers);
        for _ in 0..config.outer_layers {
            let mut temporal = Vec::with_capacity(config.temporal_layers);
            for &count in &kernel_counts {
                let mut kernels: Vec<_> = (0..count).map(|_| uniform_matrix(rng, d, d)).collect();
                normalize_group(&mut kernels)?;
                temporal.push(TemporalLayerParams { kernels });
            }
            let mut spatial = Vec::with_capacity(config.spatial_layers);
            for _ in 0..config.spatial_layers {
                let mut group: Vec<_> = (0..=config.message_weight_count())
                    .map(|_| uniform_matrix(rng, d, d))
                    .collect();
                normalize_group(&mut group)?;
                let update = group.remove(0);
                spatial.push(SpatialLayerParams {
                    update,
                    messages: group,
                });
            }
            blocks.push(BlockParams { temporal, spatial });
        }
        let mut readout = Vec::with_capacity(config.horizon);
        for _ in 0..config.horizon {
            let mut m = [uniform_matrix(rng, d, config.input_dim)];
            normalize_group(&mut m)?;
            let [m] = m;
            readout.push(m);
        }
        Ok(Self {
            encoder,
            weights: Weights { blocks, readout },
        })
    }

    /// Named tensor bundle `{name -> {shape, values}}`, row-major.
    pub fn to_bundle(&self) -> TensorBundle {
        let mut tensors = BTreeMap::new();
        tensors.insert("encoder".to_string(), NamedTensor::from(&self.encoder));
        for (name, t) in self.weights.names().into_iter().zip(self.weights.tensors()) {
            tensors.insert(name, NamedTensor::from(t));
        }
        TensorBundle { tensors }
    }

    /// Loads values from a bundle into a parameter set of the same layout.
    pub fn load_bundle(&mut self, bundle: &TensorBundle) -> Result<(), EngineError> {
        let fetch = |name: &str, target: &mut Array2<f64>| -> Result<(), EngineError> {
            let t = bundle
                .tensors
                .get(name)
                .ok_or_else(|| EngineError::Shape(format!("checkpoint lacks tensor {name}")))?;
            if t.shape != [target.nrows(), target.ncols()] || t.values.len() != target.len() {
                return Err(EngineError::Shape(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape,
                    target.shape()
                )));
            }
            for (dst, src) in target.iter_mut().zip(&t.values) {
                *dst = *src;
            }
            Ok(())
        };
        fetch("encoder", &mut self.encoder)?;
        let names = self.weights.names();
        for (name, t) in names.iter().zip(self.weights.tensors_mut()) {
            fetch(name, t)?;
        }
        if bundle.tensors.len() != names.len() + 1 {
            return Err(EngineError::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                bundle.tensors.len(),
                names.len() + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl From<&Array2<f64>> for NamedTensor {
    fn from(m: &Array2<f64>) -> Self {
        Self {
            shape: [m.nrows(), m.ncols()],
            values: m.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorBundle {
    pub tensors: BTreeMap<String, NamedTensor>,
}
