use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::EngineError;
use crate::temporal::{build_causal, build_dilated, row_normalize, TemporalOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TemporalKind {
    /// Unit-coefficient causal band `R`.
    Standard,
    /// Row-normalized band `R_N`.
    Normalized,
    /// Dilated bands with `d = P^((l - 1) mod reset)`.
    Dilated { reset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessagePassing {
    /// `Θ_M Σ_u a^{uv} h_u` over the raw adjacency.
    Simple,
    /// Diffusion convolution: separate weights for each hop power of the
    /// incoming and outgoing transition matrices.
    Diffusion { hops: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    pub window: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub horizon: usize,
    pub outer_layers: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub kernel_size: usize,
    pub temporal: TemporalKind,
    pub activation: Activation,
    pub message_passing: MessagePassing,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 1,
            window: 16,
            input_dim: 1,
            hidden_dim: 64,
            horizon: 1,
            outer_layers: 1,
            temporal_layers: 1,
            spatial_layers: 0,
            kernel_size: 2,
            temporal: TemporalKind::Standard,
            activation: Activation::Gelu,
            message_passing: MessagePassing::Diffusion { hops: 1 },
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |msg: String| Err(EngineError::Config(msg));
        if self.nodes == 0 || self.window == 0 || self.input_dim == 0 || self.hidden_dim == 0 {
            return fail("nodes, window, input_dim and hidden_dim must be positive".into());
        }
        if self.horizon == 0 {
            return fail("horizon must be positive".into());
        }
        if self.input_dim > self.hidden_dim {
            return fail(format!(
                "a norm-preserving encoder needs input_dim <= hidden_dim, got {} > {}",
                self.input_dim, self.hidden_dim
            ));
        }
        if self.outer_layers * self.temporal_layers == 0
            && self.outer_layers * self.spatial_layers == 0
        {
            return fail("need a positive temporal or spatial budget".into());
        }
        if self.kernel_size == 0 || self.kernel_size > self.window {
            return fail(format!(
                "kernel size {} must lie in 1..={}",
                self.kernel_size, self.window
            ));
        }
        if let TemporalKind::Dilated { reset: 0 } = self.temporal {
            return fail("dilation reset period must be positive".into());
        }
        if let MessagePassing::Diffusion { hops: 0 } = self.message_passing {
            return fail("diffusion needs at least one hop".into());
        }
        Ok(())
    }

    /// `L * L_T`.
    pub fn temporal_budget(&self) -> usize {
        self.outer_layers * self.temporal_layers
    }

    /// `L * L_S`.
    pub fn spatial_budget(&self) -> usize {
        self.outer_layers * self.spatial_layers
    }

    /// Time-then-space: a single outer layer.
    pub fn is_tts(&self) -> bool {
        self.outer_layers == 1
    }

    /// Operators of the temporal layers inside one outer block.
    ///
    /// Dilation indices restart in every block.
    pub fn temporal_operators(&self) -> Result<Vec<TemporalOperator>, EngineError> {
        let (t, p) = (self.window, self.kernel_size);
        (1..=self.temporal_layers)
            .map(|l| {
                let op = match self.temporal {
                    TemporalKind::Standard => build_causal(t, p, None)?,
                    TemporalKind::Normalized => row_normalize(&build_causal(t, p, None)?)?,
                    TemporalKind::Dilated { reset } => build_dilated(t, p, l, reset)?,
                };
                Ok(op)
            })
            .collect()
    }

    /// Every temporal operator in execution order across all blocks.
    pub fn temporal_stack(&self) -> Result<Vec<TemporalOperator>, EngineError> {
        let block = self.temporal_operators()?;
        Ok((0..self.outer_layers).flat_map(|_| block.iter().cloned()).collect())
    }

    pub fn message_weight_count(&self) -> usize {
        match self.message_passing {
            MessagePassing::Simple => 1,
            MessagePassing::Diffusion { hops } => 2 * hops,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.horizon * self.input_dim
    }
}
