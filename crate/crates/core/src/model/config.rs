use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub use_relative_position_bias: bool,
    pub input_size: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            out_channels: 3,
            patch_size: 2,
            embed_dim: 48,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
            use_relative_position_bias: true,
            input_size: [128, 128, 128],
        }
    }
}

pub const NUM_STAGES: usize = 4;

impl ModelConfig {
    /// Small configuration for tests and the synthetic dataset.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 6,
            heads: vec![1, 2, 4, 8],
            window_size: 2,
            input_size: [32, 32, 32],
            ..Self::default()
        }
    }

    /// Channel width of encoder stage `i` (before its merge).
    pub fn stage_width(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Spatial divisor of the bottleneck: patch size times four merges.
    pub fn divisor(&self) -> usize {
        self.patch_size << NUM_STAGES
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.out_channels == 0 || self.embed_dim == 0 {
            return bad("channel counts and embed_dim must be positive".into());
        }
        if self.patch_size == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return bad("patch_size, window_size and mlp_ratio must be positive".into());
        }
        if self.depths.len() != NUM_STAGES || self.heads.len() != NUM_STAGES {
            return bad(format!(
                "depths and heads need {NUM_STAGES} entries, got {:?} and {:?}",
                self.depths, self.heads
            ));
        }
        for (i, (&d, &h)) in self.depths.iter().zip(&self.heads).enumerate() {
            if d % 2 != 0 {
                return bad(format!("stage {i} depth {d} is odd; blocks come in W-MSA/SW-MSA pairs"));
            }
            if h == 0 || self.stage_width(i) % h != 0 {
                return bad(format!("stage {i}: {h} heads do not divide width {}", self.stage_width(i)));
            }
        }
        if self.input_size.contains(&0) {
            return bad(format!("input_size {:?} has a zero extent", self.input_size));
        }
        Ok(())
    }

    /// Transformer layers across all stages.
    pub fn total_layers(&self) -> usize {
        self.depths.iter().sum()
    }
}
