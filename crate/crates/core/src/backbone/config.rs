use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::PadMode;

/// Architecture hyperparameters of the surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Conv widths: stem / first level, second level, bottleneck features.
    pub embed_dims: [usize; 3],
    pub groups: usize,
    pub transformer_dim: usize,
    pub heads: usize,
    /// Tokens per axis inside one attention window.
    pub window: usize,
    #[serde(default = "default_conv_downs")]
    pub conv_downs: usize,
    /// Conv-feature voxels per token axis at the bottleneck.
    pub patch: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_cond_dim")]
    pub cond_dim: usize,
    #[serde(default)]
    pub pad_mode: PadMode,
    /// Number of scalar physical parameters in the conditioning.
    #[serde(default)]
    pub num_params: usize,
    /// Number of class labels; 0 disables the label table.
    #[serde(default)]
    pub num_labels: usize,
    /// Whether a diffusion-time embedding is present.
    #[serde(default)]
    pub time_embed: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_bias_hidden")]
    pub bias_hidden: usize,
}

fn default_conv_downs() -> usize {
    2
}
fn default_cond_dim() -> usize {
    64
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_bias_hidden() -> usize {
    64
}

impl ModelConfig {
    fn preset(embed_dims: [usize; 3], groups: usize, transformer_dim: usize, heads: usize) -> Self {
        ModelConfig {
            embed_dims,
            groups,
            transformer_dim,
            heads,
            window: 4,
            conv_downs: 2,
            patch: 8,
            depth: 4,
            in_channels: 3,
            out_channels: 3,
            cond_dim: 64,
            pad_mode: PadMode::Zero,
            num_params: 0,
            num_labels: 0,
            time_embed: false,
            mlp_ratio: 4,
            bias_hidden: 64,
        }
    }

    pub fn small() -> Self {
        Self::preset([32, 32, 64], 16, 128, 4)
    }

    pub fn base() -> Self {
        Self::preset([64, 128, 128], 32, 256, 8)
    }

    pub fn large() -> Self {
        Self::preset([128, 256, 256], 32, 512, 8)
    }

    /// Minimal configuration used for gradient audits and fast tests:
    /// token spacing 8, two heads, one transformer block.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dims: [4, 4, 8],
            groups: 2,
            transformer_dim: 8,
            heads: 2,
            window: 2,
            conv_downs: 2,
            patch: 2,
            depth: 1,
            in_channels: 1,
            out_channels: 1,
            cond_dim: 8,
            pad_mode: PadMode::Zero,
            num_params: 0,
            num_labels: 0,
            time_embed: false,
            mlp_ratio: 2,
            bias_hidden: 8,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "S" | "s" | "small" => Some(Self::small()),
            "B" | "b" | "base" => Some(Self::base()),
            "L" | "l" | "large" => Some(Self::large()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Voxels per token along each axis.
    pub fn token_spacing(&self) -> usize {
        (1 << self.conv_downs) * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_downs != 2 {
            return bad(format!("conv_downs must be 2, got {}", self.conv_downs));
        }
        if self.embed_dims.contains(&0) || self.patch == 0 || self.window == 0 {
            return bad("embed_dims, patch and window must be positive".into());
        }
        if self.heads == 0 || self.transformer_dim % self.heads != 0 {
            return bad(format!(
                "transformer_dim {} not divisible by heads {}",
                self.transformer_dim, self.heads
            ));
        }
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 || self.cond_dim == 0 {
            return bad("groups, channel counts and cond_dim must be positive".into());
        }
        if self.mlp_ratio == 0 || self.bias_hidden == 0 {
            return bad("mlp_ratio and bias_hidden must be positive".into());
        }
        Ok(())
    }

    /// Token grid for a spatial extent, or an error naming the required multiple.
    pub fn token_grid(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let ts = self.token_spacing();
        if dims.iter().any(|&d| d == 0 || d % ts != 0) {
            return Err(Error::Config(format!(
                "spatial extents {:?} must be multiples of the token spacing {}",
                dims, ts
            )));
        }
        Ok(dims.map(|d| d / ts))
    }

    /// Groups for a norm over `c` channels: the largest divisor of `c` not above `groups`.
    pub fn groups_for(&self, c: usize) -> usize {
        (1..=self.groups.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
    }
}
