use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Every weight shape is derived from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViPFormerConfig {
    /// Encoder depth `L`.
    pub layers: usize,
    pub heads: usize,
    /// Model width `D`.
    pub dim: usize,
    /// Encoder MLP hidden width is `mlp_ratio · D`.
    pub mlp_ratio: usize,
    /// Point sequence length `G` (number of FPS centers).
    pub length: usize,
    /// Neighbours per point patch `k`.
    pub neighbors: usize,
    /// Image patch size `Q`.
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub point_channels: usize,
    /// Hidden width of the point adapter and point position MLPs.
    pub point_hidden: usize,
    /// Residual-branch (and classifier-head) dropout rate. Presets use 0:
    /// at desk scale a rate of 0.1 already lets dropout noise swamp the
    /// per-sample signal and the contrastive features collapse.
    pub dropout: f64,
    /// Width of the contrastive feature space.
    pub out_dim: usize,
}

impl ViPFormerConfig {
    /// 9 layers, MLP ratio 2, 4 heads, 128 centers, D = 256.
    pub fn table_i() -> Self {
        Self {
            layers: 9,
            heads: 4,
            dim: 256,
            mlp_ratio: 2,
            out_dim: 256,
            ..Self::table_ii()
        }
    }

    /// 9 layers, MLP ratio 4, 6 heads, 128 centers, D = 384.
    pub fn table_ii() -> Self {
        Self {
            layers: 9,
            heads: 6,
            dim: 384,
            mlp_ratio: 4,
            length: 128,
            neighbors: 32,
            patch: 12,
            image_height: 144,
            image_width: 144,
            image_channels: 3,
            point_channels: 3,
            point_hidden: 128,
            dropout: 0.0,
            out_dim: 384,
        }
    }

    /// A small configuration for quick experiments and tests.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 32,
            mlp_ratio: 2,
            length: 32,
            neighbors: 16,
            patch: 8,
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            point_channels: 3,
            point_hidden: 32,
            dropout: 0.0,
            out_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("length", self.length),
            ("neighbors", self.neighbors),
            ("patch", self.patch),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("image_channels", self.image_channels),
            ("point_channels", self.point_channels),
            ("point_hidden", self.point_hidden),
            ("out_dim", self.out_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::param(format!(
                "patch {} does not divide image {}x{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Image sequence length `M = HW / Q²`.
    pub fn image_tokens(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn image_patch_width(&self) -> usize {
        self.patch * self.patch * self.image_channels
    }

    pub fn point_patch_width(&self) -> usize {
        self.neighbors * self.point_channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Closed-form count of learnable scalars in the pretraining model
/// (input adapters, position embeddings, encoder, output adapter).
pub fn count_parameters(c: &ViPFormerConfig) -> usize {
    let d = c.dim;
    let hidden = c.mlp_ratio * d;
    let ph = c.point_hidden;
    let linear = |i: usize, o: usize| i * o + o;

    let image = linear(c.image_patch_width(), d) + c.image_tokens() * d;
    let point = linear(c.point_patch_width(), ph) + linear(ph, d);
    let point_pos = linear(c.point_channels, ph) + linear(ph, d);
    let block = 2 * d + linear(d, 3 * d) + linear(d, d) + 2 * d + linear(d, hidden) + linear(hidden, d);
    let output = 2 * (2 * d) + linear(2 * d, d) + 2 * d + linear(d, c.out_dim);
    image + point + point_pos + c.layers * block + output
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ViPFormerConfig::table_i().validate().unwrap();
        ViPFormerConfig::table_ii().validate().unwrap();
        assert_eq!(ViPFormerConfig::table_ii().image_tokens(), 144);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ViPFormerConfig::table_i();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = ViPFormerConfig::table_i();
        c.patch = 7;
        assert!(c.validate().is_err());
        let mut c = ViPFormerConfig::table_i();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn counts_match_hand_totals() {
        // per-component totals worked out by hand from the layer list
        assert_eq!(count_parameters(&ViPFormerConfig::table_i()), 5_169_280);
        assert_eq!(count_parameters(&ViPFormerConfig::table_ii()), 16_749_184);
        let tiny = ViPFormerConfig {
            layers: 0,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            length: 2,
            neighbors: 4,
            patch: 2,
            image_height: 4,
            image_width: 4,
            image_channels: 3,
            point_channels: 3,
            point_hidden: 128,
            dropout: 0.0,
            out_dim: 8,
        };
        // image 104 + pos 32 + point 2696 + point pos 1544 + output 256
        assert_eq!(count_parameters(&tiny), 4632);
    }
}
