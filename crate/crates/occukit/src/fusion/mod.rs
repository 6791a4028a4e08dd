//! Fusion blocks with explicit weights: pillar encoding, radar height
//! self-attention, local adaptive fusion, global cross-attention (via
//! multi-head deformable attention), temporal fusion, the image-to-voxel
//! lift, and the occupancy head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod blocks;
pub mod ops;
pub mod weights;

pub use blocks::{
    gcf, image_lift, laf, mda, mda_plane, occupancy_head, pillar_encode, rhs, rhs_trace,
    temporal_fuse, temporal_fuse_trace, ClassProbs, MdaContext, MdaWeights, RhsTrace,
    TemporalTrace,
};
pub use weights::{BlockWeights, Tensor, INIT_STD, PILLAR_POINT_DIMS};

/// Shape and structure configuration of the fusion stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Feature channels C through the 3D volumes.
    pub channels: usize,
    /// Volume height H (the grid's Y extent in cells).
    pub height: usize,
    /// Volume width W (the grid's X extent in cells).
    pub width: usize,
    /// Volume depth Z (vertical cells).
    pub depth: usize,
    /// Attention heads.
    pub heads: usize,
    /// Sampling points per head.
    pub points: usize,
    /// Frames fused by the temporal block (current plus history).
    pub temporal_frames: usize,
    /// Output classes of the occupancy head, including free.
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            channels: 8,
            height: 16,
            width: 24,
            depth: 4,
            heads: 4,
            points: 4,
            temporal_frames: 3,
            num_classes: 12,
        }
    }
}

impl FusionConfig {
    /// BEV channel count after the height-to-channel reshape.
    pub fn bev_channels(&self) -> usize {
        self.channels * self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.height == 0
            || self.width == 0
            || self.depth == 0
            || self.num_classes == 0
        {
            return Err(Error::invalid("fusion config", "all dims must be positive"));
        }
        if self.heads == 0 || self.points == 0 || self.temporal_frames == 0 {
            return Err(Error::invalid(
                "fusion config",
                "heads, points and temporal frames must be at least 1",
            ));
        }
        if !self.bev_channels().is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "fusion config",
                format!(
                    "BEV channels {} not divisible by {} heads",
                    self.bev_channels(),
                    self.heads
                ),
            ));
        }
        Ok(())
    }
}
