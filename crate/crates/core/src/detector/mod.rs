//! Toy three-scale grid detector: backbone, head, target assignment,
//! decoding, NMS and checkpoints.

mod assign;
mod checkpoint;
mod decode;
mod model;

pub use assign::{assign_batch, assign_targets, ScaleTargets, TargetAssignment};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use decode::{decode, nms, Detection};
pub use model::{
    backbone_forward, head_forward, images_tensor, FeaturePyramid, ModelParams, RawPredictions,
};

use crate::error::{Error, Result};

/// Input size, scales and head layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DetectorGeometry {
    pub input: usize,
    pub strides: [usize; 3],
    /// Boxes per cell.
    pub m: usize,
    /// Classes.
    pub c: usize,
    /// Channel widths of the stem and the three stages.
    pub widths: [usize; 4],
}

impl Default for DetectorGeometry {
    fn default() -> Self {
        DetectorGeometry {
            input: 64,
            strides: [4, 8, 16],
            m: 1,
            c: 4,
            widths: [8, 16, 32, 64],
        }
    }
}

impl DetectorGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.strides != [4, 8, 16] {
            return Err(Error::InvalidArgument(format!(
                "strides must be [4, 8, 16], got {:?}",
                self.strides
            )));
        }
        if self.input == 0 || self.input % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} is not a positive multiple of 16",
                self.input
            )));
        }
        if self.m == 0 || self.c == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "boxes per cell, classes and widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Grid side `S_i` of scale `i`.
    pub fn grid(&self, scale: usize) -> usize {
        self.input / self.strides[scale]
    }

    /// Head channels per scale, `M * (5 + C)`.
    pub fn head_channels(&self) -> usize {
        self.m * (5 + self.c)
    }

    /// Channel of field `f` (0..4 box, 4 objectness) of slot `m`.
    pub fn slot_channel(&self, m: usize, f: usize) -> usize {
        m * (5 + self.c) + f
    }

    /// Channel of the per-cell logit of class `c` (read from slot 0).
    pub fn class_channel(&self, c: usize) -> usize {
        5 + c
    }

    /// Flat offset into a `(B, channels, S, S)` head output.
    pub fn raw_index(&self, scale: usize, b: usize, ch: usize, row: usize, col: usize) -> usize {
        let s = self.grid(scale);
        ((b * self.head_channels() + ch) * s + row) * s + col
    }
}
