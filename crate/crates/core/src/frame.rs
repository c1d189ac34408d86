use crate::geom::{Intrinsics, Pose};
use crate::image::{ColorImage, DepthImage};

/// Per-frame affine color correction `I' = a·I + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExposureParams {
    pub a: f64,
    pub b: f64,
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self { a: 1.0, b: 0.0 }
    }
}

impl ExposureParams {
    pub fn apply(&self, c: f64) -> f64 {
        self.a * c + self.b
    }
}

/// One RGB-D observation. Depth 0 marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub color: ColorImage,
    pub depth: DepthImage,
    pub intrinsics: Intrinsics,
    /// Ground-truth camera pose when the dataset provides one.
    pub gt_pose: Option<Pose>,
}

impl Frame {
    pub fn shape(&self) -> (usize, usize) {
        (self.intrinsics.width, self.intrinsics.height)
    }

    pub fn valid_depth(&self, p: usize) -> bool {
        let d = self.depth.data[p];
        d > 0.0 && d.is_finite()
    }
}
