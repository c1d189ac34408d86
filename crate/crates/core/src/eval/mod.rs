//! Datasets, synthetic scenes, metrics and result files.

pub mod codec;
pub mod metrics;
pub mod output;
pub mod synthetic;
pub mod tum;

pub use metrics::{ate_rmse, depth_l1, psnr, Trajectory};
pub use output::{read_trajectory, write_trajectory, Metrics};
pub use synthetic::{generate, load_synthetic, save_synthetic, Patch, SyntheticScene, Texture, TrajectorySpec};
pub use tum::{load_tum, LoadOptions};

/// Depth PNG units per meter, shared by the TUM and native formats.
pub const DEPTH_SCALE: f64 = 5000.0;

use crate::error::Result;
use crate::frame::Frame;
use crate::geom::{Pose, SurfelMap};
use crate::render::{render, RenderConfig};

/// Mean per-frame PSNR and depth L1 of `map` rendered at `poses` against
/// the frames. Depth L1 is `None` when no frame has comparable depth.
pub fn render_quality(map: &SurfelMap, poses: &[Pose], frames: &[Frame], cfg: &RenderConfig) -> Result<(f64, Option<f64>)> {
    if poses.len() != frames.len() {
        return Err(crate::Error::ShapeMismatch {
            expected: (frames.len(), 1),
            got: (poses.len(), 1),
        });
    }
    if frames.is_empty() {
        return Err(crate::Error::NoFrames);
    }
    let (mut psnr_sum, mut l1_sum, mut l1_n) = (0.0, 0.0, 0usize);
    for (pose, frame) in poses.iter().zip(frames) {
        let out = render(map, pose, &frame.intrinsics, cfg);
        psnr_sum += psnr(&out.color, &frame.color)?;
        let l1 = depth_l1(&out.depth, &frame.depth, None)?;
        if l1.is_finite() {
            l1_sum += l1;
            l1_n += 1;
        }
    }
    Ok((psnr_sum / frames.len() as f64, (l1_n > 0).then(|| l1_sum / l1_n as f64)))
}
