use nalgebra::{Matrix3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geom::{Pose, Vec3};
use crate::image::{ColorImage, DepthImage};

/// Timestamped camera-to-world poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub stamps: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    /// Fails unless timestamps are strictly increasing and match the poses.
    pub fn new(stamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::ShapeMismatch {
                expected: (stamps.len(), 1),
                got: (poses.len(), 1),
            });
        }
        if stamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("trajectory timestamps must increase strictly".into()));
        }
        Ok(Self { stamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Pairs of `(self, other)` positions whose timestamps differ by at most `max_gap`.
    pub fn associate(&self, other: &Trajectory, max_gap: f64) -> Vec<(Vec3, Vec3)> {
        let mut out = Vec::new();
        let mut j = 0;
        for (t, p) in self.stamps.iter().zip(&self.poses) {
            while j + 1 < other.stamps.len() && (other.stamps[j + 1] - t).abs() <= (other.stamps[j] - t).abs() {
                j += 1;
            }
            if !other.stamps.is_empty() && (other.stamps[j] - t).abs() <= max_gap {
                out.push((p.translation, other.poses[j].translation));
            }
        }
        out
    }
}

/// Rigid transform `(R, t)` minimising `Σ |R·x + t − y|²`.
pub fn umeyama(x: &[Vec3], y: &[Vec3]) -> (Matrix3<f64>, Vec3) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vec3>() / n;
    let my = y.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    (r, my - r * mx)
}

/// Translational RMSE after rigid alignment of `estimate` onto `truth`.
pub fn ate_rmse(estimate: &Trajectory, truth: &Trajectory) -> Result<f64> {
    let pairs = estimate.associate(truth, 0.02);
    if pairs.len() < 2 {
        return Err(Error::TrajectoryTooShort(pairs.len()));
    }
    let (x, y): (Vec<Vec3>, Vec<Vec3>) = pairs.into_iter().unzip();
    let (r, t) = umeyama(&x, &y);
    let sum: f64 = x.iter().zip(&y).map(|(a, b)| (r * a + t - b).norm_squared()).sum();
    Ok((sum / x.len() as f64).sqrt())
}

/// Applies `pose` to every pose of a trajectory (left multiplication).
pub fn transform_trajectory(traj: &Trajectory, pose: &Pose) -> Trajectory {
    Trajectory {
        stamps: traj.stamps.clone(),
        poses: traj.poses.iter().map(|p| pose.compose(p)).collect(),
    }
}

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio over all pixels and channels, peak 1.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    a.ensure_shape(b.shape())?;
    if a.is_empty() {
        return Ok(PSNR_CAP);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm_squared()).sum();
    let mse = sum / (3 * a.len()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean absolute depth difference over pixels valid (positive) in both maps
/// and in `mask` when given. NaN when no pixel qualifies.
pub fn depth_l1(rendered: &DepthImage, truth: &DepthImage, mask: Option<&[bool]>) -> Result<f64> {
    rendered.ensure_shape(truth.shape())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..truth.len() {
        let (r, t) = (rendered.data[p], truth.data[p]);
        if r > 0.0 && t > 0.0 && mask.is_none_or(|m| m[p]) {
            sum += (r - t).abs();
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("depth L1 over an empty mask");
        return Ok(f64::NAN);
    }
    Ok(sum / count as f64)
}

/// Pose from TUM fields `tx ty tz qx qy qz qw`. Quaternions already unit
/// to printed precision are kept verbatim so files round-trip exactly.
pub fn pose_from_tum(v: &[f64; 7]) -> Pose {
    let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
    let rotation = if (q.norm() - 1.0).abs() < 1e-6 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    };
    Pose {
        rotation,
        translation: Vec3::new(v[0], v[1], v[2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn line(n: usize) -> Trajectory {
        let stamps = (0..n).map(|i| i as f64 * 0.1).collect();
        let poses = (0..n)
            .map(|i| Pose::from_axis_angle(Vec3::y(), 0.1 * i as f64, Vec3::new(i as f64 * 0.1, (i as f64).sin(), 0.0)))
            .collect();
        Trajectory::new(stamps, poses).unwrap()
    }

    #[test]
    fn ate_of_identical_and_moved_trajectories_is_zero() {
        let t = line(10);
        assert!(ate_rmse(&t, &t).unwrap() < 1e-12);
        let g = Pose::from_axis_angle(Vec3::new(1.0, 2.0, 3.0).normalize(), 1.2, Vec3::new(4.0, -1.0, 2.0));
        assert!(ate_rmse(&transform_trajectory(&t, &g), &t).unwrap() < 1e-9);
    }

    #[test]
    fn ate_needs_two_poses() {
        let t = line(1);
        assert!(matches!(ate_rmse(&t, &t), Err(Error::TrajectoryTooShort(1))));
    }

    #[test]
    fn timestamps_must_increase() {
        assert!(Trajectory::new(vec![0.0, 0.0], vec![Pose::identity(); 2]).is_err());
        assert!(Trajectory::new(vec![0.0], vec![Pose::identity(); 2]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 3, Vec3::repeat(0.5));
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 3, Vec3::repeat(0.6));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(3, 3, Vec3::zeros())).is_err());
    }

    #[test]
    fn depth_l1_examples() {
        let a = Image::filled(4, 3, 2.0);
        assert_eq!(depth_l1(&a, &a, None).unwrap(), 0.0);
        let b = Image::filled(4, 3, 2.01);
        assert!((depth_l1(&b, &a, None).unwrap() - 0.01).abs() < 1e-12);
        let holes = Image::filled(4, 3, 0.0);
        assert!(depth_l1(&a, &holes, None).unwrap().is_nan());
    }
}
