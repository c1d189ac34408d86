//! Rigid poses, the pinhole camera and the 2D Gaussian surfel primitive.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rigid transform. When used as a camera pose it maps camera coordinates
/// into the parent (world or reference-keyframe) frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Rotation about `axis` by `angle` radians followed by translation `t`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        Self::new(
            UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
            t,
        )
    }

    /// Camera pose at `eye` looking at `target`, camera y axis pointing away from `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let m = Mat3::from_columns(&[x, y, z]);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Self::new(rot, eye)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        rotation_matrix(&self.rotation)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Relative rotation angle between two poses (radians).
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn renormalized(mut self) -> Self {
        self.rotation = UnitQuaternion::new_normalize(self.rotation.into_inner());
        self
    }
}

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: UnitQuaternion::new_normalize((a.rotation * b.rotation).into_inner()),
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Rotation matrix of a unit quaternion, written out explicitly so that
/// [`rotation_matrix_vjp`] differentiates exactly this expression.
pub fn rotation_matrix(q: &UnitQuaternion<f64>) -> Mat3 {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back onto the quaternion.
/// The result is projected onto the tangent of the unit sphere at `q`,
/// which is the gradient of `R(q / |q|)` at unit `q`.
pub fn rotation_matrix_vjp(q: &UnitQuaternion<f64>, g: &Mat3) -> Quaternion<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let raw = Quaternion::new(gw, gx, gy, gz);
    let radial = raw.coords.dot(&q.coords);
    Quaternion::from(raw.coords - q.coords * radial)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole intrinsics. Pixel `(x, y)` has its center at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Centered principal point and the given horizontal field of view (radians).
    pub fn from_fov(width: usize, height: usize, hfov: f64) -> Self {
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Projects a camera-frame point to pixel coordinates. `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= -0.5
            && px.y >= -0.5
            && px.x < self.width as f64 - 0.5
            && px.y < self.height as f64 - 0.5
    }

    /// Direction with unit z through pixel coordinates `(u, v)`.
    pub fn ray_z1(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Unit viewing ray through pixel coordinates `px` (camera frame).
pub fn pixel_ray(intr: &Intrinsics, px: Vector2<f64>) -> Vec3 {
    intr.ray_z1(px.x, px.y).normalize()
}

/// Back-projects a pixel at camera depth `depth` (z, not ray length).
pub fn unproject(intr: &Intrinsics, px: Vector2<f64>, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(intr.ray_z1(px.x, px.y) * depth)
}

pub const MIN_OPACITY: f64 = 1e-4;
pub const MAX_OPACITY: f64 = 0.9999;
pub const MIN_SCALE: f64 = 1e-7;

/// A flat Gaussian primitive. Columns one and two of the rotation are the
/// tangent axes, column three is the normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub center: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector2<f64>,
    pub opacity: f64,
    pub color: Vec3,
}

impl Surfel {
    pub fn new(
        center: Vec3,
        rotation: UnitQuaternion<f64>,
        scale: Vector2<f64>,
        opacity: f64,
        color: Vec3,
    ) -> Self {
        let mut s = Self {
            center,
            rotation,
            scale,
            opacity,
            color,
        };
        s.clamp();
        s
    }

    /// Surfel whose plane has normal `normal`; the tangent frame is arbitrary.
    pub fn with_normal(center: Vec3, normal: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        Self::new(
            center,
            frame_from_normal(&normal),
            Vector2::new(scale, scale),
            opacity,
            color,
        )
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        rotation_matrix(&self.rotation)
    }

    pub fn normal(&self) -> Vec3 {
        self.rotation_matrix().column(2).into_owned()
    }

    /// Σ = R·diag(su, sv, 0).
    pub fn geometry(&self) -> Mat3 {
        self.rotation_matrix() * Mat3::from_diagonal(&Vec3::new(self.scale.x, self.scale.y, 0.0))
    }

    /// Re-imposes the type invariants after an unconstrained update.
    pub fn clamp(&mut self) {
        self.opacity = self.opacity.clamp(MIN_OPACITY, MAX_OPACITY);
        self.color = self.color.map(|c| c.clamp(0.0, 1.0));
        self.scale = self.scale.map(|s| s.max(MIN_SCALE));
    }

    pub fn is_valid(&self) -> bool {
        self.scale.x > 0.0
            && self.scale.y > 0.0
            && (MIN_OPACITY..=MAX_OPACITY).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && (self.rotation.norm() - 1.0).abs() < 1e-9
            && self.center.iter().all(|c| c.is_finite())
    }
}

/// Rotation whose third column is `normal`, completed to a right-handed basis.
pub fn frame_from_normal(normal: &Vec3) -> UnitQuaternion<f64> {
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = helper.cross(&n).normalize();
    let e2 = n.cross(&e1);
    let m = Mat3::from_columns(&[e1, e2, n]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Applies `pose` to a surfel: (RΣ, Rμ + t, o, c).
pub fn transform_surfel(s: &Surfel, pose: &Pose) -> Surfel {
    Surfel {
        center: pose.transform_point(&s.center),
        rotation: UnitQuaternion::new_normalize((pose.rotation * s.rotation).into_inner()),
        ..*s
    }
}

/// Ordered surfel collection; the generation counter bumps on structural change.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfelMap {
    pub surfels: Vec<Surfel>,
    pub generation: u64,
}

impl SurfelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_surfels(surfels: Vec<Surfel>) -> Self {
        Self {
            surfels,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn push(&mut self, s: Surfel) {
        self.surfels.push(s);
        self.generation += 1;
    }

    pub fn extend(&mut self, it: impl IntoIterator<Item = Surfel>) {
        self.surfels.extend(it);
        self.generation += 1;
    }

    /// Keeps surfels for which `keep` holds; returns the number removed.
    pub fn retain(&mut self, keep: impl FnMut(&Surfel) -> bool) -> usize {
        let before = self.surfels.len();
        self.surfels.retain(keep);
        let removed = before - self.surfels.len();
        if removed > 0 {
            self.generation += 1;
        }
        removed
    }

    pub fn transformed(&self, pose: &Pose) -> SurfelMap {
        SurfelMap {
            surfels: self
                .surfels
                .iter()
                .map(|s| transform_surfel(s, pose))
                .collect(),
            generation: self.generation,
        }
    }
}
