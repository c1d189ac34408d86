//! Planar synthetic scenes with analytic depth and color.

use std::io::BufReader;
use std::path::Path;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::frame::Frame;
use crate::geom::{Intrinsics, Pose, Vec3};
use crate::image::Image;

use super::codec::{invalid, read_color, read_depth, read_text, write_color, write_depth};
use super::metrics::Trajectory;
use super::output::{read_trajectory, write_trajectory};

/// Color as a function of in-plane coordinates (meters).
#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Solid(Vec3),
    Checker { a: Vec3, b: Vec3, size: f64 },
    Gradient { base: Vec3, du: Vec3, dv: Vec3 },
    /// Per-channel phase-shifted product of sines with spatial frequency `freq` (rad/m).
    Waves { base: Vec3, amp: Vec3, freq: f64 },
}

impl Texture {
    pub fn color(&self, u: f64, v: f64) -> Vec3 {
        let c = match self {
            Texture::Solid(c) => *c,
            Texture::Checker { a, b, size } => {
                let k = (u / size).floor() as i64 + (v / size).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { base, du, dv } => base + du * u + dv * v,
            Texture::Waves { base, amp, freq } => Vec3::from_fn(|k, _| {
                let ph = k as f64 * 2.1;
                base[k] + amp[k] * (freq * u + ph).sin() * (0.7 * freq * v + 0.5 * ph).cos()
            }),
        };
        c.map(|x| x.clamp(0.0, 1.0))
    }
}

/// Rectangular textured patch spanned by orthonormal axes around `center`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub center: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: Texture,
}

impl Patch {
    /// Orthonormalizes the axes (Gram-Schmidt, `u` first).
    pub fn new(center: Vec3, u_axis: Vec3, v_axis: Vec3, half_u: f64, half_v: f64, texture: Texture) -> Self {
        let u = u_axis.normalize();
        let v = (v_axis - u * u.dot(&v_axis)).normalize();
        Self {
            center,
            u_axis: u,
            v_axis: v,
            half_u,
            half_v,
            texture,
        }
    }

    pub fn normal(&self) -> Vec3 {
        self.u_axis.cross(&self.v_axis)
    }

    /// Ray parameter and color where `origin + t·dir` meets the patch.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = origin + dir * t - self.center;
        let (u, v) = (rel.dot(&self.u_axis), rel.dot(&self.v_axis));
        if u.abs() > self.half_u || v.abs() > self.half_v {
            return None;
        }
        Some((t, self.texture.color(u, v)))
    }
}

/// Camera path generator. Cameras follow the y-down convention.
#[derive(Clone, Debug, PartialEq)]
pub enum TrajectorySpec {
    /// Horizontal circle of `radius` around `center` from angle `start` over
    /// `sweep` radians, always looking at `target`.
    Orbit { center: Vec3, radius: f64, start: f64, sweep: f64, target: Vec3 },
    /// Linear translation and spherical interpolation of rotation.
    Linear { start: Pose, end: Pose },
    Keyed(Vec<Pose>),
}

impl TrajectorySpec {
    pub fn poses(&self, n: usize) -> Vec<Pose> {
        let frac = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        match self {
            TrajectorySpec::Orbit { center, radius, start, sweep, target } => (0..n)
                .map(|i| {
                    let a = start + sweep * frac(i);
                    let eye = center + Vec3::new(radius * a.cos(), 0.0, radius * a.sin());
                    Pose::look_at(eye, *target, -Vec3::y())
                })
                .collect(),
            TrajectorySpec::Linear { start, end } => (0..n)
                .map(|i| {
                    let s = frac(i);
                    Pose::new(
                        start.rotation.slerp(&end.rotation, s),
                        start.translation * (1.0 - s) + end.translation * s,
                    )
                })
                .collect(),
            TrajectorySpec::Keyed(p) => p.iter().take(n).copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub patches: Vec<Patch>,
    pub trajectory: TrajectorySpec,
    pub frames: usize,
    pub intrinsics: Intrinsics,
    /// Standard deviation of additive depth noise (meters); 0 disables.
    pub depth_noise: f64,
    /// Standard deviation of additive color noise; 0 disables.
    pub color_noise: f64,
    pub seed: u64,
}

impl SyntheticScene {
    /// Four walls and a floor of a `w × h × d` room centered at the origin
    /// (y down, floor at `y = h/2`), each with its own texture.
    pub fn room(width: f64, height: f64, depth: f64) -> Vec<Patch> {
        let (hx, hy, hz) = (width / 2.0, height / 2.0, depth / 2.0);
        let waves = |base: [f64; 3], freq: f64| Texture::Waves {
            base: Vec3::from(base),
            amp: Vec3::new(0.3, 0.25, 0.2),
            freq,
        };
        vec![
            Patch::new(Vec3::new(0.0, 0.0, hz), Vec3::x(), Vec3::y(), hx, hy, waves([0.55, 0.45, 0.4], 9.0)),
            Patch::new(Vec3::new(0.0, 0.0, -hz), -Vec3::x(), Vec3::y(), hx, hy, waves([0.4, 0.5, 0.55], 11.0)),
            Patch::new(Vec3::new(hx, 0.0, 0.0), -Vec3::z(), Vec3::y(), hz, hy, waves([0.5, 0.55, 0.35], 10.0)),
            Patch::new(Vec3::new(-hx, 0.0, 0.0), Vec3::z(), Vec3::y(), hz, hy, waves([0.45, 0.4, 0.5], 8.0)),
            Patch::new(Vec3::new(0.0, hy, 0.0), Vec3::x(), Vec3::z(), hx, hz, waves([0.5, 0.5, 0.5], 7.0)),
        ]
    }

    /// 60-frame orbit inside the 5-plane room at 80×60.
    pub fn room_orbit(frames: usize) -> Self {
        Self {
            patches: Self::room(3.2, 2.2, 3.2),
            trajectory: TrajectorySpec::Orbit {
                center: Vec3::zeros(),
                radius: 0.6,
                start: 0.0,
                sweep: 200f64.to_radians(),
                target: Vec3::new(0.0, 0.25, 0.0),
            },
            frames,
            intrinsics: Intrinsics::from_fov(80, 60, 70f64.to_radians()),
            depth_noise: 0.0,
            color_noise: 0.0,
            seed: 0,
        }
    }

    /// A textured back wall at `z = 2.5` and a side wall at `x = -0.5`, seen
    /// from the origin looking down +z.
    pub fn two_planes(width: usize, height: usize) -> Self {
        Self {
            patches: vec![
                Patch::new(
                    Vec3::new(0.0, 0.0, 2.5),
                    Vec3::x(),
                    Vec3::y(),
                    3.0,
                    3.0,
                    Texture::Waves {
                        base: Vec3::new(0.5, 0.45, 0.5),
                        amp: Vec3::new(0.35, 0.3, 0.25),
                        freq: 9.0,
                    },
                ),
                Patch::new(
                    Vec3::new(-0.5, 0.0, 1.5),
                    Vec3::z(),
                    Vec3::y(),
                    1.2,
                    3.0,
                    Texture::Waves {
                        base: Vec3::new(0.4, 0.55, 0.45),
                        amp: Vec3::new(0.3, 0.3, 0.3),
                        freq: 12.0,
                    },
                ),
            ],
            trajectory: TrajectorySpec::Keyed(vec![Pose::identity()]),
            frames: 1,
            intrinsics: Intrinsics::from_fov(width, height, 60f64.to_radians()),
            depth_noise: 0.0,
            color_noise: 0.0,
            seed: 0,
        }
    }

    /// A textured panel at `z = 1.2` covering `x < 0` in front of a wall at
    /// `z = 2.5`, seen from the origin looking down +z. The panel's vertical
    /// edge is a depth discontinuity through the image centre.
    pub fn occluding_planes(width: usize, height: usize) -> Self {
        Self {
            patches: vec![
                Patch::new(
                    Vec3::new(0.0, 0.0, 2.5),
                    Vec3::x(),
                    Vec3::y(),
                    3.0,
                    3.0,
                    Texture::Waves {
                        base: Vec3::new(0.5, 0.45, 0.5),
                        amp: Vec3::new(0.35, 0.3, 0.25),
                        freq: 9.0,
                    },
                ),
                Patch::new(
                    Vec3::new(-1.0, 0.0, 1.2),
                    Vec3::x(),
                    Vec3::y(),
                    1.0,
                    2.0,
                    Texture::Waves {
                        base: Vec3::new(0.4, 0.55, 0.45),
                        amp: Vec3::new(0.3, 0.3, 0.3),
                        freq: 14.0,
                    },
                ),
            ],
            trajectory: TrajectorySpec::Keyed(vec![Pose::identity()]),
            frames: 1,
            intrinsics: Intrinsics::from_fov(width, height, 60f64.to_radians()),
            depth_noise: 0.0,
            color_noise: 0.0,
            seed: 0,
        }
    }

    /// Front-most patch hit along the ray through `px` from `pose`:
    /// `(depth, color, patch index)`.
    pub fn cast(&self, pose: &Pose, px: Vector2<f64>) -> Option<(f64, Vec3, usize)> {
        let dir = pose.rotation * self.intrinsics.ray_z1(px.x, px.y);
        let mut best: Option<(f64, Vec3, usize)> = None;
        for (i, patch) in self.patches.iter().enumerate() {
            if let Some((t, c)) = patch.intersect(&pose.translation, &dir) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, c, i));
                }
            }
        }
        best
    }

    /// Analytic color and depth for one camera pose.
    pub fn render_frame(&self, index: usize, pose: &Pose) -> Frame {
        let intr = self.intrinsics;
        let (w, h) = (intr.width, intr.height);
        let mut color = Image::filled(w, h, Vec3::zeros());
        let mut depth = Image::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                if let Some((d, c, _)) = self.cast(pose, Vector2::new(x as f64, y as f64)) {
                    *depth.at_mut(x, y) = d;
                    *color.at_mut(x, y) = c;
                }
            }
        }
        if self.depth_noise > 0.0 || self.color_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64));
            let dn = Normal::new(0.0, self.depth_noise.max(0.0)).expect("finite depth noise");
            let cn = Normal::new(0.0, self.color_noise.max(0.0)).expect("finite color noise");
            for (d, c) in depth.data.iter_mut().zip(color.data.iter_mut()) {
                if *d > 0.0 && self.depth_noise > 0.0 {
                    *d = (*d + dn.sample(&mut rng)).max(1e-3);
                }
                if self.color_noise > 0.0 {
                    *c = c.map(|v| (v + cn.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        Frame {
            index,
            timestamp: index as f64,
            color,
            depth,
            intrinsics: intr,
            gt_pose: Some(*pose),
        }
    }
}

/// Renders every frame of the scene; timestamps are `0..n-1`.
pub fn generate(scene: &SyntheticScene) -> Result<(Vec<Frame>, Trajectory)> {
    scene.intrinsics.validate()?;
    let poses = scene.trajectory.poses(scene.frames);
    let frames: Vec<Frame> = poses.iter().enumerate().map(|(i, p)| scene.render_frame(i, p)).collect();
    let traj = Trajectory::new(frames.iter().map(|f| f.timestamp).collect(), poses)?;
    Ok((frames, traj))
}

fn frame_dir(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("frame_{i:06}"))
}

/// Writes `poses.txt`, `intrinsics.txt` and `frame_NNNNNN/{color,depth}.png`.
/// Frames without a ground-truth pose are written with the identity.
pub fn save_synthetic(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let intr = frames.first().map(|f| f.intrinsics).ok_or(crate::Error::NoFrames)?;
    std::fs::write(
        dir.join("intrinsics.txt"),
        format!("{} {} {} {} {} {}\n", intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height),
    )?;
    let traj = Trajectory::new(
        frames.iter().map(|f| f.timestamp).collect(),
        frames.iter().map(|f| f.gt_pose.unwrap_or(Pose::identity())).collect(),
    )?;
    let mut poses = Vec::new();
    write_trajectory(&mut poses, &traj)?;
    std::fs::write(dir.join("poses.txt"), poses)?;
    for (i, f) in frames.iter().enumerate() {
        let d = frame_dir(dir, i);
        std::fs::create_dir_all(&d)?;
        write_color(&d.join("color.png"), &f.color)?;
        write_depth(&d.join("depth.png"), &f.depth)?;
    }
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = read_text(path)?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| invalid(path, e))?;
    if v.len() != 6 || v[4] < 1.0 || v[5] < 1.0 || v[4].fract() != 0.0 || v[5].fract() != 0.0 {
        return Err(invalid(path, "expected `fx fy cx cy width height`"));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
}

/// Loads a directory written by [`save_synthetic`].
pub fn load_synthetic(dir: &Path) -> Result<Vec<Frame>> {
    let intr = read_intrinsics(&dir.join("intrinsics.txt"))?;
    let poses_path = dir.join("poses.txt");
    let file = std::fs::File::open(&poses_path).map_err(|e| invalid(&poses_path, e))?;
    let traj = read_trajectory(BufReader::new(file))?;
    if traj.is_empty() {
        return Err(invalid(&poses_path, "no frames"));
    }
    let mut frames = Vec::with_capacity(traj.len());
    for (i, (t, p)) in traj.stamps.iter().zip(&traj.poses).enumerate() {
        let d = frame_dir(dir, i);
        let color = read_color(&d.join("color.png"))?;
        let depth = read_depth(&d.join("depth.png"))?;
        color.ensure_shape((intr.width, intr.height))?;
        depth.ensure_shape((intr.width, intr.height))?;
        frames.push(Frame {
            index: i,
            timestamp: *t,
            color,
            depth,
            intrinsics: intr,
            gt_pose: Some(*p),
        });
    }
    Ok(frames)
}
