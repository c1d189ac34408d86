//! Reverse-mode derivatives of the forward renderer.

use nalgebra::{Quaternion, Vector2, Vector6};
use rayon::prelude::*;

use crate::geom::{pixel_ray, rotation_matrix, rotation_matrix_vjp, skew, Intrinsics, Mat3, Pose, SurfelMap, Vec3};

use super::{camera_surfels, composite, CamSurfel, Intersection, RenderConfig, RenderOutput};

/// Upstream gradient of a scalar loss w.r.t. the rendered maps. `reg` is the
/// coefficient of each ray's `Σ w (d' - d_m)²` term in the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub color: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub accum: Vec<f64>,
    pub reg: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(pixels: usize) -> Self {
        Self {
            color: vec![Vec3::zeros(); pixels],
            depth: vec![0.0; pixels],
            accum: vec![0.0; pixels],
            reg: vec![0.0; pixels],
        }
    }

    fn is_zero_at(&self, p: usize) -> bool {
        self.color[p] == Vec3::zeros() && self.depth[p] == 0.0 && self.accum[p] == 0.0 && self.reg[p] == 0.0
    }
}

/// Loss gradient w.r.t. one surfel's stored parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelGrad {
    pub center: Vec3,
    /// Tangent to the unit sphere at the stored quaternion.
    pub rotation: Quaternion<f64>,
    pub scale: Vector2<f64>,
    pub opacity: f64,
    pub color: Vec3,
}

impl Default for SurfelGrad {
    fn default() -> Self {
        Self {
            center: Vec3::zeros(),
            rotation: Quaternion::new(0.0, 0.0, 0.0, 0.0),
            scale: Vector2::zeros(),
            opacity: 0.0,
            color: Vec3::zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    /// Aligned with the map; empty when surfel gradients were not requested.
    pub surfels: Vec<SurfelGrad>,
    /// d(loss)/d(R) of the world-to-camera rotation matrix.
    pub view_rotation: Mat3,
    /// d(loss)/d(t) of the world-to-camera translation.
    pub view_translation: Vec3,
}

impl RenderGradients {
    /// Gradient w.r.t. the camera pose (camera-to-world) perturbed as
    /// `R ← R·Exp(ω)`, `t ← t + v`; returned as `(ω, v)`.
    pub fn camera_tangent(&self, pose: &Pose) -> Vector6<f64> {
        let (g_rot, g_t) = self.camera_matrix_grad(pose);
        let r = pose.rotation_matrix();
        let mut out = Vector6::zeros();
        for k in 0..3 {
            let dir = r * skew(&Vec3::ith(k, 1.0));
            out[k] = g_rot.component_mul(&dir).sum();
            out[3 + k] = g_t[k];
        }
        out
    }

    /// Gradient w.r.t. the camera pose's quaternion (tangent-projected) and translation.
    pub fn camera_quaternion(&self, pose: &Pose) -> (Quaternion<f64>, Vec3) {
        let (g_rot, g_t) = self.camera_matrix_grad(pose);
        (rotation_matrix_vjp(&pose.rotation, &g_rot), g_t)
    }

    fn camera_matrix_grad(&self, pose: &Pose) -> (Mat3, Vec3) {
        // view = (Rᵀ, -Rᵀ t)
        let r = pose.rotation_matrix();
        let g_t = -(r * self.view_translation);
        let g_rot = self.view_rotation.transpose() - pose.translation * self.view_translation.transpose();
        (g_rot, g_t)
    }

    /// Gradient w.r.t. `delta` where the world-to-camera transform is
    /// `left ∘ delta ∘ right`; returns the quaternion (tangent-projected) and translation parts.
    pub fn sandwiched(&self, left: &Pose, delta: &Pose, right: &Pose) -> (Quaternion<f64>, Vec3) {
        let rl = left.rotation_matrix();
        let rr = right.rotation_matrix();
        let g_rot = rl.transpose() * self.view_rotation * rr.transpose()
            + rl.transpose() * self.view_translation * right.translation.transpose();
        let g_t = rl.transpose() * self.view_translation;
        (rotation_matrix_vjp(&delta.rotation, &g_rot), g_t)
    }
}

/// Per-hit gradient of the pixel loss w.r.t. the hit's alpha, depth and color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitGrad {
    pub alpha: f64,
    pub depth: f64,
    pub color: Vec3,
}

/// Reverse pass of [`composite`] for one pixel.
pub fn composite_backward(
    hits: &[Intersection],
    cfg: &RenderConfig,
    g_color: Vec3,
    g_depth: f64,
    g_accum: f64,
    g_reg: f64,
) -> Vec<HitGrad> {
    let c = composite(hits, cfg);
    let n = c.used;
    if n == 0 {
        return Vec::new();
    }
    let m = c.median.expect("non-empty pixel has a median");
    let w = &c.weights;
    let dp = &c.adjusted;
    let dm = hits[m].depth;

    let mut gw = vec![0.0; n];
    let mut gdp = vec![0.0; n];
    let mut gd = vec![0.0; n];
    let mut gdm = 0.0;
    let mut out: Vec<HitGrad> = hits[..n]
        .iter()
        .zip(w)
        .map(|(_, wi)| HitGrad {
            alpha: 0.0,
            depth: 0.0,
            color: g_color * *wi,
        })
        .collect();

    let (g_num, g_acc) = if cfg.depth_normalize {
        (g_depth / c.accum, g_accum - g_depth * c.depth / c.accum)
    } else {
        (g_depth, g_accum)
    };
    for i in 0..n {
        gw[i] += g_color.dot(&hits[i].color) + g_acc + g_num * dp[i];
        gdp[i] += g_num * w[i];
        if g_reg != 0.0 {
            let e = dp[i] - dm;
            gw[i] += g_reg * e * e;
            gdp[i] += 2.0 * g_reg * w[i] * e;
            gdm -= 2.0 * g_reg * w[i] * e;
        }
    }

    if cfg.depth_adjust {
        let floor2 = (cfg.sigma_floor * dm).powi(2);
        // spread[i] = Σ_{j<i} w_j (d'_j - d_m)²
        let mut spread = vec![0.0; n];
        let mut acc = 0.0;
        for i in 0..n {
            spread[i] = acc;
            acc += w[i] * (dp[i] - dm).powi(2);
        }
        let mut g_spread = 0.0;
        for i in (0..n).rev() {
            let e = dp[i] - dm;
            if g_spread != 0.0 {
                gw[i] += g_spread * e * e;
                gdp[i] += 2.0 * g_spread * w[i] * e;
                gdm -= 2.0 * g_spread * w[i] * e;
            }
            if i > m {
                let (s, floored) = if spread[i] > floor2 {
                    (spread[i], false)
                } else {
                    (floor2, true)
                };
                let d = hits[i].depth;
                let delta = d - dm;
                let beta = (-(delta * delta) / (cfg.b * s)).exp();
                let g_beta = gdp[i] * delta;
                let dbeta_ddelta = beta * (-2.0 * delta / (cfg.b * s));
                gd[i] += gdp[i] * beta + g_beta * dbeta_ddelta;
                gdm += gdp[i] * (1.0 - beta) - g_beta * dbeta_ddelta;
                let g_s = g_beta * beta * delta * delta / (cfg.b * s * s);
                if floored {
                    gdm += g_s * 2.0 * cfg.sigma_floor * cfg.sigma_floor * dm;
                } else {
                    g_spread += g_s;
                }
            } else {
                gd[i] += gdp[i];
            }
        }
    } else {
        for i in 0..n {
            gd[i] += gdp[i];
        }
    }
    gd[m] += gdm;

    // w_i = α_i Π_{j<i} (1 - α_j)
    let mut trans = Vec::with_capacity(n);
    let mut t = 1.0;
    for h in &hits[..n] {
        trans.push(t);
        t *= 1.0 - h.alpha;
    }
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let a = hits[k].alpha;
        out[k].alpha = gw[k] * trans[k] - suffix / (1.0 - a);
        out[k].depth = gd[k];
        suffix += gw[k] * w[k];
    }
    out
}

/// Camera-frame parameter gradient contributed by one hit.
#[derive(Clone, Copy, Debug, Default)]
struct CamGrad {
    center: Vec3,
    tu: Vec3,
    tv: Vec3,
    normal: Vec3,
    su: f64,
    sv: f64,
    opacity: f64,
    color: Vec3,
}

impl std::ops::AddAssign for CamGrad {
    fn add_assign(&mut self, o: Self) {
        self.center += o.center;
        self.tu += o.tu;
        self.tv += o.tv;
        self.normal += o.normal;
        self.su += o.su;
        self.sv += o.sv;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

fn hit_backward(cs: &CamSurfel, hit: &Intersection, g: &HitGrad, ray: &Vec3, cfg: &RenderConfig) -> CamGrad {
    let mut out = CamGrad {
        color: g.color,
        ..Default::default()
    };
    out.opacity = g.alpha * hit.gauss;
    let g_gauss = g.alpha * cs.opacity;
    let gu = -g_gauss * hit.gauss * hit.u;
    let gv = -g_gauss * hit.gauss * hit.v;
    let q = ray * hit.t - cs.center;
    out.su = -gu * hit.u / cs.su;
    out.sv = -gv * hit.v / cs.sv;
    out.tu = q * (gu / cs.su);
    out.tv = q * (gv / cs.sv);
    let gq = cs.tu * (gu / cs.su) + cs.tv * (gv / cs.sv);
    let mut g_t = gq.dot(ray);
    if cfg.unbiased_depth {
        g_t += g.depth * ray.z;
    } else {
        out.center.z += g.depth;
    }
    let ndr = cs.normal.dot(ray);
    out.center += cs.normal * (g_t / ndr) - gq;
    out.normal = -q * (g_t / ndr);
    out
}

/// Gradients for a render made with [`super::render`] from camera pose `pose`.
pub fn render_backward(
    map: &SurfelMap,
    pose: &Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    output: &RenderOutput,
    grad: &OutputGrad,
) -> RenderGradients {
    render_backward_view(map, &pose.inverse(), intr, cfg, output, grad, true)
}

/// Gradients for a render made with [`super::render_view`] and `keep_hits`.
/// Surfel gradients are skipped unless `want_surfels`.
pub fn render_backward_view(
    map: &SurfelMap,
    view: &Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    output: &RenderOutput,
    grad: &OutputGrad,
    want_surfels: bool,
) -> RenderGradients {
    let hits = output
        .hits
        .as_ref()
        .expect("backward pass needs a render with retained hits");
    let cams = camera_surfels(map, view, intr, cfg);
    let w = intr.width;

    let per_pixel: Vec<Vec<(usize, CamGrad)>> = (0..hits.len())
        .into_par_iter()
        .map(|p| {
            if hits[p].is_empty() || grad.is_zero_at(p) {
                return Vec::new();
            }
            let ray = pixel_ray(intr, Vector2::new((p % w) as f64, (p / w) as f64));
            let hg = composite_backward(&hits[p], cfg, grad.color[p], grad.depth[p], grad.accum[p], grad.reg[p]);
            hits[p]
                .iter()
                .zip(&hg)
                .map(|(h, g)| (h.surfel, hit_backward(&cams[h.surfel], h, g, &ray, cfg)))
                .collect()
        })
        .collect();

    let mut acc = vec![CamGrad::default(); map.len()];
    for list in per_pixel {
        for (i, g) in list {
            acc[i] += g;
        }
    }

    let rv = view.rotation_matrix();
    let mut view_rotation = Mat3::zeros();
    let mut view_translation = Vec3::zeros();
    let mut surfels = Vec::with_capacity(if want_surfels { map.len() } else { 0 });
    for (s, g) in map.surfels.iter().zip(&acc) {
        let r_world = rotation_matrix(&s.rotation);
        let g_rc = Mat3::from_columns(&[g.tu, g.tv, g.normal]);
        view_rotation += g.center * s.center.transpose() + g_rc * r_world.transpose();
        view_translation += g.center;
        if want_surfels {
            surfels.push(SurfelGrad {
                center: rv.transpose() * g.center,
                rotation: rotation_matrix_vjp(&s.rotation, &(rv.transpose() * g_rc)),
                scale: Vector2::new(g.su, g.sv),
                opacity: g.opacity,
                color: g.color,
            });
        }
    }
    RenderGradients {
        surfels,
        view_rotation,
        view_translation,
    }
}
