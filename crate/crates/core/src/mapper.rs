//! Incremental map construction: surfel attachment, edge growth and
//! gradient-based refinement of surfels and per-frame exposure.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Quaternion, UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamParams, AdamState};
use crate::error::{Error, Result};
use crate::frame::{ExposureParams, Frame};
use crate::geom::{pixel_ray, unproject, Intrinsics, Pose, Surfel, SurfelMap, Vec3};
use crate::image::DepthImage;
use crate::render::{
    composite, ray_reg, render_backward_view, render_view, Intersection, OutputGrad, RenderConfig, RenderOutput,
    SurfelGrad,
};
use crate::track::{check_shape, sign};

#[derive(Clone, Debug, PartialEq)]
pub struct MapConfig {
    pub iters_map: usize,
    pub attach_accum: f64,
    pub edge_low: f64,
    pub edge_high: f64,
    pub edge_growth: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub prune_opacity: f64,
    pub init_opacity: f64,
    /// Largest relative depth jump to a neighbour accepted for a normal estimate.
    pub normal_jump: f64,
    pub lr_center: f64,
    pub lr_rotation: f64,
    /// Step in log-scale space.
    pub lr_scale: f64,
    /// Step in logit-opacity space.
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_exposure: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            iters_map: 40,
            attach_accum: 0.6,
            edge_low: 0.4,
            edge_high: 0.6,
            edge_growth: true,
            lambda1: 0.5,
            lambda2: 0.1,
            prune_opacity: 0.05,
            init_opacity: 0.5,
            normal_jump: 0.05,
            lr_center: 2e-4,
            lr_rotation: 1e-3,
            lr_scale: 2e-3,
            lr_opacity: 0.05,
            lr_color: 2.5e-3,
            lr_exposure: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
        }
    }
}

/// Exposure coefficients keyed by frame index.
pub type ExposureTable = BTreeMap<usize, ExposureParams>;

/// Camera-facing unit normal of the depth map at `(x, y)` from central
/// differences of the unprojected neighbours. `None` at borders, holes and
/// depth discontinuities.
pub fn normal_from_depth(depth: &DepthImage, intr: &Intrinsics, x: usize, y: usize, max_jump: f64) -> Option<Vec3> {
    if x == 0 || y == 0 || x + 1 >= depth.width || y + 1 >= depth.height {
        return None;
    }
    let dc = *depth.at(x, y);
    if !(dc > 0.0 && dc.is_finite()) {
        return None;
    }
    let point = |px: usize, py: usize| -> Option<Vec3> {
        let d = *depth.at(px, py);
        if !(d > 0.0 && d.is_finite()) || (d - dc).abs() > max_jump * dc {
            return None;
        }
        unproject(intr, Vector2::new(px as f64, py as f64), d).ok()
    };
    let tx = point(x + 1, y)? - point(x - 1, y)?;
    let ty = point(x, y + 1)? - point(x, y - 1)?;
    let n = tx.cross(&ty);
    let len = n.norm();
    if len <= f64::EPSILON * dc * dc {
        return None;
    }
    let n = n / len;
    let center = unproject(intr, Vector2::new(x as f64, y as f64), dc).ok()?;
    Some(if n.dot(&center) > 0.0 { -n } else { n })
}

/// Adds surfels at under-covered pixels of `frame` (camera-to-map pose
/// `pose`) and returns how many were added. `render` must come from the same
/// map and pose.
pub fn attach_surfels(frame: &Frame, pose: &Pose, render: &RenderOutput, map: &mut SurfelMap, cfg: &MapConfig) -> Result<usize> {
    check_shape(render, frame)?;
    let intr = &frame.intrinsics;
    let f = intr.mean_focal();
    let r = pose.rotation_matrix();
    let (w, h) = (intr.width, intr.height);
    let mut added = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let a = render.accum.data[p];
            let (d, depth_map) = if frame.valid_depth(p) {
                if a >= cfg.attach_accum {
                    continue;
                }
                (frame.depth.data[p], &frame.depth)
            } else if cfg.edge_growth && a > cfg.edge_low && a < cfg.edge_high && render.depth.data[p] > 0.0 {
                (render.depth.data[p], &render.depth)
            } else {
                continue;
            };
            let px = Vector2::new(x as f64, y as f64);
            let normal = normal_from_depth(depth_map, intr, x, y, cfg.normal_jump)
                .unwrap_or_else(|| -pixel_ray(intr, px));
            let center = unproject(intr, px, d)?;
            added.push(Surfel::with_normal(
                pose.transform_point(&center),
                r * normal,
                d / f,
                cfg.init_opacity,
                frame.color.data[p],
            ));
        }
    }
    let n = added.len();
    if n > 0 {
        map.extend(added);
    }
    Ok(n)
}

/// Mean over rays with a median of `Σ w (d' - d_m)²`, plus the per-ray
/// coefficient of that term in the mean.
pub fn reg_loss(hits: &[Vec<Intersection>], cfg: &RenderConfig) -> (f64, Vec<f64>) {
    let per_ray: Vec<Option<f64>> = hits
        .iter()
        .map(|list| {
            let c = composite(list, cfg);
            c.median.map(|_| ray_reg(&c, list))
        })
        .collect();
    let count = per_ray.iter().filter(|r| r.is_some()).count();
    if count == 0 {
        return (0.0, vec![0.0; hits.len()]);
    }
    let inv = 1.0 / count as f64;
    let value = per_ray.iter().flatten().sum::<f64>() * inv;
    let coeff = per_ray.iter().map(|r| if r.is_some() { inv } else { 0.0 }).collect();
    (value, coeff)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingLoss {
    pub value: f64,
    pub grad: OutputGrad,
    /// d(loss)/d(a), d(loss)/d(b) of the frame's exposure.
    pub exposure_grad: (f64, f64),
}

/// L1 depth plus `λ1` times the mean channel L1 between the
/// exposure-corrected render and the observed color, averaged over pixels
/// with valid measured depth. The regularizer is added separately.
pub fn photometric_loss(render: &RenderOutput, frame: &Frame, exposure: &ExposureParams, lambda1: f64) -> Result<MappingLoss> {
    check_shape(render, frame)?;
    let n = render.pixel_count();
    let valid: Vec<usize> = (0..n).filter(|&p| frame.valid_depth(p)).collect();
    let mut grad = OutputGrad::zeros(n);
    let (mut value, mut ga, mut gb) = (0.0, 0.0, 0.0);
    if !valid.is_empty() {
        let inv = 1.0 / valid.len() as f64;
        let k = lambda1 * inv / 3.0;
        for &p in &valid {
            let dd = render.depth.data[p] - frame.depth.data[p];
            let c = render.color.data[p];
            let dc = c.map(|v| exposure.apply(v)) - frame.color.data[p];
            value += inv * dd.abs() + k * dc.abs().sum();
            grad.depth[p] = inv * sign(dd);
            let s = dc.map(sign);
            grad.color[p] = s * (k * exposure.a);
            ga += k * s.dot(&c);
            gb += k * s.sum();
        }
    }
    Ok(MappingLoss {
        value,
        grad,
        exposure_grad: (ga, gb),
    })
}

/// Full mapping objective on one render: photometric terms plus `λ2` times
/// the depth-concentration regularizer. `render` must retain hits.
pub fn mapping_loss(
    render: &RenderOutput,
    frame: &Frame,
    exposure: &ExposureParams,
    cfg: &MapConfig,
    render_cfg: &RenderConfig,
) -> Result<MappingLoss> {
    let mut loss = photometric_loss(render, frame, exposure, cfg.lambda1)?;
    if cfg.lambda2 != 0.0 {
        let hits = render.hits.as_ref().expect("mapping loss needs retained hits");
        let (reg, coeff) = reg_loss(hits, render_cfg);
        loss.value += cfg.lambda2 * reg;
        for (g, c) in loss.grad.reg.iter_mut().zip(coeff) {
            *g = cfg.lambda2 * c;
        }
    }
    Ok(loss)
}

/// A frame and its camera-to-map pose.
#[derive(Clone, Copy, Debug)]
pub struct MapView<'a> {
    pub frame: &'a Frame,
    pub pose: Pose,
}

/// Adam state for every surfel (center, quaternion, log-scale,
/// logit-opacity, color) and every frame's exposure, plus the frame sampler.
#[derive(Clone, Debug)]
pub struct MapOptimizer {
    surfels: Vec<AdamState<13>>,
    exposure: BTreeMap<usize, AdamState<2>>,
    /// Frames whose exposure stays fixed; they anchor the color scale.
    fixed_exposure: BTreeSet<usize>,
    pub rng: ChaCha8Rng,
}

impl MapOptimizer {
    pub fn new(seed: u64) -> Self {
        Self {
            surfels: Vec::new(),
            exposure: BTreeMap::new(),
            fixed_exposure: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Aligns the moment buffers with `map`. Appended surfels start fresh; a
    /// shrunken map resets all surfel state (use [`prune_with`] to keep it).
    pub fn sync(&mut self, map: &SurfelMap) {
        if map.len() < self.surfels.len() {
            self.surfels.clear();
        }
        self.surfels.resize(map.len(), AdamState::default());
    }

    /// Forgets all surfel moments.
    pub fn reset_surfels(&mut self) {
        self.surfels.clear();
    }

    /// Applies one Adam step to every surfel with a nonzero gradient; surfels
    /// no pixel touched keep their parameters and moments.
    pub fn apply(&mut self, map: &mut SurfelMap, grads: &[SurfelGrad], cfg: &MapConfig) {
        self.sync(map);
        let p = AdamParams {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
        };
        for ((s, g), state) in map.surfels.iter_mut().zip(grads).zip(self.surfels.iter_mut()) {
            let o = s.opacity;
            let raw = [
                g.center.x,
                g.center.y,
                g.center.z,
                g.rotation.w,
                g.rotation.i,
                g.rotation.j,
                g.rotation.k,
                g.scale.x * s.scale.x,
                g.scale.y * s.scale.y,
                g.opacity * o * (1.0 - o),
                g.color.x,
                g.color.y,
                g.color.z,
            ];
            if raw.iter().all(|v| *v == 0.0) {
                continue;
            }
            let d = state.step(&raw, &p);
            s.center -= cfg.lr_center * Vec3::new(d[0], d[1], d[2]);
            if d[3..7].iter().any(|v| *v != 0.0) && cfg.lr_rotation != 0.0 {
                let q = s.rotation.quaternion();
                let lr = cfg.lr_rotation;
                s.rotation = UnitQuaternion::from_quaternion(Quaternion::new(
                    q.w - lr * d[3],
                    q.i - lr * d[4],
                    q.j - lr * d[5],
                    q.k - lr * d[6],
                ));
            }
            s.scale.x *= (-cfg.lr_scale * d[7]).exp();
            s.scale.y *= (-cfg.lr_scale * d[8]).exp();
            if d[9] != 0.0 && cfg.lr_opacity != 0.0 {
                let logit = (o / (1.0 - o)).ln() - cfg.lr_opacity * d[9];
                s.opacity = 1.0 / (1.0 + (-logit).exp());
            }
            s.color -= cfg.lr_color * Vec3::new(d[10], d[11], d[12]);
            s.clamp();
        }
    }

    /// Holds the exposure of frame `index` at its current value.
    pub fn fix_exposure(&mut self, index: usize) {
        self.fixed_exposure.insert(index);
    }

    /// Applies one Adam step to the exposure of frame `index` unless it is fixed.
    pub fn apply_exposure(&mut self, index: usize, exposure: &mut ExposureParams, grad: (f64, f64), cfg: &MapConfig) {
        if cfg.lr_exposure == 0.0 || self.fixed_exposure.contains(&index) {
            return;
        }
        let p = AdamParams {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
        };
        let d = self.exposure.entry(index).or_default().step(&[grad.0, grad.1], &p);
        exposure.a = (exposure.a - cfg.lr_exposure * d[0]).max(1e-3);
        exposure.b -= cfg.lr_exposure * d[1];
    }
}

/// One mapping iteration: samples a view uniformly, renders it, and takes an
/// Adam step on all surfels and that frame's exposure. Returns the loss
/// before the step.
pub fn map_step(
    map: &mut SurfelMap,
    views: &[MapView],
    exposures: &mut ExposureTable,
    opt: &mut MapOptimizer,
    cfg: &MapConfig,
    render_cfg: &RenderConfig,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::NoFrames);
    }
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    let view = &views[opt.rng.random_range(0..views.len())];
    step_on_view(map, view, exposures, opt, cfg, render_cfg)
}

/// Mapping step on a given view.
pub fn step_on_view(
    map: &mut SurfelMap,
    view: &MapView,
    exposures: &mut ExposureTable,
    opt: &mut MapOptimizer,
    cfg: &MapConfig,
    render_cfg: &RenderConfig,
) -> Result<f64> {
    step_on_w2c(map, view.frame, &view.pose.inverse(), exposures, opt, cfg, render_cfg)
}

/// [`step_on_view`] with an explicit world-to-camera transform.
pub fn step_on_w2c(
    map: &mut SurfelMap,
    frame: &Frame,
    w2c: &Pose,
    exposures: &mut ExposureTable,
    opt: &mut MapOptimizer,
    cfg: &MapConfig,
    render_cfg: &RenderConfig,
) -> Result<f64> {
    let intr = &frame.intrinsics;
    let exposure = exposures.entry(frame.index).or_default();
    let out = render_view(map, w2c, intr, render_cfg, true);
    let loss = mapping_loss(&out, frame, exposure, cfg, render_cfg)?;
    let grads = render_backward_view(map, w2c, intr, render_cfg, &out, &loss.grad, true);
    opt.apply(map, &grads.surfels, cfg);
    opt.apply_exposure(frame.index, exposure, loss.exposure_grad, cfg);
    Ok(loss.value)
}

/// Removes surfels with opacity strictly below the threshold.
pub fn prune(map: &mut SurfelMap, cfg: &MapConfig) -> usize {
    map.retain(|s| s.opacity >= cfg.prune_opacity)
}

/// [`prune`] that keeps the optimizer's per-surfel state aligned.
pub fn prune_with(map: &mut SurfelMap, opt: &mut MapOptimizer, cfg: &MapConfig) -> usize {
    opt.sync(map);
    let keep: Vec<bool> = map.surfels.iter().map(|s| s.opacity >= cfg.prune_opacity).collect();
    let mut it = keep.iter();
    opt.surfels.retain(|_| *it.next().unwrap());
    prune(map, cfg)
}
