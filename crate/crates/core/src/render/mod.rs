//! Ray-surfel splatting: per-pixel intersection gathering, front-to-back
//! alpha compositing and surface-aware depth.
//!
//! Every pixel casts one ray through its center. Each surfel is intersected
//! exactly (ray against the surfel plane), the hits are sorted by depth and
//! blended. Depth is composited from adjusted per-hit depths that are pulled
//! toward the median surface, then normalized by the accumulated opacity.

mod backward;
mod composite;

use std::io::Write;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::geom::{rotation_matrix, Intrinsics, Pose, Surfel, SurfelMap, Vec3};
use crate::image::{ColorImage, DepthImage, Image};

pub use backward::{
    composite_backward, render_backward, render_backward_view, HitGrad, OutputGrad,
    RenderGradients, SurfelGrad,
};
pub use composite::{composite, depth_adjust, median_index, ray_reg, render_pixel, Composite};

const TILE: usize = 8;

/// How candidate surfels are gathered for each pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Gather {
    /// Screen-space bounding boxes binned into tiles.
    #[default]
    Tiled,
    /// Every surfel is tested against every pixel. Reference path.
    BruteForce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    /// Depth-adjustment sensitivity B.
    pub b: f64,
    pub alpha_cutoff: f64,
    pub transmittance_stop: f64,
    pub median_threshold: f64,
    pub parallel_eps: f64,
    /// σ² is floored at `(sigma_floor * d_m)²`.
    pub sigma_floor: f64,
    pub depth_adjust: bool,
    pub depth_normalize: bool,
    /// Ray-plane intersection depth; when false the surfel center depth is used.
    pub unbiased_depth: bool,
    pub gather: Gather,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            b: 4.0,
            alpha_cutoff: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            median_threshold: 0.5,
            parallel_eps: 1e-6,
            sigma_floor: 0.01,
            depth_adjust: true,
            depth_normalize: true,
            unbiased_depth: true,
            gather: Gather::Tiled,
        }
    }
}

/// One ray-surfel hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection {
    pub surfel: usize,
    /// Plane coordinates in units of the surfel scales.
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth used for sorting and compositing.
    pub depth: f64,
    /// Ray parameter of the plane hit.
    pub t: f64,
    pub gauss: f64,
    pub alpha: f64,
    pub color: Vec3,
}

/// Surfel expressed in the camera frame with its screen-space footprint.
#[derive(Clone, Debug)]
pub(crate) struct CamSurfel {
    pub center: Vec3,
    pub tu: Vec3,
    pub tv: Vec3,
    pub normal: Vec3,
    pub su: f64,
    pub sv: f64,
    pub opacity: f64,
    pub color: Vec3,
    /// Squared `(u, v)` radius beyond which alpha is below the cutoff.
    pub r2: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`; `None` when the surfel cannot be hit.
    pub bbox: Option<[usize; 4]>,
}

impl CamSurfel {
    pub fn new(s: &Surfel) -> Self {
        let r = rotation_matrix(&s.rotation);
        Self {
            center: s.center,
            tu: r.column(0).into_owned(),
            tv: r.column(1).into_owned(),
            normal: r.column(2).into_owned(),
            su: s.scale.x,
            sv: s.scale.y,
            opacity: s.opacity,
            color: s.color,
            r2: f64::INFINITY,
            bbox: None,
        }
    }

    pub fn with_bbox(s: &Surfel, intr: &Intrinsics, cfg: &RenderConfig) -> Self {
        let mut cs = Self::new(s);
        if cs.opacity >= cfg.alpha_cutoff {
            cs.r2 = 2.0 * (cs.opacity / cfg.alpha_cutoff).ln() * (1.0 + 1e-9) + 1e-12;
        }
        cs.bbox = cs.footprint(intr, cfg);
        cs
    }

    /// Conservative pixel bounds of every point that can pass the alpha cutoff.
    fn footprint(&self, intr: &Intrinsics, cfg: &RenderConfig) -> Option<[usize; 4]> {
        if self.opacity < cfg.alpha_cutoff {
            return None;
        }
        // alpha >= cutoff  <=>  u² + v² <= 2 ln(o / cutoff)
        let r = (2.0 * (self.opacity / cfg.alpha_cutoff).ln()).max(0.0).sqrt() * 1.001 + 1e-9;
        let du = self.tu * (r * self.su);
        let dv = self.tv * (r * self.sv);
        let corners = [
            self.center + du + dv,
            self.center + du - dv,
            self.center - du + dv,
            self.center - du - dv,
        ];
        if corners.iter().all(|c| c.z <= 0.0) {
            return None;
        }
        let full = [0, intr.width - 1, 0, intr.height - 1];
        if corners.iter().any(|c| c.z <= 1e-6) {
            return Some(full);
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for c in &corners {
            let px = intr.fx * c.x / c.z + intr.cx;
            let py = intr.fy * c.y / c.z + intr.cy;
            x0 = x0.min(px);
            x1 = x1.max(px);
            y0 = y0.min(py);
            y1 = y1.max(py);
        }
        let (w, h) = (intr.width as f64, intr.height as f64);
        if x1 < -1e-6 || y1 < -1e-6 || x0 > w - 1.0 + 1e-6 || y0 > h - 1.0 + 1e-6 {
            return None;
        }
        let x0 = (x0 - 1e-6).ceil().max(0.0) as usize;
        let y0 = (y0 - 1e-6).ceil().max(0.0) as usize;
        let x1 = ((x1 + 1e-6).floor().min(w - 1.0)).max(0.0) as usize;
        let y1 = ((y1 + 1e-6).floor().min(h - 1.0)).max(0.0) as usize;
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some([x0, x1, y0, y1])
    }

    #[inline]
    pub fn covers(&self, x: usize, y: usize) -> bool {
        match self.bbox {
            Some([x0, x1, y0, y1]) => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            None => false,
        }
    }

    /// Exact ray-plane intersection. `ray` must have positive z.
    #[inline]
    pub fn intersect(&self, index: usize, ray: &Vec3, cfg: &RenderConfig) -> Option<Intersection> {
        let ndr = self.normal.dot(ray);
        if ndr.abs() < cfg.parallel_eps {
            return None;
        }
        let t = self.normal.dot(&self.center) / ndr;
        let hit_depth = t * ray.z;
        if !(hit_depth > 0.0) {
            return None;
        }
        let q = ray * t - self.center;
        let u = self.tu.dot(&q) / self.su;
        let v = self.tv.dot(&q) / self.sv;
        if u * u + v * v > self.r2 {
            return None;
        }
        let gauss = (-0.5 * (u * u + v * v)).exp();
        let alpha = self.opacity * gauss;
        if alpha < cfg.alpha_cutoff {
            return None;
        }
        let depth = if cfg.unbiased_depth {
            hit_depth
        } else {
            self.center.z
        };
        if !(depth > 0.0) {
            return None;
        }
        Some(Intersection {
            surfel: index,
            u,
            v,
            depth,
            t,
            gauss,
            alpha,
            color: self.color,
        })
    }
}

/// Intersects a camera-frame surfel with a viewing ray (`ray.z > 0`).
/// The returned hit carries surfel index 0.
pub fn intersect(surfel: &Surfel, ray: &Vec3, cfg: &RenderConfig) -> Option<Intersection> {
    CamSurfel::new(surfel).intersect(0, ray, cfg)
}

/// Ascending depth, lower surfel index first on ties.
pub fn sort_hits(hits: &mut [Intersection]) {
    hits.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.surfel.cmp(&b.surfel)));
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Composited depth, 0 where nothing was hit.
    pub depth: DepthImage,
    pub accum: Image<f64>,
    /// Per-pixel hit lists (sorted, truncated at early termination), kept for backward passes.
    pub hits: Option<Vec<Vec<Intersection>>>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    pub fn pixel_count(&self) -> usize {
        self.depth.data.len()
    }

    /// Writes `pixel,surfel,depth,alpha,weight` rows for every retained hit.
    pub fn write_hits_csv(&self, cfg: &RenderConfig, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "pixel,surfel,depth,alpha,weight")?;
        if let Some(hits) = &self.hits {
            for (p, list) in hits.iter().enumerate() {
                let c = composite(list, cfg);
                for (h, w) in list.iter().zip(&c.weights) {
                    writeln!(out, "{p},{},{:.17e},{:.17e},{:.17e}", h.surfel, h.depth, h.alpha, w)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn camera_surfels(
    map: &SurfelMap,
    view: &Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Vec<CamSurfel> {
    let rv = view.rotation_matrix();
    map.surfels
        .par_iter()
        .map(|s| {
            let cam = Surfel {
                center: rv * s.center + view.translation,
                rotation: view.rotation * s.rotation,
                ..*s
            };
            CamSurfel::with_bbox(&cam, intr, cfg)
        })
        .collect()
}

/// Renders `map` seen from camera pose `pose` (camera-to-world).
pub fn render(map: &SurfelMap, pose: &Pose, intr: &Intrinsics, cfg: &RenderConfig) -> RenderOutput {
    render_view(map, &pose.inverse(), intr, cfg, false)
}

/// Renders with an explicit world-to-camera transform; `keep_hits` retains
/// the per-pixel intersection lists needed by [`render_backward_view`].
pub fn render_view(
    map: &SurfelMap,
    view: &Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    keep_hits: bool,
) -> RenderOutput {
    let cams = camera_surfels(map, view, intr, cfg);
    let (w, h) = (intr.width, intr.height);
    let rays: Vec<Vec3> = (0..w * h)
        .map(|p| crate::geom::pixel_ray(intr, Vector2::new((p % w) as f64, (p / w) as f64)))
        .collect();

    let pixel = |p: usize, candidates: &mut dyn Iterator<Item = usize>| {
        let ray = &rays[p];
        let mut hits: Vec<Intersection> = candidates
            .filter_map(|i| cams[i].intersect(i, ray, cfg))
            .collect();
        sort_hits(&mut hits);
        let c = composite(&hits, cfg);
        hits.truncate(c.used);
        (c.color, c.depth, c.accum, hits)
    };

    let mut color = Image::filled(w, h, Vec3::zeros());
    let mut depth = Image::filled(w, h, 0.0);
    let mut accum = Image::filled(w, h, 0.0);
    let mut lists: Vec<Vec<Intersection>> = if keep_hits {
        vec![Vec::new(); w * h]
    } else {
        Vec::new()
    };

    let mut store = |p: usize, (c, d, a, hits): (Vec3, f64, f64, Vec<Intersection>)| {
        color.data[p] = c;
        depth.data[p] = d;
        accum.data[p] = a;
        if keep_hits {
            lists[p] = hits;
        }
    };

    match cfg.gather {
        Gather::BruteForce => {
            let results: Vec<_> = (0..w * h)
                .into_par_iter()
                .map(|p| pixel(p, &mut (0..cams.len())))
                .collect();
            for (p, r) in results.into_iter().enumerate() {
                store(p, r);
            }
        }
        Gather::Tiled => {
            let tiles_x = w.div_ceil(TILE);
            let tiles_y = h.div_ceil(TILE);
            let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
            for (i, cs) in cams.iter().enumerate() {
                if let Some([x0, x1, y0, y1]) = cs.bbox {
                    for ty in y0 / TILE..=y1 / TILE {
                        for tx in x0 / TILE..=x1 / TILE {
                            bins[ty * tiles_x + tx].push(i as u32);
                        }
                    }
                }
            }
            let results: Vec<Vec<(usize, _)>> = bins
                .par_iter()
                .enumerate()
                .map(|(t, bin)| {
                    let (tx, ty) = (t % tiles_x, t / tiles_x);
                    let mut out = Vec::with_capacity(TILE * TILE);
                    for y in ty * TILE..((ty + 1) * TILE).min(h) {
                        for x in tx * TILE..((tx + 1) * TILE).min(w) {
                            let p = y * w + x;
                            let mut cand = bin
                                .iter()
                                .map(|&i| i as usize)
                                .filter(|&i| cams[i].covers(x, y));
                            out.push((p, pixel(p, &mut cand)));
                        }
                    }
                    out
                })
                .collect();
            for tile in results {
                for (p, r) in tile {
                    store(p, r);
                }
            }
        }
    }

    RenderOutput {
        color,
        depth,
        accum,
        hits: keep_hits.then_some(lists),
    }
}
