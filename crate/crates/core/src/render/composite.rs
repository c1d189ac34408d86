use crate::geom::Vec3;

use super::{Intersection, RenderConfig};

/// Per-pixel compositing result with the intermediates the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: Vec3,
    pub depth: f64,
    pub accum: f64,
    /// Blending weights of the hits that were blended.
    pub weights: Vec<f64>,
    /// Surface-aware depths d'.
    pub adjusted: Vec<f64>,
    /// Index of the median hit.
    pub median: Option<usize>,
    /// Number of leading hits blended before early termination.
    pub used: usize,
}

/// Front-to-back alpha blending of depth-sorted hits.
pub fn composite(hits: &[Intersection], cfg: &RenderConfig) -> Composite {
    let mut weights = Vec::with_capacity(hits.len());
    let mut transmittance = 1.0;
    let mut color = Vec3::zeros();
    let mut accum = 0.0;
    for h in hits {
        if transmittance < cfg.transmittance_stop {
            break;
        }
        let w = h.alpha * transmittance;
        weights.push(w);
        color += h.color * w;
        accum += w;
        transmittance *= 1.0 - h.alpha;
    }
    let used = weights.len();
    let depths: Vec<f64> = hits[..used].iter().map(|h| h.depth).collect();
    let median = median_index(&weights, cfg);
    let adjusted = match median {
        Some(m) if cfg.depth_adjust => depth_adjust(&depths, &weights, m, cfg),
        _ => depths,
    };
    let depth = if used == 0 {
        0.0
    } else {
        let num: f64 = weights.iter().zip(&adjusted).map(|(w, d)| w * d).sum();
        if cfg.depth_normalize {
            num / accum
        } else {
            num
        }
    };
    Composite {
        color,
        depth,
        accum,
        weights,
        adjusted,
        median,
        used,
    }
}

/// `(color, depth, accum)` of one pixel.
pub fn render_pixel(hits: &[Intersection], cfg: &RenderConfig) -> (Vec3, f64, f64) {
    let c = composite(hits, cfg);
    (c.color, c.depth, c.accum)
}

/// First hit at which the running weight exceeds the median threshold.
/// Falls back to the largest weight (first among ties) when the total never does.
pub fn median_index(weights: &[f64], cfg: &RenderConfig) -> Option<usize> {
    if weights.is_empty() {
        return None;
    }
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        if cum > cfg.median_threshold {
            return Some(i);
        }
    }
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    Some(best)
}

/// Surface-aware depths: hits up to the median keep their depth, later hits
/// are pulled toward the median depth by `β = exp(-(d - d_m)² / (B σ²))`
/// where σ² is the weighted spread of the already adjusted predecessors.
pub fn depth_adjust(depths: &[f64], weights: &[f64], m: usize, cfg: &RenderConfig) -> Vec<f64> {
    let dm = depths[m];
    let floor2 = (cfg.sigma_floor * dm).powi(2);
    let mut out = Vec::with_capacity(depths.len());
    let mut spread = 0.0;
    for (i, (&d, &w)) in depths.iter().zip(weights).enumerate() {
        let adjusted = if i <= m {
            d
        } else {
            let sigma2 = if spread > floor2 { spread } else { floor2 };
            let beta = (-(d - dm).powi(2) / (cfg.b * sigma2)).exp();
            beta * d + (1.0 - beta) * dm
        };
        spread += w * (adjusted - dm).powi(2);
        out.push(adjusted);
    }
    out
}

/// `Σ w_i (d'_i - d_m)²` for one ray; 0 without a median.
pub fn ray_reg(c: &Composite, hits: &[Intersection]) -> f64 {
    match c.median {
        Some(m) => {
            let dm = hits[m].depth;
            c.weights
                .iter()
                .zip(&c.adjusted)
                .map(|(w, d)| w * (d - dm).powi(2))
                .sum()
        }
        None => 0.0,
    }
}
