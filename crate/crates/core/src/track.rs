//! Frame-to-model pose estimation against a surfel map.

use std::collections::VecDeque;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::adam::{AdamParams, AdamState};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geom::{rotation_matrix_vjp, Pose, SurfelMap, Vec3};
use crate::render::{render_backward_view, render_view, OutputGrad, RenderConfig, RenderOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub iters: usize,
    pub lr_rot: f64,
    pub lr_trans: f64,
    /// Final learning rate as a fraction of the initial one; decay is exponential.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda1: f64,
    pub accum_mask: f64,
    pub lost_ratio: f64,
    /// Losses below this never count as lost.
    pub lost_min_loss: f64,
    /// Frames whose masked fraction falls below this are lost.
    pub min_mask_fraction: f64,
    pub lost_window: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            iters: 40,
            lr_rot: 0.002,
            lr_trans: 0.004,
            lr_decay: 0.1,
            adam_beta1: 0.7,
            adam_beta2: 0.99,
            lambda1: 0.5,
            accum_mask: 0.9,
            lost_ratio: 5.0,
            lost_min_loss: 0.01,
            min_mask_fraction: 0.01,
            lost_window: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    pub final_loss: f64,
    pub masked_fraction: f64,
    pub lost: bool,
    /// Loss of every visited iterate, in order.
    pub losses: Vec<f64>,
}

/// Constant-velocity extrapolation `(T₁ T₂⁻¹) T₁` of the previous two poses.
pub fn init_pose(prev: &Pose, prev2: Option<&Pose>) -> Pose {
    match prev2 {
        Some(p2) => prev.compose(&p2.inverse()).compose(prev),
        None => *prev,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingLoss {
    pub value: f64,
    pub grad: OutputGrad,
    /// Pixels that passed the opacity gate and have valid depth.
    pub masked: usize,
}

/// Masked L1 depth plus `λ1`-weighted mean-channel L1 color, averaged over
/// pixels with `A > accum_mask` and valid measured depth.
pub fn tracking_loss(render: &RenderOutput, frame: &Frame, cfg: &TrackConfig) -> Result<TrackingLoss> {
    let n = render.pixel_count();
    check_shape(render, frame)?;
    let mask: Vec<usize> = (0..n)
        .filter(|&p| render.accum.data[p] > cfg.accum_mask && frame.valid_depth(p))
        .collect();
    let mut grad = OutputGrad::zeros(n);
    if mask.is_empty() {
        return Ok(TrackingLoss {
            value: 0.0,
            grad,
            masked: 0,
        });
    }
    let inv = 1.0 / mask.len() as f64;
    let mut value = 0.0;
    for &p in &mask {
        let dd = render.depth.data[p] - frame.depth.data[p];
        let dc = render.color.data[p] - frame.color.data[p];
        value += dd.abs() + cfg.lambda1 * dc.abs().sum() / 3.0;
        grad.depth[p] = inv * sign(dd);
        grad.color[p] = dc.map(sign) * (inv * cfg.lambda1 / 3.0);
    }
    Ok(TrackingLoss {
        value: value * inv,
        grad,
        masked: mask.len(),
    })
}

pub(crate) fn check_shape(render: &RenderOutput, frame: &Frame) -> Result<()> {
    let got = (render.width(), render.height());
    let expected = (frame.depth.width, frame.depth.height);
    if got != expected || frame.color.shape() != expected {
        return Err(Error::ShapeMismatch { expected, got });
    }
    Ok(())
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Iterate {
    /// Correction `delta` of this iterate.
    pose: Pose,
    loss: f64,
    masked: usize,
}

impl Iterate {
    fn better_than(&self, other: &Iterate, min_masked: usize) -> bool {
        let (a, b) = (self.masked >= min_masked, other.masked >= min_masked);
        if a != b {
            return a;
        }
        self.loss < other.loss
    }
}

/// Optimizes the camera pose (camera-to-map) of `frame` starting at `init`
/// and returns the best visited iterate. `lost` here reflects the mask only;
/// [`Tracker`] adds the loss-history test.
pub fn track(
    map: &SurfelMap,
    frame: &Frame,
    init: &Pose,
    cfg: &TrackConfig,
    render_cfg: &RenderConfig,
) -> Result<TrackResult> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    let intr = &frame.intrinsics;
    let pixels = intr.pixel_count();
    let min_masked = ((cfg.min_mask_fraction * pixels as f64).ceil() as usize).max(1);
    let adam = AdamParams {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: 1e-15,
    };
    let mut rot_state = AdamState::<4>::default();
    let mut trans_state = AdamState::<3>::default();
    // Optimize the world-to-camera correction `delta` of the map expressed in
    // the init camera frame; the pose is `init ∘ delta⁻¹`.
    let local = map.transformed(&init.inverse());
    let mut delta = Pose::identity();
    let mut best: Option<Iterate> = None;
    let mut losses = Vec::with_capacity(cfg.iters + 1);

    let mut evaluate = |delta: &Pose, keep_hits: bool, best: &mut Option<Iterate>| -> Result<(RenderOutput, TrackingLoss)> {
        let out = render_view(&local, delta, intr, render_cfg, keep_hits);
        let loss = tracking_loss(&out, frame, cfg)?;
        losses.push(loss.value);
        let it = Iterate {
            pose: *delta,
            loss: loss.value,
            masked: loss.masked,
        };
        if best.as_ref().is_none_or(|b| it.better_than(b, min_masked)) {
            *best = Some(it);
        }
        Ok((out, loss))
    };

    for k in 0..cfg.iters {
        let (out, loss) = evaluate(&delta, true, &mut best)?;
        if loss.masked == 0 {
            break;
        }
        let grads = render_backward_view(&local, &delta, intr, render_cfg, &out, &loss.grad, false);
        let gq = rotation_matrix_vjp(&delta.rotation, &grads.view_rotation);
        let gt = grads.view_translation;
        let frac = if cfg.iters > 1 { k as f64 / (cfg.iters - 1) as f64 } else { 0.0 };
        let decay = cfg.lr_decay.powf(frac);
        let dq = rot_state.step(&[gq.w, gq.i, gq.j, gq.k], &adam);
        let dt = trans_state.step(&[gt.x, gt.y, gt.z], &adam);
        let q = delta.rotation.quaternion();
        let lr_r = cfg.lr_rot * decay;
        let lr_t = cfg.lr_trans * decay;
        let raw = Quaternion::new(q.w - lr_r * dq[0], q.i - lr_r * dq[1], q.j - lr_r * dq[2], q.k - lr_r * dq[3]);
        delta = Pose::new(
            UnitQuaternion::from_quaternion(raw),
            delta.translation - lr_t * Vec3::new(dt[0], dt[1], dt[2]),
        );
        if k + 1 == cfg.iters {
            evaluate(&delta, false, &mut best)?;
        }
    }
    if best.is_none() {
        evaluate(&delta, false, &mut best)?;
    }
    let best = best.expect("at least one iterate");
    Ok(TrackResult {
        pose: init.compose(&best.pose.inverse()),
        final_loss: best.loss,
        masked_fraction: best.masked as f64 / pixels as f64,
        lost: best.masked < min_masked,
        losses,
    })
}

/// Running record of recent tracking losses for failure detection.
#[derive(Clone, Debug, Default)]
pub struct LossHistory {
    window: usize,
    losses: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            losses: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, loss: f64) {
        if self.window == 0 {
            return;
        }
        if self.losses.len() == self.window {
            self.losses.pop_front();
        }
        self.losses.push_back(loss);
    }

    pub fn median(&self) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = self.losses.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn clear(&mut self) {
        self.losses.clear();
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

/// Tracking with loss-history failure detection.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub config: TrackConfig,
    pub history: LossHistory,
}

impl Tracker {
    pub fn new(config: TrackConfig) -> Self {
        let history = LossHistory::new(config.lost_window);
        Self { config, history }
    }

    /// Tracks and marks the frame lost when its loss exceeds `lost_ratio` times
    /// the running median. Only frames that were not lost enter the history.
    pub fn track(&mut self, map: &SurfelMap, frame: &Frame, init: &Pose, render_cfg: &RenderConfig) -> Result<TrackResult> {
        self.track_iters(map, frame, init, self.config.iters, render_cfg)
    }

    /// [`Tracker::track`] with an explicit iteration budget.
    pub fn track_iters(
        &mut self,
        map: &SurfelMap,
        frame: &Frame,
        init: &Pose,
        iters: usize,
        render_cfg: &RenderConfig,
    ) -> Result<TrackResult> {
        let cfg = TrackConfig {
            iters,
            ..self.config.clone()
        };
        let mut res = track(map, frame, init, &cfg, render_cfg)?;
        if let Some(m) = self.history.median() {
            if res.final_loss > self.config.lost_min_loss && res.final_loss > self.config.lost_ratio * m {
                res.lost = true;
            }
        }
        if !res.lost {
            self.history.push(res.final_loss);
        }
        Ok(res)
    }
}
