//! The SLAM system: a front-end that tracks and maps against a bounded local
//! map, and a back-end that merges finished local maps into a global map,
//! bundle-adjusts reference-keyframe poses and keeps refining the map.
//!
//! Frames are tracked relative to the reference keyframe (RKF) of the local
//! map they belong to. When the local map outgrows its budget, or tracking is
//! lost, it is frozen into a [`Submap`] and handed to the back-end. The
//! hand-off carries the new RKF pose relative to the previous one, so pose
//! corrections made by the back-end propagate to later submaps and the
//! front-end never has to read back-end state. Running the back-end inline or
//! on its own thread therefore gives identical results.

mod backend;
mod frontend;

use std::sync::mpsc;
use std::thread::JoinHandle;

use nalgebra::Vector2;

use crate::config::SlamConfig;
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::frame::Frame;
use crate::geom::{Intrinsics, Pose, SurfelMap};
use crate::mapper::ExposureTable;
use crate::render::RenderOutput;

pub use backend::Backend;
pub use frontend::FrontEnd;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// A frame becomes a keyframe when its new-area fraction exceeds this.
    pub tau_k: f64,
    /// Local-map surfel budget as a multiple of the pixel count.
    pub tau_l: f64,
    pub merge_opacity_reset: f64,
    /// Joint mapping iterations over covisible submaps at each merge.
    pub merge_iters: usize,
    /// Opacity learning rate during merge mapping, so reset surfels can regrow.
    pub merge_lr_opacity: f64,
    pub ba_iters: usize,
    pub ba_lambda1: f64,
    pub ba_lr_rot: f64,
    pub ba_lr_trans: f64,
    pub covis_overlap_min: f64,
    /// Far-plane samples per image side for frustum overlap.
    pub covis_grid: usize,
    /// Random optimization iterations after each merge.
    pub random_opt_steps: usize,
    pub final_refine_steps: usize,
    /// Tracking iterations when no motion prior is available.
    pub bootstrap_track_iters: usize,
    /// When false every frame is a keyframe.
    pub keyframes: bool,
    /// When false the local map is never rolled over and tracking runs
    /// against the whole map.
    pub local_map: bool,
    pub random_opt: bool,
    pub final_refine: bool,
    /// Runs the back-end on its own thread.
    pub asynchronous: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_k: 0.01,
            tau_l: 1.5,
            merge_opacity_reset: 0.01,
            merge_iters: 100,
            merge_lr_opacity: 0.25,
            ba_iters: 40,
            ba_lambda1: 0.5,
            ba_lr_rot: 2e-4,
            ba_lr_trans: 5e-4,
            covis_overlap_min: 0.3,
            covis_grid: 8,
            random_opt_steps: 20,
            final_refine_steps: 300,
            bootstrap_track_iters: 100,
            keyframes: true,
            local_map: true,
            random_opt: true,
            final_refine: true,
            asynchronous: false,
            seed: 0,
        }
    }
}

/// A frozen local map's frames, stored in the back-end database.
#[derive(Clone, Debug)]
pub struct Submap {
    pub id: usize,
    /// World pose of the reference keyframe.
    pub rkf_pose: Pose,
    /// Keyframes with their poses relative to the RKF; the first is the RKF.
    pub frames: Vec<(Frame, Pose)>,
    pub frozen: bool,
}

impl Submap {
    pub fn intrinsics(&self) -> Option<&Intrinsics> {
        self.frames.first().map(|(f, _)| &f.intrinsics)
    }

    /// World pose of member frame `k`.
    pub fn world_pose(&self, k: usize) -> Pose {
        self.rkf_pose.compose(&self.frames[k].1)
    }

    /// World-to-camera transform of member frame `k` with the RKF pose
    /// corrected by `delta`, as `rel⁻¹ ∘ delta ∘ rkf⁻¹`.
    pub fn view_with(&self, k: usize, delta: &Pose) -> Pose {
        self.frames[k].1.inverse().compose(delta).compose(&self.rkf_pose.inverse())
    }

    /// World-to-camera transform of member frame `k`.
    pub fn view(&self, k: usize) -> Pose {
        self.view_with(k, &Pose::identity())
    }
}

/// Everything the front-end hands to the back-end when a local map closes.
#[derive(Clone, Debug)]
pub struct Handoff {
    pub submap: Submap,
    /// RKF pose relative to the previous submap's RKF (ignored for the first).
    pub rkf_from_previous: Pose,
    /// Surfels in the RKF frame.
    pub map: SurfelMap,
    pub exposures: ExposureTable,
}

/// Per-frame front-end outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub submap: usize,
    /// Pose relative to the submap's RKF.
    pub relative: Pose,
    pub keyframe: bool,
    pub lost: bool,
    pub track_loss: f64,
    /// Wall-clock tracking time; excluded from every deterministic output.
    pub track_seconds: f64,
    /// Local-map size when tracking started.
    pub local_surfels: usize,
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct GlobalState {
    pub map: SurfelMap,
    pub submaps: Vec<Submap>,
    pub exposures: ExposureTable,
    pub records: Vec<FrameRecord>,
    /// World pose of every processed frame.
    pub trajectory: Trajectory,
}

impl GlobalState {
    pub fn keyframes(&self) -> usize {
        self.records.iter().filter(|r| r.keyframe).count()
    }
}

/// Fraction of pixels the mapper would attach at: valid measured depth and
/// accumulated opacity below `attach_accum`.
pub fn new_area_fraction(render: &RenderOutput, frame: &Frame, attach_accum: f64) -> f64 {
    let n = render.pixel_count();
    if n == 0 {
        return 0.0;
    }
    let new = (0..n)
        .filter(|&p| frame.valid_depth(p) && render.accum.data[p] < attach_accum)
        .count();
    new as f64 / n as f64
}

/// Mean of the two directed fractions of far-plane samples of one camera
/// that project inside the other camera's image in front of it.
pub fn frustum_overlap(a: &Pose, b: &Pose, intr: &Intrinsics, far: f64, grid: usize) -> f64 {
    let directed = |from: &Pose, to: &Pose| {
        let to_inv = to.inverse();
        let g = grid.max(1);
        let mut seen = 0;
        for iy in 0..g {
            for ix in 0..g {
                let u = (ix as f64 + 0.5) / g as f64 * intr.width as f64 - 0.5;
                let v = (iy as f64 + 0.5) / g as f64 * intr.height as f64 - 0.5;
                let p = from.transform_point(&(intr.ray_z1(u, v) * far));
                let q = to_inv.transform_point(&p);
                if intr.project(&q).is_some_and(|px: Vector2<f64>| intr.contains(&px)) {
                    seen += 1;
                }
            }
        }
        seen as f64 / (g * g) as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

/// Far-plane distance used for covisibility: the largest measured depth of
/// the given frames, or 3 m without measurements.
pub(crate) fn scene_far<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> f64 {
    let far = frames
        .into_iter()
        .flat_map(|f| f.depth.data.iter().copied())
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max);
    if far > 0.0 {
        far
    } else {
        3.0
    }
}

enum BackendHandle {
    Inline(Box<Backend>),
    Thread {
        tx: mpsc::Sender<Handoff>,
        join: JoinHandle<Result<Backend>>,
    },
}

/// Front-end plus back-end, fed one frame at a time.
pub struct Slam {
    front: FrontEnd,
    back: BackendHandle,
}

impl Slam {
    pub fn new(cfg: SlamConfig) -> Result<Self> {
        cfg.validate()?;
        let backend = Backend::new(cfg.clone());
        let back = if cfg.pipeline.asynchronous {
            let (tx, rx) = mpsc::channel::<Handoff>();
            let join = std::thread::spawn(move || {
                let mut backend = backend;
                for h in rx {
                    backend.integrate(h)?;
                }
                Ok(backend)
            });
            BackendHandle::Thread { tx, join }
        } else {
            BackendHandle::Inline(Box::new(backend))
        };
        Ok(Self {
            front: FrontEnd::new(cfg),
            back,
        })
    }

    pub fn front_end(&self) -> &FrontEnd {
        &self.front
    }

    /// The back-end when it runs inline.
    pub fn back_end(&self) -> Option<&Backend> {
        match &self.back {
            BackendHandle::Inline(b) => Some(b),
            BackendHandle::Thread { .. } => None,
        }
    }

    fn send(&mut self, handoff: Handoff) -> Result<()> {
        match &mut self.back {
            BackendHandle::Inline(b) => b.integrate(handoff),
            BackendHandle::Thread { tx, .. } => tx
                .send(handoff)
                .map_err(|_| Error::Config("back-end thread stopped".into())),
        }
    }

    pub fn process_frame(&mut self, frame: Frame) -> Result<&FrameRecord> {
        let handoff = self.front.process_frame(frame)?;
        if let Some(h) = handoff {
            self.send(h)?;
        }
        Ok(self.front.records().last().expect("record pushed"))
    }

    /// Hands off the open local map, runs final refinement and returns the
    /// global state with the recomposed trajectory.
    pub fn finish(self) -> Result<GlobalState> {
        let (mut backend, records) = self.finish_unrefined()?;
        backend.final_refinement()?;
        backend.into_state(records)
    }

    /// Hands off the open local map and returns the back-end before final
    /// refinement together with the front-end records.
    pub fn finish_unrefined(mut self) -> Result<(Backend, Vec<FrameRecord>)> {
        if let Some(h) = self.front.close()? {
            self.send(h)?;
        }
        let backend = match self.back {
            BackendHandle::Inline(b) => *b,
            BackendHandle::Thread { tx, join } => {
                drop(tx);
                join.join()
                    .map_err(|_| Error::Config("back-end thread panicked".into()))??
            }
        };
        Ok((backend, self.front.into_records()))
    }
}

/// Runs the whole sequence.
pub fn run(frames: impl IntoIterator<Item = Frame>, cfg: &SlamConfig) -> Result<GlobalState> {
    let mut slam = Slam::new(cfg.clone())?;
    let mut any = false;
    for f in frames {
        slam.process_frame(f)?;
        any = true;
    }
    if !any {
        return Err(Error::NoFrames);
    }
    slam.finish()
}
