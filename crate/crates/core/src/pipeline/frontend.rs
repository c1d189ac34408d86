use std::sync::Arc;
use std::time::Instant;

use crate::config::SlamConfig;
use crate::error::Result;
use crate::frame::Frame;
use crate::geom::{Pose, SurfelMap};
use crate::mapper::{attach_surfels, prune_with, step_on_view, ExposureTable, MapOptimizer, MapView};
use crate::render::render;
use crate::track::{init_pose, TrackResult, Tracker};

use super::{frustum_overlap, new_area_fraction, scene_far, FrameRecord, Handoff, Submap};

struct LocalMap {
    id: usize,
    /// RKF world pose as estimated by the front-end.
    rkf: Pose,
    rkf_from_previous: Pose,
    map: SurfelMap,
    keyframes: Vec<(Frame, Pose)>,
    opt: MapOptimizer,
    exposures: ExposureTable,
}

/// A closed local map kept for lost-frame assistance.
struct Frozen {
    rkf: Pose,
    map: Arc<SurfelMap>,
}

/// Tracking, keyframe selection and local mapping.
pub struct FrontEnd {
    cfg: SlamConfig,
    tracker: Tracker,
    local: Option<LocalMap>,
    frozen: Vec<Frozen>,
    records: Vec<FrameRecord>,
    /// Front-end world pose estimate of every processed frame.
    world: Vec<Pose>,
    /// Frames tracked since the last reset; a velocity prior needs two.
    since_reset: usize,
}

impl FrontEnd {
    pub fn new(cfg: SlamConfig) -> Self {
        Self {
            tracker: Tracker::new(cfg.track.clone()),
            cfg,
            local: None,
            frozen: Vec::new(),
            records: Vec::new(),
            world: Vec::new(),
            since_reset: 0,
        }
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FrameRecord> {
        self.records
    }

    /// Surfels in the open local map.
    pub fn local_len(&self) -> usize {
        self.local.as_ref().map_or(0, |l| l.map.len())
    }

    /// Front-end world pose estimates.
    pub fn poses(&self) -> &[Pose] {
        &self.world
    }

    fn budget(&self, frame: &Frame) -> f64 {
        if self.cfg.pipeline.local_map {
            self.cfg.pipeline.tau_l * frame.intrinsics.pixel_count() as f64
        } else {
            f64::INFINITY
        }
    }

    fn open(&mut self, frame: Frame, world: Pose, previous_rkf: Option<Pose>) -> Result<()> {
        let id = self.frozen.len();
        let seed = self.cfg.pipeline.seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut local = LocalMap {
            id,
            rkf: world,
            rkf_from_previous: previous_rkf.map_or(world, |p| p.inverse().compose(&world)),
            map: SurfelMap::new(),
            keyframes: Vec::new(),
            opt: MapOptimizer::new(seed),
            exposures: ExposureTable::new(),
        };
        local.opt.fix_exposure(frame.index);
        let empty = render(&local.map, &Pose::identity(), &frame.intrinsics, &self.cfg.render);
        attach_surfels(&frame, &Pose::identity(), &empty, &mut local.map, &self.cfg.map)?;
        local.keyframes.push((frame, Pose::identity()));
        map_local(&mut local, &self.cfg)?;
        self.local = Some(local);
        Ok(())
    }

    /// Closes the open local map.
    pub fn close(&mut self) -> Result<Option<Handoff>> {
        let Some(local) = self.local.take() else {
            return Ok(None);
        };
        let map = Arc::new(local.map);
        self.frozen.push(Frozen {
            rkf: local.rkf,
            map: Arc::clone(&map),
        });
        Ok(Some(Handoff {
            submap: Submap {
                id: local.id,
                rkf_pose: local.rkf,
                frames: local.keyframes,
                frozen: true,
            },
            rkf_from_previous: local.rkf_from_previous,
            map: Arc::try_unwrap(map).unwrap_or_else(|m| (*m).clone()),
            exposures: local.exposures,
        }))
    }

    fn record(&mut self, frame: &Frame, world: Pose, relative: Pose, keyframe: bool, res: Option<&TrackResult>, secs: f64, local_surfels: usize) {
        let submap = self.local.as_ref().map_or(0, |l| l.id);
        self.records.push(FrameRecord {
            index: frame.index,
            timestamp: frame.timestamp,
            submap,
            relative,
            keyframe,
            lost: res.is_some_and(|r| r.lost),
            track_loss: res.map_or(0.0, |r| r.final_loss),
            track_seconds: secs,
            local_surfels,
        });
        self.world.push(world);
    }

    /// Tracks and maps one frame. Returns a hand-off when a local map closed.
    pub fn process_frame(&mut self, frame: Frame) -> Result<Option<Handoff>> {
        let Some(local) = self.local.as_ref() else {
            let pose = Pose::identity();
            self.open(frame.clone(), pose, None)?;
            self.record(&frame, pose, Pose::identity(), true, None, 0.0, 0);
            self.since_reset = 1;
            return Ok(None);
        };

        let n = self.world.len();
        let prior = self.since_reset >= 2;
        let init_world = if prior {
            init_pose(&self.world[n - 1], Some(&self.world[n - 2]))
        } else {
            self.world[n - 1]
        };
        let iters = if prior {
            self.cfg.track.iters
        } else {
            self.cfg.pipeline.bootstrap_track_iters
        };
        let rkf_inv = local.rkf.inverse();
        let local_surfels = local.map.len();
        let start = Instant::now();
        let res = self
            .tracker
            .track_iters(&local.map, &frame, &rkf_inv.compose(&init_world), iters, &self.cfg.render)?;
        let secs = start.elapsed().as_secs_f64();
        let mut world = local.rkf.compose(&res.pose);

        if res.lost {
            log::warn!("frame {} lost (loss {:.4}, mask {:.3})", frame.index, res.final_loss, res.masked_fraction);
            if let Some(assisted) = self.assist(&frame, &init_world)? {
                world = assisted;
            }
            let handoff = self.close()?;
            let previous = self.frozen.last().map(|f| f.rkf);
            self.tracker.history.clear();
            self.open(frame.clone(), world, previous)?;
            self.record(&frame, world, Pose::identity(), true, Some(&res), secs, local_surfels);
            self.since_reset = 1;
            return Ok(handoff);
        }
        self.since_reset += 1;

        let budget = self.budget(&frame);
        let local = self.local.as_mut().expect("open local map");
        let relative = res.pose;
        let out = render(&local.map, &relative, &frame.intrinsics, &self.cfg.render);
        let keyframe = !self.cfg.pipeline.keyframes
            || new_area_fraction(&out, &frame, self.cfg.map.attach_accum) > self.cfg.pipeline.tau_k;
        if !keyframe {
            self.record(&frame, world, relative, false, Some(&res), secs, local_surfels);
            return Ok(None);
        }
        attach_surfels(&frame, &relative, &out, &mut local.map, &self.cfg.map)?;
        local.keyframes.push((frame.clone(), relative));
        map_local(local, &self.cfg)?;

        if (local.map.len() as f64) > budget {
            let handoff = self.close()?;
            let previous = self.frozen.last().map(|f| f.rkf);
            self.open(frame.clone(), world, previous)?;
            self.record(&frame, world, Pose::identity(), true, Some(&res), secs, local_surfels);
            return Ok(handoff);
        }
        self.record(&frame, world, relative, true, Some(&res), secs, local_surfels);
        Ok(None)
    }

    /// Re-tracks a lost frame against the open local map together with every
    /// frozen local map whose RKF frustum overlaps the predicted pose.
    fn assist(&mut self, frame: &Frame, init_world: &Pose) -> Result<Option<Pose>> {
        let far = scene_far([frame]);
        let intr = &frame.intrinsics;
        let mut union = SurfelMap::new();
        if let Some(l) = &self.local {
            union.extend(l.map.transformed(&l.rkf).surfels);
        }
        for f in &self.frozen {
            let overlap = frustum_overlap(init_world, &f.rkf, intr, far, self.cfg.pipeline.covis_grid);
            if overlap > self.cfg.pipeline.covis_overlap_min {
                union.extend(f.map.transformed(&f.rkf).surfels);
            }
        }
        if union.is_empty() {
            return Ok(None);
        }
        let cfg = crate::track::TrackConfig {
            iters: self.cfg.pipeline.bootstrap_track_iters,
            ..self.cfg.track.clone()
        };
        let res = crate::track::track(&union, frame, init_world, &cfg, &self.cfg.render)?;
        Ok((!res.lost).then_some(res.pose))
    }
}

/// `iters_map` mapping steps on the local map. Even steps use the newest
/// keyframe, odd steps a uniformly drawn one.
fn map_local(local: &mut LocalMap, cfg: &SlamConfig) -> Result<()> {
    let LocalMap {
        map,
        keyframes,
        opt,
        exposures,
        ..
    } = local;
    if map.is_empty() || keyframes.is_empty() {
        return Ok(());
    }
    let newest = keyframes.len() - 1;
    for k in 0..cfg.map.iters_map {
        let pick = if k % 2 == 0 {
            newest
        } else {
            use rand::Rng;
            opt.rng.random_range(0..keyframes.len())
        };
        let (frame, pose) = &keyframes[pick];
        let view = MapView { frame, pose: *pose };
        step_on_view(map, &view, exposures, opt, &cfg.map, &cfg.render)?;
    }
    prune_with(map, opt, &cfg.map);
    Ok(())
}
