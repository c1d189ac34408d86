use std::collections::BTreeMap;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamParams, AdamState};
use crate::config::SlamConfig;
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geom::{Pose, SurfelMap, Vec3};
use crate::mapper::{photometric_loss, prune_with, step_on_w2c, ExposureTable, MapConfig, MapOptimizer};
use crate::render::{render_backward_view, render_view};

use super::{frustum_overlap, scene_far, FrameRecord, GlobalState, Handoff, Submap};

/// Submap database and global map.
#[derive(Clone)]
pub struct Backend {
    pub cfg: SlamConfig,
    pub global: SurfelMap,
    pub submaps: Vec<Submap>,
    pub exposures: ExposureTable,
    opt: MapOptimizer,
    rng: ChaCha8Rng,
}

impl Backend {
    pub fn new(cfg: SlamConfig) -> Self {
        let seed = cfg.pipeline.seed;
        Self {
            cfg,
            global: SurfelMap::new(),
            submaps: Vec::new(),
            exposures: ExposureTable::new(),
            opt: MapOptimizer::new(seed ^ 0x5EED_BACC),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xBA11_AD05),
        }
    }

    /// Merge, bundle adjustment over the covisible set and random optimization.
    pub fn integrate(&mut self, handoff: Handoff) -> Result<()> {
        let id = self.merge_local_map(handoff)?;
        let covis = self.covisible(id);
        self.bundle_adjust(&covis, self.cfg.pipeline.ba_iters)?;
        if self.cfg.pipeline.random_opt {
            self.random_optimization(self.cfg.pipeline.random_opt_steps)?;
        }
        Ok(())
    }

    /// Adds a closed local map, runs joint mapping over the covisible
    /// submaps and prunes. Returns the new submap's index.
    pub fn merge_local_map(&mut self, handoff: Handoff) -> Result<usize> {
        let id = self.insert(handoff);
        let covis = self.covisible(id);
        let merge_cfg = MapConfig {
            lr_opacity: self.cfg.pipeline.merge_lr_opacity,
            ..self.cfg.map.clone()
        };
        self.map_steps(&covis, self.cfg.pipeline.merge_iters, &merge_cfg)?;
        prune_with(&mut self.global, &mut self.opt, &self.cfg.map);
        Ok(id)
    }

    /// Places the RKF after the previous one, resets the incoming surfels'
    /// opacity and appends them to the global map and the database.
    pub fn insert(&mut self, handoff: Handoff) -> usize {
        let Handoff {
            mut submap,
            rkf_from_previous,
            map,
            exposures,
        } = handoff;
        if let Some(prev) = self.submaps.last() {
            submap.rkf_pose = prev.rkf_pose.compose(&rkf_from_previous);
        }
        submap.frozen = true;
        if let Some((rkf, _)) = submap.frames.first() {
            self.opt.fix_exposure(rkf.index);
        }
        let mut incoming = map.transformed(&submap.rkf_pose);
        for s in &mut incoming.surfels {
            s.opacity = self.cfg.pipeline.merge_opacity_reset;
            s.clamp();
        }
        log::debug!("merging submap {} with {} surfels", submap.id, incoming.len());
        self.global.extend(incoming.surfels);
        self.exposures.extend(exposures);
        let id = self.submaps.len();
        self.submaps.push(submap);
        id
    }

    /// Submaps whose RKF frustum overlaps submap `query`'s; always contains `query`.
    pub fn covisible(&self, query: usize) -> Vec<usize> {
        let q = &self.submaps[query];
        let Some(intr) = q.intrinsics() else {
            return vec![query];
        };
        let far = scene_far(q.frames.iter().map(|(f, _)| f));
        (0..self.submaps.len())
            .filter(|&j| {
                j == query
                    || frustum_overlap(&q.rkf_pose, &self.submaps[j].rkf_pose, intr, far, self.cfg.pipeline.covis_grid)
                        > self.cfg.pipeline.covis_overlap_min
            })
            .collect()
    }

    fn views(&self, set: &[usize]) -> Vec<(usize, usize)> {
        set.iter()
            .flat_map(|&j| (0..self.submaps[j].frames.len()).map(move |k| (j, k)))
            .collect()
    }

    /// Mapping steps on frames drawn uniformly from the given submaps.
    fn map_steps(&mut self, set: &[usize], steps: usize, cfg: &MapConfig) -> Result<()> {
        let views = self.views(set);
        if views.is_empty() || self.global.is_empty() {
            return Ok(());
        }
        for _ in 0..steps {
            let (j, k) = views[self.opt.rng.random_range(0..views.len())];
            let sub = &self.submaps[j];
            let frame = &sub.frames[k].0;
            step_on_w2c(&mut self.global, frame, &sub.view(k), &mut self.exposures, &mut self.opt, cfg, &self.cfg.render)?;
        }
        Ok(())
    }

    /// Joint refinement of the RKF poses of `set` and the global map. Frames
    /// stay rigid relative to their RKF; submap 0 fixes the gauge.
    pub fn bundle_adjust(&mut self, set: &[usize], iters: usize) -> Result<()> {
        let views = self.views(set);
        if iters == 0 || views.is_empty() || self.global.is_empty() {
            return Ok(());
        }
        let p = &self.cfg.pipeline;
        let adam = AdamParams {
            beta1: self.cfg.track.adam_beta1,
            beta2: self.cfg.track.adam_beta2,
            eps: 1e-15,
        };
        // Per submap: correction `delta` with world-to-camera `rel⁻¹ ∘ delta ∘ rkf⁻¹`.
        let mut deltas: BTreeMap<usize, (Pose, AdamState<4>, AdamState<3>)> = BTreeMap::new();
        for k in 0..iters {
            let (j, f) = views[self.rng.random_range(0..views.len())];
            let sub = &self.submaps[j];
            let (frame, rel) = &sub.frames[f];
            let left = rel.inverse();
            let right = sub.rkf_pose.inverse();
            let entry = deltas.entry(j).or_insert((Pose::identity(), AdamState::default(), AdamState::default()));
            let view = sub.view_with(f, &entry.0);
            let intr = &frame.intrinsics;
            let out = render_view(&self.global, &view, intr, &self.cfg.render, true);
            let exposure = self.exposures.entry(frame.index).or_default();
            let loss = photometric_loss(&out, frame, exposure, p.ba_lambda1)?;
            let grads = render_backward_view(&self.global, &view, intr, &self.cfg.render, &out, &loss.grad, true);
            self.opt.apply(&mut self.global, &grads.surfels, &self.cfg.map);
            self.opt.apply_exposure(frame.index, exposure, loss.exposure_grad, &self.cfg.map);
            if j == 0 {
                continue;
            }
            let (gq, gt) = grads.sandwiched(&left, &entry.0, &right);
            let decay = self.cfg.track.lr_decay.powf(k as f64 / (iters.max(2) - 1) as f64);
            let dq = entry.1.step(&[gq.w, gq.i, gq.j, gq.k], &adam);
            let dt = entry.2.step(&[gt.x, gt.y, gt.z], &adam);
            let q = entry.0.rotation.quaternion();
            let (lr_r, lr_t) = (p.ba_lr_rot * decay, p.ba_lr_trans * decay);
            entry.0 = Pose::new(
                UnitQuaternion::from_quaternion(Quaternion::new(
                    q.w - lr_r * dq[0],
                    q.i - lr_r * dq[1],
                    q.j - lr_r * dq[2],
                    q.k - lr_r * dq[3],
                )),
                entry.0.translation - lr_t * Vec3::new(dt[0], dt[1], dt[2]),
            );
        }
        for (j, (delta, _, _)) in deltas {
            if j != 0 {
                let sub = &mut self.submaps[j];
                sub.rkf_pose = sub.rkf_pose.compose(&delta.inverse()).renormalized();
            }
        }
        Ok(())
    }

    /// Mapping steps on frames drawn uniformly from the whole database.
    pub fn random_optimization(&mut self, steps: usize) -> Result<()> {
        let all: Vec<usize> = (0..self.submaps.len()).collect();
        let cfg = self.cfg.map.clone();
        self.map_steps(&all, steps, &cfg)
    }

    /// Random optimization for the configured budget, then a global prune.
    pub fn final_refinement(&mut self) -> Result<()> {
        if !self.cfg.pipeline.final_refine {
            return Ok(());
        }
        self.random_optimization(self.cfg.pipeline.final_refine_steps)?;
        let removed = prune_with(&mut self.global, &mut self.opt, &self.cfg.map);
        log::debug!("final refinement pruned {removed} surfels");
        Ok(())
    }

    /// Global state with the trajectory recomposed from `records`.
    pub fn into_state(self, records: Vec<FrameRecord>) -> Result<GlobalState> {
        let trajectory = self.trajectory(&records)?;
        Ok(GlobalState {
            map: self.global,
            submaps: self.submaps,
            exposures: self.exposures,
            records,
            trajectory,
        })
    }

    /// World pose of every record: its submap's RKF pose composed with the
    /// relative pose.
    pub fn trajectory(&self, records: &[FrameRecord]) -> Result<Trajectory> {
        let mut stamps = Vec::with_capacity(records.len());
        let mut poses = Vec::with_capacity(records.len());
        for r in records {
            let sub = self
                .submaps
                .get(r.submap)
                .ok_or_else(|| Error::Config(format!("frame {} refers to unknown submap {}", r.index, r.submap)))?;
            stamps.push(r.timestamp);
            poses.push(sub.rkf_pose.compose(&r.relative));
        }
        Trajectory::new(stamps, poses)
    }
}
