//! Combined configuration and its flat `section.key = value` text form.
//!
//! Every field of [`RenderConfig`], [`TrackConfig`], [`MapConfig`] and
//! [`PipelineConfig`] has a key. Unknown keys and unparsable values are
//! errors; keys not mentioned keep their defaults. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mapper::MapConfig;
use crate::pipeline::PipelineConfig;
use crate::render::{Gather, RenderConfig};
use crate::track::TrackConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlamConfig {
    pub render: RenderConfig,
    pub track: TrackConfig,
    pub map: MapConfig,
    pub pipeline: PipelineConfig,
}

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for Gather {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "tiled" => Some(Gather::Tiled),
            "brute_force" => Some(Gather::BruteForce),
            _ => None,
        }
    }
    fn show(&self) -> String {
        match self {
            Gather::Tiled => "tiled".into(),
            Gather::BruteForce => "brute_force".into(),
        }
    }
}

trait Section {
    const PREFIX: &'static str;
    fn entries(&self) -> Vec<(&'static str, String)>;
    /// `None` when the key is unknown, `Some(false)` when the value does not parse.
    fn set(&mut self, key: &str, value: &str) -> Option<bool>;
}

macro_rules! section {
    ($ty:ty, $prefix:literal, [$($field:ident),* $(,)?]) => {
        impl Section for $ty {
            const PREFIX: &'static str = $prefix;
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), Value::show(&self.$field))),*]
            }
            fn set(&mut self, key: &str, value: &str) -> Option<bool> {
                match key {
                    $(stringify!($field) => Some(match Value::parse_value(value) {
                        Some(v) => {
                            self.$field = v;
                            true
                        }
                        None => false,
                    }),)*
                    _ => None,
                }
            }
        }
    };
}

section!(RenderConfig, "render", [
    b, alpha_cutoff, transmittance_stop, median_threshold, parallel_eps, sigma_floor,
    depth_adjust, depth_normalize, unbiased_depth, gather,
]);
section!(TrackConfig, "track", [
    iters, lr_rot, lr_trans, lr_decay, adam_beta1, adam_beta2, lambda1, accum_mask,
    lost_ratio, lost_min_loss, min_mask_fraction, lost_window,
]);
section!(MapConfig, "map", [
    iters_map, attach_accum, edge_low, edge_high, edge_growth, lambda1, lambda2,
    prune_opacity, init_opacity, normal_jump, lr_center, lr_rotation, lr_scale,
    lr_opacity, lr_color, lr_exposure, adam_beta1, adam_beta2,
]);
section!(PipelineConfig, "pipeline", [
    tau_k, tau_l, merge_opacity_reset, merge_iters, merge_lr_opacity, ba_iters,
    ba_lambda1, ba_lr_rot, ba_lr_trans, covis_overlap_min, covis_grid,
    random_opt_steps, final_refine_steps, bootstrap_track_iters, keyframes,
    local_map, random_opt, final_refine, asynchronous, seed,
]);

fn push_entries<S: Section>(s: &S, out: &mut BTreeMap<String, String>) {
    for (k, v) in s.entries() {
        out.insert(format!("{}.{}", S::PREFIX, k), v);
    }
}

impl SlamConfig {
    /// Every key with its current value.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        push_entries(&self.render, &mut out);
        push_entries(&self.track, &mut out);
        push_entries(&self.map, &mut out);
        push_entries(&self.pipeline, &mut out);
        out
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key `{key}` has no section prefix")))?;
        let res = match section {
            "render" => self.render.set(field, value),
            "track" => self.track.set(field, value),
            "map" => self.map.set(field, value),
            "pipeline" => self.pipeline.set(field, value),
            _ => None,
        };
        match res {
            Some(true) => Ok(()),
            Some(false) => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The configuration as `key = value` lines; [`SlamConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        let m = &self.map;
        let t = &self.track;
        let checks = [
            (p.tau_k > 0.0 && p.tau_k < 1.0, "pipeline.tau_k must be in (0, 1)"),
            (p.tau_l > 0.0, "pipeline.tau_l must be positive"),
            (
                0.0 < m.edge_low && m.edge_low < m.edge_high && m.edge_high < 1.0,
                "map.edge_low < map.edge_high must lie in (0, 1)",
            ),
            (t.accum_mask > 0.0 && t.accum_mask < 1.0, "track.accum_mask must be in (0, 1)"),
            (
                t.lr_rot > 0.0 && t.lr_trans > 0.0 && t.lr_decay > 0.0 && t.lost_ratio > 0.0,
                "tracking rates must be positive",
            ),
            (self.render.b > 0.0, "render.b must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}
