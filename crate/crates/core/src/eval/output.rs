use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pose;

use super::metrics::{pose_from_tum, Trajectory};

/// Summary written as `metrics.json`; `config` echoes every configuration key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_rmse_m: Option<f64>,
    pub psnr_db: Option<f64>,
    pub depth_l1_m: Option<f64>,
    pub frames: usize,
    pub keyframes: usize,
    pub submaps: usize,
    pub surfels_final: usize,
    pub config: BTreeMap<String, String>,
}

/// Formats `x` with nine significant digits, trailing zeros trimmed.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let e = x.abs().log10().floor() as i32;
    if (-5..9).contains(&e) {
        let decimals = (8 - e).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

/// Formats a timestamp with microsecond resolution, trailing zeros trimmed.
pub fn stamp(t: f64) -> String {
    let s = format!("{t:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines.
pub fn write_trajectory(mut out: impl Write, traj: &Trajectory) -> Result<()> {
    for (t, p) in traj.stamps.iter().zip(&traj.poses) {
        let q = p.rotation.quaternion();
        let fields = [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w];
        let line: Vec<String> = fields.iter().map(|v| sig9(*v)).collect();
        writeln!(out, "{} {}", stamp(*t), line.join(" "))?;
    }
    Ok(())
}

/// Parses TUM pose lines; `#` comments and blank lines are skipped.
pub fn read_trajectory(input: impl BufRead) -> Result<Trajectory> {
    let mut stamps = Vec::new();
    let mut poses: Vec<Pose> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("pose line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::Config(format!("pose line {}: expected 8 fields, got {}", n + 1, v.len())));
        }
        stamps.push(v[0]);
        poses.push(pose_from_tum(&[v[1], v[2], v[3], v[4], v[5], v[6], v[7]]));
    }
    Trajectory::new(stamps, poses)
}
