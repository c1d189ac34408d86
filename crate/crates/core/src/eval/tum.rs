//! TUM RGB-D sequence loader.

use std::path::Path;

use crate::error::Result;
use crate::frame::Frame;
use crate::geom::{Intrinsics, Pose};
use crate::image::Image;

use super::codec::{invalid, read_color, read_depth, read_text, write_color, write_depth};
use super::metrics::pose_from_tum;
use super::output::{sig9, stamp};
use super::synthetic::read_intrinsics;

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// Keep every `stride`-th pixel in both directions.
    pub stride: usize,
    /// Keep every `frame_step`-th associated frame.
    pub frame_step: usize,
    pub max_frames: Option<usize>,
    /// Largest timestamp gap for rgb/depth and ground-truth association (seconds).
    pub max_gap: f64,
    /// Overrides `intrinsics.txt` and the default camera.
    pub intrinsics: Option<Intrinsics>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            frame_step: 1,
            max_frames: None,
            max_gap: 0.02,
            intrinsics: None,
        }
    }
}

/// Camera used when the sequence directory has no `intrinsics.txt`.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 525.0,
        fy: 525.0,
        cx: 319.5,
        cy: 239.5,
        width: 640,
        height: 480,
    }
}

/// `(timestamp, rest-of-line)` records of a TUM list file.
fn read_list(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (t, rest) = line.split_once(char::is_whitespace).ok_or_else(|| invalid(path, format!("line {}", n + 1)))?;
        let t: f64 = t.parse().map_err(|e| invalid(path, format!("line {}: {e}", n + 1)))?;
        out.push((t, rest.trim().to_string()));
    }
    Ok(out)
}

/// Greedy nearest-timestamp matching: candidate pairs within `max_gap` are
/// taken in order of increasing gap, each entry used at most once. Returned
/// pairs are sorted by the first list's timestamp.
pub fn associate(a: &[f64], b: &[f64], max_gap: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    let mut lo = 0;
    for (i, ta) in a.iter().enumerate() {
        while lo < b.len() && b[lo] < ta - max_gap {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] <= ta + max_gap {
            cands.push(((ta - b[j]).abs(), i, j));
            j += 1;
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

fn subsample<T: Clone>(img: &Image<T>, stride: usize) -> Image<T> {
    if stride <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width / stride, img.height / stride);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(img.at(x * stride, y * stride).clone());
        }
    }
    Image { width: w, height: h, data }
}

/// Loads a TUM RGB-D sequence directory (`rgb.txt`, `depth.txt`,
/// `groundtruth.txt` and the images they list).
pub fn load_tum(dir: &Path, opts: &LoadOptions) -> Result<Vec<Frame>> {
    let rgb = read_list(&dir.join("rgb.txt"))?;
    let depth = read_list(&dir.join("depth.txt"))?;
    let gt_path = dir.join("groundtruth.txt");
    let gt: Vec<(f64, Pose)> = read_list(&gt_path)?
        .into_iter()
        .map(|(t, rest)| {
            let v: Vec<f64> = rest
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| invalid(&gt_path, e))?;
            if v.len() != 7 {
                return Err(invalid(&gt_path, "expected `t tx ty tz qx qy qz qw`"));
            }
            Ok((t, pose_from_tum(&[v[0], v[1], v[2], v[3], v[4], v[5], v[6]])))
        })
        .collect::<Result<_>>()?;

    let rgb_t: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let depth_t: Vec<f64> = depth.iter().map(|r| r.0).collect();
    let pairs = associate(&rgb_t, &depth_t, opts.max_gap);
    if pairs.is_empty() {
        return Err(invalid(dir, "no rgb/depth pairs could be associated"));
    }
    let skipped = rgb.len() - pairs.len();
    if skipped > 0 {
        log::warn!("{skipped} rgb frames without a depth match were skipped");
    }
    let gt_t: Vec<f64> = gt.iter().map(|g| g.0).collect();
    let gt_match: std::collections::BTreeMap<usize, usize> = associate(&rgb_t, &gt_t, opts.max_gap).into_iter().collect();

    let base = match opts.intrinsics {
        Some(i) => i,
        None if dir.join("intrinsics.txt").exists() => read_intrinsics(&dir.join("intrinsics.txt"))?,
        None => default_intrinsics(),
    };
    let s = opts.stride.max(1);
    let intr = Intrinsics::new(
        base.fx / s as f64,
        base.fy / s as f64,
        base.cx / s as f64,
        base.cy / s as f64,
        base.width / s,
        base.height / s,
    )?;

    let step = opts.frame_step.max(1);
    let mut frames = Vec::new();
    for &(i, j) in pairs.iter().step_by(step) {
        if opts.max_frames.is_some_and(|m| frames.len() >= m) {
            break;
        }
        let color = read_color(&dir.join(&rgb[i].1))?;
        let depth_img = read_depth(&dir.join(&depth[j].1))?;
        color.ensure_shape((base.width, base.height))?;
        depth_img.ensure_shape((base.width, base.height))?;
        frames.push(Frame {
            index: frames.len(),
            timestamp: rgb[i].0,
            color: subsample(&color, s),
            depth: subsample(&depth_img, s),
            intrinsics: intr,
            gt_pose: gt_match.get(&i).map(|&k| gt[k].1),
        });
    }
    Ok(frames)
}

/// Writes frames as a TUM-layout directory readable by [`load_tum`].
pub fn save_tum(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let (mut rgb, mut depth, mut gt) = (String::from("# color images\n"), String::from("# depth maps\n"), String::from("# timestamp tx ty tz qx qy qz qw\n"));
    for f in frames {
        let t = stamp(f.timestamp);
        let name = format!("{:.6}.png", f.timestamp);
        write_color(&dir.join("rgb").join(&name), &f.color)?;
        write_depth(&dir.join("depth").join(&name), &f.depth)?;
        rgb.push_str(&format!("{t} rgb/{name}\n"));
        depth.push_str(&format!("{t} depth/{name}\n"));
        if let Some(p) = f.gt_pose {
            let q = p.rotation.quaternion();
            let v = [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w];
            let fields: Vec<String> = v.iter().map(|x| sig9(*x)).collect();
            gt.push_str(&format!("{t} {}\n", fields.join(" ")));
        }
    }
    std::fs::write(dir.join("rgb.txt"), rgb)?;
    std::fs::write(dir.join("depth.txt"), depth)?;
    std::fs::write(dir.join("groundtruth.txt"), gt)?;
    if let Some(f) = frames.first() {
        let i = f.intrinsics;
        std::fs::write(
            dir.join("intrinsics.txt"),
            format!("{} {} {} {} {} {}\n", i.fx, i.fy, i.cx, i.cy, i.width, i.height),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::codec::quantize;
    use crate::eval::synthetic::{generate, SyntheticScene};
    use crate::Error;

    #[test]
    fn association_is_greedy_by_gap() {
        let a = [0.0, 0.03, 0.1, 0.5];
        let b = [0.01, 0.025, 0.11, 0.9];
        assert_eq!(associate(&a, &b, 0.02), vec![(0, 0), (1, 1), (2, 2)]);
        assert!(associate(&a, &[5.0], 0.02).is_empty());
    }

    #[test]
    fn depth_png_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut img = Image::filled(3, 2, 0.0);
        img.data[1] = 1.0;
        write_depth(&path, &img).unwrap();
        let raw = image::open(&path).unwrap().into_luma16();
        assert_eq!(raw.get_pixel(1, 0)[0], 5000);
        let back = read_depth(&path).unwrap();
        assert_eq!(back.data[1], 1.0);
        assert_eq!(back.data[0], 0.0);
    }

    #[test]
    fn round_trip_through_tum_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (frames, _) = generate(&SyntheticScene::room_orbit(4)).unwrap();
        let frames: Vec<Frame> = frames
            .into_iter()
            .map(|mut f| {
                f.timestamp = 1305031102.175304 + 0.033 * f.index as f64;
                f
            })
            .collect();
        save_tum(dir.path(), &frames).unwrap();
        let back = load_tum(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in frames.iter().zip(&back) {
            let q = quantize(a);
            assert_eq!(q.color, b.color);
            assert_eq!(q.depth, b.depth);
            assert_eq!(a.intrinsics, b.intrinsics);
            assert!((a.timestamp - b.timestamp).abs() < 1e-3);
            assert!(a.gt_pose.unwrap().distance_to(&b.gt_pose.unwrap()) < 1e-8);
        }
    }

    #[test]
    fn stride_scales_intrinsics() {
        let dir = tempfile::tempdir().unwrap();
        let (frames, _) = generate(&SyntheticScene::room_orbit(2)).unwrap();
        save_tum(dir.path(), &frames).unwrap();
        let opts = LoadOptions {
            stride: 2,
            max_frames: Some(1),
            ..LoadOptions::default()
        };
        let back = load_tum(dir.path(), &opts).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].shape(), (40, 30));
        assert_eq!(back[0].intrinsics.fx, frames[0].intrinsics.fx / 2.0);
        assert_eq!(back[0].depth.at(3, 4), &quantize(&frames[0]).depth.at(6, 8).clone());
    }

    #[test]
    fn missing_or_empty_lists_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_tum(dir.path(), &LoadOptions::default()), Err(Error::Dataset { .. })));
        for name in ["rgb.txt", "depth.txt", "groundtruth.txt"] {
            std::fs::write(dir.path().join(name), "# empty\n").unwrap();
        }
        assert!(matches!(load_tum(dir.path(), &LoadOptions::default()), Err(Error::Dataset { .. })));
    }
}
