//! Reliability fusion, non-maximum suppression and top-k keypoint selection.

use crate::error::{shape_err, Result};
use crate::raster::{Raster, ReliabilityMap, StabilityMap};

pub const DEFAULT_NMS_RADIUS: usize = 4;
pub const DEFAULT_MIN_SCORE: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Pixelwise product of local reliability and global stability.
pub fn fuse_reliability(rel: &ReliabilityMap, sta: &StabilityMap) -> Result<ReliabilityMap> {
    if !rel.same_dims(sta) {
        return shape_err(format!("reliability {:?} vs stability {:?}", rel.dims(), sta.dims()));
    }
    let data = rel.data().iter().zip(sta.data()).map(|(r, s)| r * s).collect();
    Raster::new(rel.width(), rel.height(), data)
}

/// Pixels that dominate their Chebyshev neighborhood.
///
/// Equal values are resolved in favor of the smaller row-major index.
pub fn nms_mask(s: &ReliabilityMap, radius: usize) -> Raster<bool> {
    let (w, h) = s.dims();
    let r = radius as isize;
    Raster::from_fn(w, h, |x, y| {
        let v = s.get(x, y);
        let me = y * w + x;
        for yy in (y as isize - r).max(0)..=(y as isize + r).min(h as isize - 1) {
            for xx in (x as isize - r).max(0)..=(x as isize + r).min(w as isize - 1) {
                let (xx, yy) = (xx as usize, yy as usize);
                let other = yy * w + xx;
                if other == me {
                    continue;
                }
                let q = s.get(xx, yy);
                if q > v || (q == v && other < me) {
                    return false;
                }
            }
        }
        true
    })
}

/// Suppressed pixels set to zero.
pub fn nms(s: &ReliabilityMap, radius: usize) -> ReliabilityMap {
    let keep = nms_mask(s, radius);
    let data = s
        .data()
        .iter()
        .zip(keep.data())
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Raster::new(s.width(), s.height(), data).expect("same dims")
}

/// NMS survivors with score ≥ `min_score`, best first, at most `k`.
pub fn topk_keypoints(s: &ReliabilityMap, k: usize, min_score: f64, nms_radius: usize) -> Vec<Keypoint> {
    let keep = nms_mask(s, nms_radius);
    let w = s.width();
    let mut idx: Vec<usize> = (0..s.len())
        .filter(|&i| keep.data()[i] && s.data()[i] >= min_score)
        .collect();
    idx.sort_by(|&a, &b| s.data()[b].total_cmp(&s.data()[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter()
        .map(|i| Keypoint {
            x: (i % w) as f64,
            y: (i / w) as f64,
            score: s.data()[i],
        })
        .collect()
}
