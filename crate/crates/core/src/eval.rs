//! Extraction and pairwise matching evaluation.

use std::fmt;

use crate::detect::{topk_keypoints, Keypoint, DEFAULT_MIN_SCORE, DEFAULT_NMS_RADIUS};
use crate::error::{Error, Result};
use crate::geometry::{symmetric_transfer_error, Homography};
use crate::matching::{mnn_match, sample_descriptors, verify, DescriptorSet, MatchSet};
use crate::net::{infer, NetworkWeights};
use crate::raster::{Image, Raster};
use crate::semantics::{Category, LabelTaxonomy, SemanticMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractOptions {
    pub top_k: usize,
    pub nms_radius: usize,
    pub min_score: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            top_k: 1000,
            nms_radius: DEFAULT_NMS_RADIUS,
            min_score: DEFAULT_MIN_SCORE,
        }
    }
}

/// Edge-replicate `img` up to multiples of `m`.
fn pad_to_multiple(img: &Image, m: usize) -> Image {
    let (w, h) = img.dims();
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    Raster::from_fn(pw, ph, |x, y| img.get(x.min(w - 1), y.min(h - 1)))
}

/// Detect and describe keypoints with a trained network.
///
/// Images whose sides are not multiples of the network stride are padded by
/// edge replication; keypoints are restricted to the original extent.
pub fn extract(weights: &NetworkWeights, image: &Image, opts: &ExtractOptions) -> Result<DescriptorSet> {
    let (w, h) = image.dims();
    if w == 0 || h == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let f = weights.config.downsample;
    let padded = pad_to_multiple(image, f);
    let out = infer(weights, &padded)?;
    let score = Raster::from_fn(w, h, |x, y| out.score.get(x, y));
    let kps = topk_keypoints(&score, opts.top_k, opts.min_score, opts.nms_radius);
    let mut set = sample_descriptors(&out.descriptors, &kps, f)?;
    set.width = w;
    set.height = h;
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchOptions {
    pub ransac_iters: usize,
    pub threshold_px: f64,
    pub seed: u64,
    pub max_ratio: Option<f64>,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            ransac_iters: 1000,
            threshold_px: 3.0,
            seed: 0,
            max_ratio: None,
        }
    }
}

/// Metrics of one matched pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
    /// Undefined when verification was impossible.
    pub inliers: Option<usize>,
    pub inlier_ratio: Option<f64>,
    /// Requires a ground-truth homography.
    pub repeatability: Option<f64>,
    /// Share of keypoints in `a` per category, in [`Category::ALL`] order.
    pub category_fractions: Option<[f64; 4]>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "keypoints_a {}", self.keypoints_a)?;
        writeln!(f, "keypoints_b {}", self.keypoints_b)?;
        writeln!(f, "matches {}", self.matches)?;
        writeln!(f, "inliers {}", self.inliers.map_or("undefined".to_string(), |v| v.to_string()))?;
        writeln!(f, "inlier_ratio {}", opt(self.inlier_ratio))?;
        writeln!(f, "repeatability {}", opt(self.repeatability))?;
        if let Some(fr) = self.category_fractions {
            for (c, v) in Category::ALL.iter().zip(fr) {
                writeln!(f, "fraction_{c} {v:.6}")?;
            }
        }
        Ok(())
    }
}

/// Fraction of keypoints falling in each category of `mask`.
pub fn category_fractions(kps: &[Keypoint], mask: &SemanticMask, tax: &LabelTaxonomy) -> Result<Option<[f64; 4]>> {
    if kps.is_empty() {
        return Ok(None);
    }
    let mut counts = [0usize; 4];
    for k in kps {
        let (x, y) = (k.x.round() as usize, k.y.round() as usize);
        if x >= mask.width() || y >= mask.height() {
            return Err(Error::Index(format!("keypoint ({}, {}) outside mask", k.x, k.y)));
        }
        let id = mask.get(x, y);
        let c = tax.category(id).ok_or(Error::Label { id, x, y })?;
        counts[c.index()] += 1;
    }
    Ok(Some(counts.map(|c| c as f64 / kps.len() as f64)))
}

/// Fraction of `a` keypoints projecting into `b` that land within `radius` of a `b` keypoint.
pub fn repeatability(a: &[Keypoint], b: &[Keypoint], h: &Homography, width: usize, height: usize, radius: f64) -> Option<f64> {
    let mut visible = 0;
    let mut repeated = 0;
    for k in a {
        let Some((u, v)) = h.apply((k.x, k.y)) else { continue };
        if u < 0.0 || v < 0.0 || u > (width - 1) as f64 || v > (height - 1) as f64 {
            continue;
        }
        visible += 1;
        if b.iter().any(|q| ((q.x - u).powi(2) + (q.y - v).powi(2)).sqrt() <= radius) {
            repeated += 1;
        }
    }
    (visible > 0).then(|| repeated as f64 / visible as f64)
}

/// Match two feature sets and score the result.
///
/// With `gt`, inliers are matches whose symmetric transfer error under the
/// true homography is below the threshold; otherwise RANSAC decides.
pub fn match_eval(
    a: &DescriptorSet,
    b: &DescriptorSet,
    gt: Option<&Homography>,
    opts: &MatchOptions,
) -> Result<(MatchSet, Option<Homography>, EvalReport)> {
    let mut m = mnn_match(a, b, opts.max_ratio)?;
    let model = match gt {
        Some(h) => {
            let h_inv = h.inverse()?;
            let mask = m
                .pairs
                .iter()
                .map(|p| {
                    let (ka, kb) = (a.keypoints[p.a], b.keypoints[p.b]);
                    symmetric_transfer_error(h, &h_inv, (ka.x, ka.y), (kb.x, kb.y)) < opts.threshold_px
                })
                .collect();
            m.inliers = Some(mask);
            Some(*h)
        }
        None => match verify(&mut m, a, b, opts.ransac_iters, opts.threshold_px, opts.seed) {
            Ok(h) => Some(h),
            Err(Error::InsufficientMatches { .. } | Error::DegenerateGeometry(_)) => None,
            Err(e) => return Err(e),
        },
    };
    let inliers = m.inlier_count();
    let inlier_ratio = match inliers {
        Some(i) if !m.is_empty() => Some(i as f64 / m.len() as f64),
        _ => None,
    };
    let rep = gt.and_then(|h| repeatability(&a.keypoints, &b.keypoints, h, b.width, b.height, 3.0));
    let report = EvalReport {
        keypoints_a: a.len(),
        keypoints_b: b.len(),
        matches: m.len(),
        inliers,
        inlier_ratio,
        repeatability: rep,
        category_fractions: None,
    };
    Ok((m, model, report))
}

/// Aggregate of several pair reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub pairs: usize,
    pub mean_matches: f64,
    pub mean_inlier_ratio: Option<f64>,
    pub mean_repeatability: Option<f64>,
    pub mean_category_fractions: Option<[f64; 4]>,
}

pub fn summarize(reports: &[EvalReport]) -> EvalSummary {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let fr: Vec<[f64; 4]> = reports.iter().filter_map(|r| r.category_fractions).collect();
    let mean_fr = (!fr.is_empty()).then(|| {
        let mut acc = [0.0; 4];
        for f in &fr {
            acc.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
        acc.map(|v| v / fr.len() as f64)
    });
    EvalSummary {
        pairs: reports.len(),
        mean_matches: mean(reports.iter().map(|r| r.matches as f64).collect()).unwrap_or(0.0),
        mean_inlier_ratio: mean(reports.iter().filter_map(|r| r.inlier_ratio).collect()),
        mean_repeatability: mean(reports.iter().filter_map(|r| r.repeatability).collect()),
        mean_category_fractions: mean_fr,
    }
}
