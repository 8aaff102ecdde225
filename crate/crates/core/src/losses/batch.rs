use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::ReliabilityMap;
use crate::semantics::SemanticMask;
use crate::tensor::{Graph, Var};

/// Descriptors sampled from an image pair together with their semantic labels.
///
/// Rows `0..n` come from the first image and rows `n..2n` from the second;
/// row `i` and row `positive[i]` observe the same scene point.
pub struct LabeledDescriptorBatch {
    /// `[rows, D]`, L2-normalized.
    pub descriptors: Var,
    pub labels: Vec<u8>,
    /// Predicted reliability at each sample, detached from the graph.
    pub reliabilities: Vec<f64>,
    pub image_id: Vec<u8>,
    /// Pixel coordinates in the sample's own image.
    pub positions: Vec<(f64, f64)>,
    pub positive: Vec<Option<usize>>,
}

impl LabeledDescriptorBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen = [false; 256];
        self.labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

/// Regular grid of pixel centers with the given stride, offset by half a stride.
pub fn keypoint_grid(width: usize, height: usize, stride: usize) -> Vec<(f64, f64)> {
    let off = stride / 2;
    let mut pts = Vec::new();
    let mut y = off;
    while y < height {
        let mut x = off;
        while x < width {
            pts.push((x as f64, y as f64));
            x += stride;
        }
        y += stride;
    }
    pts
}

/// Outputs of one forward pass on each side of a pair.
pub struct PairSide<'a> {
    /// `[D, h, w]` descriptor map.
    pub descriptors: Var,
    pub score: &'a ReliabilityMap,
    pub mask: &'a SemanticMask,
}

fn label_at(mask: &SemanticMask, x: f64, y: f64) -> u8 {
    let xi = (x.round() as isize).clamp(0, mask.width() as isize - 1);
    let yi = (y.round() as isize).clamp(0, mask.height() as isize - 1);
    mask.get_clamped(xi, yi)
}

fn score_at(score: &ReliabilityMap, x: f64, y: f64) -> f64 {
    score
        .sample_bilinear(x, y)
        .unwrap_or_else(|| score.get_clamped(x.round() as isize, y.round() as isize))
        .clamp(0.0, 1.0)
}

/// Sample query descriptors on `grid` in image A and their positives at the
/// corresponding locations in image B.
///
/// Samples whose correspondence leaves image B, or whose label changes
/// across the pair, are dropped.
pub fn build_intra_batches(
    g: &mut Graph,
    a: &PairSide<'_>,
    b: &PairSide<'_>,
    correspond: impl Fn(f64, f64) -> Option<(f64, f64)>,
    grid: &[(f64, f64)],
    downsample: usize,
) -> Result<LabeledDescriptorBatch> {
    let mut pts_a = Vec::new();
    let mut pts_b = Vec::new();
    let mut labels = Vec::new();
    for &(x, y) in grid {
        let Some((u, v)) = correspond(x, y) else { continue };
        let la = label_at(a.mask, x, y);
        if label_at(b.mask, u, v) != la {
            continue;
        }
        pts_a.push((x, y));
        pts_b.push((u, v));
        labels.push(la);
    }
    let n = pts_a.len();
    if n == 0 {
        return Err(Error::Domain("no grid point has a valid correspondence".into()));
    }
    let f = downsample as f64;
    let to_map = |p: &[(f64, f64)]| -> Vec<(f64, f64)> { p.iter().map(|&(x, y)| (x / f, y / f)).collect() };
    let raw_a = g.sample_bilinear(a.descriptors, &to_map(&pts_a))?;
    let raw_b = g.sample_bilinear(b.descriptors, &to_map(&pts_b))?;
    let stacked = g.concat_rows(&[raw_a, raw_b])?;
    let descriptors = g.normalize_rows(stacked)?;

    let mut reliabilities: Vec<f64> = pts_a.iter().map(|&(x, y)| score_at(a.score, x, y)).collect();
    reliabilities.extend(pts_b.iter().map(|&(x, y)| score_at(b.score, x, y)));
    let mut all_labels = labels.clone();
    all_labels.extend_from_slice(&labels);
    let image_id = std::iter::repeat(0u8).take(n).chain(std::iter::repeat(1u8).take(n)).collect();
    let positive = (0..n).map(|i| Some(n + i)).chain((0..n).map(Some)).collect();
    let mut positions = pts_a;
    positions.extend(pts_b);
    Ok(LabeledDescriptorBatch {
        descriptors,
        labels: all_labels,
        reliabilities,
        image_id,
        positions,
        positive,
    })
}

/// `(anchor, positive, negative)` row indices.
pub type Triplet = (usize, usize, usize);

/// Uniformly sample triplets with a same-label positive and a different-label negative.
pub fn sample_triplets(labels: &[u8], count: usize, rng: &mut impl Rng) -> Result<Vec<Triplet>> {
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &l) in labels.iter().enumerate() {
        by_label[l as usize].push(i);
    }
    let distinct = by_label.iter().filter(|v| !v.is_empty()).count();
    if distinct < 2 {
        return Err(Error::InsufficientClasses { found: distinct });
    }
    let anchors: Vec<usize> = (0..labels.len())
        .filter(|&i| by_label[labels[i] as usize].len() >= 2)
        .collect();
    if anchors.is_empty() {
        return Err(Error::Domain("no label has two samples to form a positive pair".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = anchors[rng.gen_range(0..anchors.len())];
        let same = &by_label[labels[a] as usize];
        let p = loop {
            let c = same[rng.gen_range(0..same.len())];
            if c != a {
                break c;
            }
        };
        let n_others = labels.len() - same.len();
        let mut k = rng.gen_range(0..n_others);
        let neg = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != labels[a])
            .find_map(|(i, _)| {
                if k == 0 {
                    Some(i)
                } else {
                    k -= 1;
                    None
                }
            })
            .expect("n_others counts the different-label rows");
        out.push((a, p, neg));
    }
    Ok(out)
}
