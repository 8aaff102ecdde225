//! Descriptor sampling, mutual nearest-neighbor matching and geometric verification.

use crate::detect::Keypoint;
use crate::error::{Error, Result};
use crate::geometry::{ransac_homography, Homography, Point};
use crate::tensor::Tensor;

/// Keypoints with one unit-norm descriptor row each.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub keypoints: Vec<Keypoint>,
    /// `n × dim`, row-major.
    pub descriptors: Vec<f64>,
    pub dim: usize,
    pub width: usize,
    pub height: usize,
}

impl DescriptorSet {
    pub fn new(
        keypoints: Vec<Keypoint>,
        descriptors: Vec<f64>,
        dim: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if descriptors.len() != keypoints.len() * dim {
            return Err(Error::Shape(format!(
                "{} descriptor values for {} keypoints of dim {dim}",
                descriptors.len(),
                keypoints.len()
            )));
        }
        Ok(Self {
            keypoints,
            descriptors,
            dim,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> Vec<Point> {
        self.keypoints.iter().map(|k| (k.x, k.y)).collect()
    }
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// Bilinear lookup at `(x/f, y/f)` in a `[D, h, w]` map, L2-normalized.
pub fn sample_descriptors(
    desc_map: &Tensor,
    keypoints: &[Keypoint],
    downsample: usize,
) -> Result<DescriptorSet> {
    let &[d, h, w] = desc_map.shape() else {
        return Err(Error::Shape(format!("descriptor map {:?} is not [D, h, w]", desc_map.shape())));
    };
    let (width, height) = (w * downsample, h * downsample);
    let f = downsample as f64;
    let data = desc_map.data();
    let mut out = Vec::with_capacity(keypoints.len() * d);
    for (i, kp) in keypoints.iter().enumerate() {
        if !(kp.x >= 0.0 && kp.y >= 0.0 && kp.x < width as f64 && kp.y < height as f64) {
            return Err(Error::Index(format!(
                "keypoint {i} at ({}, {}) outside {width}x{height}",
                kp.x, kp.y
            )));
        }
        let u = (kp.x / f).min((w - 1) as f64);
        let v = (kp.y / f).min((h - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let taps = [
            (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * w + x1, fx * (1.0 - fy)),
            (y1 * w + x0, (1.0 - fx) * fy),
            (y1 * w + x1, fx * fy),
        ];
        let start = out.len();
        for c in 0..d {
            let plane = &data[c * h * w..(c + 1) * h * w];
            out.push(taps.iter().map(|&(j, wt)| wt * plane[j]).sum());
        }
        normalize(&mut out[start..]);
    }
    DescriptorSet::new(keypoints.to_vec(), out, d, width, height)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub inliers: Option<Vec<bool>>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn inlier_count(&self) -> Option<usize> {
        self.inliers.as_ref().map(|m| m.iter().filter(|&&b| b).count())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mutual nearest neighbors under Euclidean distance, ties to the smaller index.
///
/// With `max_ratio`, a pair is kept only if its distance is below
/// `max_ratio` times the second-nearest distance of the query in `a`.
pub fn mnn_match(a: &DescriptorSet, b: &DescriptorSet, max_ratio: Option<f64>) -> Result<MatchSet> {
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    if a.dim != b.dim {
        return Err(Error::Shape(format!("descriptor dims {} vs {}", a.dim, b.dim)));
    }
    let (na, nb) = (a.len(), b.len());
    let mut dist = vec![0.0; na * nb];
    for i in 0..na {
        for j in 0..nb {
            dist[i * nb + j] = euclid(a.row(i), b.row(j));
        }
    }
    let mut best_b = vec![(0usize, f64::INFINITY, f64::INFINITY); na];
    let mut best_a = vec![(0usize, f64::INFINITY); nb];
    for i in 0..na {
        for j in 0..nb {
            let d = dist[i * nb + j];
            let e = &mut best_b[i];
            if d < e.1 {
                *e = (j, d, e.1);
            } else if d < e.2 {
                e.2 = d;
            }
            if d < best_a[j].1 {
                best_a[j] = (i, d);
            }
        }
    }
    let pairs = (0..na)
        .filter_map(|i| {
            let (j, d, second) = best_b[i];
            if best_a[j].0 != i {
                return None;
            }
            if let Some(r) = max_ratio {
                if !(d < r * second) {
                    return None;
                }
            }
            Some(Match { a: i, b: j, distance: d })
        })
        .collect();
    Ok(MatchSet { pairs, inliers: None })
}

/// Matched point lists `(a_points, b_points)`.
pub fn matched_points(m: &MatchSet, a: &DescriptorSet, b: &DescriptorSet) -> (Vec<Point>, Vec<Point>) {
    m.pairs
        .iter()
        .map(|p| {
            let (ka, kb) = (a.keypoints[p.a], b.keypoints[p.b]);
            ((ka.x, ka.y), (kb.x, kb.y))
        })
        .unzip()
}

/// RANSAC homography over the matches; fills `m.inliers`.
pub fn verify(
    m: &mut MatchSet,
    a: &DescriptorSet,
    b: &DescriptorSet,
    iterations: usize,
    threshold_px: f64,
    seed: u64,
) -> Result<Homography> {
    let (pa, pb) = matched_points(m, a, b);
    let r = ransac_homography(&pa, &pb, iterations, threshold_px, seed)?;
    m.inliers = Some(r.inliers);
    Ok(r.homography)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint { x, y, score: 1.0 }
    }

    fn set(rows: &[Vec<f64>]) -> DescriptorSet {
        let dim = rows[0].len();
        let kps = (0..rows.len()).map(|i| kp(i as f64, 0.0)).collect();
        DescriptorSet::new(kps, rows.iter().flatten().copied().collect(), dim, 64, 64).unwrap()
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&mut v);
                v
            })
            .collect()
    }

    #[test]
    fn sampling_at_nodes_and_midpoints() {
        // D=2 map with 2x2 nodes
        let map = Tensor::new(vec![2, 2, 2], vec![3.0, 0.0, 0.0, 0.0, 4.0, 6.0, 0.0, 0.0]).unwrap();
        let s = sample_descriptors(&map, &[kp(0.0, 0.0), kp(2.0, 0.0), kp(4.0, 4.0)], 4).unwrap();
        assert_eq!(s.row(0), &[0.6, 0.8]);
        // average of columns (3,4) and (0,6) is (1.5, 5)
        let n = (1.5f64 * 1.5 + 25.0).sqrt();
        assert!((s.row(1)[0] - 1.5 / n).abs() < 1e-15 && (s.row(1)[1] - 5.0 / n).abs() < 1e-15);
        // zero column
        let u = 1.0 / 2f64.sqrt();
        assert_eq!(s.row(2), &[u, u]);
        assert!(matches!(
            sample_descriptors(&map, &[kp(8.0, 1.0)], 4),
            Err(Error::Index(_))
        ));
        let flat = Tensor::full(&[3, 4, 4], 0.2);
        let s = sample_descriptors(&flat, &[kp(1.0, 2.0), kp(13.5, 9.0)], 4).unwrap();
        assert_eq!(s.row(0), s.row(1));
    }

    #[test]
    fn permutation_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = random_unit_rows(&mut rng, 10, 8);
        let perm: Vec<usize> = (0..10).map(|i| (i * 3 + 1) % 10).collect();
        let b_rows: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let m = mnn_match(&set(&rows), &set(&b_rows), None).unwrap();
        assert_eq!(m.len(), 10);
        for p in &m.pairs {
            assert_eq!(perm[p.b], p.a);
            assert_eq!(p.distance, 0.0);
        }
    }

    #[test]
    fn duplicate_rows_tie_to_smaller_index() {
        let a = set(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let b = set(&[vec![1.0, 0.0]]);
        let m = mnn_match(&a, &b, None).unwrap();
        assert_eq!(m.pairs, vec![Match { a: 0, b: 0, distance: 0.0 }]);
    }

    #[test]
    fn empty_sets_give_no_matches() {
        let a = set(&[vec![1.0, 0.0]]);
        let empty = DescriptorSet::new(vec![], vec![], 2, 8, 8).unwrap();
        assert!(mnn_match(&a, &empty, None).unwrap().is_empty());
        assert!(mnn_match(&empty, &a, None).unwrap().is_empty());
    }

    #[test]
    fn symmetric_and_one_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = set(&random_unit_rows(&mut rng, 16, 4));
            let b = set(&random_unit_rows(&mut rng, 12, 4));
            let ab = mnn_match(&a, &b, None).unwrap();
            let ba = mnn_match(&b, &a, None).unwrap();
            let mut swapped: Vec<(usize, usize)> = ba.pairs.iter().map(|m| (m.b, m.a)).collect();
            swapped.sort();
            let direct: Vec<(usize, usize)> = ab.pairs.iter().map(|m| (m.a, m.b)).collect();
            assert_eq!(direct, swapped);
            let mut bs: Vec<usize> = ab.pairs.iter().map(|m| m.b).collect();
            bs.sort();
            bs.dedup();
            assert_eq!(bs.len(), ab.len());
        }
    }

    #[test]
    fn ratio_test_prunes() {
        let a = set(&[vec![1.0, 0.0]]);
        let s = 0.01f64;
        let b = set(&[vec![(1.0 - s * s).sqrt(), s], vec![(1.0 - s * s).sqrt(), -s * 1.01]]);
        assert_eq!(mnn_match(&a, &b, None).unwrap().len(), 1);
        assert_eq!(mnn_match(&a, &b, Some(0.8)).unwrap().len(), 0);
    }
}
