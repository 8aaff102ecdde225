//! Planar homographies: normalized DLT fitting and RANSAC verification.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// 3×3 projective map with `h33 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalize by `h33`; rejects singular matrices.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let h33 = m[2][2];
        if !h33.is_finite() || h33.abs() < 1e-12 {
            return Err(Error::DegenerateGeometry(format!("h33 = {h33}")));
        }
        let mut n = m;
        n.iter_mut().flatten().for_each(|v| *v /= h33);
        let h = Self { m: n };
        let det = h.det();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::DegenerateGeometry(format!("determinant {det}")));
        }
        Ok(h)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out.iter_mut().zip(self.m.iter().flatten()).for_each(|(o, v)| *o = *v);
        out
    }

    fn na(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    fn from_na(m: &Matrix3<f64>) -> Result<Self> {
        Self::new(std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])))
    }

    pub fn det(&self) -> f64 {
        self.na().determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .na()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateGeometry("singular homography".into()))?;
        Self::from_na(&inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_na(&(self.na() * other.na()))
    }

    /// Dehomogenized image of `(x, y)`; `None` at the line at infinity.
    pub fn apply(&self, (x, y): Point) -> Option<Point> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Mean of forward and backward transfer distances.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, p: Point, q: Point) -> f64 {
    match (h.apply(p), h_inv.apply(q)) {
        (Some(fp), Some(bq)) => 0.5 * (dist(fp, q) + dist(bq, p)),
        _ => f64::INFINITY,
    }
}

fn normalizer(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_d = pts.iter().map(|&p| dist(p, (cx, cy))).sum::<f64>() / n;
    let s = if mean_d > 1e-12 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v[0] / v[2], v[1] / v[2])
}

/// Least-squares homography mapping `src[i]` to `dst[i]` (Hartley-normalized DLT).
pub fn fit_homography(src: &[Point], dst: &[Point]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("{} vs {} points", src.len(), dst.len())));
    }
    if src.len() < 4 {
        return Err(Error::InsufficientMatches {
            required: 4,
            got: src.len(),
        });
    }
    let (ts, td) = (normalizer(src), normalizer(dst));
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&p, &q)) in src.iter().zip(dst).enumerate() {
        let (x, y) = transform(&ts, p);
        let (u, v) = transform(&td, q);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD did not converge".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let h = vt.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateGeometry("degenerate point spread".into()))?;
    Homography::from_na(&(td_inv * hn * ts))
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let scale = dist(a, b).max(dist(a, c)).max(1e-12);
    cross.abs() < 1e-6 * scale * scale
}

fn degenerate_sample(pts: &[Point]) -> bool {
    (0..4).any(|i| {
        let others: Vec<Point> = (0..4).filter(|&j| j != i).map(|j| pts[j]).collect();
        collinear(others[0], others[1], others[2])
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn consensus(h: &Homography, src: &[Point], dst: &[Point], thresh: f64) -> Option<(Vec<bool>, f64)> {
    let h_inv = h.inverse().ok()?;
    let mut total = 0.0;
    let mask = src
        .iter()
        .zip(dst)
        .map(|(&p, &q)| {
            let e = symmetric_transfer_error(h, &h_inv, p, q);
            let ok = e < thresh;
            if ok {
                total += e;
            }
            ok
        })
        .collect();
    Some((mask, total))
}

/// Seeded 4-point RANSAC over point correspondences `src[i] → dst[i]`.
pub fn ransac_homography(
    src: &[Point],
    dst: &[Point],
    iterations: usize,
    threshold_px: f64,
    seed: u64,
) -> Result<RansacResult> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::Shape(format!("{} vs {} points", n, dst.len())));
    }
    if n < 4 {
        return Err(Error::InsufficientMatches { required: 4, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography, Vec<bool>, usize, f64)> = None;
    for _ in 0..iterations.max(1) {
        let idx = sample(&mut rng, n, 4).into_vec();
        let s: Vec<Point> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<Point> = idx.iter().map(|&i| dst[i]).collect();
        if degenerate_sample(&s) || degenerate_sample(&d) {
            continue;
        }
        let Ok(h) = fit_homography(&s, &d) else { continue };
        let Some((mask, err)) = consensus(&h, src, dst, threshold_px) else { continue };
        let count = mask.iter().filter(|&&b| b).count();
        let better = match &best {
            None => true,
            Some((_, _, c, e)) => count > *c || (count == *c && err < *e),
        };
        if better {
            best = Some((h, mask, count, err));
        }
    }
    let Some((mut h, mut mask, count, _)) = best else {
        return Err(Error::DegenerateGeometry(format!(
            "all {iterations} minimal samples were degenerate"
        )));
    };
    if count >= 4 {
        let s: Vec<Point> = (0..n).filter(|&i| mask[i]).map(|i| src[i]).collect();
        let d: Vec<Point> = (0..n).filter(|&i| mask[i]).map(|i| dst[i]).collect();
        if let Ok(refit) = fit_homography(&s, &d) {
            if let Some((m2, _)) = consensus(&refit, src, dst, threshold_px) {
                if m2.iter().filter(|&&b| b).count() >= count {
                    h = refit;
                    mask = m2;
                }
            }
        }
    }
    Ok(RansacResult {
        homography: h,
        inliers: mask,
    })
}
