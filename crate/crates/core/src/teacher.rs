//! Stand-in supervision signals.
//!
//! Local reliability comes from a classical structure-tensor corner
//! response. Dense teacher features come from a fixed, seeded projection of
//! one-hot label planes, pooled to the student's tap resolution and
//! box-smoothed, so features are organized by semantics the way a
//! segmentation encoder's would be. Both can be replaced by externally
//! produced rasters (see [`crate::io::read_float_raster`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Image, Raster, ReliabilityMap};
use crate::rng::mix;
use crate::semantics::SemanticMask;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_HARRIS_K: f64 = 0.05;

/// Harris response `det(M) − k·trace(M)²`, clamped at zero and scaled so the maximum is 1.
pub fn corner_reliability(image: &Image, sigma: f64, k: f64) -> Result<ReliabilityMap> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (w, h) = image.dims();
    if w < 2 || h < 2 {
        return Ok(Raster::filled(w, h, 0.0));
    }
    let mut ixx = Raster::filled(w, h, 0.0);
    let mut iyy = Raster::filled(w, h, 0.0);
    let mut ixy = Raster::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (image.get_clamped(xi + 1, yi) - image.get_clamped(xi - 1, yi));
            let gy = 0.5 * (image.get_clamped(xi, yi + 1) - image.get_clamped(xi, yi - 1));
            ixx.set(x, y, gx * gx);
            iyy.set(x, y, gy * gy);
            ixy.set(x, y, gx * gy);
        }
    }
    let kernel = gaussian_kernel(sigma);
    let (sxx, syy, sxy) = (
        separable_blur(&ixx, &kernel),
        separable_blur(&iyy, &kernel),
        separable_blur(&ixy, &kernel),
    );
    let mut response = Raster::from_fn(w, h, |x, y| {
        let (a, b, c) = (sxx.get(x, y), syy.get(x, y), sxy.get(x, y));
        let tr = a + b;
        (a * b - c * c - k * tr * tr).max(0.0)
    });
    let max = response.max_value();
    if max > 0.0 {
        response.data_mut().iter_mut().for_each(|v| *v /= max);
    } else {
        response.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(response)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filter with clamped borders.
pub(crate) fn separable_blur(src: &Raster<f64>, kernel: &[f64]) -> Raster<f64> {
    let (w, h) = src.dims();
    let r = (kernel.len() / 2) as isize;
    let horiz = Raster::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * src.get_clamped(x as isize + i as isize - r, y as isize))
            .sum::<f64>()
    });
    Raster::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz.get_clamped(x as isize, y as isize + i as isize - r))
            .sum()
    })
}

/// Dense teacher feature maps aligned with the student's tapped layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    pub maps: Vec<Tensor>,
}

/// `(channels, height, width)` of one tapped layer.
pub type TapShape = (usize, usize, usize);

/// Seeded projection of label planes, average-pooled to each tap and box-smoothed (3×3).
pub fn teacher_features(mask: &SemanticMask, taps: &[TapShape], seed: u64) -> TeacherFeatures {
    let maps = taps
        .iter()
        .enumerate()
        .map(|(i, &shape)| {
            let pooled = project_and_pool(mask, shape, seed, i as u64);
            box_smooth(&pooled, shape)
        })
        .collect();
    TeacherFeatures { maps }
}

/// Projection before smoothing; exposed for tests that look at the raw projection.
pub fn project_and_pool(mask: &SemanticMask, shape: TapShape, seed: u64, tap: u64) -> Tensor {
    let (c, th, tw) = shape;
    let (w, h) = mask.dims();
    let mut basis: [Option<Vec<f64>>; 256] = std::array::from_fn(|_| None);
    let mut out = vec![0.0; c * th * tw];
    let mut counts = vec![0usize; th * tw];
    for y in 0..h {
        let cy = y * th / h.max(1);
        for x in 0..w {
            let cx = x * tw / w.max(1);
            let id = mask.get(x, y);
            let v = basis[id as usize].get_or_insert_with(|| label_vector(seed, tap, id, c));
            let cell = cy * tw + cx;
            counts[cell] += 1;
            for (ch, val) in v.iter().enumerate() {
                out[ch * th * tw + cell] += val;
            }
        }
    }
    for ch in 0..c {
        for cell in 0..th * tw {
            if counts[cell] > 0 {
                out[ch * th * tw + cell] /= counts[cell] as f64;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out).expect("shape matches buffer")
}

fn label_vector(seed: u64, tap: u64, label: u8, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed ^ 0x7465_6163_6865_7200) ^ tap) ^ label as u64);
    (0..channels).map(|_| rng.gen::<f64>()).collect()
}

fn box_smooth(t: &Tensor, (c, h, w): TapShape) -> Tensor {
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += plane[yy * w + xx];
                    }
                }
                out[ch * h * w + y * w + x] = s / 9.0;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("shape matches buffer")
}
