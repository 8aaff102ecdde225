//! Procedural street scenes with exact semantic masks, and warped,
//! photometrically perturbed pairs with known correspondence.
//!
//! Layout and texture use separate seeded streams. The layout fixes the
//! mask; each class draws its texture from its own stream, so the unstable
//! classes (sky, tree, car) can be re-textured in the second image of a pair
//! while the geometry stays put.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::raster::{Image, Raster};
use crate::rng::{mix, stream};
use crate::semantics::synthetic_labels::{BUILDING, CAR, ROAD, SKY, TREE};
use crate::semantics::SemanticMask;

const LAYOUT: u64 = 0x6C61_796F_7574;
const TEXTURE: u64 = 0x7465_7874;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub mask: SemanticMask,
    pub seed: u64,
}

impl Scene {
    pub fn size(&self) -> usize {
        self.image.width()
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

struct Layout {
    size: usize,
    road_top: usize,
    buildings: Vec<Rect>,
    trees: Vec<(f64, f64, f64)>,
    trunks: Vec<Rect>,
    cars: Vec<Rect>,
}

fn layout(seed: u64, size: usize) -> Layout {
    let mut rng = stream(&[LAYOUT, seed, size as u64]);
    let s = size as f64;
    let road_top = (s * rng.gen_range(0.74..0.84)) as usize;
    let mut buildings = Vec::new();
    let mut trees = Vec::new();
    let mut trunks = Vec::new();
    let mut x = rng.gen_range(0..size / 8);
    loop {
        let bw = rng.gen_range(size / 6..size / 3);
        let top = (s * rng.gen_range(0.18..0.45)) as usize;
        buildings.push(Rect {
            x0: x,
            y0: top,
            x1: (x + bw).min(size),
            y1: road_top,
        });
        x += bw;
        let gap = rng.gen_range(size / 8..size / 4);
        let cx = (x + gap / 2).min(size - 3) as f64;
        let cy = s * rng.gen_range(0.42..0.62);
        let r = s * rng.gen_range(0.09..0.15);
        trees.push((cx, cy, r));
        let trunk_w = (size / 32).max(1);
        trunks.push(Rect {
            x0: (cx as usize).saturating_sub(trunk_w),
            y0: cy as usize,
            x1: (cx as usize + trunk_w + 1).min(size),
            y1: road_top,
        });
        x += gap;
        if x >= size {
            break;
        }
    }
    let n_cars = rng.gen_range(1..=3);
    let mut cars = Vec::new();
    for _ in 0..n_cars {
        let cw = rng.gen_range(size / 6..size / 4);
        let ch = rng.gen_range(size / 12..size / 8).max(3);
        let cx = rng.gen_range(0..size - cw);
        let bottom = (road_top + rng.gen_range(1..=(size - road_top) / 2)).min(size);
        cars.push(Rect {
            x0: cx,
            y0: bottom.saturating_sub(ch),
            x1: cx + cw,
            y1: bottom,
        });
    }
    Layout {
        size,
        road_top,
        buildings,
        trees,
        trunks,
        cars,
    }
}

fn label_mask(l: &Layout) -> SemanticMask {
    Raster::from_fn(l.size, l.size, |x, y| {
        if l.cars.iter().any(|r| r.contains(x, y)) {
            return CAR;
        }
        if y >= l.road_top {
            return ROAD;
        }
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let in_tree = l
            .trees
            .iter()
            .any(|&(cx, cy, r)| (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r)
            || l.trunks.iter().any(|r| r.contains(x, y));
        if in_tree {
            TREE
        } else if l.buildings.iter().any(|r| r.contains(x, y)) {
            BUILDING
        } else {
            SKY
        }
    })
}

struct Facade {
    rect: Rect,
    base: f64,
    window: f64,
    pitch: (usize, usize),
    pane: (usize, usize),
    offset: (usize, usize),
    key: u64,
}

/// Class textures; `variant` re-seeds the texture streams of the unstable classes.
fn render(seed: u64, l: &Layout, mask: &SemanticMask, variant: u64) -> Image {
    let size = l.size;
    let tex = |label: u8, variant: u64| stream(&[TEXTURE, seed, label as u64, variant]);
    let unstable = |label: u8| if label == BUILDING || label == ROAD { 0 } else { variant };

    let mut rng = tex(BUILDING, 0);
    let facades: Vec<Facade> = l
        .buildings
        .iter()
        .map(|&rect| {
            let base = rng.gen_range(0.35..0.65);
            let dark = rng.gen_bool(0.5);
            Facade {
                rect,
                base,
                window: if dark { base - rng.gen_range(0.25..0.35) } else { base + rng.gen_range(0.25..0.35) },
                pitch: (rng.gen_range(5..8), rng.gen_range(5..8)),
                pane: (rng.gen_range(2..4), rng.gen_range(2..4)),
                offset: (rng.gen_range(1..3), rng.gen_range(1..3)),
                key: rng.gen(),
            }
        })
        .collect();

    let mut rng = tex(SKY, unstable(SKY));
    let sky_top = rng.gen_range(0.8..0.92);
    let clouds: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..5))
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64 * 0.35),
                rng.gen_range(3.0..size as f64 / 5.0),
                rng.gen_range(1.5..size as f64 / 10.0),
            )
        })
        .collect();

    let mut rng = tex(TREE, unstable(TREE));
    let tree_base = rng.gen_range(0.25..0.4);
    let leaves: Vec<(f64, f64, f64, f64)> = (0..size * size / 12)
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.8..2.0),
                rng.gen_range(-0.18..0.18),
            )
        })
        .collect();

    let mut rng = tex(CAR, unstable(CAR));
    let car_paint: Vec<(f64, f64)> = l
        .cars
        .iter()
        .map(|_| (rng.gen_range(0.1..0.95), rng.gen_range(0.0..0.2)))
        .collect();

    let mut rng = tex(ROAD, 0);
    let road_base = rng.gen_range(0.18..0.3);
    let lane_y = l.road_top + (size - l.road_top) * 2 / 3;
    let dash = rng.gen_range(4..7);
    let grain: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.02..0.02)).collect();

    Raster::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        match mask.get(x, y) {
            SKY => {
                let mut v = sky_top - 0.15 * fy / size as f64;
                for &(cx, cy, rx, ry) in &clouds {
                    let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                    if d <= 1.0 {
                        v = v.max(0.97 - 0.08 * d);
                    }
                }
                v
            }
            BUILDING => {
                let f = facades
                    .iter()
                    .find(|f| f.rect.contains(x, y))
                    .expect("building pixel lies in a facade");
                let (lx, ly) = (x - f.rect.x0, y - f.rect.y0);
                let wx = lx >= f.offset.0 && (lx - f.offset.0) % f.pitch.0 < f.pane.0;
                let wy = ly >= f.offset.1 && (ly - f.offset.1) % f.pitch.1 < f.pane.1;
                if wx && wy {
                    let cell = ((lx - f.offset.0) / f.pitch.0) as u64 * 7919 + ((ly - f.offset.1) / f.pitch.1) as u64;
                    let u = (mix(f.key ^ cell) >> 11) as f64 / (1u64 << 53) as f64;
                    f.window + 0.3 * (u - 0.5)
                } else {
                    f.base
                }
            }
            TREE => {
                let mut v = tree_base;
                for &(cx, cy, r, a) in &leaves {
                    if (fx - cx).abs() <= r && (fy - cy).abs() <= r {
                        v += a;
                    }
                }
                v
            }
            CAR => {
                let (i, r) = l
                    .cars
                    .iter()
                    .enumerate()
                    .find(|(_, r)| r.contains(x, y))
                    .expect("car pixel lies in a car");
                let (paint, glass) = car_paint[i];
                let h = r.y1 - r.y0;
                let w = r.x1 - r.x0;
                let in_window = y < r.y0 + h / 2 && x > r.x0 + w / 5 && x + w / 5 < r.x1;
                if in_window {
                    glass
                } else {
                    paint
                }
            }
            _ => {
                let on_lane = y == lane_y && (x / dash) % 2 == 0;
                if on_lane {
                    0.9
                } else {
                    road_base + grain[y * size + x]
                }
            }
        }
        .clamp(0.0, 1.0)
    })
}

/// Deterministic scene of `size × size` pixels.
pub fn generate_scene(seed: u64, size: usize) -> Result<Scene> {
    if size < 32 || size % 8 != 0 {
        return Err(Error::Config(format!(
            "scene size must be a multiple of 8 and at least 32, got {size}"
        )));
    }
    let l = layout(seed, size);
    let mask = label_mask(&l);
    let image = render(seed, &l, &mask, 0);
    Ok(Scene { image, mask, seed })
}

/// Same layout as `scene` with freshly drawn textures on the unstable classes.
fn retextured(scene: &Scene, variant: u64) -> Image {
    let l = layout(scene.seed, scene.size());
    render(scene.seed, &l, &scene.mask, variant)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpParams {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation in pixels.
    pub tx: f64,
    pub ty: f64,
    /// Projective terms of the last matrix row.
    pub px: f64,
    pub py: f64,
}

impl WarpParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            px: 0.0,
            py: 0.0,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            tx,
            ty,
            ..Self::identity()
        }
    }

    /// Homography about the image center of a `size × size` image.
    pub fn homography(&self, size: usize) -> Result<Homography> {
        let a = self.rotation_deg.to_radians();
        let (c, s) = (a.cos() * self.scale, a.sin() * self.scale);
        let core = Homography::new([[c, -s, self.tx], [s, c, self.ty], [self.px, self.py, 1.0]])?;
        let m = (size as f64 - 1.0) / 2.0;
        let to_center = Homography::translation(-m, -m);
        let back = Homography::translation(m, m);
        back.compose(&core)?.compose(&to_center)
    }

    fn check(&self, size: usize) -> Result<()> {
        let limit = 0.1 * size as f64;
        let ok = self.rotation_deg.abs() <= 15.0
            && (0.85..=1.18).contains(&self.scale)
            && self.px.abs() <= 1e-3
            && self.py.abs() <= 1e-3
            && self.tx.abs() <= limit
            && self.ty.abs() <= limit;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("warp parameters out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricParams {
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    /// Blend weight in `[0, 1]` of fresh textures on sky, tree and car pixels.
    pub volatility: f64,
}

impl PhotometricParams {
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            volatility: 0.0,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (self.gain * v.max(0.0).powf(self.gamma) + self.bias).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpedPair {
    pub a: Scene,
    pub b: Scene,
    /// Maps pixel coordinates of `a` to `b`.
    pub homography: Homography,
    pub warp: WarpParams,
    pub photometric: PhotometricParams,
    /// Pixels of `b` whose preimage lies inside `a`.
    pub valid: Raster<bool>,
}

fn inside(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Warp `scene` by `warp`, then perturb the appearance of the warped image.
pub fn warp_pair(
    scene: &Scene,
    warp: &WarpParams,
    photometric: &PhotometricParams,
    seed: u64,
) -> Result<WarpedPair> {
    let size = scene.size();
    if !(photometric.gamma > 0.0) || !(0.0..=1.0).contains(&photometric.volatility) {
        return Err(Error::Config(format!("photometric parameters out of range: {photometric:?}")));
    }
    let h = warp.homography(size)?;
    warp.check(size)?;
    let h_inv = h.inverse()?;
    let source = if photometric.volatility > 0.0 {
        let fresh = retextured(scene, seed | 1);
        let v = photometric.volatility;
        Raster::from_fn(size, size, |x, y| {
            let (old, new) = (scene.image.get(x, y), fresh.get(x, y));
            match scene.mask.get(x, y) {
                BUILDING | ROAD => old,
                _ => (1.0 - v) * old + v * new,
            }
        })
    } else {
        scene.image.clone()
    };
    let mut valid = Raster::filled(size, size, false);
    let mut image = Raster::filled(size, size, 0.0);
    let mut mask = Raster::filled(size, size, 0u8);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = h_inv.apply((x as f64, y as f64)).unwrap_or((-1.0, -1.0));
            valid.set(x, y, inside(u, v, size, size));
            let (uc, vc) = (u.clamp(0.0, (size - 1) as f64), v.clamp(0.0, (size - 1) as f64));
            let sample = source.sample_bilinear(uc, vc).expect("clamped inside");
            image.set(x, y, photometric.apply(sample));
            mask.set(x, y, scene.mask.get(uc.round() as usize, vc.round() as usize));
        }
    }
    Ok(WarpedPair {
        a: scene.clone(),
        b: Scene {
            image,
            mask,
            seed: scene.seed,
        },
        homography: h,
        warp: *warp,
        photometric: *photometric,
        valid,
    })
}

/// Location in `b` of pixel `(x, y)` of `a`, if it lands on a valid pixel.
pub fn gt_correspondence(pair: &WarpedPair, x: f64, y: f64) -> Option<(f64, f64)> {
    let (w, h) = pair.b.image.dims();
    let (u, v) = pair.homography.apply((x, y))?;
    if !inside(u, v, w, h) {
        return None;
    }
    pair.valid
        .get(u.round() as usize, v.round() as usize)
        .then_some((u, v))
}

/// Random warp within the supported ranges.
pub fn random_warp(rng: &mut impl Rng, size: usize) -> WarpParams {
    let t = 0.1 * size as f64;
    WarpParams {
        rotation_deg: rng.gen_range(-15.0..=15.0),
        scale: rng.gen_range(0.85..=1.18),
        tx: rng.gen_range(-t..=t),
        ty: rng.gen_range(-t..=t),
        px: rng.gen_range(-1e-3..=1e-3),
        py: rng.gen_range(-1e-3..=1e-3),
    }
}

/// Random gain, bias and gamma jitter with the given volatility.
pub fn random_photometric(rng: &mut impl Rng, volatility: f64) -> PhotometricParams {
    PhotometricParams {
        gain: rng.gen_range(0.75..=1.3),
        bias: rng.gen_range(-0.1..=0.1),
        gamma: rng.gen_range(0.6..=1.5),
        volatility,
    }
}
