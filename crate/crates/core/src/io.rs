//! File formats: feature files, checkpoints, rasters, match lists, dataset
//! manifests and `key = value` configuration.
//!
//! All binary formats are little-endian and begin with a 4-byte magic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::detect::Keypoint;
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::matching::{DescriptorSet, Match, MatchSet};
use crate::net::{NetworkConfig, NetworkWeights};
use crate::raster::{Image, Raster};
use crate::semantics::SemanticMask;
use crate::rng::stream;
use crate::synth::{
    generate_scene, random_photometric, random_warp, warp_pair, PhotometricParams, WarpParams,
};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SLF1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLW1";
pub const RASTER_MAGIC: &[u8; 4] = b"SLR1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { buf, pos: 4, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated at byte {} (need {n} more, {} available)",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

// ---- feature files ---------------------------------------------------

pub fn encode_features(set: &DescriptorSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + set.len() * (12 + 4 * set.dim));
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [set.width, set.height, set.len(), set.dim] {
        push_u32(&mut out, v)?;
    }
    for k in &set.keypoints {
        push_f32(&mut out, k.x);
        push_f32(&mut out, k.y);
        push_f32(&mut out, k.score);
    }
    for &v in &set.descriptors {
        push_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> Result<DescriptorSet> {
    let mut r = Reader::new(buf, FEATURE_MAGIC, "feature file")?;
    let (w, h, n, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let expected = (n as u128) * (12 + 4 * d as u128);
    if expected != (buf.len() - 20) as u128 {
        return Err(Error::Format(format!(
            "feature file: header declares {n} keypoints of dim {d} ({expected} payload bytes) but {} bytes follow",
            buf.len() - 20
        )));
    }
    let mut keypoints = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y, score) = (r.f32()?, r.f32()?, r.f32()?);
        keypoints.push(Keypoint {
            x: x as f64,
            y: y as f64,
            score: score as f64,
        });
    }
    let mut desc = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        desc.push(r.f32()? as f64);
    }
    r.finish()?;
    DescriptorSet::new(keypoints, desc, d, w, h)
}

pub fn write_features(path: &Path, set: &DescriptorSet) -> Result<()> {
    Ok(fs::write(path, encode_features(set)?)?)
}

pub fn read_features(path: &Path) -> Result<DescriptorSet> {
    decode_features(&fs::read(path)?)
}

// ---- checkpoints -----------------------------------------------------

pub fn encode_checkpoint(w: &NetworkWeights) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let c = &w.config;
    for v in [c.base_channels, c.descriptor_dim, c.downsample, c.resblocks, w.tensors.len()] {
        push_u32(&mut out, v)?;
    }
    for (name, t) in &w.tensors {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<NetworkWeights> {
    let mut r = Reader::new(buf, CHECKPOINT_MAGIC, "checkpoint")?;
    let config = NetworkConfig {
        base_channels: r.u32()? as usize,
        descriptor_dim: r.u32()? as usize,
        downsample: r.u32()? as usize,
        resblocks: r.u32()? as usize,
    };
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint: tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > buf.len() {
            return Err(Error::Format(format!("checkpoint: tensor {name} shape {shape:?} exceeds file")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    r.finish()?;
    let w = NetworkWeights { config, tensors };
    w.validate()?;
    Ok(w)
}

pub fn write_checkpoint(path: &Path, w: &NetworkWeights) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(w)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<NetworkWeights> {
    decode_checkpoint(&fs::read(path)?)
}

// ---- rasters ---------------------------------------------------------

fn parse_pgm(buf: &[u8]) -> Result<(usize, usize, &[u8])> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < buf.len() && buf[i] == b'#' {
            while i < buf.len() && buf[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 graymaps are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit graymaps are supported"));
    }
    let data = &buf[(i + 1).min(buf.len())..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok((w, h, data))
}

fn encode_pgm(w: usize, h: usize, bytes: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(bytes);
    out
}

/// 8-bit graymap; values are clamped to `[0, 1]` and rounded.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let bytes = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    Ok(fs::write(path, encode_pgm(img.width(), img.height(), bytes))?)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let buf = fs::read(path)?;
    let (w, h, data) = parse_pgm(&buf)?;
    Raster::new(w, h, data.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Label ids stored verbatim as graymap bytes.
pub fn write_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    Ok(fs::write(
        path,
        encode_pgm(mask.width(), mask.height(), mask.data().iter().copied()),
    )?)
}

pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    let buf = fs::read(path)?;
    let (w, h, data) = parse_pgm(&buf)?;
    Raster::new(w, h, data.to_vec())
}

/// Multi-channel float raster: magic, u32 width, height, channels, then
/// `channels × height × width` f32 values, channel-major.
pub fn encode_float_raster(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *t.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("raster tensor {:?} is not 2-D or 3-D", t.shape()))),
    };
    let mut out = Vec::with_capacity(16 + 4 * t.numel());
    out.extend_from_slice(RASTER_MAGIC);
    for v in [w, h, c] {
        push_u32(&mut out, v)?;
    }
    t.data().iter().for_each(|&v| push_f32(&mut out, v));
    Ok(out)
}

/// Decodes to a `[channels, height, width]` tensor.
pub fn decode_float_raster(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf, RASTER_MAGIC, "float raster")?;
    let (w, h, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = w * h * c;
    if (n as u128) * 4 != (buf.len() - 16) as u128 {
        return Err(Error::Format(format!(
            "float raster: header declares {n} values but {} bytes follow",
            buf.len() - 16
        )));
    }
    let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Tensor::new(vec![c, h, w], data)
}

pub fn write_float_raster(path: &Path, t: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_float_raster(t)?)?)
}

/// Externally produced reliability maps or teacher features.
pub fn read_float_raster(path: &Path) -> Result<Tensor> {
    decode_float_raster(&fs::read(path)?)
}

// ---- match files -----------------------------------------------------

/// Header `H h11 … h33` (or `H none`), then `idx_a idx_b distance inlier` lines.
pub fn encode_matches(m: &MatchSet, h: Option<&Homography>) -> String {
    let mut out = String::new();
    match h {
        Some(h) => {
            out.push('H');
            for v in h.row_major() {
                out.push_str(&format!(" {v:e}"));
            }
            out.push('\n');
        }
        None => out.push_str("H none\n"),
    }
    for (i, p) in m.pairs.iter().enumerate() {
        let inlier = m.inliers.as_ref().map_or(0, |v| u8::from(v[i]));
        out.push_str(&format!("{} {} {:e} {inlier}\n", p.a, p.b, p.distance));
    }
    out
}

pub fn decode_matches(text: &str) -> Result<(MatchSet, Option<Homography>)> {
    let bad = |n: usize, m: &str| Error::Format(format!("match file line {}: {m}", n + 1));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let h = match fields.as_slice() {
        ["H", "none"] => None,
        ["H", rest @ ..] if rest.len() == 9 => {
            let v = rest
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad(0, "bad homography entry")))
                .collect::<Result<Vec<_>>>()?;
            Some(Homography::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])?)
        }
        _ => return Err(bad(0, "expected `H <9 values>` or `H none`")),
    };
    let mut pairs = Vec::new();
    let mut inliers = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad(n, "expected 4 fields"));
        }
        let a = f[0].parse().map_err(|_| bad(n, "bad index"))?;
        let b = f[1].parse().map_err(|_| bad(n, "bad index"))?;
        let distance = f[2].parse().map_err(|_| bad(n, "bad distance"))?;
        let inl = match f[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(n, "inlier flag must be 0 or 1")),
        };
        pairs.push(Match { a, b, distance });
        inliers.push(inl);
    }
    Ok((
        MatchSet {
            pairs,
            inliers: Some(inliers),
        },
        h,
    ))
}

// ---- dataset manifests -----------------------------------------------

/// One scene of a synthetic dataset and the test pair drawn for it.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub warp: WarpParams,
    pub photometric: PhotometricParams,
}

impl ManifestEntry {
    pub fn image_name(&self) -> String {
        format!("{:03}_img.pgm", self.index)
    }

    pub fn mask_name(&self) -> String {
        format!("{:03}_mask.pgm", self.index)
    }

    pub fn warped_name(&self) -> String {
        format!("{:03}_warped.pgm", self.index)
    }

    pub fn warped_mask_name(&self) -> String {
        format!("{:03}_warped_mask.pgm", self.index)
    }

    pub fn homography_name(&self) -> String {
        format!("{:03}_H.txt", self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub size: usize,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str =
    "# index seed rotation_deg scale tx ty px py gain bias gamma volatility";

pub fn encode_manifest(m: &Manifest) -> String {
    let mut out = format!("{MANIFEST_HEADER}\nsize {}\n", m.size);
    for e in &m.entries {
        let (w, p) = (&e.warp, &e.photometric);
        out.push_str(&format!(
            "{} {} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}\n",
            e.index, e.seed, w.rotation_deg, w.scale, w.tx, w.ty, w.px, w.py, p.gain, p.bias, p.gamma, p.volatility
        ));
    }
    out
}

pub fn decode_manifest(text: &str) -> Result<Manifest> {
    let bad = |n: usize, m: &str| Error::Format(format!("manifest line {}: {m}", n + 1));
    let mut size = None;
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f[0] == "size" {
            size = Some(f.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad(n, "bad size"))?);
            continue;
        }
        if f.len() != 12 {
            return Err(bad(n, "expected 12 fields"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n, "bad number"));
        entries.push(ManifestEntry {
            index: f[0].parse().map_err(|_| bad(n, "bad index"))?,
            seed: f[1].parse().map_err(|_| bad(n, "bad seed"))?,
            warp: WarpParams {
                rotation_deg: num(2)?,
                scale: num(3)?,
                tx: num(4)?,
                ty: num(5)?,
                px: num(6)?,
                py: num(7)?,
            },
            photometric: PhotometricParams {
                gain: num(8)?,
                bias: num(9)?,
                gamma: num(10)?,
                volatility: num(11)?,
            },
        });
    }
    let size = size.ok_or_else(|| Error::Format("manifest: missing `size` line".into()))?;
    Ok(Manifest { size, entries })
}

/// Render `count` scenes plus one perturbed test pair each into `dir`.
pub fn write_dataset(dir: &Path, seed: u64, count: usize, size: usize, volatility: f64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = stream(&[seed, index as u64]);
        let entry = ManifestEntry {
            index,
            seed: rng.gen(),
            warp: random_warp(&mut rng, size),
            photometric: random_photometric(&mut rng, volatility),
        };
        let scene = generate_scene(entry.seed, size)?;
        let pair = warp_pair(&scene, &entry.warp, &entry.photometric, entry.seed)?;
        write_pgm(&dir.join(entry.image_name()), &scene.image)?;
        write_mask(&dir.join(entry.mask_name()), &scene.mask)?;
        write_pgm(&dir.join(entry.warped_name()), &pair.b.image)?;
        write_mask(&dir.join(entry.warped_mask_name()), &pair.b.mask)?;
        fs::write(dir.join(entry.homography_name()), encode_homography(&pair.homography))?;
        entries.push(entry);
    }
    let manifest = Manifest { size, entries };
    fs::write(dir.join("manifest.txt"), encode_manifest(&manifest))?;
    Ok(manifest)
}

// ---- homographies ----------------------------------------------------

/// Three rows of three numbers.
pub fn encode_homography(h: &Homography) -> String {
    h.matrix()
        .iter()
        .map(|r| format!("{:e} {:e} {:e}\n", r[0], r[1], r[2]))
        .collect()
}

pub fn decode_homography(text: &str) -> Result<Homography> {
    let v = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad homography entry `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != 9 {
        return Err(Error::Format(format!("homography needs 9 values, got {}", v.len())));
    }
    Homography::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    decode_homography(&fs::read_to_string(path)?)
}

// ---- key = value configuration ---------------------------------------

/// Parse `key = value` lines; `#` starts a comment; duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_weights;

    fn sample_set() -> DescriptorSet {
        let kps = vec![
            Keypoint { x: 1.0, y: 2.0, score: 0.5 },
            Keypoint { x: 30.0, y: 12.0, score: 0.25 },
        ];
        let d = vec![0.6, 0.8, 0.0, 1.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0];
        DescriptorSet::new(kps, d, 3, 32, 16).unwrap()
    }

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let bytes = encode_features(&sample_set()).unwrap();
        assert_eq!(&bytes[..4], b"SLF1");
        assert_eq!(bytes.len(), 20 + 2 * 12 + 6 * 4);
        let back = decode_features(&bytes).unwrap();
        assert_eq!(encode_features(&back).unwrap(), bytes);
        assert_eq!(back.keypoints[1].x, 30.0);
    }

    #[test]
    fn feature_corruption_detected() {
        let bytes = encode_features(&sample_set()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_features(&long), Err(Error::Format(_))));
        let mut wrong_n = bytes;
        wrong_n[12] = 3;
        assert!(matches!(decode_features(&wrong_n), Err(Error::Format(_))));
        assert!(matches!(decode_features(b"SL"), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = NetworkConfig {
            base_channels: 4,
            descriptor_dim: 8,
            downsample: 4,
            resblocks: 1,
        };
        let w = init_weights(&cfg, 3).unwrap();
        let bytes = encode_checkpoint(&w).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.tensors, w.tensors);
        assert_eq!(back.config, cfg);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn rasters_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_fn(5, 3, |x, y| (x + 5 * y) as f64 / 14.0);
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mask = Raster::from_fn(4, 4, |x, y| (x * y) as u8);
        let p = dir.path().join("m.pgm");
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);

        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let p = dir.path().join("f.slr");
        write_float_raster(&p, &t).unwrap();
        assert_eq!(read_float_raster(&p).unwrap(), t);
        assert!(decode_float_raster(b"SLR1\x01\0\0\0").is_err());
    }

    #[test]
    fn match_file_round_trip() {
        let m = MatchSet {
            pairs: vec![Match { a: 0, b: 3, distance: 0.125 }, Match { a: 2, b: 1, distance: 0.5 }],
            inliers: Some(vec![true, false]),
        };
        let h = Homography::translation(2.0, -1.0);
        let text = encode_matches(&m, Some(&h));
        let (back, hb) = decode_matches(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(hb, Some(h));
        let (_, none) = decode_matches(&encode_matches(&m, None)).unwrap();
        assert!(none.is_none());
        assert!(decode_matches("nonsense").is_err());
    }

    #[test]
    fn manifest_and_config_parse() {
        let m = Manifest {
            size: 64,
            entries: vec![ManifestEntry {
                index: 0,
                seed: 42,
                warp: WarpParams::translation(1.5, -2.0),
                photometric: PhotometricParams::identity(),
            }],
        };
        assert_eq!(decode_manifest(&encode_manifest(&m)).unwrap(), m);
        let kv = parse_key_values("# c\nepochs = 3\n lr=0.01 # fast\n").unwrap();
        assert_eq!(kv["epochs"], "3");
        assert_eq!(kv["lr"], "0.01");
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn homography_text_round_trip() {
        let h = Homography::new([[1.1, 0.02, -3.5], [-0.01, 0.95, 2.25], [1e-4, -2e-4, 1.0]]).unwrap();
        assert_eq!(decode_homography(&encode_homography(&h)).unwrap(), h);
        assert!(matches!(decode_homography("1 2 3"), Err(Error::Format(_))));
        assert!(matches!(decode_homography("1 0 0 0 1 0 0 0 x"), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_is_reproducible_and_loadable() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = write_dataset(d1.path(), 3, 2, 32, 1.0).unwrap();
        write_dataset(d2.path(), 3, 2, 32, 1.0).unwrap();
        assert_eq!(m.entries.len(), 2);
        let text = fs::read_to_string(d1.path().join("manifest.txt")).unwrap();
        assert_eq!(decode_manifest(&text).unwrap(), m);
        for e in &m.entries {
            for name in [e.image_name(), e.mask_name(), e.warped_name(), e.warped_mask_name(), e.homography_name()] {
                assert_eq!(fs::read(d1.path().join(&name)).unwrap(), fs::read(d2.path().join(&name)).unwrap());
            }
            let mask = read_mask(&d1.path().join(e.mask_name())).unwrap();
            assert_eq!(mask, generate_scene(e.seed, 32).unwrap().mask);
            read_homography(&d1.path().join(e.homography_name())).unwrap();
        }
    }
}
