//! Optimization loop: Adam with decoupled weight decay over warped scene pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{decode_manifest, parse_key_values, read_mask, read_pgm};
use crate::losses::{
    build_intra_batches, descriptor_loss, detection_loss, feature_consistency_loss, keypoint_grid, total_loss,
    LossConfig, PairSide,
};
use crate::net::{forward, init_weights, NetworkConfig, NetworkWeights};
use crate::raster::{Raster, ReliabilityMap};
use crate::rng::stream;
use crate::semantics::{stability_map, LabelTaxonomy};
use crate::synth::{gt_correspondence, random_photometric, random_warp, warp_pair, Scene};
use crate::teacher::{corner_reliability, teacher_features, TeacherFeatures, DEFAULT_HARRIS_K, DEFAULT_SIGMA};
use crate::tensor::{Graph, Tensor};

/// Which semantic terms are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Stability-weighted detection target.
    pub sd: bool,
    /// Label-restricted AP and the inter-class term.
    pub ss: bool,
    /// Feature consistency with the teacher.
    pub sf: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation { sd: false, ss: false, sf: false };
    pub const SD: Ablation = Ablation { sd: true, ss: false, sf: false };
    pub const SD_SS: Ablation = Ablation { sd: true, ss: true, sf: false };
    pub const FULL: Ablation = Ablation { sd: true, ss: true, sf: true };

    /// Loss weights with the disabled terms removed.
    pub fn apply(&self, base: &LossConfig) -> LossConfig {
        let mut cfg = base.clone();
        if !self.ss {
            cfg.intra_same_label = false;
            cfg.w_inter = 0.0;
        }
        if !self.sf {
            cfg.w_feat = 0.0;
        }
        cfg
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.sd, "SD"), (self.ss, "SS"), (self.sf, "SF")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect();
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub net: NetworkConfig,
    pub ablation: Ablation,
    /// Appearance change of unstable classes in training pairs.
    pub volatility: f64,
    /// Spacing of descriptor samples in pixels.
    pub grid_stride: usize,
    pub teacher_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 4e-4,
            seed: 0,
            loss: LossConfig::default(),
            net: NetworkConfig::default(),
            ablation: Ablation::FULL,
            volatility: 1.0,
            grid_stride: 8,
            teacher_seed: 7,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("adam betas must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.volatility) {
            return Err(Error::Config("volatility must lie in [0, 1]".into()));
        }
        if self.grid_stride == 0 {
            return Err(Error::Config("grid_stride must be positive".into()));
        }
        self.loss.validate()?;
        self.net.validate()
    }

    /// Defaults overridden by `key = value` lines.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_key_values(text)? {
            let v = v.as_str();
            match k.as_str() {
                "epochs" => c.epochs = parse(&k, v)?,
                "batch_size" => c.batch_size = parse(&k, v)?,
                "lr" | "learning_rate" => c.lr = parse(&k, v)?,
                "beta1" | "adam_beta1" => c.beta1 = parse(&k, v)?,
                "beta2" | "adam_beta2" => c.beta2 = parse(&k, v)?,
                "weight_decay" => c.weight_decay = parse(&k, v)?,
                "seed" => c.seed = parse(&k, v)?,
                "margin" => c.loss.margin = parse(&k, v)?,
                "w_inter" => c.loss.w_inter = parse(&k, v)?,
                "w_intra" => c.loss.w_intra = parse(&k, v)?,
                "w_det" => c.loss.w_det = parse(&k, v)?,
                "w_desc" => c.loss.w_desc = parse(&k, v)?,
                "w_feat" => c.loss.w_feat = parse(&k, v)?,
                "ap_bins" => c.loss.ap_bins = parse(&k, v)?,
                "triplets_per_batch" => c.loss.triplets_per_batch = parse(&k, v)?,
                "samples_per_class" => c.loss.samples_per_class = parse(&k, v)?,
                "exclusion_radius" => c.loss.exclusion_radius = parse(&k, v)?,
                "base_channels" => c.net.base_channels = parse(&k, v)?,
                "descriptor_dim" => c.net.descriptor_dim = parse(&k, v)?,
                "downsample" => c.net.downsample = parse(&k, v)?,
                "resblocks" => c.net.resblocks = parse(&k, v)?,
                "sd" => c.ablation.sd = parse_bool(&k, v)?,
                "ss" => c.ablation.ss = parse_bool(&k, v)?,
                "sf" => c.ablation.sf = parse_bool(&k, v)?,
                "volatility" => c.volatility = parse(&k, v)?,
                "grid_stride" => c.grid_stride = parse(&k, v)?,
                "teacher_seed" => c.teacher_seed = parse(&k, v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// First and second moment estimates per tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update with decoupled decay `w ← w·(1 − lr·wd)`.
pub fn adam_step(
    weights: &mut NetworkWeights,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let t = weights
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown tensor {name}")))?;
        if g.len() != t.numel() {
            return Err(Error::Shape(format!("gradient of {name}: {} vs {}", g.len(), t.numel())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, tensor) in weights.tensors.iter_mut() {
        let n = tensor.numel();
        let zero = vec![0.0; n];
        let g = grads.get(name).unwrap_or(&zero);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            *w = *w * decay - cfg.lr * step;
        }
    }
    Ok(())
}

/// Per-scene supervision computed once.
struct Prepared {
    scene: Scene,
    reliability: ReliabilityMap,
    stability: Raster<f64>,
    teacher: TeacherFeatures,
}

/// Mean loss components of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub det: f64,
    pub inter: Option<f64>,
    pub intra: Option<f64>,
    pub feat: Option<f64>,
    pub total: f64,
    pub pairs: usize,
    /// Pairs whose descriptor terms were undefined.
    pub desc_skipped: usize,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        write!(
            f,
            "epoch {} det {:.6} inter {} intra {} feat {} total {:.6} pairs {} desc_skipped {}",
            self.epoch,
            self.det,
            opt(self.inter),
            opt(self.intra),
            opt(self.feat),
            self.total,
            self.pairs,
            self.desc_skipped
        )
    }
}

struct PairResult {
    grads: BTreeMap<String, Vec<f64>>,
    det: f64,
    inter: Option<f64>,
    intra: Option<f64>,
    feat: Option<f64>,
    total: f64,
}

fn prepare(scene: &Scene, cfg: &TrainConfig, tax: &LabelTaxonomy) -> Result<Prepared> {
    let (w, h) = scene.image.dims();
    cfg.net.check_input(w, h)?;
    let reliability = corner_reliability(&scene.image, DEFAULT_SIGMA, DEFAULT_HARRIS_K)?;
    let stability = if cfg.ablation.sd {
        stability_map(&scene.mask, tax)?
    } else {
        Raster::filled(w, h, 1.0)
    };
    let teacher = teacher_features(&scene.mask, &cfg.net.tap_shapes(w, h), cfg.teacher_seed);
    Ok(Prepared {
        scene: scene.clone(),
        reliability,
        stability,
        teacher,
    })
}

fn pair_step(
    weights: &NetworkWeights,
    a: &Prepared,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    tax: &LabelTaxonomy,
    ids: [u64; 3],
) -> Result<PairResult> {
    let size = a.scene.size();
    let mut rng = stream(&[cfg.seed, ids[0], ids[1], ids[2]]);
    let warp = random_warp(&mut rng, size);
    let photo = random_photometric(&mut rng, cfg.volatility);
    let pair = warp_pair(&a.scene, &warp, &photo, rand::Rng::gen(&mut rng))?;
    let b = prepare(&pair.b, cfg, tax)?;

    let mut g = Graph::new();
    let bound = weights.bind(&mut g, true);
    let out_a = forward(&mut g, &a.scene.image, &bound)?;
    let out_b = forward(&mut g, &b.scene.image, &bound)?;

    let det_a = detection_loss(&mut g, out_a.score, &a.reliability, &a.stability)?;
    let det_b = detection_loss(&mut g, out_b.score, &b.reliability, &b.stability)?;
    let det_sum = g.add(det_a, det_b)?;
    let det = g.mul_scalar(det_sum, 0.5);

    let to_map = |g: &Graph, v| Raster::new(size, size, g.value(v).data().to_vec());
    let (score_a, score_b) = (to_map(&g, out_a.score)?, to_map(&g, out_b.score)?);
    let side_a = PairSide {
        descriptors: out_a.descriptors,
        score: &score_a,
        mask: &a.scene.mask,
    };
    let side_b = PairSide {
        descriptors: out_b.descriptors,
        score: &score_b,
        mask: &b.scene.mask,
    };
    let grid = keypoint_grid(size, size, cfg.grid_stride);
    let desc = match build_intra_batches(
        &mut g,
        &side_a,
        &side_b,
        |x, y| gt_correspondence(&pair, x, y),
        &grid,
        cfg.net.downsample,
    ) {
        Ok(batch) => match descriptor_loss(&mut g, &batch, loss_cfg, &mut rng) {
            Ok(d) => Some(d),
            Err(Error::InsufficientClasses { .. } | Error::UndefinedAp(_) | Error::Domain(_)) => None,
            Err(e) => return Err(e),
        },
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };

    let feat = if loss_cfg.w_feat > 0.0 {
        let fa = feature_consistency_loss(&mut g, &out_a.taps, &a.teacher)?;
        let fb = feature_consistency_loss(&mut g, &out_b.taps, &b.teacher)?;
        let s = g.add(fa, fb)?;
        Some(g.mul_scalar(s, 0.5))
    } else {
        None
    };
    let total = total_loss(&mut g, Some(det), desc.as_ref().map(|d| d.total), feat, loss_cfg)?;
    g.backward(total)?;

    let grads = bound
        .vars
        .iter()
        .map(|(name, &v)| {
            let grad = g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec);
            (name.clone(), grad)
        })
        .collect();
    let val = |v| g.value(v).data()[0];
    Ok(PairResult {
        grads,
        det: val(det),
        inter: desc.as_ref().and_then(|d| d.inter).map(val),
        intra: desc.as_ref().and_then(|d| d.intra).map(val),
        feat: feat.map(val),
        total: val(total),
    })
}

fn mean_opt(vals: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = vals.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub log: Vec<EpochLog>,
}

/// Train on in-memory scenes; `on_epoch` sees each epoch's log line as it completes.
pub fn train_scenes(
    cfg: &TrainConfig,
    scenes: &[Scene],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let tax = LabelTaxonomy::synthetic();
    let loss_cfg = cfg.ablation.apply(&cfg.loss);
    let prepared = scenes
        .par_iter()
        .map(|s| prepare(s, cfg, &tax))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = init_weights(&cfg.net, cfg.seed)?;
    let mut state = AdamState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(&[cfg.seed, 0x5348_5546, epoch as u64]));
        let mut results: Vec<PairResult> = Vec::with_capacity(scenes.len());
        let mut skipped = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &s)| {
                    pair_step(&weights, &prepared[s], cfg, &loss_cfg, &tax, [epoch as u64, step as u64, i as u64])
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &batch {
                for (name, g) in &r.grads {
                    let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.values_mut().flatten().for_each(|v| *v *= scale);
            adam_step(&mut weights, &grads, &mut state, cfg)?;
            skipped += batch.iter().filter(|r| r.inter.is_none() && r.intra.is_none()).count();
            results.extend(batch.into_iter().map(|mut r| {
                r.grads.clear();
                r
            }));
        }
        let n = results.len() as f64;
        let collect = |f: fn(&PairResult) -> Option<f64>| results.iter().map(f).collect::<Vec<_>>();
        let entry = EpochLog {
            epoch: epoch + 1,
            det: results.iter().map(|r| r.det).sum::<f64>() / n,
            inter: mean_opt(&collect(|r| r.inter)),
            intra: mean_opt(&collect(|r| r.intra)),
            feat: mean_opt(&collect(|r| r.feat)),
            total: results.iter().map(|r| r.total).sum::<f64>() / n,
            pairs: results.len(),
            desc_skipped: if loss_cfg.w_inter > 0.0 || loss_cfg.w_intra > 0.0 { skipped } else { 0 },
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { weights, log })
}

/// Load the scenes listed in `dir/manifest.txt`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let manifest = decode_manifest(&text)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let image = read_pgm(&dir.join(e.image_name()))?;
            let mask = read_mask(&dir.join(e.mask_name()))?;
            if !image.same_dims(&mask) {
                return Err(Error::Format(format!("{}: image and mask sizes differ", e.image_name())));
            }
            Ok(Scene {
                image,
                mask,
                seed: e.seed,
            })
        })
        .collect()
}

pub fn train(cfg: &TrainConfig, dir: &Path, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    train_scenes(cfg, &load_dataset(dir)?, on_epoch)
}

/// All-zero gradients shaped like `weights`.
pub fn zero_grads(weights: &NetworkWeights) -> BTreeMap<String, Vec<f64>> {
    weights
        .tensors
        .iter()
        .map(|(k, t): (&String, &Tensor)| (k.clone(), vec![0.0; t.numel()]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            net: NetworkConfig {
                base_channels: 4,
                descriptor_dim: 8,
                downsample: 4,
                resblocks: 1,
            },
            loss: LossConfig {
                triplets_per_batch: 64,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = tiny();
        let mut w = init_weights(&cfg.net, 1).unwrap();
        let before = w.clone();
        let mut st = AdamState::default();
        let grads = zero_grads(&w);
        adam_step(&mut w, &grads, &mut st, &cfg).unwrap();
        let f = 1.0 - cfg.lr * cfg.weight_decay;
        for (k, t) in &w.tensors {
            for (a, b) in t.data().iter().zip(before.tensors[k].data()) {
                assert_eq!(*a, b * f);
            }
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..tiny()
        };
        let mut w = init_weights(&cfg.net, 1).unwrap();
        let mut grads = zero_grads(&w);
        grads.values_mut().flatten().for_each(|g| *g = 0.37);
        let mut st = AdamState::default();
        let name = "det.bias".to_string();
        let mut last = 0.0;
        for _ in 0..1000 {
            let prev = w.tensors[&name].data()[0];
            adam_step(&mut w, &grads, &mut st, &cfg).unwrap();
            last = prev - w.tensors[&name].data()[0];
        }
        assert!((last - cfg.lr).abs() < 1e-6 * cfg.lr, "{last}");
    }

    #[test]
    fn non_finite_gradient_named() {
        let cfg = tiny();
        let mut w = init_weights(&cfg.net, 1).unwrap();
        let mut grads = zero_grads(&w);
        grads.get_mut("enc1a.bias").unwrap()[0] = f64::NAN;
        let before = w.clone();
        match adam_step(&mut w, &grads, &mut AdamState::default(), &cfg) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "enc1a.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(w, before);
    }

    #[test]
    fn ablation_weights() {
        let base = LossConfig::default();
        let b = Ablation::BASELINE.apply(&base);
        assert_eq!((b.w_inter, b.w_feat, b.intra_same_label), (0.0, 0.0, false));
        assert_eq!(Ablation::FULL.apply(&base), base);
        let sdss = Ablation::SD_SS.apply(&base);
        assert_eq!((sdss.w_feat, sdss.w_inter), (0.0, 1.0));
        assert_eq!(Ablation::SD_SS.to_string(), "SD+SS");
        assert_eq!(Ablation::BASELINE.to_string(), "baseline");
    }

    #[test]
    fn config_text_overrides() {
        let c = TrainConfig::from_config_text("epochs = 3\nsd = off\nlr = 0.01\nbase_channels = 8").unwrap();
        assert_eq!((c.epochs, c.ablation.sd, c.lr, c.net.base_channels), (3, false, 0.01, 8));
        assert!(TrainConfig::from_config_text("beta1 = 1.0").is_err());
        assert!(TrainConfig::from_config_text("colour = red").is_err());
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let scenes: Vec<Scene> = (0..2).map(|s| generate_scene(s, 32).unwrap()).collect();
        let cfg = tiny();
        let a = train_scenes(&cfg, &scenes, |_| {}).unwrap();
        let b = train_scenes(&cfg, &scenes, |_| {}).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
        for e in &a.log {
            assert!(e.total.is_finite() && e.det.is_finite());
            assert!(e.feat.is_some() && e.intra.is_some());
        }
        assert!(matches!(train_scenes(&cfg, &[], |_| {}), Err(Error::Config(_))));
    }
}
