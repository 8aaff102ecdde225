//! Training objectives: detection, inter-class triplet, intra-class AP,
//! feature consistency and their weighted combinations.

mod ap;
mod batch;

use rand::Rng;

pub use ap::{exact_ap, quantized_ap, quantized_ap_with_grad};
pub use batch::{
    build_intra_batches, keypoint_grid, sample_triplets, LabeledDescriptorBatch, PairSide, Triplet,
};

use crate::error::{shape_err, Error, Result};
use crate::raster::{ReliabilityMap, StabilityMap};
use crate::teacher::TeacherFeatures;
use crate::tensor::{Graph, ReduceKind, Tensor, Var};

const PROB_EPS: f64 = 1e-7;
const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub w_inter: f64,
    pub w_intra: f64,
    pub w_det: f64,
    pub w_desc: f64,
    pub w_feat: f64,
    pub ap_bins: usize,
    pub triplets_per_batch: usize,
    /// Cap on AP queries per class and batch.
    pub samples_per_class: usize,
    /// Radius in pixels around the query and its positive inside which
    /// candidates are not used as negatives.
    pub exclusion_radius: f64,
    /// Restrict AP candidates to the query's label.
    pub intra_same_label: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            w_inter: 1.0,
            w_intra: 0.5,
            w_det: 1.0,
            w_desc: 1.0,
            w_feat: 1.0,
            ap_bins: 25,
            triplets_per_batch: 512,
            samples_per_class: 64,
            exclusion_radius: 4.0,
            intra_same_label: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        for (name, w) in [
            ("w_inter", self.w_inter),
            ("w_intra", self.w_intra),
            ("w_det", self.w_det),
            ("w_desc", self.w_desc),
            ("w_feat", self.w_feat),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        if self.ap_bins < 2 {
            return Err(Error::Config(format!("ap_bins must be >= 2, got {}", self.ap_bins)));
        }
        if self.triplets_per_batch == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("triplets_per_batch and samples_per_class must be positive".into()));
        }
        if !(self.exclusion_radius >= 0.0) {
            return Err(Error::Config("exclusion_radius must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of `pred` against a fixed soft target.
pub fn bce_loss(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if target.len() != g.value(pred).numel() {
        return shape_err(format!("target of {} values for prediction {shape:?}", target.len()));
    }
    let p = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p)?;
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.log(q)?;
    let t = g.constant(Tensor::new(shape.clone(), target.to_vec())?);
    let t_inv = g.constant(Tensor::new(shape, target.iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(t, log_p)?;
    let b = g.mul(t_inv, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll);
    Ok(g.neg(m))
}

/// BCE between the predicted score map and `S_rel ⊙ S_sta`.
pub fn detection_loss(
    g: &mut Graph,
    pred: Var,
    reliability: &ReliabilityMap,
    stability: &StabilityMap,
) -> Result<Var> {
    if !reliability.same_dims(stability) {
        return shape_err(format!(
            "reliability {:?} vs stability {:?}",
            reliability.dims(),
            stability.dims()
        ));
    }
    let (w, h) = reliability.dims();
    if g.shape(pred) != [h, w] {
        return shape_err(format!("prediction {:?} vs maps {h}x{w}", g.shape(pred)));
    }
    let target: Vec<f64> = reliability
        .data()
        .iter()
        .zip(stability.data())
        .map(|(r, s)| r * s)
        .collect();
    bce_loss(g, pred, &target)
}

/// Mean triplet hinge `max(0, |a−p| − |a−n| + m)` over the given triplets.
pub fn triplet_loss(g: &mut Graph, descriptors: Var, triplets: &[Triplet], margin: f64) -> Result<Var> {
    if triplets.is_empty() {
        return Err(Error::Domain("no triplets".into()));
    }
    let pick = |k: usize| -> Vec<usize> {
        triplets
            .iter()
            .map(|t| match k {
                0 => t.0,
                1 => t.1,
                _ => t.2,
            })
            .collect()
    };
    let a = g.gather_rows(descriptors, &pick(0))?;
    let p = g.gather_rows(descriptors, &pick(1))?;
    let n = g.gather_rows(descriptors, &pick(2))?;
    let d_ap = row_distance(g, a, p)?;
    let d_an = row_distance(g, a, n)?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

fn row_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.reduce(ReduceKind::Sum, sq, &[1])?;
    let s = g.add_scalar(s, DIST_EPS);
    g.sqrt(s)
}

/// Triplet loss over `cfg.triplets_per_batch` uniformly sampled triplets.
pub fn inter_class_loss(
    g: &mut Graph,
    batch: &LabeledDescriptorBatch,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let triplets = sample_triplets(&batch.labels, cfg.triplets_per_batch, rng)?;
    triplet_loss(g, batch.descriptors, &triplets, cfg.margin)
}

/// Query bookkeeping of one intra-class AP evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntraStats {
    pub used: usize,
    pub skipped: usize,
}

struct Query {
    index: usize,
    candidates: Vec<usize>,
    positive: usize,
    coef: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn plan_queries(batch: &LabeledDescriptorBatch, cfg: &LossConfig) -> (Vec<Query>, IntraStats) {
    let n = batch.len();
    let mut stats = IntraStats::default();
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for i in 0..n {
        match batch.positive[i] {
            Some(p) if batch.labels[p] == batch.labels[i] => by_label[batch.labels[i] as usize].push(i),
            _ => stats.skipped += 1,
        }
    }
    let classes: Vec<&Vec<usize>> = by_label.iter().filter(|v| !v.is_empty()).collect();
    let c = classes.len() as f64;
    let r = cfg.exclusion_radius;
    let mut queries = Vec::new();
    for members in classes {
        let take = members.len().min(cfg.samples_per_class);
        // evenly spaced subset so both images of the pair stay represented
        let chosen: Vec<usize> = (0..take).map(|k| members[k * members.len() / take]).collect();
        stats.skipped += members.len() - take;
        for &i in &chosen {
            let p = batch.positive[i].expect("filtered above");
            let candidates: Vec<usize> = (0..n)
                .filter(|&j| {
                    if j == i {
                        return false;
                    }
                    if j == p {
                        return true;
                    }
                    if cfg.intra_same_label && batch.labels[j] != batch.labels[i] {
                        return false;
                    }
                    let near_query = batch.image_id[j] == batch.image_id[i]
                        && dist(batch.positions[j], batch.positions[i]) <= r;
                    let near_positive = batch.image_id[j] == batch.image_id[p]
                        && dist(batch.positions[j], batch.positions[p]) <= r;
                    !near_query && !near_positive
                })
                .collect();
            let coef = batch.reliabilities[i] / (c * take as f64);
            queries.push(Query {
                index: i,
                candidates,
                positive: p,
                coef,
            });
        }
        stats.used += take;
    }
    (queries, stats)
}

/// Reliability-weighted `1 − AP` over same-label candidates, averaged per
/// class and then over classes.
pub fn intra_class_ap_loss(
    g: &mut Graph,
    batch: &LabeledDescriptorBatch,
    cfg: &LossConfig,
) -> Result<(Var, IntraStats)> {
    let n = batch.len();
    if g.shape(batch.descriptors).len() != 2 || g.shape(batch.descriptors)[0] != n {
        return shape_err(format!(
            "descriptors {:?} for a batch of {n}",
            g.shape(batch.descriptors)
        ));
    }
    let (queries, stats) = plan_queries(batch, cfg);
    if queries.is_empty() {
        return Err(Error::UndefinedAp(format!("all {} queries skipped", stats.skipped)));
    }
    let dt = g.transpose(batch.descriptors)?;
    let sims = g.matmul(batch.descriptors, dt)?;
    let s = g.value(sims).data();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * n];
    for q in &queries {
        let scores: Vec<f64> = q.candidates.iter().map(|&j| s[q.index * n + j]).collect();
        let pos: Vec<bool> = q.candidates.iter().map(|&j| j == q.positive).collect();
        let (ap, d_ap) = quantized_ap_with_grad(&scores, &pos, cfg.ap_bins)?;
        loss += q.coef * (1.0 - ap);
        for (&j, d) in q.candidates.iter().zip(d_ap) {
            grad[q.index * n + j] -= q.coef * d;
        }
    }
    let out = g.custom(
        &[sims],
        Tensor::scalar(loss),
        Box::new(move |g_out| vec![grad.iter().map(|v| v * g_out[0]).collect()]),
    );
    Ok((out, stats))
}

/// Weighted descriptor objective and its parts.
pub struct DescriptorLoss {
    pub total: Var,
    pub inter: Option<Var>,
    pub intra: Option<Var>,
    pub stats: IntraStats,
}

/// `w_inter·L_inter + w_intra·L_intra`; a zero-weight term is not evaluated.
pub fn descriptor_loss(
    g: &mut Graph,
    batch: &LabeledDescriptorBatch,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<DescriptorLoss> {
    let inter = if cfg.w_inter > 0.0 {
        Some(inter_class_loss(g, batch, cfg, rng)?)
    } else {
        None
    };
    let (intra, stats) = if cfg.w_intra > 0.0 {
        let (v, st) = intra_class_ap_loss(g, batch, cfg)?;
        (Some(v), st)
    } else {
        (None, IntraStats::default())
    };
    let total = weighted_sum(g, &[(inter, cfg.w_inter), (intra, cfg.w_intra)])?;
    Ok(DescriptorLoss {
        total,
        inter,
        intra,
        stats,
    })
}

/// Mean over layers of the per-layer mean absolute difference to the teacher.
pub fn feature_consistency_loss(g: &mut Graph, taps: &[Var], teacher: &TeacherFeatures) -> Result<Var> {
    if taps.len() != teacher.maps.len() || taps.is_empty() {
        return shape_err(format!("{} taps vs {} teacher maps", taps.len(), teacher.maps.len()));
    }
    let mut terms = Vec::with_capacity(taps.len());
    for (&x, t) in taps.iter().zip(&teacher.maps) {
        if g.shape(x) != t.shape() {
            return shape_err(format!("tap {:?} vs teacher {:?}", g.shape(x), t.shape()));
        }
        let tc = g.constant(t.clone());
        let d = g.sub(x, tc)?;
        let a = g.abs(d);
        terms.push((Some(g.mean(a)), 1.0 / taps.len() as f64));
    }
    weighted_sum(g, &terms)
}

/// `w_det·L_det + w_desc·L_desc + w_feat·L_feat`, skipping absent terms.
pub fn total_loss(
    g: &mut Graph,
    det: Option<Var>,
    desc: Option<Var>,
    feat: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    weighted_sum(g, &[(det, cfg.w_det), (desc, cfg.w_desc), (feat, cfg.w_feat)])
}

fn weighted_sum(g: &mut Graph, terms: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let Some(v) = v else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { v } else { g.mul_scalar(v, w) };
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}
