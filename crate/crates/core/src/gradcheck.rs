//! Central finite-difference checks of every differentiable op and loss.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    detection_loss, feature_consistency_loss, intra_class_ap_loss, sample_triplets, triplet_loss,
    LabeledDescriptorBatch, LossConfig,
};
use crate::raster::Raster;
use crate::rng::stream;
use crate::semantics::Category;
use crate::teacher::TeacherFeatures;
use crate::tensor::{Graph, ReduceKind, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Random instances per case.
    pub trials: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Redraws allowed when an instance sits on a kink.
    pub max_resamples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            step: 1e-5,
            rel_tol: 1e-3,
            abs_tol: 1e-6,
            max_resamples: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub resampled: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradCheckReport {
    pub fn instances(&self) -> usize {
        self.cases.iter().map(|c| c.trials).sum()
    }

    pub fn failures(&self) -> usize {
        self.cases.iter().map(|c| c.failures).sum()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(
                f,
                "{:<20} {} trials={} failures={} resampled={} max_rel_err={:.3e}",
                c.name,
                if c.failures == 0 { "ok" } else { "FAIL" },
                c.trials,
                c.failures,
                c.resampled,
                c.max_rel_error
            )?;
        }
        write!(f, "instances={} failures={}", self.instances(), self.failures())
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

type Maker = fn(&mut ChaCha8Rng) -> Instance;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

fn inst(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        build: Box::new(build),
    }
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 2] {
    [rng.gen_range(1..=5), rng.gen_range(1..=6)]
}

fn binary_case(rng: &mut ChaCha8Rng, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Instance {
    let s = dims(rng);
    let b = if rng.gen_bool(0.25) {
        Tensor::scalar(rng.gen_range(-1.0..1.0))
    } else {
        uniform(rng, &s, -1.0, 1.0)
    };
    inst(vec![uniform(rng, &s, -1.0, 1.0), b], move |g, v| f(g, v[0], v[1]))
}

fn unary_case(rng: &mut ChaCha8Rng, lo: f64, hi: f64, f: fn(&mut Graph, Var) -> Result<Var>) -> Instance {
    let s = dims(rng);
    inst(vec![uniform(rng, &s, lo, hi)], move |g, v| f(g, v[0]))
}

fn labeled_rows(rng: &mut ChaCha8Rng, n: usize, classes: u8) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| (i % classes as usize) as u8 + 1).collect();
    labels.shuffle(rng);
    labels
}

fn cases() -> Vec<(&'static str, Maker)> {
    vec![
        ("add", |r| binary_case(r, Graph::add)),
        ("sub", |r| binary_case(r, Graph::sub)),
        ("mul", |r| binary_case(r, Graph::mul)),
        ("relu", |r| unary_case(r, -1.0, 1.0, |g, a| Ok(g.relu(a)))),
        ("sigmoid", |r| unary_case(r, -3.0, 3.0, |g, a| Ok(g.sigmoid(a)))),
        ("exp", |r| unary_case(r, -2.0, 2.0, |g, a| Ok(g.exp(a)))),
        ("abs", |r| unary_case(r, -1.0, 1.0, |g, a| Ok(g.abs(a)))),
        ("log", |r| unary_case(r, 0.2, 3.0, Graph::log)),
        ("sqrt", |r| unary_case(r, 0.2, 3.0, Graph::sqrt)),
        ("add_scalar", |r| unary_case(r, -1.0, 1.0, |g, a| Ok(g.add_scalar(a, 0.7)))),
        ("mul_scalar", |r| unary_case(r, -1.0, 1.0, |g, a| Ok(g.mul_scalar(a, -1.3)))),
        ("neg", |r| unary_case(r, -1.0, 1.0, |g, a| Ok(g.neg(a)))),
        ("clamp", |r| unary_case(r, -1.0, 1.0, |g, a| Ok(g.clamp(a, -0.5, 0.4)))),
        ("reduce_sum", |r| reduce_case(r, ReduceKind::Sum)),
        ("reduce_mean", |r| reduce_case(r, ReduceKind::Mean)),
        ("reduce_max", |r| reduce_case(r, ReduceKind::Max)),
        ("reshape", |r| {
            let s = dims(r);
            let t = uniform(r, &s, -1.0, 1.0);
            inst(vec![t], move |g, v| g.reshape(v[0], vec![s[1], s[0]]))
        }),
        ("transpose", |r| unary_case(r, -1.0, 1.0, Graph::transpose)),
        ("matmul", |r| {
            let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &[k, n], -1.0, 1.0);
            inst(vec![a, b], |g, v| g.matmul(v[0], v[1]))
        }),
        ("conv2d", conv_case),
        ("upsample_bilinear", |r| {
            let (c, h, w) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
            let f = r.gen_range(2..=4);
            inst(vec![uniform(r, &[c, h, w], -1.0, 1.0)], move |g, v| g.upsample_bilinear(v[0], f))
        }),
        ("sample_bilinear", |r| {
            let (c, h, w) = (r.gen_range(1..=3), r.gen_range(2..=4), r.gen_range(2..=4));
            let pts: Vec<(f64, f64)> = (0..r.gen_range(1..=5))
                .map(|_| (r.gen_range(-0.5..w as f64), r.gen_range(-0.5..h as f64)))
                .collect();
            inst(vec![uniform(r, &[c, h, w], -1.0, 1.0)], move |g, v| g.sample_bilinear(v[0], &pts))
        }),
        ("normalize_rows", |r| unary_case(r, -1.0, 1.0, Graph::normalize_rows)),
        ("gather_rows", |r| {
            let s = dims(r);
            let rows: Vec<usize> = (0..r.gen_range(1..=6)).map(|_| r.gen_range(0..s[0])).collect();
            inst(vec![uniform(r, &s, -1.0, 1.0)], move |g, v| g.gather_rows(v[0], &rows))
        }),
        ("concat_rows", |r| {
            let d = r.gen_range(1..=4);
            let (na, nb) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let a = uniform(r, &[na, d], -1.0, 1.0);
            let b = uniform(r, &[nb, d], -1.0, 1.0);
            inst(vec![a, b], |g, v| g.concat_rows(v))
        }),
        ("detection_loss", |r| {
            let (h, w) = (r.gen_range(2..=6), r.gen_range(2..=6));
            let rel = Raster::from_fn(w, h, |_, _| r.gen_range(0.0..1.0));
            let sta = Raster::from_fn(w, h, |_, _| Category::ALL[r.gen_range(0..4)].default_stability());
            inst(vec![uniform(r, &[h, w], -3.0, 3.0)], move |g, v| {
                let p = g.sigmoid(v[0]);
                detection_loss(g, p, &rel, &sta)
            })
        }),
        ("inter_class_loss", |r| {
            let (n, d) = (r.gen_range(6..=12), r.gen_range(2..=5));
            let classes = r.gen_range(2..=3);
            let labels = labeled_rows(r, n, classes);
            let trips = sample_triplets(&labels, 32, r).expect("two labels");
            let margin = LossConfig::default().margin;
            inst(vec![uniform(r, &[n, d], -1.0, 1.0)], move |g, v| {
                let x = g.normalize_rows(v[0])?;
                triplet_loss(g, x, &trips, margin)
            })
        }),
        ("intra_class_ap_loss", intra_case),
        ("feature_consistency", |r| {
            let s0 = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
            let s1 = [r.gen_range(1..=3), r.gen_range(1..=2), r.gen_range(1..=2)];
            let teacher = TeacherFeatures {
                maps: vec![uniform(r, &s0, -1.0, 1.0), uniform(r, &s1, -1.0, 1.0)],
            };
            let taps = vec![uniform(r, &s0, -1.0, 1.0), uniform(r, &s1, -1.0, 1.0)];
            inst(taps, move |g, v| feature_consistency_loss(g, v, &teacher))
        }),
    ]
}

fn reduce_case(rng: &mut ChaCha8Rng, kind: ReduceKind) -> Instance {
    let s = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let axes: Vec<usize> = match rng.gen_range(0..4) {
        0 => vec![],
        1 => vec![0],
        2 => vec![1, 2],
        _ => vec![2],
    };
    inst(vec![uniform(rng, &s, -1.0, 1.0)], move |g, v| g.reduce(kind, v[0], &axes))
}

fn conv_case(rng: &mut ChaCha8Rng) -> Instance {
    let (c_in, c_out) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let (h, w) = (rng.gen_range(3..=4), 3);
    let stride = rng.gen_range(1..=2);
    let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
    let mut inputs = vec![
        uniform(rng, &[c_in, h, w], -1.0, 1.0),
        uniform(rng, &[c_out, c_in, k, k], -1.0, 1.0),
    ];
    let with_bias = rng.gen_bool(0.5);
    if with_bias {
        inputs.push(uniform(rng, &[c_out], -1.0, 1.0));
    }
    inst(inputs, move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad))
}

fn intra_case(rng: &mut ChaCha8Rng) -> Instance {
    let (m, d) = (rng.gen_range(4..=7), rng.gen_range(2..=4));
    let half = labeled_rows(rng, m, 2);
    let labels: Vec<u8> = half.iter().chain(&half).copied().collect();
    let positions: Vec<(f64, f64)> = (0..2 * m).map(|i| ((i % m) as f64 * 8.0, 0.0)).collect();
    let image_id: Vec<u8> = (0..2 * m).map(|i| (i / m) as u8).collect();
    let positive: Vec<Option<usize>> = (0..2 * m).map(|i| Some((i + m) % (2 * m))).collect();
    let reliabilities: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(0.1..1.0)).collect();
    let cfg = LossConfig::default();
    inst(vec![uniform(rng, &[2 * m, d], -1.0, 1.0)], move |g, v| {
        let batch = LabeledDescriptorBatch {
            descriptors: g.normalize_rows(v[0])?,
            labels: labels.clone(),
            reliabilities: reliabilities.clone(),
            image_id: image_id.clone(),
            positions: positions.clone(),
            positive: positive.clone(),
        };
        Ok(intra_class_ap_loss(g, &batch, &cfg)?.0)
    })
}

/// `Σ w·out` so non-scalar outputs are checked through a random projection.
fn scalarize(g: &mut Graph, out: Var, proj: &Tensor) -> Result<Var> {
    let p = g.constant(proj.clone());
    let m = g.mul(out, p)?;
    Ok(g.sum(m))
}

fn evaluate(inst: &Instance, inputs: &[Tensor], proj: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars)?;
    let s = scalarize(&mut g, out, proj)?;
    g.value(s).item()
}

enum Verdict {
    Checked { max_rel: f64, ok: bool },
    Kink,
}

fn check(inst: &Instance, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Verdict> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (inst.build)(&mut g, &vars)?;
    let proj = uniform(rng, g.shape(out), 0.5, 1.5);
    let s = scalarize(&mut g, out, &proj)?;
    let f0 = g.value(s).item()?;
    g.backward(s)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
        .collect();

    let h = cfg.step;
    let mut max_rel: f64 = 0.0;
    let mut ok = true;
    let mut inputs = inst.inputs.clone();
    for (k, ga) in analytic.iter().enumerate() {
        for (i, &a) in ga.iter().enumerate() {
            let x = inputs[k].data()[i];
            inputs[k].data_mut()[i] = x + h;
            let fp = evaluate(inst, &inputs, &proj)?;
            inputs[k].data_mut()[i] = x - h;
            let fm = evaluate(inst, &inputs, &proj)?;
            inputs[k].data_mut()[i] = x;
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-4 {
                return Ok(Verdict::Kink);
            }
            let num = (fp - fm) / (2.0 * h);
            let scale = a.abs().max(num.abs());
            let err = (a - num).abs();
            if scale > 0.0 {
                max_rel = max_rel.max(err / scale);
            }
            if err > cfg.rel_tol * scale + cfg.abs_tol {
                ok = false;
            }
        }
    }
    Ok(Verdict::Checked { max_rel, ok })
}

/// Run every case `cfg.trials` times on freshly drawn instances of at most 64 elements.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.trials == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("grad-check needs trials > 0 and a positive step".into()));
    }
    let mut reports = Vec::new();
    for (ci, (name, make)) in cases().into_iter().enumerate() {
        let mut rep = CaseReport {
            name,
            trials: 0,
            failures: 0,
            resampled: 0,
            max_rel_error: 0.0,
        };
        for trial in 0..cfg.trials {
            for attempt in 0..=cfg.max_resamples {
                let mut rng = stream(&[cfg.seed, ci as u64, trial as u64, attempt as u64]);
                let inst = make(&mut rng);
                debug_assert!(inst.inputs.iter().map(Tensor::numel).sum::<usize>() <= 64);
                match check(&inst, cfg, &mut rng)? {
                    Verdict::Kink if attempt < cfg.max_resamples => rep.resampled += 1,
                    Verdict::Kink => {
                        rep.trials += 1;
                        rep.failures += 1;
                    }
                    Verdict::Checked { max_rel, ok } => {
                        rep.trials += 1;
                        rep.failures += usize::from(!ok);
                        rep.max_rel_error = rep.max_rel_error.max(max_rel);
                        break;
                    }
                }
            }
        }
        reports.push(rep);
    }
    Ok(GradCheckReport { cases: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let report = run(&GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.instances() >= 100);
    }

    #[test]
    fn instances_stay_small() {
        for (name, make) in cases() {
            for s in 0..20 {
                let inst = make(&mut stream(&[s]));
                let n: usize = inst.inputs.iter().map(Tensor::numel).sum();
                assert!(n <= 64, "{name}: {n} elements");
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let inst = inst(vec![Tensor::from_vec(vec![0.3, -0.7])], |g, v| {
            let x = g.value(v[0]).clone();
            let y = x.data().iter().map(|a| a * a).sum::<f64>();
            Ok(g.custom(&[v[0]], Tensor::scalar(y), Box::new(|_| vec![vec![1.0, 1.0]])))
        });
        let cfg = GradCheckConfig::default();
        match check(&inst, &cfg, &mut stream(&[1])).unwrap() {
            Verdict::Checked { ok, .. } => assert!(!ok),
            Verdict::Kink => panic!("smooth function flagged as kink"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GradCheckConfig { trials: 0, ..GradCheckConfig::default() };
        assert!(matches!(run(&cfg), Err(Error::Config(_))));
    }
}
