//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semloc_core::detect::{fuse_reliability, topk_keypoints};
use semloc_core::eval::{category_fractions, extract, match_eval, ExtractOptions, MatchOptions};
use semloc_core::geometry::{ransac_homography, symmetric_transfer_error, Homography};
use semloc_core::gradcheck::{self, GradCheckConfig};
use semloc_core::io;
use semloc_core::losses::{exact_ap, quantized_ap};
use semloc_core::matching::{mnn_match, DescriptorSet};
use semloc_core::net::NetworkConfig;
use semloc_core::raster::Raster;
use semloc_core::semantics::synthetic_labels::{BUILDING, CAR, SKY, TREE};
use semloc_core::semantics::{stability_map, Category, LabelTaxonomy};
use semloc_core::synth::{generate_scene, random_photometric, random_warp, warp_pair, Scene};
use semloc_core::train::{train, train_scenes, Ablation, TrainConfig};
use semloc_core::{detect::Keypoint, Error};

/// Written to the raw stderr handle so the line survives output capture.
fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("[{id}] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- 1 ----------------------------------------------------------------

#[test]
fn gradient_suite() {
    let t = Instant::now();
    let report = gradcheck::run(&GradCheckConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = report.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = report.passed() && report.instances() >= 100 && report.cases.len() >= 20 && secs < 60.0;
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} cases, {} instances, {} failures, worst rel err {worst:.2e}, {secs:.2}s",
            report.cases.len(),
            report.instances(),
            report.failures()
        ),
    );
    assert!(pass, "{report}");
}

// ---- 2 ----------------------------------------------------------------

/// Brute-force AP: rank by descending score, ties by index.
fn oracle_ap(scores: &[f64], pos: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let (mut hits, mut sum) = (0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if pos[i] {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    sum / hits
}

fn ranking_instance(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.gen_range(2..=64);
    let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let p = r.gen_range(0.05..0.6);
    let mut pos: Vec<bool> = (0..n).map(|_| r.gen_bool(p)).collect();
    let k = r.gen_range(0..n);
    pos[k] = true;
    (scores, pos)
}

#[test]
fn ap_fidelity() {
    let mut r = rng(2);
    let mut worst_gap: f64 = 0.0;
    let mut fidelity_fail = 0;
    let mut oracle_mismatch = 0;
    for _ in 0..1000 {
        let (s, p) = ranking_instance(&mut r);
        let exact = oracle_ap(&s, &p);
        if (exact_ap(&s, &p).unwrap() - exact).abs() > 1e-12 {
            oracle_mismatch += 1;
        }
        let gap = (quantized_ap(&s, &p, 25).unwrap() - exact).abs();
        worst_gap = worst_gap.max(gap);
        if gap > 0.05 {
            fidelity_fail += 1;
        }
    }
    let mut monotone_fail = 0;
    for _ in 0..1000 {
        let (mut s, p) = ranking_instance(&mut r);
        let positives: Vec<usize> = (0..s.len()).filter(|&i| p[i]).collect();
        let i = *positives.choose(&mut r).unwrap();
        let before = 1.0 - quantized_ap(&s, &p, 25).unwrap();
        s[i] = r.gen_range(s[i]..=1.0);
        let after = 1.0 - quantized_ap(&s, &p, 25).unwrap();
        if after > before + 1e-12 {
            monotone_fail += 1;
        }
    }
    let pass = fidelity_fail == 0 && monotone_fail == 0 && oracle_mismatch == 0;
    verdict(
        2,
        "AP fidelity",
        pass,
        &format!(
            "{fidelity_fail}/1000 beyond 0.05 (worst {worst_gap:.3}), {monotone_fail}/1000 monotonicity violations, \
             {oracle_mismatch} exact_ap oracle mismatches"
        ),
    );
    assert!(pass);
}

// ---- 3 ----------------------------------------------------------------

#[test]
fn stability_semantics() {
    let tax = LabelTaxonomy::reference();
    let expected = [
        ("building", 1.0),
        ("tree", 0.5),
        ("plant", 0.5),
        ("sky", 0.1),
        ("car", 0.1),
        ("pedestrian", 0.1),
    ];
    let ids: Vec<u8> = expected.iter().map(|(n, _)| tax.id_of(n).unwrap()).collect();
    let mask = Raster::from_fn(6, 3, |x, _| ids[x]);
    let sta = stability_map(&mask, &tax).unwrap();
    let mut table_ok = true;
    for y in 0..3 {
        for (x, (_, v)) in expected.iter().enumerate() {
            table_ok &= sta.get(x, y) == *v;
        }
    }

    // Every (reliability level, category) combination on an 8×8 grid, under
    // several placements; all ordered pairs are compared.
    let levels: Vec<f64> = (0..16).map(|i| (i + 1) as f64 / 16.0).collect();
    let cats = [Category::Volatile, Category::Dynamic, Category::ShortTerm, Category::LongTerm];
    let mut cells: Vec<(f64, Category)> = Vec::new();
    for &l in &levels {
        for &c in &cats {
            cells.push((l, c));
        }
    }
    let mut r = rng(3);
    let mut pairs = 0;
    let mut dominance_fail = 0;
    for placement in 0..8 {
        if placement > 0 {
            cells.shuffle(&mut r);
        }
        let rel = Raster::from_fn(8, 8, |x, y| cells[y * 8 + x].0);
        let s = Raster::from_fn(8, 8, |x, y| cells[y * 8 + x].1.default_stability());
        let fused = fuse_reliability(&rel, &s).unwrap();
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by(|&a, &b| fused.data()[b].total_cmp(&fused.data()[a]).then(a.cmp(&b)));
        let rank: Vec<usize> = {
            let mut v = vec![0; 64];
            order.iter().enumerate().for_each(|(k, &i)| v[i] = k);
            v
        };
        for i in 0..64 {
            for j in 0..64 {
                let (ri, si) = (rel.data()[i], s.data()[i]);
                let (rj, sj) = (rel.data()[j], s.data()[j]);
                let dominates = ri >= rj && si >= sj && (ri > rj || si > sj);
                if dominates {
                    pairs += 1;
                    if rank[i] > rank[j] || (fused.data()[i] - ri * si).abs() > 0.0 {
                        dominance_fail += 1;
                    }
                }
            }
        }
    }
    let pass = table_ok && dominance_fail == 0;
    verdict(
        3,
        "stability semantics",
        pass,
        &format!("table values exact: {table_ok}; {pairs} dominance pairs, {dominance_fail} violations"),
    );
    assert!(pass);
}

// ---- 4 ----------------------------------------------------------------

#[test]
fn rerank_not_filter() {
    let tax = LabelTaxonomy::synthetic();
    let labels = [SKY, CAR, TREE, BUILDING];
    // 2×3 lattice of equal reliability peaks, every category assignment.
    let (w, h, step) = (30usize, 20usize, 10usize);
    let peaks: Vec<(usize, usize)> = (0..2).flat_map(|j| (0..3).map(move |i| (5 + i * step, 5 + j * step))).collect();
    let rel = Raster::from_fn(w, h, |x, y| if peaks.contains(&(x, y)) { 0.8 } else { 0.0 });
    let mut maps = 0;
    let mut fail = 0;
    for code in 0..4usize.pow(peaks.len() as u32) {
        let assign: Vec<u8> = (0..peaks.len()).map(|p| labels[(code / 4usize.pow(p as u32)) % 4]).collect();
        let long_term = assign.iter().filter(|&&l| l == BUILDING).count();
        if long_term == peaks.len() {
            continue;
        }
        let mask = Raster::from_fn(w, h, |x, y| {
            let (px, py) = ((x / step).min(2), (y / step).min(1));
            assign[py * 3 + px]
        });
        let sta = stability_map(&mask, &tax).unwrap();
        let fused = fuse_reliability(&rel, &sta).unwrap();
        let k = long_term + 1 + (code % (peaks.len() - long_term));
        let kps = topk_keypoints(&fused, k, 0.005, 4);
        maps += 1;
        let is_lt = |kp: &Keypoint| mask.get(kp.x as usize, kp.y as usize) == BUILDING;
        let has_lower = kps.iter().any(|kp| !is_lt(kp));
        let first_lower = kps.iter().position(|kp| !is_lt(kp)).unwrap_or(kps.len());
        let lt_after_lower = kps[first_lower..].iter().any(is_lt);
        let all_lt_kept = kps.iter().filter(|kp| is_lt(kp)).count() == long_term;
        let sorted = kps.windows(2).all(|p| {
            let s = |kp: &Keypoint| sta.get(kp.x as usize, kp.y as usize);
            s(&p[0]) >= s(&p[1])
        });
        if kps.len() != k || !has_lower || lt_after_lower || !all_lt_kept || !sorted {
            fail += 1;
        }
    }
    let pass = fail == 0 && maps > 0;
    verdict(
        4,
        "rerank not filter",
        pass,
        &format!("{maps} constructed maps, {fail} violations"),
    );
    assert!(pass);
}

// ---- 5 ----------------------------------------------------------------

fn random_set(r: &mut ChaCha8Rng, n: usize, d: usize, dup: bool) -> DescriptorSet {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    if dup && n > 2 {
        let (a, b) = (r.gen_range(0..n), r.gen_range(0..n));
        rows[b] = rows[a].clone();
    }
    let kps = (0..n).map(|i| Keypoint { x: i as f64, y: 0.0, score: 1.0 }).collect();
    DescriptorSet::new(kps, rows.concat(), d, n.max(1), 1).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// O(n²) double-argmin with first-index ties.
fn oracle_mnn(a: &DescriptorSet, b: &DescriptorSet) -> Vec<(usize, usize)> {
    let argmin = |f: &dyn Fn(usize) -> f64, n: usize| {
        let mut best = 0;
        for k in 1..n {
            if f(k) < f(best) {
                best = k;
            }
        }
        best
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        let j = argmin(&|j| dist(a.row(i), b.row(j)), b.len());
        let back = argmin(&|k| dist(a.row(k), b.row(j)), a.len());
        if back == i {
            out.push((i, j));
        }
    }
    out
}

#[test]
fn matching_correctness() {
    let mut r = rng(5);
    let mut oracle_fail = 0;
    let mut symmetry_fail = 0;
    let mut perm_fail = 0;
    for t in 0..500 {
        let (na, nb, d) = (r.gen_range(1..=40), r.gen_range(1..=40), r.gen_range(2..=16));
        let a = random_set(&mut r, na, d, t % 5 == 0);
        let b = random_set(&mut r, nb, d, t % 7 == 0);
        let m = mnn_match(&a, &b, None).unwrap();
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.a, p.b)).collect();
        let mut want = oracle_mnn(&a, &b);
        let mut got_sorted = got.clone();
        got_sorted.sort();
        want.sort();
        if got_sorted != want {
            oracle_fail += 1;
        }
        let mut swapped: Vec<(usize, usize)> =
            mnn_match(&b, &a, None).unwrap().pairs.iter().map(|p| (p.b, p.a)).collect();
        swapped.sort();
        if swapped != got_sorted {
            symmetry_fail += 1;
        }

        let mut perm: Vec<usize> = (0..na).collect();
        perm.shuffle(&mut r);
        let rows: Vec<f64> = perm.iter().flat_map(|&i| a.row(i).to_vec()).collect();
        let pb = DescriptorSet::new(a.keypoints.clone(), rows, d, a.width, a.height).unwrap();
        let pm = mnn_match(&a, &pb, None).unwrap();
        let distinct = (0..na).all(|i| (0..i).all(|j| a.row(i) != a.row(j)));
        if distinct {
            let ok = pm.pairs.len() == na && pm.pairs.iter().all(|p| perm[p.b] == p.a && p.distance == 0.0);
            if !ok {
                perm_fail += 1;
            }
        }
    }

    let h = Homography::new([[1.08, 0.05, 3.0], [-0.04, 0.93, -2.0], [2e-4, -1e-4, 1.0]]).unwrap();
    let src: Vec<(f64, f64)> = (0..60).map(|_| (r.gen_range(0.0..128.0), r.gen_range(0.0..128.0))).collect();
    let dst: Vec<(f64, f64)> = src.iter().map(|&p| h.apply(p).unwrap()).collect();
    let fit = ransac_homography(&src, &dst, 200, 3.0, 11).unwrap();
    let f_inv = fit.homography.inverse().unwrap();
    let max_err = src
        .iter()
        .zip(&dst)
        .map(|(&p, &q)| symmetric_transfer_error(&fit.homography, &f_inv, p, q))
        .fold(0.0, f64::max);
    let all_in = fit.inliers.iter().all(|&b| b);

    let mut o_src = Vec::new();
    let mut o_dst = Vec::new();
    let mut truth = Vec::new();
    for i in 0..80 {
        let p = (r.gen_range(0.0..128.0), r.gen_range(0.0..128.0));
        o_src.push(p);
        if i % 2 == 0 {
            o_dst.push(h.apply(p).unwrap());
            truth.push(true);
        } else {
            // gross outliers: at least 20 px from the true image
            let q = h.apply(p).unwrap();
            let ang = r.gen_range(0.0..std::f64::consts::TAU);
            let rad = r.gen_range(20.0..60.0);
            o_dst.push((q.0 + rad * ang.cos(), q.1 + rad * ang.sin()));
            truth.push(false);
        }
    }
    let o = ransac_homography(&o_src, &o_dst, 200, 3.0, 17).unwrap();
    let isolated = o.inliers == truth;

    let pass = oracle_fail == 0 && symmetry_fail == 0 && perm_fail == 0 && max_err < 1e-6 && all_in && isolated;
    verdict(
        5,
        "matching correctness",
        pass,
        &format!(
            "500 instances: {oracle_fail} oracle, {symmetry_fail} symmetry, {perm_fail} permutation mismatches; \
             RANSAC max transfer err {max_err:.2e} px, all inliers {all_in}, 50% outliers isolated {isolated}"
        ),
    );
    assert!(pass);
}

// ---- 6 ----------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct RunStats {
    long_term: f64,
    inlier_ratio: f64,
    decreased: bool,
    components: String,
}

const TRAIN_SCENES: usize = 200;
const TEST_SCENES: u64 = 20;
const SEEDS: u64 = 5;
const EPOCHS: usize = 6;

fn ablation_run(ab: Ablation, seed: u64, train_set: &[Scene], test: &[Scene], pairs: &[semloc_core::synth::WarpedPair]) -> RunStats {
    let cfg = TrainConfig {
        epochs: EPOCHS,
        seed,
        ablation: ab,
        net: NetworkConfig {
            base_channels: 8,
            descriptor_dim: 32,
            downsample: 4,
            resblocks: 1,
        },
        ..TrainConfig::default()
    };
    let out = train_scenes(&cfg, train_set, |_| {}).unwrap();
    let tax = LabelTaxonomy::synthetic();
    let opts = ExtractOptions {
        top_k: 256,
        nms_radius: 0,
        min_score: 0.0,
    };
    let lt: Vec<f64> = test
        .iter()
        .map(|s| {
            let set = extract(&out.weights, &s.image, &opts).unwrap();
            category_fractions(&set.keypoints, &s.mask, &tax).unwrap().unwrap()[Category::LongTerm.index()]
        })
        .collect();
    let ir: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let a = extract(&out.weights, &p.a.image, &opts).unwrap();
            let b = extract(&out.weights, &p.b.image, &opts).unwrap();
            let (_, _, r) = match_eval(&a, &b, Some(&p.homography), &MatchOptions::default()).unwrap();
            r.inlier_ratio.unwrap_or(0.0)
        })
        .collect();
    let (first, last) = (&out.log[0], out.log.last().unwrap());
    let mut parts = vec![("det", Some(first.det), Some(last.det))];
    parts.push(("inter", first.inter, last.inter));
    parts.push(("intra", first.intra, last.intra));
    parts.push(("feat", first.feat, last.feat));
    let mut decreased = true;
    let mut components = String::new();
    for (name, a, b) in parts {
        if let (Some(a), Some(b)) = (a, b) {
            decreased &= b < a;
            components.push_str(&format!(" {name} {a:.3}->{b:.3}"));
        }
    }
    RunStats {
        long_term: median(lt),
        inlier_ratio: median(ir),
        decreased,
        components,
    }
}

#[test]
fn ablation_trend() {
    let t = Instant::now();
    let train_set: Vec<Scene> = (0..TRAIN_SCENES as u64).map(|s| generate_scene(s, 64).unwrap()).collect();
    let test: Vec<Scene> = (0..TEST_SCENES).map(|s| generate_scene(100_000 + s, 64).unwrap()).collect();
    let pairs: Vec<_> = test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng(i as u64);
            warp_pair(s, &random_warp(&mut r, 64), &random_photometric(&mut r, 1.0), i as u64).unwrap()
        })
        .collect();
    let ablations = [Ablation::BASELINE, Ablation::SD, Ablation::SD_SS, Ablation::FULL];
    let mut per: BTreeMap<String, Vec<RunStats>> = BTreeMap::new();
    for seed in 0..SEEDS {
        for ab in ablations {
            let s = ablation_run(ab, seed, &train_set, &test, &pairs);
            println!(
                "    seed {seed} {:<9} long-term {:.3} inlier ratio {:.3}{}",
                ab.to_string(),
                s.long_term,
                s.inlier_ratio,
                s.components
            );
            per.entry(ab.to_string()).or_default().push(s);
        }
    }
    let agg = |ab: Ablation, f: fn(&RunStats) -> f64| median(per[&ab.to_string()].iter().map(f).collect());
    let lt = |ab| agg(ab, |s| s.long_term);
    let ir = |ab| agg(ab, |s| s.inlier_ratio);
    let (lb, ls, lss, lf) = (lt(Ablation::BASELINE), lt(Ablation::SD), lt(Ablation::SD_SS), lt(Ablation::FULL));
    let (ib, is, iss, fi) = (ir(Ablation::BASELINE), ir(Ablation::SD), ir(Ablation::SD_SS), ir(Ablation::FULL));
    let a = lf > lb && ls > lb;
    let b = fi >= is && is >= ib;
    let c = per.values().flatten().all(|s| s.decreased);
    println!("    (a) long-term fraction: baseline {lb:.3} SD {ls:.3} SD+SS {lss:.3} full {lf:.3} -> {a}");
    println!("    (b) inlier ratio: baseline {ib:.3} SD {is:.3} SD+SS {iss:.3} full {fi:.3} -> {b}");
    println!("    (c) every enabled component decreased: {c}");
    let pass = a && b && c;
    verdict(
        6,
        "ablation trend",
        pass,
        &format!(
            "{SEEDS} seeds x 4 ablations, {TRAIN_SCENES} scenes, {EPOCHS} epochs; a={a} b={b} c={c}; {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---- 7 ----------------------------------------------------------------

/// synth -> train -> extract -> match, returning every artifact's bytes.
fn pipeline(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let data = dir.join("data");
    let manifest = io::write_dataset(&data, 21, 6, 32, 1.0).unwrap();
    let cfg = TrainConfig::from_config_text(
        "epochs = 2\nbatch_size = 3\nbase_channels = 4\ndescriptor_dim = 8\nresblocks = 1\nseed = 5\n",
    )
    .unwrap();
    let mut log = String::new();
    let out = train(&cfg, &data, |l| log.push_str(&format!("{l}\n"))).unwrap();
    let ckpt = dir.join("model.slw");
    io::write_checkpoint(&ckpt, &out.weights).unwrap();
    let weights = io::read_checkpoint(&ckpt).unwrap();
    let mut files = vec![("log".to_string(), log.into_bytes())];
    for e in &manifest.entries {
        let a = extract(&weights, &io::read_pgm(&data.join(e.image_name())).unwrap(), &ExtractOptions::default()).unwrap();
        let b = extract(&weights, &io::read_pgm(&data.join(e.warped_name())).unwrap(), &ExtractOptions::default()).unwrap();
        let (fa, fb) = (dir.join(format!("{}a.slf", e.index)), dir.join(format!("{}b.slf", e.index)));
        io::write_features(&fa, &a).unwrap();
        io::write_features(&fb, &b).unwrap();
        let h = io::read_homography(&data.join(e.homography_name())).unwrap();
        let (m, model, r) = match_eval(
            &io::read_features(&fa).unwrap(),
            &io::read_features(&fb).unwrap(),
            None,
            &MatchOptions { seed: 3, ..MatchOptions::default() },
        )
        .unwrap();
        let (_, _, gt) = match_eval(&a, &b, Some(&h), &MatchOptions::default()).unwrap();
        files.push((format!("{}.matches", e.index), io::encode_matches(&m, model.as_ref()).into_bytes()));
        files.push((format!("{}.report", e.index), format!("{r}{gt}").into_bytes()));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .chain(std::fs::read_dir(&data).unwrap())
        .map(|e| e.unwrap().path().to_str().unwrap().to_string())
        .filter(|p| !p.ends_with("/data"))
        .collect();
    names.sort();
    for n in names {
        let rel = n.strip_prefix(dir.to_str().unwrap()).unwrap().to_string();
        files.push((rel, std::fs::read(&n).unwrap()));
    }
    files
}

#[test]
fn determinism_and_format() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = pipeline(d1.path());
    let b = pipeline(d2.path());
    let reproducible = a == b;
    let artifacts = a.len();

    let mut r = rng(7);
    let mut round_trip_fail = 0;
    let mut reject_fail = 0;
    for t in 0..50 {
        let n = r.gen_range(0..40);
        let d = r.gen_range(1..=16);
        let kps: Vec<Keypoint> = (0..n)
            .map(|_| Keypoint {
                x: r.gen_range(0..64) as f64,
                y: r.gen_range(0..48) as f64,
                score: r.gen_range(0.0f32..1.0) as f64,
            })
            .collect();
        let vals: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0f32..1.0) as f64).collect();
        let set = DescriptorSet::new(kps, vals, d, 64, 48).unwrap();
        let bytes = io::encode_features(&set).unwrap();
        let back = io::decode_features(&bytes).unwrap();
        if io::encode_features(&back).unwrap() != bytes || back.keypoints != set.keypoints {
            round_trip_fail += 1;
        }
        let is_format = |res: Result<DescriptorSet, Error>| matches!(res, Err(Error::Format(_)));
        let mut bad_magic = bytes.clone();
        bad_magic[t % 4] ^= 0x20;
        let truncated = &bytes[..bytes.len() - 1 - (t % 3)];
        let mut trailing = bytes.clone();
        trailing.push(0);
        let mut bad_len = bytes.clone();
        bad_len[12] = bad_len[12].wrapping_add(1);
        if !(is_format(io::decode_features(&bad_magic))
            && is_format(io::decode_features(truncated))
            && is_format(io::decode_features(&trailing))
            && is_format(io::decode_features(&bad_len)))
        {
            reject_fail += 1;
        }
    }
    let pass = reproducible && round_trip_fail == 0 && reject_fail == 0;
    verdict(
        7,
        "determinism and format",
        pass,
        &format!(
            "{artifacts} pipeline artifacts identical: {reproducible}; 50 feature files: {round_trip_fail} round-trip, \
             {reject_fail} rejection failures"
        ),
    );
    assert!(pass);
}
