//! Average precision: the exact ranking metric and its differentiable
//! histogram-binned approximation.
//!
//! The approximation assigns each similarity score to `B` triangular bins
//! with centers evenly spaced from 1 down to −1. With `P_k` the positive
//! mass and `A_k` the total mass in bin `k` (bins ordered from high to low
//! score) and `CP_k`, `CA_k` their running sums:
//!
//! ```text
//! AP ≈ (1 / N⁺) · Σ_k P_k · CP_k / CA_k
//! ```

use crate::error::{Error, Result};

/// Exact average precision of a descending-score ranking, ties broken by index.
pub fn exact_ap(scores: &[f64], is_positive: &[bool]) -> Result<f64> {
    if scores.len() != is_positive.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            is_positive.len()
        )));
    }
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedAp("no positives in the ranking".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if is_positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Bin weights of one score: up to two `(bin, weight, d weight / d score)` entries.
fn bin_taps(score: f64, bins: usize) -> [(usize, f64, f64); 2] {
    let delta = 2.0 / (bins - 1) as f64;
    let s = score.clamp(-1.0, 1.0);
    let t = (1.0 - s) / delta;
    let k0 = (t.floor() as usize).min(bins - 1);
    let mut out = [(0, 0.0, 0.0); 2];
    for (slot, k) in [k0, k0 + 1].into_iter().enumerate() {
        if k >= bins {
            continue;
        }
        let off = t - k as f64;
        let w = 1.0 - off.abs();
        if w > 0.0 {
            // dt/ds = -1/delta, dw/dt = -sign(off); clamped scores carry no gradient
            let dw = if off == 0.0 || s != score {
                0.0
            } else {
                off.signum() / delta
            };
            out[slot] = (k, w, dw);
        }
    }
    out
}

/// Quantized AP of one ranking.
pub fn quantized_ap(scores: &[f64], is_positive: &[bool], bins: usize) -> Result<f64> {
    Ok(quantized_ap_with_grad(scores, is_positive, bins)?.0)
}

/// Quantized AP and its gradient with respect to every score.
pub fn quantized_ap_with_grad(
    scores: &[f64],
    is_positive: &[bool],
    bins: usize,
) -> Result<(f64, Vec<f64>)> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    if scores.len() != is_positive.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            is_positive.len()
        )));
    }
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedAp("no positives in the ranking".into()));
    }
    let taps: Vec<_> = scores.iter().map(|&s| bin_taps(s, bins)).collect();
    let mut pos_mass = vec![0.0; bins];
    let mut all_mass = vec![0.0; bins];
    for (t, &p) in taps.iter().zip(is_positive) {
        for &(k, w, _) in t {
            all_mass[k] += w;
            if p {
                pos_mass[k] += w;
            }
        }
    }
    let mut cum_pos = vec![0.0; bins];
    let mut cum_all = vec![0.0; bins];
    let (mut cp, mut ca) = (0.0, 0.0);
    for k in 0..bins {
        cp += pos_mass[k];
        ca += all_mass[k];
        cum_pos[k] = cp;
        cum_all[k] = ca;
    }
    let live = |k: usize| cum_all[k] > 1e-12;
    let mut ap = 0.0;
    for k in 0..bins {
        if live(k) {
            ap += pos_mass[k] * cum_pos[k] / cum_all[k];
        }
    }
    let norm = n_pos as f64;
    ap /= norm;

    // AP·N⁺ partials: ∂/∂P_m = CP_m/CA_m + Σ_{k≥m} P_k/CA_k,
    //                 ∂/∂A_m = −Σ_{k≥m} P_k·CP_k/CA_k²
    let mut d_pos = vec![0.0; bins];
    let mut d_all = vec![0.0; bins];
    let (mut tail_p, mut tail_a) = (0.0, 0.0);
    for m in (0..bins).rev() {
        if live(m) {
            tail_p += pos_mass[m] / cum_all[m];
            tail_a -= pos_mass[m] * cum_pos[m] / (cum_all[m] * cum_all[m]);
            d_pos[m] = cum_pos[m] / cum_all[m] + tail_p;
        } else {
            d_pos[m] = tail_p;
        }
        d_all[m] = tail_a;
    }
    let grad = taps
        .iter()
        .zip(is_positive)
        .map(|(t, &p)| {
            t.iter()
                .map(|&(k, _, dw)| {
                    let dk = d_all[k] + if p { d_pos[k] } else { 0.0 };
                    dk * dw
                })
                .sum::<f64>()
                / norm
        })
        .collect();
    Ok((ap, grad))
}
