//! Brute-force reference implementations shared by the integration tests.
//! Each one recomputes its quantity from first principles (explicit sets,
//! per-threshold counting, scalar loops) without calling the library path
//! it is compared against.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

pub const VOID: u8 = 255;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Mean and population variance per dimension, by two passes.
pub fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let var = (0..d)
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

/// Thresholds at every distinct score, highest first; a pixel is flagged
/// when its score is at least the threshold.
fn thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(scores: &[f64], positive: &[bool], t: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (s, &p) in scores.iter().zip(positive) {
        if *s >= t {
            if p {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// Step-integrated average precision: sum over thresholds of
/// (recall gain) x precision.
pub fn aupr(scores: &[f64], positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in thresholds(scores) {
        let (tp, fp) = counts_at(scores, positive, t);
        let recall = tp as f64 / p;
        ap += (recall - prev) * tp as f64 / (tp + fp) as f64;
        prev = recall;
    }
    ap
}

/// False-positive rate at the highest threshold whose recall reaches 95%.
pub fn fpr95(scores: &[f64], positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let n = positive.len() as f64 - p;
    for t in thresholds(scores) {
        let (tp, fp) = counts_at(scores, positive, t);
        if tp as f64 / p >= 0.95 {
            return fp as f64 / n;
        }
    }
    unreachable!()
}

/// Mean IoU over `classes` from explicit pixel sets. Pixels whose ground
/// truth lies outside `0..k` are ignored; predictions outside it never match.
pub fn miou(gt: &[u8], pred: &[usize], k: usize, classes: &[usize]) -> Option<f64> {
    let region: Vec<usize> = (0..gt.len()).filter(|&i| (gt[i] as usize) < k).collect();
    let mut sum = 0.0;
    let mut used = 0;
    for &c in classes {
        let g: BTreeSet<usize> = region
            .iter()
            .copied()
            .filter(|&i| gt[i] as usize == c)
            .collect();
        let p: BTreeSet<usize> = region.iter().copied().filter(|&i| pred[i] == c).collect();
        let union = g.union(&p).count();
        if union > 0 {
            sum += g.intersection(&p).count() as f64 / union as f64;
            used += 1;
        }
    }
    (used > 0).then(|| sum / used as f64)
}

/// For every wanted class present in `gt`: the discovered id of highest IoU
/// (lowest id on ties, 0 with IoU 0 when nothing overlaps), and the number
/// of distinct discovered ids.
pub fn match_discovered(
    disc: &[usize],
    gt: &[u8],
    wanted: &[u8],
) -> (BTreeMap<u8, (usize, f64)>, usize) {
    let ids: BTreeSet<usize> = disc.iter().copied().filter(|&d| d != 0).collect();
    let mut out = BTreeMap::new();
    for &g in wanted.iter().collect::<BTreeSet<_>>() {
        let gs: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == g).collect();
        if gs.is_empty() {
            continue;
        }
        let mut best = (0, 0.0);
        for &d in &ids {
            let ds: BTreeSet<usize> = (0..disc.len()).filter(|&i| disc[i] == d).collect();
            let iou = gs.intersection(&ds).count() as f64 / gs.union(&ds).count() as f64;
            if iou > best.1 {
                best = (d, iou);
            }
        }
        out.insert(g, best);
    }
    (out, ids.len())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Class-weighted cross-entropy averaged over labeled pixels.
pub fn semantic_ce(rows: &[Vec<f64>], labels: &[u8], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut m = 0;
    for (r, &l) in rows.iter().zip(labels) {
        if l == VOID {
            continue;
        }
        total -= weights[l as usize] * log_softmax(r)[l as usize];
        m += 1;
    }
    if m == 0 {
        0.0
    } else {
        total / m as f64
    }
}

/// Standardized distance to the class mean, summed over labeled pixels with
/// a snapshot and divided by the number of labeled pixels.
pub fn feature_loss(
    rows: &[Vec<f64>],
    labels: &[u8],
    means: &[Option<(Vec<f64>, Vec<f64>)>],
) -> f64 {
    let k = rows[0].len();
    let mut total = 0.0;
    let mut known = 0;
    for (r, &l) in rows.iter().zip(labels) {
        if l as usize >= k {
            continue;
        }
        known += 1;
        if let Some((mu, var)) = &means[l as usize] {
            let mut s = 0.0;
            for j in 0..k {
                let sd = var[j].sqrt().max(1e-6);
                s += ((r[j] - mu[j]) / sd).powi(2);
            }
            total += s.sqrt();
        }
    }
    if known == 0 {
        0.0
    } else {
        total / known as f64
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Contrast of per-image class means against snapshot means, summed over
/// the classes of each image and averaged over images. `rows` are grouped
/// into `images` equal blocks.
pub fn contrastive(
    rows: &[Vec<f64>],
    labels: &[u8],
    images: usize,
    means: &[Option<Vec<f64>>],
    tau: f64,
) -> f64 {
    let k = rows[0].len();
    let per = rows.len() / images;
    let protos: Vec<(usize, Vec<f64>)> = means
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.as_ref().map(|m| (i, unit(m))))
        .collect();
    let mut total = 0.0;
    let mut used = 0;
    for b in 0..images {
        let mut any = false;
        for c in 0..k {
            let pix: Vec<&Vec<f64>> = (b * per..(b + 1) * per)
                .filter(|&p| labels[p] as usize == c)
                .map(|p| &rows[p])
                .collect();
            if pix.is_empty() || means[c].is_none() {
                continue;
            }
            let mean: Vec<f64> = (0..k)
                .map(|j| pix.iter().map(|r| r[j]).sum::<f64>() / pix.len() as f64)
                .collect();
            let f = unit(&mean);
            let logits: Vec<f64> = protos
                .iter()
                .map(|(_, p)| f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect();
            let pos = protos.iter().position(|(i, _)| *i == c).unwrap();
            total -= log_softmax(&logits)[pos];
            any = true;
        }
        used += any as usize;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

/// Hinge on known squared norms plus squared norms of unlabeled pixels,
/// averaged over every pixel.
pub fn objectosphere(rows: &[Vec<f64>], labels: &[u8], xi: f64) -> f64 {
    let k = rows[0].len();
    let mut total = 0.0;
    for (r, &l) in rows.iter().zip(labels) {
        let sq: f64 = r.iter().map(|x| x * x).sum();
        total += if (l as usize) < k {
            (xi - sq).max(0.0)
        } else {
            sq
        };
    }
    total / rows.len() as f64
}
