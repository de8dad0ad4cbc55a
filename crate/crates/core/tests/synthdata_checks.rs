//! Generator self-checks on the reference scene configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use owseg::config::RunConfig;
use owseg::metrics::{self, BinaryEval};
use owseg::synthdata::{self, Scene, SplitKind};
use owseg::VOID;
use sha2::{Digest, Sha256};

fn reference() -> (RunConfig, synthdata::SceneSpec) {
    let cfg = RunConfig::default();
    let spec = cfg.scene_spec();
    (cfg, spec)
}

fn scenes(split: SplitKind, n: usize) -> Vec<Scene> {
    synthdata::generate(&reference().1, n, split).unwrap()
}

fn pixels(scenes: &[Scene]) -> impl Iterator<Item = ([u8; 3], u8)> + '_ {
    scenes.iter().flat_map(|s| {
        s.labels.data.iter().enumerate().map(move |(p, &l)| {
            let c = &s.image.data[3 * p..3 * p + 3];
            ([c[0], c[1], c[2]], l)
        })
    })
}

#[test]
fn training_splits_hold_no_unknowns_and_every_known_class() {
    let (cfg, _) = reference();
    for (split, n) in [
        (SplitKind::Train, cfg.train_scenes),
        (SplitKind::Val, cfg.val_scenes),
    ] {
        let mut counts = vec![0u64; cfg.classes];
        for (_, l) in pixels(&scenes(split, n)) {
            if l == VOID {
                continue;
            }
            assert!((l as usize) < cfg.classes, "{split}: label {l}");
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{split}: {counts:?}");
    }
}

#[test]
fn test_split_unknown_prevalence_is_moderate() {
    let (cfg, spec) = reference();
    let classes = spec.classes();
    let test = scenes(SplitKind::Test, cfg.test_scenes);
    let (mut unknown, mut labeled) = (0u64, 0u64);
    for (_, l) in pixels(&test) {
        if l == VOID {
            continue;
        }
        assert!(
            classes.iter().any(|c| c.id == l),
            "label {l} outside the class table"
        );
        labeled += 1;
        unknown += (l as usize >= cfg.classes) as u64;
    }
    let prevalence = unknown as f64 / labeled as f64;
    assert!(
        (0.03..=0.15).contains(&prevalence),
        "prevalence {prevalence}"
    );
}

fn class_colors(scenes: &[Scene]) -> BTreeMap<u8, ([f64; 3], [f64; 3])> {
    let mut acc: BTreeMap<u8, (u64, [f64; 3], [f64; 3])> = BTreeMap::new();
    for (c, l) in pixels(scenes) {
        if l == VOID {
            continue;
        }
        let e = acc.entry(l).or_insert((0, [0.0; 3], [0.0; 3]));
        e.0 += 1;
        for j in 0..3 {
            e.1[j] += c[j] as f64;
            e.2[j] += (c[j] as f64).powi(2);
        }
    }
    acc.into_iter()
        .map(|(l, (n, s, s2))| {
            let n = n as f64;
            let mean = s.map(|v| v / n);
            let mut sd = [0.0; 3];
            for j in 0..3 {
                sd[j] = (s2[j] / n - mean[j] * mean[j]).max(0.0).sqrt();
            }
            (l, (mean, sd))
        })
        .collect()
}

#[test]
fn known_colors_are_separated_by_three_noise_deviations() {
    let (cfg, _) = reference();
    let colors = class_colors(&scenes(SplitKind::Train, 50));
    let known: Vec<_> = colors
        .iter()
        .filter(|(&l, _)| (l as usize) < cfg.classes)
        .collect();
    for (i, (la, (ma, sa))) in known.iter().enumerate() {
        for (lb, (mb, sb)) in &known[i + 1..] {
            let dist = (0..3).map(|j| (ma[j] - mb[j]).powi(2)).sum::<f64>().sqrt();
            let noise = sa.iter().chain(sb.iter()).copied().fold(0.0, f64::max);
            assert!(
                dist >= 3.0 * noise,
                "classes {la} and {lb}: distance {dist}, noise {noise}"
            );
        }
    }
}

#[test]
fn color_alone_does_not_reveal_unknowns() {
    let (cfg, _) = reference();
    let means: Vec<[f64; 3]> = class_colors(&scenes(SplitKind::Train, 50))
        .into_iter()
        .filter(|(l, _)| (*l as usize) < cfg.classes)
        .map(|(_, (m, _))| m)
        .collect();
    let mut eval = BinaryEval::default();
    let test = scenes(SplitKind::Test, cfg.test_scenes);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (c, l) in pixels(&test) {
        let d = means
            .iter()
            .map(|m| {
                (0..3)
                    .map(|j| (c[j] as f64 - m[j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        scores.push(d);
        labels.push(l);
    }
    eval.push_labels(&scores, &labels, cfg.classes).unwrap();
    let ap = metrics::aupr(&eval).unwrap();
    assert!(ap < 0.5, "color-only AUPR {ap}");
}

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn written_dataset_is_byte_identical_across_runs() {
    let (_, spec) = reference();
    let counts = [
        (SplitKind::Train, 6),
        (SplitKind::Val, 3),
        (SplitKind::Test, 4),
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synthdata::write_dataset(&spec, a.path(), counts).unwrap();
    synthdata::write_dataset(&spec, b.path(), counts).unwrap();
    let (da, db) = (tree_digest(a.path()), tree_digest(b.path()));
    assert_eq!(da.len(), 2 * 13 + 1, "{:?}", da.keys().collect::<Vec<_>>());
    assert_eq!(da, db);
    let back = synthdata::load_split(a.path(), SplitKind::Test).unwrap();
    assert_eq!(
        back.scenes,
        synthdata::generate(&spec, 4, SplitKind::Test).unwrap()
    );
}
