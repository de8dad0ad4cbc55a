//! Acceptance criteria. Each test prints one PASS/FAIL line to stdout
//! (bypassing the harness capture) and then asserts.
//!
//! The training-based criteria share twelve runs on the reference
//! configuration: feature loss on/off × contrastive decoder on/off × seeds
//! 7, 8 and 9. They are trained once, on first use.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use owseg::config::RunConfig;
use owseg::eval::{self, Inference};
use owseg::gradsuite;
use owseg::losses;
use owseg::metrics::{self, BinaryEval, ConfusionAccumulator};
use owseg::net::Model;
use owseg::openworld::{self, Gaussian, GaussianBank, ScoreParams, Strategy};
use owseg::runner::{self, Command};
use owseg::stats::{ClassStats, RunningMoments};
use owseg::synthdata::{self, ClassInfo, SplitKind};
use owseg::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [7, 8, 9];
const REFERENCE_SEED: u64 = 7;

/// Reference-run values for criterion 5 (seed 7), enforced within `PIN_TOLERANCE`.
const PINNED_GS_CONT_AUPR: f64 = 0.7605;
const PINNED_TH_BASE_AUPR: f64 = 0.1208;
const PIN_TOLERANCE: f64 = 0.03;

/// Criteria run one at a time so the timed ones are not sharing the CPU
/// with a training.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} [{verdict}] {name}: {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

struct Run {
    feat: bool,
    cont: bool,
    seed: u64,
    inference: Inference,
    bank: GaussianBank,
    classes: Vec<ClassInfo>,
    train_time: Duration,
}

impl Run {
    fn aupr(&self, strategy: Strategy, fused: bool) -> f64 {
        let params = ScoreParams {
            use_cont: fused,
            ..reference(self.seed).score_params()
        };
        eval::anomaly(&self.inference, strategy, &params, Some(&self.bank))
            .unwrap()
            .aupr
    }

    fn mask(&self) -> Vec<bool> {
        let cfg = reference(self.seed);
        eval::unknown_mask(
            &self.inference,
            cfg.strategy,
            &cfg.score_params(),
            Some(&self.bank),
            cfg.delta,
        )
        .unwrap()
    }

    fn unknown_ids(&self) -> Vec<u8> {
        self.classes
            .iter()
            .filter(|c| !c.known)
            .map(|c| c.id)
            .collect()
    }
}

fn reference(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

fn train_one(feat: bool, cont: bool, seed: u64) -> Run {
    let cfg = RunConfig {
        use_feat_loss: feat,
        use_cont: cont,
        ..reference(seed)
    };
    let spec = cfg.scene_spec();
    let train = synthdata::generate(&spec, cfg.train_scenes, SplitKind::Train).unwrap();
    let test = synthdata::generate(&spec, cfg.test_scenes, SplitKind::Test).unwrap();
    let start = Instant::now();
    let model = Model::<f32>::new(cfg.model_config()).unwrap();
    let trained = owseg::trainer::train(model, &train, &cfg.train_config()).unwrap();
    let train_time = start.elapsed();
    let inference = eval::run_inference(&trained.model, &test, cfg.batch).unwrap();
    Run {
        feat,
        cont,
        seed,
        inference,
        bank: GaussianBank::from_stats(&trained.sem_stats),
        classes: spec.classes(),
        train_time,
    }
}

fn runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut out = Vec::new();
        for seed in SEEDS {
            for feat in [false, true] {
                for cont in [false, true] {
                    out.push(train_one(feat, cont, seed));
                }
            }
        }
        out
    })
}

fn run(feat: bool, cont: bool, seed: u64) -> &'static Run {
    runs()
        .iter()
        .find(|r| r.feat == feat && r.cont == cont && r.seed == seed)
        .unwrap()
}

#[test]
fn c01_gradient_suite() {
    let _serial = serial();
    let start = Instant::now();
    let reports = gradsuite::run_suite(100, None).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let detail = reports
        .iter()
        .map(|r| format!("{} {:.2e}", r.case.name(), r.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    let pass =
        reports.iter().all(|r| r.passed()) && worst < 1e-5 && elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient suite",
        pass,
        &format!("100 seeds, {detail}; {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c02_statistics_oracle() {
    let _serial = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 4;
        let offset: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                offset
                    .iter()
                    .map(|o| o + rng.gen_range(-3.0..3.0))
                    .collect()
            })
            .collect();
        let (mean, var) = common::two_pass(&rows);
        // Streaming in one pass, and in four uneven chunks merged pairwise.
        let mut whole = RunningMoments::new(dim);
        rows.iter().for_each(|r| whole.push(r.iter().copied()));
        let cuts = [
            0,
            rng.gen_range(1..300),
            rng.gen_range(300..600),
            rng.gen_range(600..999),
            1000,
        ];
        let parts: Vec<RunningMoments> = cuts
            .windows(2)
            .map(|w| {
                let mut m = RunningMoments::new(dim);
                rows[w[0]..w[1]]
                    .iter()
                    .for_each(|r| m.push(r.iter().copied()));
                m
            })
            .collect();
        let merged = parts[0].merge(&parts[1]).merge(&parts[2].merge(&parts[3]));
        // The same through ClassStats with every pixel a true positive.
        let n = rows.len();
        let feats = Tensor::new(&[n, dim], rows.concat()).unwrap();
        let labels = vec![1u8; n];
        let preds = vec![1usize; n];
        let (a, b) = (cuts[2], n);
        let mut left = ClassStats::new(2, dim);
        let mut right = ClassStats::new(2, dim);
        left.update(
            &Tensor::new(&[a, dim], rows[..a].concat()).unwrap(),
            &labels[..a],
            &preds[..a],
        )
        .unwrap();
        right
            .update(
                &Tensor::new(&[b - a, dim], rows[a..].concat()).unwrap(),
                &labels[a..],
                &preds[a..],
            )
            .unwrap();
        let mut stats = ClassStats::merge(&left, &right).unwrap();
        stats.snapshot_epoch();
        let snap = stats.snapshot(1).unwrap().clone();
        let mut direct = ClassStats::new(2, dim);
        direct.update(&feats, &labels, &preds).unwrap();
        direct.snapshot_epoch();
        for j in 0..dim {
            for (m, v) in [
                (whole.mean[j], whole.variance()[j]),
                (merged.mean[j], merged.variance()[j]),
                (snap.mean[j], snap.var[j]),
                (
                    direct.snapshot(1).unwrap().mean[j],
                    direct.snapshot(1).unwrap().var[j],
                ),
            ] {
                worst = worst
                    .max(common::rel_err(m, mean[j]))
                    .max(common::rel_err(v, var[j]));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-10 && elapsed < Duration::from_secs(10);
    report(
        2,
        "statistics oracle",
        pass,
        &format!(
            "50 streams of 1000 pixels, worst relative error {worst:.2e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c03_metric_oracles() {
    let _serial = serial();
    let instances = 60;
    let (mut ap_err, mut fpr_err, mut miou_err, mut match_err): (f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0);
    let mut match_ids_agree = true;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(2..200);
        let levels = rng.gen_range(2..12);
        let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let e = BinaryEval::new(scores.clone(), pos.clone()).unwrap();
        ap_err = ap_err.max((metrics::aupr(&e).unwrap() - common::aupr(&scores, &pos)).abs());
        fpr_err =
            fpr_err.max((metrics::fpr_at_95tpr(&e).unwrap() - common::fpr95(&scores, &pos)).abs());

        let k = 4;
        let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k as u8)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut conf = ConfusionAccumulator::new(k);
        conf.add(&gt, &pred).unwrap();
        let all: Vec<usize> = (0..k).collect();
        let want = common::miou(&gt, &pred, k, &all).unwrap();
        miou_err = miou_err.max((metrics::miou(&conf, &all).unwrap() - want).abs());

        let disc: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let got = metrics::match_discovered(&disc, &gt, &[4, 5]).unwrap();
        let (want, n_u) = common::match_discovered(&disc, &gt, &[4, 5]);
        match_ids_agree &= got.n_u == n_u && got.per_class.len() == want.len();
        for (g, (id, iou)) in want {
            match_ids_agree &= got.per_class.get(&g).map(|v| v.0) == Some(id);
            match_err = match_err.max((got.per_class[&g].1 - iou).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 100_000;
    let pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let e = BinaryEval::new(scores, pos).unwrap();
    let chance = (metrics::aupr(&e).unwrap() - e.prevalence()).abs();
    let worst = ap_err.max(fpr_err).max(miou_err).max(match_err);
    let pass = worst <= 1e-12 && match_ids_agree && chance <= 0.02;
    report(
        3,
        "metric oracles",
        pass,
        &format!(
            "{instances} instances: aupr {ap_err:.1e}, fpr95 {fpr_err:.1e}, miou {miou_err:.1e}, match {match_err:.1e} (ids agree: {match_ids_agree}); random-score AUPR − prevalence {chance:.4} at N=1e5"
        ),
    );
}

#[test]
fn c04_analytic_checks() {
    let _serial = serial();
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let mean = vec![0.3, -1.2, 2.0, 0.5];
    let bank = GaussianBank::new(vec![
        Some(Gaussian {
            mean: mean.clone(),
            var: vec![0.5, 2.0, 0.1, 1.0],
        }),
        Some(Gaussian {
            mean: vec![1.0; 4],
            var: vec![1.0; 4],
        }),
    ]);
    check(
        openworld::gaussian_score(&mean, &bank, 0).unwrap() == 1.0,
        "gaussian_score at the mean",
    );
    let xi = 1.0;
    check(
        openworld::cont_unknown_score(&[0.0; 4], xi) == 1.0,
        "cont score at the origin",
    );
    check(
        openworld::cont_unknown_score(&[0.6, 0.8, 0.0, 0.0], xi) == 0.0,
        "cont score on the radius",
    );
    check(
        openworld::cont_unknown_score(&[1.0, 1.0, 0.0, 0.0], xi) == 0.0,
        "cont score beyond the radius",
    );

    // Hinge flatness: known pixels with squared norm above ξ get no gradient.
    let tape = Tape::<f64>::new();
    let data = vec![1.5, 0.5, -0.2, 0.1, 0.1, 0.2, 0.0, 0.1, 0.3, 0.3, 0.3, 0.3];
    let v = tape.param("f", Tensor::new(&[1, 3, 1, 4], data).unwrap());
    let labels = [2u8, 1, owseg::VOID];
    let loss = losses::objectosphere_loss(v, &labels, xi).unwrap();
    tape.backward(loss).unwrap();
    let g = v.grad().unwrap();
    check(
        g.data()[..4].iter().all(|&x| x == 0.0),
        "hinge gradient beyond ξ",
    );
    check(
        g.data()[4..8].iter().any(|&x| x != 0.0),
        "hinge gradient inside ξ",
    );

    // Fusion bounds.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let b: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let f = openworld::fuse(&a, &b, 0.6).unwrap();
    let bounded = f
        .fused
        .iter()
        .zip(a.iter().zip(&b))
        .all(|(s, (x, y))| *s >= x.min(*y) && *s <= x.max(*y) && (0.0..=1.0).contains(s));
    check(bounded, "fused score between its inputs and within [0, 1]");
    check(
        f.mask.iter().zip(&f.fused).all(|(m, s)| *m == (*s > 0.6)),
        "mask is fused > δ",
    );
    check(
        openworld::fuse(&[1.2], &[0.5], 0.6).is_err(),
        "out-of-range input rejected",
    );
    let detail = if failures.is_empty() {
        "all hold".to_string()
    } else {
        failures.join("; ")
    };
    report(4, "analytic checks", failures.is_empty(), &detail);
}

#[test]
fn c05_anomaly_segmentation() {
    let _serial = serial();
    let base = run(false, false, REFERENCE_SEED);
    let full = run(true, true, REFERENCE_SEED);
    let gs = full.aupr(Strategy::Gs, true);
    let th = base.aupr(Strategy::Th, false);
    let cfg = reference(REFERENCE_SEED);
    let prevalence = eval::anomaly(
        &full.inference,
        Strategy::Th,
        &ScoreParams {
            use_cont: false,
            ..cfg.score_params()
        },
        None,
    )
    .unwrap()
    .prevalence;
    let slowest = runs().iter().map(|r| r.train_time).max().unwrap();
    let pinned = (gs - PINNED_GS_CONT_AUPR).abs() <= PIN_TOLERANCE
        && (th - PINNED_TH_BASE_AUPR).abs() <= PIN_TOLERANCE;
    let pass = gs >= th + 0.10
        && gs > 3.0 * prevalence
        && pinned
        && slowest < Duration::from_secs(15 * 60);
    report(
        5,
        "synthetic anomaly segmentation",
        pass,
        &format!(
            "Gs+cont AUPR {gs:.4} (pinned {PINNED_GS_CONT_AUPR}), Th baseline {th:.4} (pinned {PINNED_TH_BASE_AUPR}), prevalence {prevalence:.4}; slowest training {:.0}s",
            slowest.as_secs_f64()
        ),
    );
}

#[test]
fn c06_ablation_relations() {
    let _serial = serial();
    // Rows: (label, feature loss, contrastive decoder, strategy).
    let rows: [(&str, bool, bool, Strategy); 10] = [
        ("A", false, false, Strategy::Th),
        ("B", true, false, Strategy::Th),
        ("C", false, true, Strategy::Th),
        ("D", true, true, Strategy::Th),
        ("E", true, false, Strategy::MA),
        ("F", true, true, Strategy::MA),
        ("H", true, false, Strategy::Dmu),
        ("I", true, true, Strategy::Dmu),
        ("J", true, false, Strategy::Gs),
        ("K", true, true, Strategy::Gs),
    ];
    type Rel = (&'static str, fn(&BTreeMap<&str, f64>) -> bool);
    let relations: [Rel; 8] = [
        ("A<B", |t| t["A"] < t["B"]),
        ("A<C", |t| t["A"] < t["C"]),
        ("D>B", |t| t["D"] > t["B"]),
        ("K>=I", |t| t["K"] >= t["I"]),
        ("D>=B-0.02", |t| t["D"] >= t["B"] - 0.02),
        ("F>=E-0.02", |t| t["F"] >= t["E"] - 0.02),
        ("I>=H-0.02", |t| t["I"] >= t["H"] - 0.02),
        ("K>=J-0.02", |t| t["K"] >= t["J"] - 0.02),
    ];
    let mut votes = vec![0; relations.len()];
    let mut tables = Vec::new();
    for seed in SEEDS {
        let table: BTreeMap<&str, f64> = rows
            .iter()
            .map(|&(label, feat, cont, s)| (label, run(feat, cont, seed).aupr(s, cont)))
            .collect();
        for (i, (_, holds)) in relations.iter().enumerate() {
            votes[i] += holds(&table) as usize;
        }
        tables.push(format!(
            "seed {seed}: {}",
            table
                .iter()
                .map(|(k, v)| format!("{k}={v:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    let majority = SEEDS.len() / 2 + 1;
    let pass = votes.iter().all(|&v| v >= majority);
    let tally = relations
        .iter()
        .zip(&votes)
        .map(|((name, _), v)| format!("{name} {v}/{}", SEEDS.len()))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        6,
        "ablation relations",
        pass,
        &format!("{tally} | {}", tables.join(" | ")),
    );
}

#[test]
fn c07_novel_class_discovery() {
    let _serial = serial();
    let r = run(true, true, REFERENCE_SEED);
    let cfg = reference(REFERENCE_SEED);
    let mask = r.mask();
    let ids = r.unknown_ids();
    let d = eval::discover(&r.inference, &mask, cfg.eta, cfg.discovery_rule, &ids).unwrap();
    let n_u = d.matching.n_u;
    let ious: Vec<f64> = ids
        .iter()
        .map(|g| d.matching.per_class.get(g).map_or(0.0, |m| m.1))
        .collect();
    let sweep: Vec<usize> = [0.3, 0.6, 0.9]
        .iter()
        .map(|&eta| {
            eval::discover(&r.inference, &mask, eta, cfg.discovery_rule, &ids)
                .unwrap()
                .matching
                .n_u
        })
        .collect();
    let pass = (2..=5).contains(&n_u)
        && ious.iter().all(|&v| v >= 0.3)
        && sweep.windows(2).all(|w| w[0] <= w[1]);
    report(
        7,
        "novel class discovery",
        pass,
        &format!(
            "η={}: N_U {n_u}, max IoU {ious:.3?}; N_U over η 0.3/0.6/0.9: {sweep:?}",
            cfg.eta
        ),
    );
}

#[test]
fn c08_class_similarity() {
    let _serial = serial();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let r = run(true, true, seed);
        let s = eval::similarity(&r.inference, &r.mask(), &r.bank, &r.classes).unwrap();
        let ids = r.unknown_ids();
        let better = ids
            .iter()
            .all(|g| s.per_class.get(g).is_some_and(|&(_, gauss, ma)| gauss > ma));
        wins += better as usize;
        let per = ids
            .iter()
            .map(|g| match s.per_class.get(g) {
                Some(&(n, gauss, ma)) => format!("class {g}: {gauss:.3} vs {ma:.3} ({n} px)"),
                None => format!("class {g}: never flagged"),
            })
            .collect::<Vec<_>>()
            .join(", ");
        lines.push(format!("seed {seed} {per}"));
    }
    let pass = wins > SEEDS.len() / 2;
    report(
        8,
        "class similarity",
        pass,
        &format!(
            "Gaussian beats max-activation on both classes for {wins}/{} seeds | {}",
            SEEDS.len(),
            lines.join(" | ")
        ),
    );
}

#[test]
fn c09_hypersphere() {
    let _serial = serial();
    let r = run(true, true, REFERENCE_SEED);
    let h = eval::hypersphere(&r.inference, 0.2, 0.4).unwrap();
    let tube = h.known_in_tube.unwrap_or(0.0);
    let below = h.unknown_below.unwrap_or(0.0);
    let pass = tube >= 0.7 && below >= 0.6;
    report(
        9,
        "hypersphere diagnostics",
        pass,
        &format!("known in tube {tube:.3}, unknown below ρ {below:.3}"),
    );
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
fn c10_reproducibility() {
    let _serial = serial();
    let root = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        dataset_dir: root.path().join("data"),
        out_dir: root.path().join("out"),
        ..reference(REFERENCE_SEED)
    };
    let pipeline = [
        Command::Gen,
        Command::Train,
        Command::Eval,
        Command::Discover,
        Command::Similarity,
        Command::Ablate,
    ];
    let mut digests = Vec::new();
    for _ in 0..2 {
        for &cmd in &pipeline {
            runner::run(cmd, &cfg).unwrap();
        }
        digests.push(tree_digest(root.path()));
        fs::remove_dir_all(&cfg.dataset_dir).unwrap();
        fs::remove_dir_all(&cfg.out_dir).unwrap();
    }
    let (a, b) = (&digests[0], &digests[1]);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let kinds = |ext: &str| a.keys().filter(|k| k.ends_with(ext)).count();
    let covered = kinds(".owss") == 1 && kinds(".owfm") == cfg.test_scenes && kinds(".txt") >= 6;
    let pass = a.len() == b.len() && differing.is_empty() && covered;
    report(
        10,
        "reproducibility",
        pass,
        &format!(
            "{} files ({} checkpoint, {} score maps, {} text files); {} differ",
            a.len(),
            kinds(".owss"),
            kinds(".owfm"),
            kinds(".txt"),
            differing.len()
        ),
    );
}
