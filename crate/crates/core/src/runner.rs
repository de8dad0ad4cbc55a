//! Subcommands of a reproducible run. Each reads a [`RunConfig`], writes its
//! artifacts under the configured directories and returns the results it
//! wrote.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{peek_dtype, sha256_hex, Checkpoint};
use crate::config::{Results, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{self, Inference};
use crate::formats::{FloatMap, Image};
use crate::gradsuite;
use crate::net::Model;
use crate::openworld::{GaussianBank, ScoreParams, Strategy};
use crate::stats::ClassStats;
use crate::synthdata::{self, ClassInfo, Split, SplitKind};
use crate::tensor::{DType, Element, Fault};
use crate::trainer;
use crate::VOID;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    Gen,
    Train,
    Eval,
    Discover,
    Similarity,
    /// Optional corrupted ReLU gradient scale, for negative testing.
    Gradcheck {
        fault: Option<f64>,
    },
    Ablate,
}

/// Seeds per case in the gradient suite.
pub const GRADCHECK_SEEDS: u64 = 100;

/// Where a subcommand wrote its results file, and what it contained.
#[derive(Debug)]
pub struct Report {
    pub path: PathBuf,
    pub results: Results,
    /// Extra lines for the terminal, such as a table.
    pub table: Vec<String>,
    /// Set when a verification subcommand ran to completion but found a
    /// failure; the results file is still written.
    pub failure: Option<Error>,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn finish(cfg: &RunConfig, file: &str, results: Results, table: Vec<String>) -> Result<Report> {
    mkdir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(file);
    results.save(&path)?;
    Ok(Report {
        path,
        results,
        table,
        failure: None,
    })
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    match cmd {
        Command::Gen => gen(cfg),
        Command::Train => match cfg.dtype {
            DType::F32 => train::<f32>(cfg),
            DType::F64 => train::<f64>(cfg),
        },
        Command::Eval => eval_cmd(cfg),
        Command::Discover => discover(cfg),
        Command::Similarity => similarity(cfg),
        Command::Gradcheck { fault } => gradcheck(cfg, fault.map(Fault::ScaleReluGrad)),
        Command::Ablate => ablate(cfg),
    }
}

fn gen(cfg: &RunConfig) -> Result<Report> {
    let spec = cfg.scene_spec();
    synthdata::write_dataset(
        &spec,
        &cfg.dataset_dir,
        [
            (SplitKind::Train, cfg.train_scenes),
            (SplitKind::Val, cfg.val_scenes),
            (SplitKind::Test, cfg.test_scenes),
        ],
    )?;
    let mut r = Results::new(cfg);
    r.push(
        "classes_manifest",
        cfg.dataset_dir.join("classes.txt").display(),
    );
    finish(cfg, "gen.txt", r, Vec::new())
}

fn check_split(cfg: &RunConfig, split: &Split, kind: SplitKind) -> Result<()> {
    if split.size() != (cfg.height, cfg.width) {
        return Err(Error::Data(format!(
            "{kind} scenes are {:?}, config expects {}x{}",
            split.size(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

fn load(cfg: &RunConfig, kind: SplitKind) -> Result<Split> {
    let split = synthdata::load_split(&cfg.dataset_dir, kind)?;
    check_split(cfg, &split, kind)?;
    Ok(split)
}

fn save_checkpoint<T: Element>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let tmp = path.with_extension("owss.tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn train<T: Element>(cfg: &RunConfig) -> Result<Report> {
    let train_split = load(cfg, SplitKind::Train)?;
    let val = load(cfg, SplitKind::Val)?;
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    let model = Model::<T>::new(cfg.model_config())?;
    let tcfg = cfg.train_config();
    // The checkpoint on disk is rewritten after every epoch, so a numerical
    // failure leaves the last good state behind.
    let trained = trainer::train_with(model, &train_split.scenes, &tcfg, |state| {
        save_checkpoint(
            &path,
            &Checkpoint {
                model: state.model.clone(),
                sem_stats: state.sem_stats.clone(),
                cont_stats: state.cont_stats.clone(),
                epoch: state.epoch,
            },
        )
    });
    let trained = match trained {
        Ok(t) => t,
        Err(e) => {
            if path.exists() {
                log::error!(
                    "training failed; last good checkpoint kept at {}",
                    path.display()
                );
            }
            return Err(e);
        }
    };
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let inf = eval::run_inference(&trained.model, &val.scenes, cfg.batch)?;
    let mut r = Results::new(cfg);
    r.push("checkpoint_sha256", sha256_hex(&bytes));
    r.push("epochs_completed", trained.epoch);
    if let Some(last) = trained.history.last() {
        r.push("final_total_loss", last.total);
        r.push("final_ce", last.ce);
        r.push("final_feat", last.feat);
        r.push("final_cont", last.cont);
        r.push("final_obj", last.obj);
    }
    r.push("val_miou", eval::known_miou(&inf)?);
    finish(cfg, "train.txt", r, Vec::new())
}

/// Inference of a stored checkpoint on one split, whatever its element type.
pub struct Loaded {
    pub inference: Inference,
    pub sem_stats: ClassStats,
    pub cont_stats: ClassStats,
    pub sha256: String,
    pub split: Split,
}

impl Loaded {
    pub fn bank(&self) -> GaussianBank {
        GaussianBank::from_stats(&self.sem_stats)
    }
}

pub fn load_checkpoint_inference(cfg: &RunConfig, kind: SplitKind) -> Result<Loaded> {
    let path = cfg.checkpoint_path();
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let split = load(cfg, kind)?;
    fn go<T: Element>(
        bytes: &[u8],
        path: &Path,
        split: &Split,
        batch: usize,
    ) -> Result<(Inference, ClassStats, ClassStats)> {
        let ck = Checkpoint::<T>::decode(bytes, path)?;
        let inf = eval::run_inference(&ck.model, &split.scenes, batch)?;
        Ok((inf, ck.sem_stats, ck.cont_stats))
    }
    let (inference, sem_stats, cont_stats) = match peek_dtype(&bytes, &path)? {
        Some(DType::F64) => go::<f64>(&bytes, &path, &split, cfg.batch)?,
        _ => go::<f32>(&bytes, &path, &split, cfg.batch)?,
    };
    if inference.classes != cfg.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, config has K={}",
            inference.classes, cfg.classes
        )));
    }
    Ok(Loaded {
        inference,
        sem_stats,
        cont_stats,
        sha256: sha256_hex(&bytes),
        split,
    })
}

fn classes(cfg: &RunConfig) -> Result<Vec<ClassInfo>> {
    synthdata::read_classes(&cfg.dataset_dir.join("classes.txt"))
}

fn write_per_scene<F>(dir: &Path, split: &Split, ext: &str, mut write: F) -> Result<()>
where
    F: FnMut(usize, &Path) -> Result<()>,
{
    mkdir(dir)?;
    for (i, name) in split.names.iter().enumerate() {
        write(i, &dir.join(format!("{name}.{ext}")))?;
    }
    Ok(())
}

fn score_map(inf: &Inference, scores: &[f64], i: usize) -> FloatMap {
    FloatMap {
        height: inf.height,
        width: inf.width,
        data: scores[inf.scene_range(i)]
            .iter()
            .map(|&s| s as f32)
            .collect(),
    }
}

fn gray(inf: &Inference, data: Vec<u8>) -> Result<Image> {
    Image::new(inf.width, inf.height, 1, data)
}

fn eval_cmd(cfg: &RunConfig) -> Result<Report> {
    let l = load_checkpoint_inference(cfg, SplitKind::Test)?;
    let bank = l.bank();
    let inf = &l.inference;
    let a = eval::anomaly(inf, cfg.strategy, &cfg.score_params(), Some(&bank))?;
    let miou = eval::known_miou(inf)?;
    write_per_scene(&cfg.out_dir.join("scores"), &l.split, "owfm", |i, p| {
        score_map(inf, &a.scores, i).save(p)
    })?;
    write_per_scene(&cfg.out_dir.join("masks"), &l.split, "pgm", |i, p| {
        let mask = a.scores[inf.scene_range(i)]
            .iter()
            .map(|&s| if s > cfg.delta { 255 } else { 0 })
            .collect();
        gray(inf, mask)?.save(p)
    })?;
    let mut r = Results::new(cfg);
    r.push("checkpoint_sha256", &l.sha256);
    r.push("test_scenes_evaluated", inf.scenes);
    r.push("aupr", a.aupr);
    r.push("fpr95", a.fpr95);
    r.push("prevalence", a.prevalence);
    r.push("known_miou", miou);
    finish(cfg, "results.txt", r, Vec::new())
}

fn unknown_ids(classes: &[ClassInfo]) -> Vec<u8> {
    classes.iter().filter(|c| !c.known).map(|c| c.id).collect()
}

fn discover(cfg: &RunConfig) -> Result<Report> {
    let l = load_checkpoint_inference(cfg, SplitKind::Test)?;
    let classes = classes(cfg)?;
    let bank = l.bank();
    let inf = &l.inference;
    let mask = eval::unknown_mask(
        inf,
        cfg.strategy,
        &cfg.score_params(),
        Some(&bank),
        cfg.delta,
    )?;
    let d = eval::discover(
        inf,
        &mask,
        cfg.eta,
        cfg.discovery_rule,
        &unknown_ids(&classes),
    )?;
    if d.state.len() >= VOID as usize {
        log::warn!(
            "{} classes discovered; label maps saturate at 254",
            d.state.len()
        );
    }
    write_per_scene(&cfg.out_dir.join("labels"), &l.split, "pgm", |i, p| {
        let ids = d.map[inf.scene_range(i)]
            .iter()
            .map(|&c| c.min(VOID as usize - 1) as u8)
            .collect();
        gray(inf, ids)?.save(p)
    })?;
    let mut r = Results::new(cfg);
    r.push("checkpoint_sha256", &l.sha256);
    r.push("flagged_pixels", mask.iter().filter(|&&m| m).count());
    r.push("n_u", d.matching.n_u);
    let mut table = vec![format!("{:<10} {:>10} {:>8}", "class", "discovered", "IoU")];
    for (&gt, &(id, iou)) in &d.matching.per_class {
        let name = classes
            .iter()
            .find(|c| c.id == gt)
            .map_or("?", |c| c.name.as_str());
        r.push(format!("match.{name}.discovered_id"), id);
        r.push(format!("match.{name}.iou"), iou);
        table.push(format!("{name:<10} {id:>10} {iou:>8.4}"));
    }
    finish(cfg, "discover.txt", r, table)
}

fn similarity(cfg: &RunConfig) -> Result<Report> {
    let l = load_checkpoint_inference(cfg, SplitKind::Test)?;
    let classes = classes(cfg)?;
    let bank = l.bank();
    let inf = &l.inference;
    let mask = eval::unknown_mask(
        inf,
        cfg.strategy,
        &cfg.score_params(),
        Some(&bank),
        cfg.delta,
    )?;
    let s = eval::similarity(inf, &mask, &bank, &classes)?;
    write_per_scene(&cfg.out_dir.join("similar"), &l.split, "pgm", |i, p| {
        let ids = s.map[inf.scene_range(i)]
            .iter()
            .map(|c| c.map_or(VOID, |k| k as u8))
            .collect();
        gray(inf, ids)?.save(p)
    })?;
    let mut r = Results::new(cfg);
    r.push("checkpoint_sha256", &l.sha256);
    let mut table = vec![format!(
        "{:<10} {:>8} {:>10} {:>10}",
        "class", "pixels", "gaussian", "max_act"
    )];
    for c in classes.iter().filter(|c| !c.known) {
        let (n, g, m) = s
            .per_class
            .get(&c.id)
            .copied()
            .unwrap_or((0, f64::NAN, f64::NAN));
        r.push(format!("similarity.{}.pixels", c.name), n);
        r.push(format!("similarity.{}.gaussian_acc", c.name), g);
        r.push(format!("similarity.{}.max_activation_acc", c.name), m);
        table.push(format!("{:<10} {n:>8} {g:>10.4} {m:>10.4}", c.name));
    }
    finish(cfg, "similarity.txt", r, table)
}

fn gradcheck(cfg: &RunConfig, fault: Option<Fault>) -> Result<Report> {
    let reports = gradsuite::run_suite(GRADCHECK_SEEDS, fault)?;
    let mut r = Results::new(cfg);
    let mut table = vec![format!(
        "{:<20} {:>12} {:>6}",
        "case", "max_rel_err", "pass"
    )];
    for c in &reports {
        r.push(
            format!("gradcheck.{}.max_rel_err", c.case.name()),
            c.max_rel_err,
        );
        r.push(format!("gradcheck.{}.passed", c.case.name()), c.passed());
        table.push(format!(
            "{:<20} {:>12.3e} {:>6}",
            c.case.name(),
            c.max_rel_err,
            c.passed()
        ));
    }
    let mut report = finish(cfg, "gradcheck.txt", r, table)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.case.name())
        .collect();
    if !failed.is_empty() {
        report.failure = Some(Error::Check(format!(
            "gradient suite failed for {} (tolerance {})",
            failed.join(", "),
            gradsuite::TOLERANCE
        )));
    }
    Ok(report)
}

fn ablate(cfg: &RunConfig) -> Result<Report> {
    let l = load_checkpoint_inference(cfg, SplitKind::Test)?;
    let bank = l.bank();
    let mut r = Results::new(cfg);
    r.push("checkpoint_sha256", &l.sha256);
    let mut table = vec![format!(
        "{:<8} {:>8} {:>8} {:>8}",
        "strategy", "cont", "AUPR", "FPR95"
    )];
    for use_cont in [false, true] {
        for strategy in Strategy::ALL {
            let params = ScoreParams {
                use_cont,
                ..cfg.score_params()
            };
            let a = eval::anomaly(&l.inference, strategy, &params, Some(&bank))?;
            let tag = if use_cont { "cont" } else { "plain" };
            r.push(format!("ablate.{strategy}.{tag}.aupr"), a.aupr);
            r.push(format!("ablate.{strategy}.{tag}.fpr95"), a.fpr95);
            table.push(format!(
                "{:<8} {:>8} {:>8.4} {:>8.4}",
                strategy.name(),
                use_cont,
                a.aupr,
                a.fpr95
            ));
        }
    }
    finish(cfg, "ablation.txt", r, table)
}
