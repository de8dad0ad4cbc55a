//! Evaluation of a trained model over a split: anomaly metrics per
//! strategy, known-class mIoU, novel class discovery and class similarity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::{self, BinaryEval, ConfusionAccumulator, DiscoveryMatch};
use crate::net::Model;
use crate::openworld::{
    self, DiscoveryRule, DiscoveryState, GaussianBank, HypersphereDiagnostics, ScoreParams,
    Strategy,
};
use crate::synthdata::{ClassInfo, Scene};
use crate::tensor::{Element, Tensor};
use crate::trainer::batch_tensor;
use crate::VOID;

/// Both decoder outputs for every pixel of a split, pixels as rows in scene
/// then raster order.
#[derive(Debug, Clone)]
pub struct Inference {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub sem: Tensor<f64>,
    pub cont: Tensor<f64>,
    pub labels: Vec<u8>,
}

impl Inference {
    pub fn pixels_per_scene(&self) -> usize {
        self.height * self.width
    }

    /// Pixel range of scene `i`.
    pub fn scene_range(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.pixels_per_scene();
        i * n..(i + 1) * n
    }
}

pub fn run_inference<T: Element>(
    model: &Model<T>,
    scenes: &[Scene],
    batch: usize,
) -> Result<Inference> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Data("no scenes to evaluate".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let k = model.config.classes;
    let mut sem = Vec::with_capacity(scenes.len() * h * w * k);
    let mut cont = Vec::with_capacity(scenes.len() * h * w * k);
    let mut labels = Vec::with_capacity(scenes.len() * h * w);
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let (x, l) = batch_tensor::<T>(&refs)?;
        let (s, c) = model.infer(&x)?;
        if !s.all_finite() || !c.all_finite() {
            let bad = s
                .data()
                .iter()
                .chain(c.data())
                .find(|v| !v.is_finite())
                .expect("non-finite");
            return Err(Error::NonFinite {
                location: "decoder output during evaluation".into(),
                value: bad.as_f64(),
            });
        }
        sem.extend(s.data().iter().map(|v| v.as_f64()));
        cont.extend(c.data().iter().map(|v| v.as_f64()));
        labels.extend(l);
    }
    let n = labels.len();
    Ok(Inference {
        scenes: scenes.len(),
        height: h,
        width: w,
        classes: k,
        sem: Tensor::new(&[n, k], sem)?,
        cont: Tensor::new(&[n, k], cont)?,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub aupr: f64,
    pub fpr95: f64,
    pub prevalence: f64,
    /// Per-pixel score, every pixel including void.
    pub scores: Vec<f64>,
}

pub fn anomaly(
    inf: &Inference,
    strategy: Strategy,
    params: &ScoreParams,
    bank: Option<&GaussianBank>,
) -> Result<AnomalyResult> {
    let scores = openworld::strategy_score(strategy, &inf.sem, Some(&inf.cont), bank, params)?;
    let mut be = BinaryEval::default();
    be.push_labels(&scores, &inf.labels, inf.classes)?;
    Ok(AnomalyResult {
        aupr: metrics::aupr(&be)?,
        fpr95: metrics::fpr_at_95tpr(&be)?,
        prevalence: be.prevalence(),
        scores,
    })
}

/// Closed-world mIoU of the semantic argmax over the known classes.
pub fn known_miou(inf: &Inference) -> Result<f64> {
    let mut conf = ConfusionAccumulator::new(inf.classes);
    conf.add(&inf.labels, &inf.sem.argmax_last())?;
    let all: Vec<usize> = (0..inf.classes).collect();
    metrics::miou(&conf, &all)
}

/// Pixels whose score under `strategy` exceeds `delta`.
pub fn unknown_mask(
    inf: &Inference,
    strategy: Strategy,
    params: &ScoreParams,
    bank: Option<&GaussianBank>,
    delta: f64,
) -> Result<Vec<bool>> {
    let scores = openworld::strategy_score(strategy, &inf.sem, Some(&inf.cont), bank, params)?;
    Ok(scores.into_iter().map(|s| s > delta).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryResult {
    /// Discovered id per pixel (1-based), 0 where nothing was discovered.
    pub map: Vec<usize>,
    pub state: DiscoveryState,
    pub matching: DiscoveryMatch,
}

/// Runs discovery over flagged, non-void pixels in scene then raster order,
/// on semantic features. A single state persists across the split.
pub fn discover(
    inf: &Inference,
    mask: &[bool],
    eta: f64,
    rule: DiscoveryRule,
    unknown_ids: &[u8],
) -> Result<DiscoveryResult> {
    if mask.len() != inf.labels.len() {
        return Err(Error::Shape(format!(
            "{} mask entries for {} pixels",
            mask.len(),
            inf.labels.len()
        )));
    }
    let mut state = DiscoveryState::new(eta, rule);
    let mut map = vec![0usize; mask.len()];
    let mut f = vec![0.0; inf.classes];
    for p in 0..mask.len() {
        if !mask[p] || inf.labels[p] == VOID {
            continue;
        }
        f.copy_from_slice(inf.sem.row(p));
        map[p] = state.discover(&f);
    }
    let region: Vec<usize> = (0..mask.len()).filter(|&p| inf.labels[p] != VOID).collect();
    let disc: Vec<usize> = region.iter().map(|&p| map[p]).collect();
    let gt: Vec<u8> = region.iter().map(|&p| inf.labels[p]).collect();
    let matching = metrics::match_discovered(&disc, &gt, unknown_ids)?;
    Ok(DiscoveryResult {
        map,
        state,
        matching,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityResult {
    /// Most-similar known class per pixel (flagged unknown pixels only).
    pub map: Vec<Option<usize>>,
    /// GT unknown class → (pixels scored, Gaussian accuracy, max-activation accuracy).
    pub per_class: BTreeMap<u8, (u64, f64, f64)>,
}

pub fn similarity(
    inf: &Inference,
    mask: &[bool],
    bank: &GaussianBank,
    classes: &[ClassInfo],
) -> Result<SimilarityResult> {
    if mask.len() != inf.labels.len() {
        return Err(Error::Shape(format!(
            "{} mask entries for {} pixels",
            mask.len(),
            inf.labels.len()
        )));
    }
    let truth: BTreeMap<u8, usize> = classes
        .iter()
        .filter(|c| !c.known)
        .filter_map(|c| c.most_similar.map(|s| (c.id, s as usize)))
        .collect();
    let mut map = vec![None; mask.len()];
    let mut counts: BTreeMap<u8, (u64, u64, u64)> = BTreeMap::new();
    let mut f = vec![0.0; inf.classes];
    for p in 0..mask.len() {
        if !mask[p] || inf.labels[p] == VOID {
            continue;
        }
        f.copy_from_slice(inf.sem.row(p));
        let k = openworld::similarity(&f, bank)?;
        map[p] = Some(k);
        if let Some(&want) = truth.get(&inf.labels[p]) {
            let c = counts.entry(inf.labels[p]).or_default();
            c.0 += 1;
            c.1 += (k == want) as u64;
            c.2 += (openworld::max_activation_class(&f) == want) as u64;
        }
    }
    let per_class = counts
        .into_iter()
        .map(|(id, (n, g, m))| (id, (n, g as f64 / n as f64, m as f64 / n as f64)))
        .collect();
    Ok(SimilarityResult { map, per_class })
}

pub fn hypersphere(inf: &Inference, zeta: f64, rho: f64) -> Result<HypersphereDiagnostics> {
    openworld::hypersphere_diagnostics(&inf.cont, &inf.labels, inf.classes, zeta, rho)
}
