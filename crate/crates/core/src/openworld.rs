//! Inference-time open-world post-processing.
//!
//! Per-class Gaussians from the semantic decoder's statistics score how
//! well a pixel fits any known class; the contrastive decoder's feature
//! norm scores how far it sits from the known-class hypersphere. The two
//! are fused into a single unknown-ness score. Pixels flagged unknown are
//! grouped into discovered classes and related back to known ones.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::stats::ClassStats;
use crate::tensor::{Element, Tensor};
use crate::VOID;

const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    /// Diagonal covariance, floored.
    pub var: Vec<f64>,
}

/// Diagonal Gaussians per known class. Classes without statistics are `None`
/// and never take part in scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank {
    classes: Vec<Option<Gaussian>>,
}

impl GaussianBank {
    pub fn new(classes: Vec<Option<Gaussian>>) -> Self {
        let classes = classes
            .into_iter()
            .map(|g| {
                g.map(|g| Gaussian {
                    var: g.var.iter().map(|v| v.max(VAR_FLOOR)).collect(),
                    mean: g.mean,
                })
            })
            .collect();
        Self { classes }
    }

    pub fn from_stats(stats: &ClassStats) -> Self {
        let bank = Self::new(
            stats
                .snapshots()
                .iter()
                .map(|s| {
                    s.as_ref().map(|m| Gaussian {
                        mean: m.mean.clone(),
                        var: m.var.clone(),
                    })
                })
                .collect(),
        );
        for (k, g) in bank.classes.iter().enumerate() {
            if g.is_none() {
                log::warn!("class {k} has no statistics and is excluded from Gaussian scoring");
            }
        }
        bank
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|g| g.is_none())
    }

    pub fn class(&self, k: usize) -> Option<&Gaussian> {
        self.classes.get(k).and_then(|g| g.as_ref())
    }

    fn present(&self) -> impl Iterator<Item = (usize, &Gaussian)> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(k, g)| g.as_ref().map(|g| (k, g)))
    }

    /// Squared Mahalanobis distance of `f` to class `k`.
    pub fn mahalanobis2(&self, f: &[f64], k: usize) -> Result<f64> {
        let g = self
            .class(k)
            .ok_or_else(|| Error::Contract(format!("Gaussian bank has no class {k}")))?;
        if g.mean.len() != f.len() {
            return Err(Error::Shape(format!(
                "feature of dimension {} against class {k} of dimension {}",
                f.len(),
                g.mean.len()
            )));
        }
        Ok(maha2(f, g))
    }

    fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract(format!(
                "{what}: Gaussian bank has no classes"
            )));
        }
        Ok(())
    }
}

fn maha2(f: &[f64], g: &Gaussian) -> f64 {
    f.iter()
        .zip(&g.mean)
        .zip(&g.var)
        .map(|((x, m), v)| (x - m) * (x - m) / v)
        .sum()
}

/// `exp(−½ (f−μ_k)ᵀ Σ_k⁻¹ (f−μ_k))`.
pub fn gaussian_score(f: &[f64], bank: &GaussianBank, k: usize) -> Result<f64> {
    Ok((-0.5 * bank.mahalanobis2(f, k)?).exp())
}

/// `1 − max_k s_k(f)` over the classes that have statistics.
pub fn sem_unknown_score(f: &[f64], bank: &GaussianBank) -> Result<f64> {
    bank.require_nonempty("sem_unknown_score")?;
    let best = bank
        .present()
        .map(|(_, g)| (-0.5 * maha2(f, g)).exp())
        .fold(0.0, f64::max);
    Ok(1.0 - best)
}

/// `max(0, 1 − ‖f‖² / ξ)`.
pub fn cont_unknown_score(f: &[f64], xi: f64) -> f64 {
    let sq: f64 = f.iter().map(|x| x * x).sum();
    (1.0 - sq / xi).max(0.0)
}

/// Per-pixel unknown-ness maps, flattened in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct UnknownScores {
    pub sem: Vec<f64>,
    pub cont: Vec<f64>,
    pub fused: Vec<f64>,
    pub mask: Vec<bool>,
}

pub fn fuse(sem: &[f64], cont: &[f64], delta: f64) -> Result<UnknownScores> {
    if sem.len() != cont.len() {
        return Err(Error::Shape(format!(
            "fuse: {} vs {} scores",
            sem.len(),
            cont.len()
        )));
    }
    let in_range = |v: &f64| (0.0..=1.0).contains(v);
    if let Some(p) = sem.iter().chain(cont).position(|v| !in_range(v)) {
        let v = if p < sem.len() {
            sem[p]
        } else {
            cont[p - sem.len()]
        };
        return Err(Error::Contract(format!("fuse: score {v} outside [0, 1]")));
    }
    let fused: Vec<f64> = sem.iter().zip(cont).map(|(a, b)| (a + b) / 2.0).collect();
    let mask = fused.iter().map(|&s| s > delta).collect();
    Ok(UnknownScores {
        sem: sem.to_vec(),
        cont: cont.to_vec(),
        fused,
        mask,
    })
}

/// Post-processing used to turn decoder outputs into an unknown-ness score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Softmax thresholding.
    Th,
    /// Maximum softmax activation.
    MA,
    /// Distance to the nearest class mean.
    Dmu,
    /// Gaussian querying.
    Gs,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Th, Strategy::MA, Strategy::Dmu, Strategy::Gs];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Th => "Th",
            Strategy::MA => "MA",
            Strategy::Dmu => "Dmu",
            Strategy::Gs => "Gs",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected Th, MA, Dmu or Gs)"
                ))
            })
    }
}

/// Inputs shared by every strategy.
#[derive(Debug, Clone, Copy)]
pub struct ScoreParams {
    /// Softmax threshold for `Th`. Below 0.5 so that two activations can
    /// both exceed it; the default is the uniform level for four classes.
    pub t_th: f64,
    pub xi: f64,
    /// Fuse the strategy score with the contrastive norm score.
    pub use_cont: bool,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            t_th: 0.25,
            xi: 1.0,
            use_cont: true,
        }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Half the smallest distance between two class means; 1 with fewer than
/// two classes.
fn dmu_radius(bank: &GaussianBank) -> f64 {
    let means: Vec<&Vec<f64>> = bank.present().map(|(_, g)| &g.mean).collect();
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            best = best.min(euclid(means[i], means[j]));
        }
    }
    if best.is_finite() && best > 0.0 {
        best / 2.0
    } else {
        1.0
    }
}

/// Score of one strategy on a pixel's semantic feature (before fusion).
fn base_score(
    strategy: Strategy,
    f: &[f64],
    bank: Option<&GaussianBank>,
    radius: f64,
    t_th: f64,
) -> Result<f64> {
    Ok(match strategy {
        Strategy::Th => {
            let high = softmax(f).into_iter().filter(|&p| p > t_th).count();
            if high == 1 {
                0.0
            } else {
                1.0
            }
        }
        Strategy::MA => 1.0 - softmax(f).into_iter().fold(0.0, f64::max),
        Strategy::Dmu => {
            let bank = bank.expect("checked");
            let d = bank
                .present()
                .map(|(_, g)| euclid(f, &g.mean))
                .fold(f64::INFINITY, f64::min);
            d / (d + radius)
        }
        Strategy::Gs => sem_unknown_score(f, bank.expect("checked"))?,
    })
}

/// Per-pixel unknown-ness under `strategy`. `sem` and `cont` are `[.., K]`
/// feature maps with pixels as rows.
pub fn strategy_score<T: Element>(
    strategy: Strategy,
    sem: &Tensor<T>,
    cont: Option<&Tensor<T>>,
    bank: Option<&GaussianBank>,
    params: &ScoreParams,
) -> Result<Vec<f64>> {
    let needs_bank = matches!(strategy, Strategy::Dmu | Strategy::Gs);
    if needs_bank && bank.map_or(true, |b| b.is_empty()) {
        return Err(Error::Contract(format!(
            "strategy {strategy} needs class statistics"
        )));
    }
    let cont = match (params.use_cont, cont) {
        (true, Some(c)) => {
            if c.rows() != sem.rows() {
                return Err(Error::Shape(format!(
                    "strategy {strategy}: {} contrastive rows for {} pixels",
                    c.rows(),
                    sem.rows()
                )));
            }
            Some(c)
        }
        (true, None) => {
            return Err(Error::Contract(format!(
                "strategy {strategy} with fusion needs contrastive features"
            )))
        }
        (false, _) => None,
    };
    let radius = if strategy == Strategy::Dmu {
        dmu_radius(bank.expect("checked"))
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(sem.rows());
    let mut buf = Vec::with_capacity(sem.last_dim());
    for p in 0..sem.rows() {
        buf.clear();
        buf.extend(sem.row(p).iter().map(|x| x.as_f64()));
        let mut s = base_score(strategy, &buf, bank, radius, params.t_th)?;
        if let Some(c) = cont {
            buf.clear();
            buf.extend(c.row(p).iter().map(|x| x.as_f64()));
            s = (s + cont_unknown_score(&buf, params.xi)) / 2.0;
        }
        out.push(s);
    }
    Ok(out)
}

/// How a flagged pixel is matched against previously discovered classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiscoveryRule {
    /// Join the nearest class (Euclidean) when its distance is below η.
    Distance,
    /// Join the most similar class (cosine) when its similarity reaches η.
    #[default]
    Similarity,
}

impl FromStr for DiscoveryRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(DiscoveryRule::Distance),
            "similarity" => Ok(DiscoveryRule::Similarity),
            other => Err(Error::Config(format!("unknown discovery rule {other:?}"))),
        }
    }
}

impl fmt::Display for DiscoveryRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscoveryRule::Distance => "distance",
            DiscoveryRule::Similarity => "similarity",
        })
    }
}

/// Mean activation vectors of the unknown classes discovered so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryState {
    pub eta: f64,
    pub rule: DiscoveryRule,
    mavs: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl DiscoveryState {
    pub fn new(eta: f64, rule: DiscoveryRule) -> Self {
        Self {
            eta,
            rule,
            mavs: Vec::new(),
            counts: Vec::new(),
        }
    }

    /// Number of discovered classes.
    pub fn len(&self) -> usize {
        self.mavs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mavs.is_empty()
    }

    pub fn mavs(&self) -> &[Vec<f64>] {
        &self.mavs
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Assigns `f` to a discovered class, creating one if none is close
    /// enough. Returns the 1-based class id.
    pub fn discover(&mut self, f: &[f64]) -> usize {
        let best = match self.rule {
            DiscoveryRule::Distance => self
                .mavs
                .iter()
                .enumerate()
                .map(|(g, m)| (g, euclid(f, m)))
                .fold(None, |acc: Option<(usize, f64)>, (g, d)| match acc {
                    Some((_, bd)) if bd <= d => acc,
                    _ => Some((g, d)),
                })
                .filter(|&(_, d)| d < self.eta),
            DiscoveryRule::Similarity => self
                .mavs
                .iter()
                .enumerate()
                .map(|(g, m)| (g, cosine(f, m)))
                .fold(None, |acc: Option<(usize, f64)>, (g, s)| match acc {
                    Some((_, bs)) if bs >= s => acc,
                    _ => Some((g, s)),
                })
                .filter(|&(_, s)| s >= self.eta),
        };
        match best {
            Some((g, _)) => {
                self.counts[g] += 1;
                let n = self.counts[g] as f64;
                for (m, x) in self.mavs[g].iter_mut().zip(f) {
                    *m += (x - *m) / n;
                }
                g + 1
            }
            None => {
                self.mavs.push(f.to_vec());
                self.counts.push(1);
                self.mavs.len()
            }
        }
    }
}

/// Known class whose Gaussian fits `f` best. Ranked by Mahalanobis distance,
/// which orders classes exactly like the kernel score without underflowing;
/// ties go to the lowest class index.
pub fn similarity(f: &[f64], bank: &GaussianBank) -> Result<usize> {
    bank.require_nonempty("similarity")?;
    let mut best = None;
    for (k, g) in bank.present() {
        let d = maha2(f, g);
        match best {
            Some((_, bd)) if bd <= d => {}
            _ => best = Some((k, d)),
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Baseline for [`similarity`]: the class of highest raw activation.
pub fn max_activation_class(f: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in f.iter().enumerate() {
        if v > f[best] {
            best = k;
        }
    }
    best
}

/// Fractions of known-pixel norms inside `(1−ζ, 1+ζ)` and of unknown-pixel
/// norms below `ρ`. Void pixels are ignored; an empty group gives `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypersphereDiagnostics {
    pub known_in_tube: Option<f64>,
    pub unknown_below: Option<f64>,
}

pub fn hypersphere_diagnostics<T: Element>(
    cont: &Tensor<T>,
    labels: &[u8],
    classes: usize,
    zeta: f64,
    rho: f64,
) -> Result<HypersphereDiagnostics> {
    if cont.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "hypersphere_diagnostics: {} feature rows, {} labels",
            cont.rows(),
            labels.len()
        )));
    }
    let (mut kn, mut kin, mut un, mut ubelow) = (0u64, 0u64, 0u64, 0u64);
    for (p, &l) in labels.iter().enumerate() {
        if l == VOID {
            continue;
        }
        let norm = cont
            .row(p)
            .iter()
            .map(|x| x.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        if (l as usize) < classes {
            kn += 1;
            if norm > 1.0 - zeta && norm < 1.0 + zeta {
                kin += 1;
            }
        } else {
            un += 1;
            if norm < rho {
                ubelow += 1;
            }
        }
    }
    let frac = |a: u64, n: u64| (n > 0).then(|| a as f64 / n as f64);
    Ok(HypersphereDiagnostics {
        known_in_tube: frac(kin, kn),
        unknown_below: frac(ubelow, un),
    })
}
