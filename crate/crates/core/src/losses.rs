//! Training losses for both decoders.
//!
//! All losses take per-pixel features as a tape variable of shape
//! `[B, H, W, K]` (any leading shape works; pixels are rows) and a flat
//! label map with one entry per pixel. Labels below `K` are known classes;
//! [`VOID`](crate::VOID) and any other value are treated as unlabeled.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::stats::ClassStats;
use crate::tensor::{Element, Tensor, Var};
use crate::VOID;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub tau: f64,
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 0.9,
            w2: 0.1,
            w3: 0.5,
            w4: 0.5,
            tau: 0.1,
            xi: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w1, self.w2, self.w3, self.w4];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {ws:?}"
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!(
                "xi must be positive, got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// Inverse-frequency weight per known class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

/// Pixel count per known class; void and out-of-range labels are skipped.
pub fn label_histogram(labels: &[u8], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for &l in labels {
        if (l as usize) < classes {
            counts[l as usize] += 1;
        }
    }
    counts
}

/// `ω_k = total / (K · count_k)`; absent classes get weight 0.
pub fn class_weights(histogram: &[u64]) -> Result<ClassWeights> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Data("class histogram is empty".into()));
    }
    let k = histogram.len() as f64;
    let weights = histogram
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0 {
                log::warn!("class {c} never occurs in the training labels; weight set to 0");
                0.0
            } else {
                total as f64 / (k * n as f64)
            }
        })
        .collect();
    Ok(ClassWeights { weights })
}

fn pixels<T: Element>(feats: Var<'_, T>, labels: &[u8], op: &str) -> Result<(usize, usize)> {
    let shape = feats.shape();
    let k = shape.last().copied().unwrap_or(1);
    let n = if k == 0 {
        0
    } else {
        shape.iter().product::<usize>() / k
    };
    if n != labels.len() {
        return Err(Error::Shape(format!(
            "{op}: features {shape:?} with {} labels",
            labels.len()
        )));
    }
    Ok((n, k))
}

fn zero<'t, T: Element>(like: Var<'t, T>) -> Var<'t, T> {
    like.tape().scalar(T::zero())
}

fn constant<'t, T: Element>(
    like: Var<'t, T>,
    shape: &[usize],
    data: Vec<f64>,
) -> Result<Var<'t, T>> {
    Ok(like.tape().constant(Tensor::from_f64(shape, &data)?))
}

/// Weighted cross-entropy over non-void pixels.
pub fn semantic_ce<'t, T: Element>(
    feats: Var<'t, T>,
    labels: &[u8],
    weights: &ClassWeights,
) -> Result<Var<'t, T>> {
    let (n, k) = pixels(feats, labels, "semantic_ce")?;
    if weights.weights.len() != k {
        return Err(Error::Shape(format!(
            "semantic_ce: {} class weights for K={k}",
            weights.weights.len()
        )));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (p, &l) in labels.iter().enumerate() {
        if l == VOID {
            continue;
        }
        if l as usize >= k {
            return Err(Error::Data(format!(
                "semantic_ce: label {l} at pixel {p} outside 0..{k}"
            )));
        }
        rows.push(p);
        targets.push(l as usize);
    }
    if rows.is_empty() {
        return Ok(zero(feats));
    }
    let m = rows.len();
    let w = targets.iter().map(|&y| weights.weights[y]).collect();
    let w = constant(feats, &[m], w)?;
    let picked = feats
        .reshape(&[n, k])?
        .gather_rows(rows)?
        .log_softmax()
        .pick(targets)?;
    Ok(picked.mul(w)?.sum().scale(T::from_f64(-1.0 / m as f64)))
}

/// Standardized distance of each labeled pixel to its class mean from the
/// previous epoch's snapshot. Zero when no snapshot exists yet.
pub fn feature_loss<'t, T: Element>(
    feats: Var<'t, T>,
    labels: &[u8],
    snapshot: &ClassStats,
) -> Result<Var<'t, T>> {
    let (n, k) = pixels(feats, labels, "feature_loss")?;
    if snapshot.dim() != k {
        return Err(Error::Shape(format!(
            "feature_loss: stats of dimension {} for K={k}",
            snapshot.dim()
        )));
    }
    if !snapshot.has_snapshot() {
        return Ok(zero(feats));
    }
    let mut rows = Vec::new();
    let mut mu = Vec::new();
    let mut inv_sigma = Vec::new();
    let mut known = 0usize;
    for (p, &l) in labels.iter().enumerate() {
        let c = l as usize;
        if c >= k {
            continue;
        }
        known += 1;
        if let Some(m) = snapshot.snapshot(c) {
            rows.push(p);
            mu.extend_from_slice(&m.mean);
            inv_sigma.extend(m.var.iter().map(|v| 1.0 / v.sqrt().max(1e-6)));
        }
    }
    if rows.is_empty() {
        return Ok(zero(feats));
    }
    let m = rows.len();
    let mu = constant(feats, &[m, k], mu)?;
    let inv_sigma = constant(feats, &[m, k], inv_sigma)?;
    let z = feats
        .reshape(&[n, k])?
        .gather_rows(rows)?
        .sub(mu)?
        .mul(inv_sigma)?;
    Ok(z.norm_last().sum().scale(T::from_f64(1.0 / known as f64)))
}

/// `w1 · ce + w2 · feat`.
pub fn sdec_loss<'t, T: Element>(
    ce: Var<'t, T>,
    feat: Var<'t, T>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    ce.scale(T::from_f64(w.w1))
        .add(feat.scale(T::from_f64(w.w2)))
}

/// `w3 · cont + w4 · obj`.
pub fn cdec_loss<'t, T: Element>(
    cont: Var<'t, T>,
    obj: Var<'t, T>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    cont.scale(T::from_f64(w.w3))
        .add(obj.scale(T::from_f64(w.w4)))
}

/// Per-image class mean features. Row `r` of `means` is the mean over the
/// pixels of class `entries[r].1` in image `entries[r].0`.
pub struct ClassMeans<'t, T: Element> {
    pub means: Option<Var<'t, T>>,
    pub entries: Vec<(usize, usize)>,
}

impl<T: Element> ClassMeans<'_, T> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Plain values keyed by `(image, class)`.
    pub fn to_map(&self) -> BTreeMap<(usize, usize), Vec<f64>> {
        let Some(m) = self.means else {
            return BTreeMap::new();
        };
        let v = m.value();
        self.entries
            .iter()
            .enumerate()
            .map(|(r, &key)| (key, v.row(r).iter().map(|x| x.as_f64()).collect()))
            .collect()
    }
}

/// Class means per image of a `[B, ..., K]` feature map. Classes absent from
/// an image get no row.
pub fn image_class_means<'t, T: Element>(
    feats: Var<'t, T>,
    labels: &[u8],
) -> Result<ClassMeans<'t, T>> {
    let (n, k) = pixels(feats, labels, "image_class_means")?;
    let batch = feats.shape().first().copied().unwrap_or(1).max(1);
    let per_image = n / batch;
    let mut members: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (p, &l) in labels.iter().enumerate() {
        if (l as usize) < k {
            members
                .entry((p / per_image, l as usize))
                .or_default()
                .push(p);
        }
    }
    if members.is_empty() {
        return Ok(ClassMeans {
            means: None,
            entries: Vec::new(),
        });
    }
    let r = members.len();
    let mut avg = vec![0.0; r * n];
    for (row, pix) in members.values().enumerate() {
        let w = 1.0 / pix.len() as f64;
        for &p in pix {
            avg[row * n + p] = w;
        }
    }
    let avg = constant(feats, &[r, n], avg)?;
    let means = avg.matmul(feats.reshape(&[n, k])?)?;
    Ok(ClassMeans {
        means: Some(means),
        entries: members.into_keys().collect(),
    })
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

/// Temperature-scaled softmax contrast of each normalized image class mean
/// against all normalized snapshot means. Summed over the classes of an
/// image and averaged over the images of the batch. Zero when no snapshot
/// exists.
pub fn contrastive_loss<'t, T: Element>(
    means: &ClassMeans<'t, T>,
    snapshot: &ClassStats,
    tau: f64,
) -> Result<Var<'t, T>> {
    let Some(mv) = means.means else {
        return Err(Error::Contract(
            "contrastive_loss: no class present in the batch".into(),
        ));
    };
    let k = mv.shape()[1];
    if snapshot.dim() != k {
        return Err(Error::Shape(format!(
            "contrastive_loss: stats of dimension {} for K={k}",
            snapshot.dim()
        )));
    }
    if !snapshot.has_snapshot() {
        return Ok(zero(mv));
    }
    // Columns of the contrast: snapshot classes with a usable mean.
    let mut column = vec![None; snapshot.classes()];
    let mut protos = Vec::new();
    let mut c = 0;
    for (i, col) in column.iter_mut().enumerate() {
        match snapshot.snapshot(i).and_then(|m| unit(&m.mean)) {
            Some(u) => {
                protos.extend(u);
                *col = Some(c);
                c += 1;
            }
            None => {
                if snapshot.snapshot(i).is_some() {
                    log::warn!("class {i} snapshot mean has zero norm; left out of the contrast");
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut images = std::collections::BTreeSet::new();
    {
        let v = mv.value();
        for (r, &(b, cls)) in means.entries.iter().enumerate() {
            let norm = v
                .row(r)
                .iter()
                .map(|x| x.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            match column[cls] {
                Some(col) if norm > 0.0 => {
                    rows.push(r);
                    targets.push(col);
                    images.insert(b);
                }
                Some(_) => {
                    log::debug!("image {b}: class {cls} mean feature has zero norm; skipped")
                }
                None => log::debug!("image {b}: class {cls} has no snapshot mean; skipped"),
            }
        }
    }
    if rows.is_empty() {
        return Ok(zero(mv));
    }
    let m = rows.len();
    let f = mv.gather_rows(rows)?;
    let ones = constant(mv, &[m], vec![1.0; m])?;
    let fhat = f.mul_rows(ones.div(f.norm_last())?)?;
    // protos is [c, k]; transpose for the product.
    let mut pt = vec![0.0; k * c];
    for i in 0..c {
        for j in 0..k {
            pt[j * c + i] = protos[i * k + j];
        }
    }
    let pt = constant(mv, &[k, c], pt)?;
    let logits = fhat.matmul(pt)?.scale(T::from_f64(1.0 / tau));
    let per_image = T::from_f64(-1.0 / images.len() as f64);
    Ok(logits.log_softmax().pick(targets)?.sum().scale(per_image))
}

/// Hinge pushing known-pixel squared norms above `xi`, plus the squared norm
/// of every unlabeled pixel; averaged over all pixels.
pub fn objectosphere_loss<'t, T: Element>(
    feats: Var<'t, T>,
    labels: &[u8],
    xi: f64,
) -> Result<Var<'t, T>> {
    let (n, k) = pixels(feats, labels, "objectosphere_loss")?;
    if n == 0 {
        return Ok(zero(feats));
    }
    let (known, unknown): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&p| (labels[p] as usize) < k);
    let flat = feats.reshape(&[n, k])?;
    let mut total = zero(feats);
    if !known.is_empty() {
        let sq = flat.gather_rows(known)?.square().sum_last();
        total = total.add(sq.neg().add_scalar(T::from_f64(xi)).relu().sum())?;
    }
    if !unknown.is_empty() {
        total = total.add(flat.gather_rows(unknown)?.square().sum())?;
    }
    Ok(total.scale(T::from_f64(1.0 / n as f64)))
}
