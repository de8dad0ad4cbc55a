//! Joint optimization of both decoders.
//!
//! Each batch runs both heads, sums the semantic-decoder loss and the
//! contrastive-decoder loss, and takes one Adam step. Statistics for both
//! heads are gathered from the same forward pass and frozen at the end of
//! each epoch; the feature and contrastive losses of epoch `e` read the
//! snapshot of epoch `e − 1` and are inactive in the first epoch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, ClassWeights, LossWeights};
use crate::net::{Forward, Model, Param};
use crate::stats::ClassStats;
use crate::synthdata::Scene;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flip: bool,
    pub scale: bool,
    pub crop: bool,
    /// Largest zoom factor used by random scaling.
    pub max_scale: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            flip: true,
            scale: true,
            crop: true,
            max_scale: 1.25,
        }
    }
}

impl Augment {
    pub const NONE: Augment = Augment {
        flip: false,
        scale: false,
        crop: false,
        max_scale: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of steps spent warming up.
    pub warmup: f64,
    /// `lr₀ / start_div` is the first learning rate.
    pub start_div: f64,
    /// `lr₀ / end_div` is the last learning rate.
    pub end_div: f64,
    pub weights: LossWeights,
    pub augment: Augment,
    pub seed: u64,
    pub use_feat_loss: bool,
    pub use_cont_decoder: bool,
    /// Keep accumulating class statistics across epochs.
    pub stats_across_epochs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 8,
            lr: 0.004,
            warmup: 0.3,
            start_div: 25.0,
            end_div: 1e4,
            weights: LossWeights::default(),
            augment: Augment::default(),
            seed: 7,
            use_feat_loss: true,
            use_cont_decoder: true,
            stats_across_epochs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch < 1 {
            return Err(Error::Config(format!(
                "epochs and batch must be >= 1 (got {} and {})",
                self.epochs, self.batch
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup) || self.start_div < 1.0 || self.end_div < 1.0 {
            return Err(Error::Config("bad one-cycle schedule shape".into()));
        }
        if self.augment.max_scale < 1.0 {
            return Err(Error::Config(format!(
                "max_scale must be >= 1, got {}",
                self.augment.max_scale
            )));
        }
        self.weights.validate()
    }
}

/// One-cycle learning rate: cosine warm-up from `lr₀ / start_div` to `lr₀`
/// over the first `warmup` fraction of steps, then cosine decay to
/// `lr₀ / end_div` at the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let lr0 = cfg.lr;
    let (lo, hi, end) = (lr0 / cfg.start_div, lr0, lr0 / cfg.end_div);
    let last = total_steps.saturating_sub(1);
    let step = step.min(last);
    let peak = (cfg.warmup * last as f64).round() as usize;
    let cos = |from: f64, to: f64, x: f64| {
        to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    };
    if step < peak {
        cos(lo, hi, step as f64 / peak as f64)
    } else if last > peak {
        cos(hi, end, (step - peak) as f64 / (last - peak) as f64)
    } else {
        hi
    }
}

/// Bias-corrected Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Element>(params: &[Param<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step<T: Element>(
        &mut self,
        params: &mut [Param<T>],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "adam: gradient {:?} for {} {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Scales 8-bit color to roughly `[-1, 1]`.
pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Stacks scenes into a `[B, H, W, 3]` input tensor and a flat label map.
pub fn batch_tensor<T: Element>(scenes: &[&Scene]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(scenes.len() * h * w * 3);
    let mut labels = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::Shape("scenes of one batch must share a size".into()));
        }
        data.extend(s.image.data.iter().map(|&v| T::from_f64(normalize(v))));
        labels.extend_from_slice(&s.labels.data);
    }
    Ok((Tensor::new(&[scenes.len(), h, w, 3], data)?, labels))
}

/// Random flip, zoom and crop. Image and labels are resampled with the same
/// nearest-neighbor map, so no label value is ever invented or blended.
pub fn augment(scene: &Scene, aug: &Augment, rng: &mut impl Rng) -> Scene {
    let (h, w) = (scene.image.height, scene.image.width);
    let flip = aug.flip && rng.gen_bool(0.5);
    let s = if aug.scale && aug.max_scale > 1.0 {
        rng.gen_range(1.0..=aug.max_scale)
    } else {
        1.0
    };
    let (sh, sw) = (
        (h as f64 * s).round() as usize,
        (w as f64 * s).round() as usize,
    );
    let (oy, ox) = if aug.crop {
        (rng.gen_range(0..=sh - h), rng.gen_range(0..=sw - w))
    } else {
        ((sh - h) / 2, (sw - w) / 2)
    };
    let mut image = scene.image.clone();
    let mut labels = scene.labels.clone();
    for y in 0..h {
        for x in 0..w {
            let (zy, zx) = (y + oy, x + ox);
            let sy = ((zy as f64 + 0.5) / s).floor().min(h as f64 - 1.0) as usize;
            let mut sx = ((zx as f64 + 0.5) / s).floor().min(w as f64 - 1.0) as usize;
            if flip {
                sx = w - 1 - sx;
            }
            let (src, dst) = (sy * w + sx, y * w + x);
            labels.data[dst] = scene.labels.data[src];
            image.data[dst * 3..dst * 3 + 3]
                .copy_from_slice(&scene.image.data[src * 3..src * 3 + 3]);
        }
    }
    Scene { image, labels }
}

/// Total training loss of one forward pass: the semantic-decoder loss plus,
/// when the contrastive head ran, the contrastive-decoder loss. Also returns
/// the unweighted components `[ce, feat, sdec, cont, obj, cdec]`.
pub fn dual_decoder_loss<'t, T: Element>(
    out: &Forward<'t, T>,
    labels: &[u8],
    class_w: &ClassWeights,
    sem_stats: &ClassStats,
    cont_stats: &ClassStats,
    cfg: &TrainConfig,
) -> Result<(Var<'t, T>, [f64; 6])> {
    let w = &cfg.weights;
    let sem = out.semantic;
    let tape = sem.tape();
    let ce = losses::semantic_ce(sem, labels, class_w)?;
    let feat = if cfg.use_feat_loss {
        losses::feature_loss(sem, labels, sem_stats)?
    } else {
        tape.scalar(T::zero())
    };
    let sdec = losses::sdec_loss(ce, feat, w)?;
    let mut total = sdec;
    let mut parts = [
        ce.item()?.as_f64(),
        feat.item()?.as_f64(),
        sdec.item()?.as_f64(),
        0.0,
        0.0,
        0.0,
    ];
    if let Some(cont) = out.contrastive {
        let means = losses::image_class_means(cont, labels)?;
        let cl = if means.is_empty() {
            tape.scalar(T::zero())
        } else {
            losses::contrastive_loss(&means, cont_stats, w.tau)?
        };
        let obj = losses::objectosphere_loss(cont, labels, w.xi)?;
        let cdec = losses::cdec_loss(cl, obj, w)?;
        parts[3] = cl.item()?.as_f64();
        parts[4] = obj.item()?.as_f64();
        parts[5] = cdec.item()?.as_f64();
        total = total.add(cdec)?;
    }
    Ok((total, parts))
}

/// Loss components averaged over the batches of one epoch (unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub feat: f64,
    pub sdec: f64,
    pub cont: f64,
    pub obj: f64,
    pub cdec: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub model: Model<T>,
    pub sem_stats: ClassStats,
    pub cont_stats: ClassStats,
    pub history: Vec<EpochRecord>,
    /// Number of completed epochs.
    pub epoch: usize,
}

pub fn train<T: Element>(
    model: Model<T>,
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<Trained<T>> {
    train_with(model, scenes, cfg, |_| Ok(()))
}

/// Trains and calls `on_epoch` after every completed epoch with the current
/// state. A non-finite loss aborts with an error; the last state passed to
/// `on_epoch` is the last good one.
pub fn train_with<T: Element>(
    model: Model<T>,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Trained<T>) -> Result<()>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let k = model.config.classes;
    let mut labels_all = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        if let Some(&bad) = s
            .labels
            .data
            .iter()
            .find(|&&l| l as usize >= k && l != crate::VOID)
        {
            return Err(Error::Data(format!(
                "training scene {i} contains label {bad} outside the known classes"
            )));
        }
        labels_all.extend_from_slice(&s.labels.data);
    }
    let class_w: ClassWeights = losses::class_weights(&losses::label_histogram(&labels_all, k))?;

    let mut state = Trained {
        sem_stats: ClassStats::new(k, k).accumulate_across_epochs(cfg.stats_across_epochs),
        cont_stats: ClassStats::new(k, k).accumulate_across_epochs(cfg.stats_across_epochs),
        model,
        history: Vec::new(),
        epoch: 0,
    };
    let mut adam = Adam::new(&state.model.params);
    let steps_per_epoch = scenes.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..scenes.len()).collect();

    for epoch in 1..=cfg.epochs {
        let expected = (epoch > 1).then(|| epoch - 1);
        for (which, st) in [
            ("semantic", &state.sem_stats),
            ("contrastive", &state.cont_stats),
        ] {
            if st.has_snapshot() && st.snapshot_tag() != expected {
                return Err(Error::Contract(format!(
                    "{which} statistics snapshot is from epoch {:?}, expected {expected:?}",
                    st.snapshot_tag()
                )));
            }
        }
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            ..Default::default()
        };
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let step = (epoch - 1) * steps_per_epoch + b;
            let lr = lr_at(step, total_steps, cfg);
            let batch: Vec<Scene> = chunk
                .iter()
                .map(|&i| augment(&scenes[i], &cfg.augment, &mut rng))
                .collect();
            let refs: Vec<&Scene> = batch.iter().collect();
            let (x, labels) = batch_tensor::<T>(&refs)?;

            let tape = Tape::new();
            let bound = state.model.bind(&tape, cfg.use_cont_decoder);
            let out = bound.forward(tape.constant(x))?;
            let sem = out.semantic;
            let (total, parts) = dual_decoder_loss(
                &out,
                &labels,
                &class_w,
                &state.sem_stats,
                &state.cont_stats,
                cfg,
            )?;
            let value = total.item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("training loss at epoch {epoch}, batch {b}"),
                    value,
                });
            }
            tape.backward(total)?;
            let grads = bound.grads();

            let preds = sem.value().argmax_last();
            state.sem_stats.update(&sem.value(), &labels, &preds)?;
            if let Some(cont) = out.contrastive {
                state.cont_stats.update(&cont.value(), &labels, &preds)?;
            }
            drop(bound);
            adam.step(&mut state.model.params, &grads, lr)?;

            rec.ce += parts[0];
            rec.feat += parts[1];
            rec.sdec += parts[2];
            rec.cont += parts[3];
            rec.obj += parts[4];
            rec.cdec += parts[5];
            rec.total += value;
            rec.lr = lr;
        }
        let n = steps_per_epoch as f64;
        for v in [
            &mut rec.ce,
            &mut rec.feat,
            &mut rec.sdec,
            &mut rec.cont,
            &mut rec.obj,
            &mut rec.cdec,
            &mut rec.total,
        ] {
            *v /= n;
        }
        state.sem_stats.snapshot_epoch();
        if cfg.use_cont_decoder {
            state.cont_stats.snapshot_epoch();
        }
        state.epoch = epoch;
        log::info!(
            "epoch {epoch}: total {:.4} ce {:.4} feat {:.4} cont {:.4} obj {:.4} lr {:.2e}",
            rec.total,
            rec.ce,
            rec.feat,
            rec.cont,
            rec.obj,
            rec.lr
        );
        state.history.push(rec);
        on_epoch(&state)?;
    }
    Ok(state)
}
