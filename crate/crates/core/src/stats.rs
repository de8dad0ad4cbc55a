//! Running per-class activation statistics over true-positive pixels.
//!
//! Each epoch accumulates mean and (population) variance of the feature
//! vectors of pixels whose ground truth and predicted label agree. At the
//! end of an epoch the accumulators are frozen into a snapshot that the
//! next epoch's losses read, then reset.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Welford accumulator over vectors of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the running mean.
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: impl IntoIterator<Item = f64>) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Parallel combination of two accumulators.
    pub fn merge(&self, other: &Self) -> Self {
        if other.count == 0 {
            return self.clone();
        }
        if self.count == 0 {
            return other.clone();
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut out = Self::new(self.mean.len());
        out.count = self.count + other.count;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            out.mean[j] = self.mean[j] + delta * nb / n;
            out.m2[j] = self.m2[j] + other.m2[j] + delta * delta * na * nb / n;
        }
        out
    }

    /// Population variance (divides by the count).
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|s| (s / n).max(0.0)).collect()
    }
}

/// Frozen statistics of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
    /// Epoch whose pixels produced these values.
    pub epoch: usize,
}

impl ClassMoments {
    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    classes: usize,
    dim: usize,
    epoch: usize,
    running: Vec<RunningMoments>,
    snapshot: Vec<Option<ClassMoments>>,
    snapshot_tag: Option<usize>,
    across_epochs: bool,
}

impl ClassStats {
    /// Fresh statistics for `classes` classes of `dim`-dimensional features,
    /// accumulating epoch 1.
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            epoch: 1,
            running: vec![RunningMoments::new(dim); classes],
            snapshot: vec![None; classes],
            snapshot_tag: None,
            across_epochs: false,
        }
    }

    /// Keep accumulating across epochs instead of resetting at each snapshot.
    pub fn accumulate_across_epochs(mut self, yes: bool) -> Self {
        self.across_epochs = yes;
        self
    }

    /// Rebuilds statistics from a stored snapshot (running accumulators empty).
    pub fn from_snapshot(
        dim: usize,
        epoch: usize,
        snapshot_tag: Option<usize>,
        snapshot: Vec<Option<ClassMoments>>,
    ) -> Result<Self> {
        if let Some(bad) = snapshot
            .iter()
            .flatten()
            .find(|m| m.mean.len() != dim || m.var.len() != dim)
        {
            return Err(Error::Data(format!(
                "snapshot entry of dimension {} in {dim}-dimensional stats",
                bad.mean.len()
            )));
        }
        let classes = snapshot.len();
        Ok(Self {
            classes,
            dim,
            epoch,
            running: vec![RunningMoments::new(dim); classes],
            snapshot,
            snapshot_tag,
            across_epochs: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The epoch currently being accumulated (1-based).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Epoch at whose end the current snapshot was taken.
    pub fn snapshot_tag(&self) -> Option<usize> {
        self.snapshot_tag
    }

    pub fn snapshot(&self, class: usize) -> Option<&ClassMoments> {
        self.snapshot.get(class).and_then(|s| s.as_ref())
    }

    pub fn snapshots(&self) -> &[Option<ClassMoments>] {
        &self.snapshot
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.iter().any(|s| s.is_some())
    }

    pub fn running(&self, class: usize) -> &RunningMoments {
        &self.running[class]
    }

    /// Accumulates the true-positive pixels of `feats` (`[.., dim]`). A pixel
    /// counts for class `k` when both its label and its prediction are `k`.
    /// Returns the number of pixels used.
    pub fn update<T: Element>(
        &mut self,
        feats: &Tensor<T>,
        labels: &[u8],
        predictions: &[usize],
    ) -> Result<usize> {
        if feats.last_dim() != self.dim
            || feats.rows() != labels.len()
            || labels.len() != predictions.len()
        {
            return Err(Error::Shape(format!(
                "stats update: features {:?}, {} labels, {} predictions, dim {}",
                feats.shape(),
                labels.len(),
                predictions.len(),
                self.dim
            )));
        }
        let mut used = 0;
        for (p, (&label, &pred)) in labels.iter().zip(predictions).enumerate() {
            let k = label as usize;
            if k < self.classes && pred == k {
                self.running[k].push(feats.row(p).iter().map(|x| x.as_f64()));
                used += 1;
            }
        }
        Ok(used)
    }

    /// [`update`](Self::update) with predictions taken as the argmax of `feats`.
    pub fn update_argmax<T: Element>(&mut self, feats: &Tensor<T>, labels: &[u8]) -> Result<usize> {
        let predictions = feats.argmax_last();
        self.update(feats, labels, &predictions)
    }

    /// Freezes this epoch's statistics and starts the next epoch.
    ///
    /// Classes without any true positive this epoch keep their previous
    /// snapshot entry (or stay absent).
    pub fn snapshot_epoch(&mut self) {
        for (k, acc) in self.running.iter_mut().enumerate() {
            if acc.count > 0 {
                self.snapshot[k] = Some(ClassMoments {
                    mean: acc.mean.clone(),
                    var: acc.variance(),
                    count: acc.count,
                    epoch: self.epoch,
                });
            } else if self.snapshot[k].is_none() {
                log::warn!(
                    "class {k} has no true-positive pixels after epoch {}; no statistics",
                    self.epoch
                );
            }
            if !self.across_epochs {
                *acc = RunningMoments::new(self.dim);
            }
        }
        self.snapshot_tag = Some(self.epoch);
        self.epoch += 1;
    }

    /// Combines accumulators gathered in parallel over disjoint pixel sets.
    /// The snapshot is taken from `a`.
    pub fn merge(a: &ClassStats, b: &ClassStats) -> Result<ClassStats> {
        if a.classes != b.classes || a.dim != b.dim {
            return Err(Error::Shape(format!(
                "merging stats of {}x{} with {}x{}",
                a.classes, a.dim, b.classes, b.dim
            )));
        }
        if a.epoch != b.epoch {
            return Err(Error::Contract(format!(
                "merging stats of epoch {} with epoch {}",
                a.epoch, b.epoch
            )));
        }
        let mut out = a.clone();
        for (r, other) in out.running.iter_mut().zip(&b.running) {
            *r = r.merge(other);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(
            &[rows.len(), d],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_stream_has_zero_variance() {
        let mut s = ClassStats::new(2, 2);
        let f = feats(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]]);
        s.update(&f, &[1, 1, 1], &[1, 1, 1]).unwrap();
        s.snapshot_epoch();
        let m = s.snapshot(1).unwrap();
        assert_eq!(m.mean, vec![1.5, -2.0]);
        assert_eq!(m.var, vec![0.0, 0.0]);
    }

    #[test]
    fn two_pixels_population_variance() {
        let mut s = ClassStats::new(1, 1);
        s.update(&feats(&[&[0.0], &[2.0]]), &[0, 0], &[0, 0])
            .unwrap();
        s.snapshot_epoch();
        let m = s.snapshot(0).unwrap();
        assert_eq!(m.mean, vec![1.0]);
        assert_eq!(m.var, vec![1.0]);
    }

    #[test]
    fn only_true_positives_count() {
        let mut s = ClassStats::new(2, 2);
        let f = feats(&[&[1.0, 0.0], &[0.0, 1.0], &[5.0, 5.0]]);
        // second pixel misclassified, third void
        let used = s.update(&f, &[0, 1, crate::VOID], &[0, 0, 0]).unwrap();
        assert_eq!(used, 1);
        assert_eq!(s.running(0).count, 1);
        assert_eq!(s.running(1).count, 0);
        let wrong = s.update(&f, &[0, 1, 1], &[1, 0, 0]).unwrap();
        assert_eq!(wrong, 0);
    }

    #[test]
    fn absent_class_has_no_snapshot_then_keeps_previous() {
        let mut s = ClassStats::new(2, 1);
        s.update(&feats(&[&[3.0]]), &[0], &[0]).unwrap();
        s.snapshot_epoch();
        assert!(s.snapshot(1).is_none());
        assert_eq!(s.snapshot_tag(), Some(1));
        s.update(&feats(&[&[1.0]]), &[1], &[1]).unwrap();
        s.snapshot_epoch();
        assert_eq!(s.snapshot(0).unwrap().epoch, 1);
        assert_eq!(s.snapshot(1).unwrap().epoch, 2);
        assert_eq!(s.epoch(), 3);
    }

    #[test]
    fn update_after_snapshot_leaves_snapshot_alone() {
        let mut s = ClassStats::new(1, 1);
        s.update(&feats(&[&[3.0]]), &[0], &[0]).unwrap();
        s.snapshot_epoch();
        let before = s.snapshot(0).cloned();
        s.update(&feats(&[&[100.0]]), &[0], &[0]).unwrap();
        assert_eq!(s.snapshot(0).cloned(), before);
        assert_eq!(s.running(0).count, 1);
    }

    #[test]
    fn identical_epochs_give_identical_snapshots() {
        let f = feats(&[&[1.0, 2.0], &[3.0, 1.0]]);
        let mut s = ClassStats::new(2, 2);
        s.update(&f, &[0, 0], &[0, 0]).unwrap();
        s.snapshot_epoch();
        let first = s.snapshot(0).unwrap().clone();
        s.update(&f, &[0, 0], &[0, 0]).unwrap();
        s.snapshot_epoch();
        let second = s.snapshot(0).unwrap();
        assert_eq!(first.mean, second.mean);
        assert_eq!(first.var, second.var);
    }

    #[test]
    fn merge_rejects_epoch_mismatch() {
        let a = ClassStats::new(2, 2);
        let mut b = ClassStats::new(2, 2);
        b.snapshot_epoch();
        assert!(matches!(ClassStats::merge(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let mut a = ClassStats::new(1, 2);
        a.update(&feats(&[&[1.0, 2.0], &[2.0, 5.0]]), &[0, 0], &[0, 0])
            .unwrap();
        let merged = ClassStats::merge(&a, &ClassStats::new(1, 2)).unwrap();
        assert_eq!(merged, a);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = ClassStats::new(2, 3);
        let f = feats(&[&[1.0, 2.0]]);
        assert!(matches!(s.update(&f, &[0], &[0]), Err(Error::Shape(_))));
    }
}
