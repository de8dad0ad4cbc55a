//! Pixel-level anomaly metrics, mIoU and discovery matching.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::VOID;

/// Unknown-ness scores with binary ground truth (`true` = unknown).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinaryEval {
    scores: Vec<f64>,
    positive: Vec<bool>,
}

impl BinaryEval {
    pub fn new(scores: Vec<f64>, positive: Vec<bool>) -> Result<Self> {
        if scores.len() != positive.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                positive.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("unknown-ness score at index {i}"),
                value: scores[i],
            });
        }
        Ok(Self { scores, positive })
    }

    /// Appends the pixels of one label map. Void pixels are skipped; labels
    /// `>= classes` are positives.
    pub fn push_labels(&mut self, scores: &[f64], labels: &[u8], classes: usize) -> Result<()> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        for (&s, &l) in scores.iter().zip(labels) {
            if l == VOID {
                continue;
            }
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    location: "unknown-ness score".into(),
                    value: s,
                });
            }
            self.scores.push(s);
            self.positive.push(l as usize >= classes);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.positives() as f64 / self.len().max(1) as f64
    }

    /// Cumulative `(tp, fp)` after each distinct threshold, descending.
    fn operating_points(&self) -> Result<(Vec<(u64, u64)>, u64, u64)> {
        let p = self.positives() as u64;
        let n = self.len() as u64 - p;
        if p == 0 || n == 0 {
            return Err(Error::Data(format!(
                "binary evaluation needs both classes ({p} positives, {n} negatives)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (i, &idx) in order.iter().enumerate() {
            if self.positive[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
            let last = i + 1 == order.len() || self.scores[order[i + 1]] != self.scores[idx];
            if last {
                points.push((tp, fp));
            }
        }
        Ok((points, p, n))
    }
}

/// Average precision: `Σ (R_i − R_{i−1}) · P_i` over distinct thresholds.
pub fn aupr(eval: &BinaryEval) -> Result<f64> {
    let (points, p, _) = eval.operating_points()?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in points {
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// False positive rate at the first threshold whose TPR reaches 0.95.
pub fn fpr_at_95tpr(eval: &BinaryEval) -> Result<f64> {
    let (points, p, n) = eval.operating_points()?;
    for (tp, fp) in points {
        if tp as f64 / p as f64 >= 0.95 {
            return Ok(fp as f64 / n as f64);
        }
    }
    unreachable!("the last operating point has TPR 1")
}

/// Confusion counts over `classes` labels; rows are ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionAccumulator {
    classes: usize,
    counts: Vec<u64>,
    /// Per ground-truth class, pixels predicted outside the class set.
    missed: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            missed: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Counts pixels whose ground truth is in range; void and out-of-range
    /// ground truth is skipped. Out-of-range predictions are false negatives
    /// of the true class.
    pub fn add(&mut self, gt: &[u8], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let k = self.classes;
        for (&g, &p) in gt.iter().zip(pred) {
            let g = g as usize;
            if g >= k {
                continue;
            }
            if p < k {
                self.counts[g * k + p] += 1;
            } else {
                self.missed[g] += 1;
            }
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    /// `(tp, fp, fn)` of class `k`.
    pub fn tp_fp_fn(&self, k: usize) -> (u64, u64, u64) {
        let tp = self.count(k, k);
        let col: u64 = (0..self.classes).map(|g| self.count(g, k)).sum();
        let row: u64 = (0..self.classes).map(|p| self.count(k, p)).sum::<u64>() + self.missed[k];
        (tp, col - tp, row - tp)
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "merging {}-class with {}-class confusion",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
        Ok(())
    }
}

/// Mean IoU over `classes`; classes with an empty union are left out.
pub fn miou(conf: &ConfusionAccumulator, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Contract("miou over an empty class set".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for &k in classes {
        if k >= conf.classes {
            return Err(Error::Contract(format!(
                "miou: class {k} outside 0..{}",
                conf.classes
            )));
        }
        let (tp, fp, fn_) = conf.tp_fp_fn(k);
        let union = tp + fp + fn_;
        if union > 0 {
            sum += tp as f64 / union as f64;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Data(
            "miou: every requested class has an empty union".into(),
        ));
    }
    Ok(sum / used as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryMatch {
    /// Ground-truth class → (best discovered id, IoU). Id 0 means no
    /// discovered class overlaps it.
    pub per_class: BTreeMap<u8, (usize, f64)>,
    /// Number of distinct discovered classes in the map.
    pub n_u: usize,
}

/// Matches each ground-truth class in `gt_classes` to the discovered class
/// of highest IoU. `discovered` holds 1-based ids, 0 for pixels not
/// assigned; ties go to the lower id.
pub fn match_discovered(
    discovered: &[usize],
    gt: &[u8],
    gt_classes: &[u8],
) -> Result<DiscoveryMatch> {
    if discovered.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} discovered labels for {} ground-truth labels",
            discovered.len(),
            gt.len()
        )));
    }
    let mut disc_size: BTreeMap<usize, u64> = BTreeMap::new();
    let mut gt_size: BTreeMap<u8, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(u8, usize), u64> = BTreeMap::new();
    let wanted: BTreeSet<u8> = gt_classes.iter().copied().collect();
    for (&d, &g) in discovered.iter().zip(gt) {
        if d != 0 {
            *disc_size.entry(d).or_default() += 1;
        }
        if wanted.contains(&g) {
            *gt_size.entry(g).or_default() += 1;
            if d != 0 {
                *inter.entry((g, d)).or_default() += 1;
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for (&g, &gs) in &gt_size {
        let mut best = (0usize, 0.0f64);
        for (&d, &ds) in &disc_size {
            let i = inter.get(&(g, d)).copied().unwrap_or(0);
            let iou = i as f64 / (gs + ds - i) as f64;
            if iou > best.1 {
                best = (d, iou);
            }
        }
        per_class.insert(g, best);
    }
    Ok(DiscoveryMatch {
        per_class,
        n_u: disc_size.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(scores: &[f64], pos: &[bool]) -> BinaryEval {
        BinaryEval::new(scores.to_vec(), pos.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let e = eval(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!(aupr(&e).unwrap(), 1.0);
        assert_eq!(fpr_at_95tpr(&e).unwrap(), 0.0);
    }

    #[test]
    fn inverted_scores_need_every_negative() {
        let e = eval(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]);
        assert_eq!(fpr_at_95tpr(&e).unwrap(), 1.0);
        assert!((aupr(&e).unwrap() - 0.5 * (1.0 / 3.0) - 0.5 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn ties_are_one_threshold() {
        let e = eval(&[0.5, 0.5, 0.5, 0.5], &[true, false, false, false]);
        assert_eq!(aupr(&e).unwrap(), 0.25);
        assert_eq!(fpr_at_95tpr(&e).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_truth_is_an_error() {
        let e = eval(&[0.1, 0.2], &[true, true]);
        assert!(matches!(aupr(&e), Err(Error::Data(_))));
        assert!(matches!(fpr_at_95tpr(&e), Err(Error::Data(_))));
    }

    #[test]
    fn void_never_enters_evaluation() {
        let mut e = BinaryEval::default();
        e.push_labels(&[0.1, 0.9, 0.4], &[0, VOID, 5], 4).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.positives(), 1);
        let mut c = ConfusionAccumulator::new(2);
        c.add(&[0, VOID, 1], &[0, 0, 1]).unwrap();
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn miou_examples() {
        let mut c = ConfusionAccumulator::new(3);
        c.add(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(miou(&c, &[0, 1, 2]).unwrap(), 1.0);
        let mut d = ConfusionAccumulator::new(2);
        d.add(&[0, 0, 1], &[1, 1, 0]).unwrap();
        assert_eq!(miou(&d, &[0, 1]).unwrap(), 0.0);
        assert!(miou(&d, &[]).is_err());
    }

    #[test]
    fn miou_skips_empty_union() {
        let mut c = ConfusionAccumulator::new(3);
        c.add(&[0, 0, 1], &[0, 1, 1]).unwrap();
        // class 0: 1/2, class 1: 1/2, class 2 absent
        assert_eq!(miou(&c, &[0, 1, 2]).unwrap(), 0.5);
    }

    #[test]
    fn out_of_set_prediction_is_a_miss() {
        let mut c = ConfusionAccumulator::new(2);
        c.add(&[0, 0, 1], &[0, 7, 1]).unwrap();
        assert_eq!(c.tp_fp_fn(0), (1, 0, 1));
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn match_examples() {
        let gt = [4, 4, 5, 5];
        let m = match_discovered(&[1, 1, 2, 2], &gt, &[4, 5]).unwrap();
        assert_eq!(m.per_class[&4], (1, 1.0));
        assert_eq!(m.per_class[&5], (2, 1.0));
        assert_eq!(m.n_u, 2);

        let mut gt = vec![4u8; 60];
        gt.extend(vec![5u8; 40]);
        let m = match_discovered(&vec![1; 100], &gt, &[4, 5]).unwrap();
        assert_eq!(m.per_class[&4], (1, 0.6));
        assert_eq!(m.per_class[&5], (1, 0.4));
        assert_eq!(m.n_u, 1);
    }

    #[test]
    fn match_ties_go_low_and_absent_class_omitted() {
        let m = match_discovered(&[2, 1], &[4, 4], &[4, 5]).unwrap();
        assert_eq!(m.per_class[&4].0, 1);
        assert!(!m.per_class.contains_key(&5));
    }
}
