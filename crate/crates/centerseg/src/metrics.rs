//! Confusion-matrix evaluation: per-class IoU, precision/recall/F1,
//! mIoU, overall accuracy. Rows index ground truth, columns prediction.

use crate::error::{Error, Result};
use crate::prototype::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major K×K counts, rows = GT, cols = prediction.
    pub counts: Vec<u64>,
    pub ignored: u64,
}

#[derive(Clone, Debug)]
pub struct ClassScores {
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScores>,
    pub miou: f64,
    pub oa: f64,
    pub macro_f1: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes], ignored: 0 }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair of label maps.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "pred has {} pixels, gt has {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_INDEX {
                self.ignored += 1;
                continue;
            }
            if (g as usize) >= k || (p as usize) >= k {
                return Err(Error::Data(format!("label out of range: gt={} pred={}", g, p)));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Associative merge of per-shard matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension("class count mismatch in merge".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    /// Classes absent from both GT and prediction get `None` scores and
    /// are excluded from the macro means.
    pub fn compute(&self) -> Result<MetricsReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract("empty confusion matrix".into()));
        }
        let k = self.num_classes;
        let mut per_class = Vec::with_capacity(k);
        let (mut iou_sum, mut iou_n) = (0.0, 0usize);
        let (mut f1_sum, mut f1_n) = (0.0, 0usize);
        let mut trace = 0u64;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            trace += tp;
            let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| self.counts[c * k + j]).sum();
            let fp: u64 = (0..k).filter(|&i| i != c).map(|i| self.counts[i * k + c]).sum();
            let denom = tp + fp + fn_;
            let iou = if denom > 0 {
                Some(tp as f64 / denom as f64)
            } else {
                None
            };
            let precision = if tp + fp > 0 { Some(tp as f64 / (tp + fp) as f64) } else { None };
            let recall = if tp + fn_ > 0 { Some(tp as f64 / (tp + fn_) as f64) } else { None };
            // 2PR/(P+R); equals 2TP/(2TP+FP+FN) and is defined whenever
            // the class appears at all
            let f1 = if denom > 0 {
                Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
            } else {
                None
            };
            if let Some(v) = iou {
                iou_sum += v;
                iou_n += 1;
            }
            if let Some(v) = f1 {
                f1_sum += v;
                f1_n += 1;
            }
            per_class.push(ClassScores { iou, precision, recall, f1 });
        }
        if iou_n == 0 {
            return Err(Error::Contract("no class present in the matrix".into()));
        }
        Ok(MetricsReport {
            per_class,
            miou: iou_sum / iou_n as f64,
            oa: trace as f64 / total as f64,
            macro_f1: f1_sum / f1_n as f64,
        })
    }

    /// Metrics CSV: one row per class plus a summary row.
    pub fn to_csv(&self) -> Result<String> {
        let report = self.compute()?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{:.6}", x)).unwrap_or_else(|| "n/a".into());
        let mut out = String::from("class,iou,precision,recall,f1\n");
        for (c, s) in report.per_class.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c,
                fmt(s.iou),
                fmt(s.precision),
                fmt(s.recall),
                fmt(s.f1)
            ));
        }
        out.push_str(&format!(
            "summary,miou={:.6},oa={:.6},macro_f1={:.6},\n",
            report.miou, report.oa, report.macro_f1
        ));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accumulate_basics() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0u8; 10], &[0u8; 10]).unwrap();
        assert_eq!(cm.counts[0], 10);
        // all ignored: counts unchanged, ignored bumped
        let before = cm.counts.clone();
        cm.accumulate(&[1u8; 5], &[IGNORE_INDEX; 5]).unwrap();
        assert_eq!(cm.counts, before);
        assert_eq!(cm.ignored, 5);
        // shape mismatch
        assert!(matches!(cm.accumulate(&[0], &[0, 1]), Err(Error::Dimension(_))));
        // out-of-range prediction
        assert!(matches!(cm.accumulate(&[7], &[0]), Err(Error::Data(_))));
    }

    #[test]
    fn hand_counted_mixed_case() {
        // gt:   0 0 1 1
        // pred: 0 1 1 0
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 1, 1]);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        let r = cm.compute().unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        for s in &r.per_class {
            assert_eq!(s.iou, Some(1.0));
        }
    }

    #[test]
    fn hand_computed_fixture() {
        let cm = ConfusionMatrix { num_classes: 2, counts: vec![2, 2, 0, 4], ignored: 0 };
        let r = cm.compute().unwrap();
        assert!((r.per_class[0].iou.unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class[1].iou.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.oa - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_and_absent_class_handling() {
        let cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.compute(), Err(Error::Contract(_))));
        // class 2 absent from gt and pred -> excluded from macro means
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let r = cm.compute().unwrap();
        assert!(r.per_class[2].iou.is_none());
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    /// Set-arithmetic oracle: per class, compute |P∩G|, |P|, |G| from
    /// pixel index sets directly.
    fn oracle(pred: &[u8], gt: &[u8], k: usize) -> (Vec<Option<f64>>, f64) {
        let mut ious = Vec::new();
        let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != IGNORE_INDEX).collect();
        let mut correct = 0usize;
        for &i in &valid {
            if pred[i] == gt[i] {
                correct += 1;
            }
        }
        for c in 0..k as u8 {
            let pset: Vec<usize> =
                valid.iter().copied().filter(|&i| pred[i] == c).collect();
            let gset: Vec<usize> = valid.iter().copied().filter(|&i| gt[i] == c).collect();
            let inter = pset.iter().filter(|i| gset.contains(i)).count();
            let union = pset.len() + gset.len() - inter;
            ious.push(if union > 0 { Some(inter as f64 / union as f64) } else { None });
        }
        (ious, correct as f64 / valid.len() as f64)
    }

    #[test]
    fn matches_set_arithmetic_oracle_with_ignore() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = rng.gen_range(2..5usize);
            let n = rng.gen_range(8..60usize);
            let gt: Vec<u8> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        IGNORE_INDEX
                    } else {
                        rng.gen_range(0..k) as u8
                    }
                })
                .collect();
            // guarantee at least one valid pixel
            let mut gt = gt;
            gt[0] = 0;
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&pred, &gt).unwrap();
            let r = cm.compute().unwrap();
            let (ious, oa) = oracle(&pred, &gt, k);
            for c in 0..k {
                match (r.per_class[c].iou, ious[c]) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    other => panic!("iou presence mismatch {:?}", other),
                }
            }
            assert!((r.oa - oa).abs() < 1e-12);
        }
    }

    #[test]
    fn label_permutation_preserves_macro_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 3usize;
        let n = 50usize;
        let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let perm = [2u8, 0, 1];
        let gt2: Vec<u8> = gt.iter().map(|&g| perm[g as usize]).collect();
        let pred2: Vec<u8> = pred.iter().map(|&p| perm[p as usize]).collect();
        let mut a = ConfusionMatrix::new(k);
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(k);
        b.accumulate(&pred2, &gt2).unwrap();
        let (ra, rb) = (a.compute().unwrap(), b.compute().unwrap());
        assert!((ra.miou - rb.miou).abs() < 1e-12);
        assert!((ra.oa - rb.oa).abs() < 1e-12);
        assert!((ra.macro_f1 - rb.macro_f1).abs() < 1e-12);
        for c in 0..k {
            assert_eq!(ra.per_class[c].iou, rb.per_class[perm[c] as usize].iou);
        }
    }

    #[test]
    fn accumulation_is_partition_independent_and_merge_assoc() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 4usize;
        let n = 200usize;
        let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let mut whole = ConfusionMatrix::new(k);
        whole.accumulate(&pred, &gt).unwrap();
        let mut a = ConfusionMatrix::new(k);
        let mut b = ConfusionMatrix::new(k);
        a.accumulate(&pred[..70], &gt[..70]).unwrap();
        b.accumulate(&pred[70..], &gt[70..]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
    }

    #[test]
    fn iou_never_exceeds_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..50 {
            let k = rng.gen_range(2..4usize);
            let n = rng.gen_range(10..40usize);
            let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&pred, &gt).unwrap();
            let r = cm.compute().unwrap();
            for s in &r.per_class {
                if let (Some(iou), Some(f1)) = (s.iou, s.f1) {
                    assert!(0.0 <= iou && iou <= f1 + 1e-12 && f1 <= 1.0);
                }
            }
        }
    }

    #[test]
    fn csv_has_k_plus_one_rows() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[0, 1, 2]).unwrap();
        let csv = cm.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1); // header + K classes + summary
        assert!(lines.last().unwrap().starts_with("summary,"));
    }
}
