//! Pixel-level segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Counts with `prob ≥ threshold` predicted positive and `gt ≥ 0.5` labelled positive.
pub fn confusion<T: Real>(prob: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<Confusion> {
    if prob.shape() != gt.shape() {
        return Err(Error::shape("confusion", prob.shape(), gt.shape()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in prob.data().iter().zip(gt.data()) {
        match (p.f64() >= threshold, g.f64() >= 0.5) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Threshold metrics; a 0/0 ratio counts as 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub sen: f64,
    pub sp: f64,
    pub f1: f64,
    pub acc: f64,
    pub iou: f64,
}

pub fn metrics(c: &Confusion) -> Scores {
    Scores {
        sen: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

/// Exact ROC AUC from the Mann–Whitney rank sum; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("auc is undefined for single-class labels".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            what: "auc scores",
            name: String::new(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-image evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub id: String,
    pub sen: f64,
    pub sp: f64,
    pub f1: f64,
    pub acc: f64,
    pub iou: f64,
    pub auc: f64,
    pub confusion: Confusion,
}

pub const CSV_HEADER: &str = "image_id,sen,sp,f1,acc,iou,auc";

impl MetricsReport {
    pub fn evaluate<T: Real>(id: &str, prob: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<Self> {
        let c = confusion(prob, gt, threshold)?;
        let s = metrics(&c);
        let scores: Vec<f64> = prob.data().iter().map(|p| p.f64()).collect();
        let labels: Vec<bool> = gt.data().iter().map(|g| g.f64() >= 0.5).collect();
        Ok(MetricsReport {
            id: id.to_string(),
            sen: s.sen,
            sp: s.sp,
            f1: s.f1,
            acc: s.acc,
            iou: s.iou,
            auc: auc(&scores, &labels)?,
            confusion: c,
        })
    }

    /// Per-metric arithmetic mean over images; confusion counts are summed.
    pub fn mean(id: &str, reports: &[MetricsReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut confusion = Confusion::default();
        reports.iter().for_each(|r| confusion.merge(&r.confusion));
        Some(MetricsReport {
            id: id.to_string(),
            sen: avg(|r| r.sen),
            sp: avg(|r| r.sp),
            f1: avg(|r| r.f1),
            acc: avg(|r| r.acc),
            iou: avg(|r| r.iou),
            auc: avg(|r| r.auc),
            confusion,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.id, self.sen, self.sp, self.f1, self.acc, self.iou, self.auc
        )
    }

    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let c = &self.confusion;
        for (k, v) in [
            ("sen", self.sen),
            ("sp", self.sp),
            ("f1", self.f1),
            ("acc", self.acc),
            ("iou", self.iou),
            ("auc", self.auc),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        let _ = write!(s, "tp={}\ntn={}\nfp={}\nfn={}\n", c.tp, c.tn, c.fp, c.fn_);
        s
    }
}

pub fn metrics_csv(rows: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_arithmetic_example() {
        let s = metrics(&Confusion { tp: 6, tn: 80, fp: 4, fn_: 10 });
        assert!((s.sen - 0.375).abs() < 1e-12);
        assert!((s.sp - 80.0 / 84.0).abs() < 1e-12);
        assert!((s.f1 - 12.0 / 26.0).abs() < 1e-12);
        assert!((s.acc - 0.86).abs() < 1e-12);
        assert!((s.iou - 0.30).abs() < 1e-12);
    }

    #[test]
    fn vacuous_ratios_are_one() {
        let s = metrics(&Confusion { tp: 0, tn: 5, fp: 0, fn_: 0 });
        assert_eq!((s.sen, s.f1, s.iou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_positive_prediction() {
        let gt = Tensor::<f32>::from_fn([1, 1, 4, 4], |_, _, r, c| ((r * c) % 3 == 0) as u8 as f32);
        let c = confusion(&Tensor::full([1, 1, 4, 4], 1.0), &gt, 0.5).unwrap();
        let fg = gt.data().iter().filter(|&&g| g == 1.0).count() as u64;
        assert_eq!(c, Confusion { tp: fg, tn: 0, fp: 16 - fg, fn_: 0 });
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Tensor::<f64>::full([1, 1, 1, 1], 0.5);
        assert_eq!(confusion(&p, &p.map(|_| 1.0), 0.5).unwrap().tp, 1);
    }

    #[test]
    fn auc_edges() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..200).map(|_| (rng.random_range(0..50) as f64) / 50.0).collect();
        let l: Vec<bool> = (0..200).map(|_| rng.random_bool(0.3)).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((auc(&s, &l).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn report_serializations() {
        let gt = Tensor::<f32>::from_fn([1, 1, 2, 2], |_, _, r, _| r as f32);
        let r = MetricsReport::evaluate("img", &gt, &gt, 0.5).unwrap();
        assert_eq!(r.csv_row(), "img,1.000000,1.000000,1.000000,1.000000,1.000000,1.000000");
        assert!(r.key_values().contains("f1=1.000000\n"));
        assert!(metrics_csv(&[r]).starts_with(CSV_HEADER));
    }
}
