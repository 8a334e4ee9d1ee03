//! Confusion-matrix metrics: mIoU, fwIoU and mACC, plus per-class reports.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::LabelMask;

/// `counts[g * n + p]` counts pixels of ground-truth class `g` predicted as
/// `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, ignore: u8) -> Result<()> {
        if (pred.height(), pred.width(), pred.channels()) != (gt.height(), gt.width(), gt.channels()) {
            return Err(Error::input(format!(
                "prediction {}x{} does not match ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let n = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if g >= n || p >= n {
                return Err(Error::input(format!(
                    "label pair (gt {g}, pred {p}) outside {n} classes"
                )));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::input("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Ground-truth pixel count of class `c`.
    pub fn gt_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn pred_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// IoU of class `c`, or `None` when it is absent from both ground truth
    /// and prediction.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let tp = self.true_positives(c);
        let union = self.gt_count(c) + self.pred_count(c) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Pixel accuracy of class `c`, or `None` when it has no ground truth.
    pub fn class_acc(&self, c: usize) -> Option<f64> {
        let n = self.gt_count(c);
        (n > 0).then(|| self.true_positives(c) as f64 / n as f64)
    }

    pub fn miou(&self) -> Result<f64> {
        let fracs = (0..self.classes).filter_map(|c| {
            let tp = self.true_positives(c);
            let union = self.gt_count(c) + self.pred_count(c) - tp;
            (union > 0).then_some((tp, union))
        });
        mean_defined(fracs, "mIoU")
    }

    pub fn macc(&self) -> Result<f64> {
        let fracs = (0..self.classes).filter_map(|c| {
            let n = self.gt_count(c);
            (n > 0).then(|| (self.true_positives(c), n))
        });
        mean_defined(fracs, "mACC")
    }

    pub fn fwiou(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("fwIoU over zero pixels".into()));
        }
        let terms: Vec<(u128, u128)> = (0..self.classes)
            .filter_map(|c| {
                let tp = self.true_positives(c);
                let union = self.gt_count(c) + self.pred_count(c) - tp;
                (union > 0).then(|| (self.gt_count(c) as u128 * tp as u128, union as u128))
            })
            .collect();
        let exact = terms
            .iter()
            .try_fold(Ratio::ZERO, |acc, &(n, d)| acc.add(Ratio::new(n, d)?))
            .and_then(|sum| sum.div(total as u128))
            .and_then(Ratio::to_f64);
        Ok(exact.unwrap_or_else(|| {
            terms.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / total as f64
        }))
    }
}

/// Mean of the fractions `num / den`, exact when it fits and correctly
/// rounded on output.
fn mean_defined(fracs: impl Iterator<Item = (u64, u64)>, what: &str) -> Result<f64> {
    let fracs: Vec<(u64, u64)> = fracs.collect();
    if fracs.is_empty() {
        return Err(Error::UndefinedMetric(format!("{what} has no defined classes")));
    }
    let exact = fracs
        .iter()
        .try_fold(Ratio::ZERO, |acc, &(n, d)| acc.add(Ratio::new(n as u128, d as u128)?))
        .and_then(|sum| sum.div(fracs.len() as u128))
        .and_then(Ratio::to_f64);
    Ok(exact.unwrap_or_else(|| {
        fracs.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / fracs.len() as f64
    }))
}

#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    const ZERO: Ratio = Ratio { num: 0, den: 1 };

    fn new(num: u128, den: u128) -> Option<Ratio> {
        if den == 0 {
            return None;
        }
        let g = gcd(num, den);
        Some(Ratio { num: num / g, den: den / g })
    }

    fn add(self, other: Ratio) -> Option<Ratio> {
        let g = gcd(self.den, other.den);
        let lcm = (self.den / g).checked_mul(other.den)?;
        let a = self.num.checked_mul(lcm / self.den)?;
        let b = other.num.checked_mul(lcm / other.den)?;
        Ratio::new(a.checked_add(b)?, lcm)
    }

    fn div(self, k: u128) -> Option<Ratio> {
        Ratio::new(self.num, self.den.checked_mul(k)?)
    }

    /// Both parts below 2^53 convert exactly, so the quotient rounds once.
    fn to_f64(self) -> Option<f64> {
        const LIMIT: u128 = 1 << 53;
        (self.num < LIMIT && self.den < LIMIT).then(|| self.num as f64 / self.den as f64)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub name: String,
    pub iou: Option<f64>,
    pub acc: Option<f64>,
    pub gt_pixels: u64,
}

/// Overall and per-class metrics, stored as fractions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub fwiou: f64,
    pub macc: f64,
    pub pixels: u64,
    pub per_class: Vec<ClassRow>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, names: &[String]) -> Result<Self> {
        if names.len() != cm.classes() {
            return Err(Error::input(format!(
                "{} class names for a {}-class confusion matrix",
                names.len(),
                cm.classes()
            )));
        }
        Ok(Self {
            miou: cm.miou()?,
            fwiou: cm.fwiou()?,
            macc: cm.macc()?,
            pixels: cm.total(),
            per_class: names
                .iter()
                .enumerate()
                .map(|(c, name)| ClassRow {
                    name: name.clone(),
                    iou: cm.class_iou(c),
                    acc: cm.class_acc(c),
                    gt_pixels: cm.gt_count(c),
                })
                .collect(),
        })
    }

    /// Overall row first, then one row per class; percentages with two
    /// decimals, blank where a class metric is undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,class,iou,acc,fwiou,gt_pixels\n");
        let _ = writeln!(
            out,
            "overall,,{},{},{},{}",
            pct(self.miou),
            pct(self.macc),
            pct(self.fwiou),
            self.pixels
        );
        for row in &self.per_class {
            let _ = writeln!(
                out,
                "class,{},{},{},,{}",
                csv_field(&row.name),
                row.iou.map(pct).unwrap_or_default(),
                row.acc.map(pct).unwrap_or_default(),
                row.gt_pixels
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mIoU {}  fwIoU {}  mACC {}  ({} pixels)",
            pct(self.miou),
            pct(self.fwiou),
            pct(self.macc),
            self.pixels
        );
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}", "class", "IoU", "Acc");
        for row in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>7}",
                row.name,
                row.iou.map(pct).unwrap_or_else(|| "-".into()),
                row.acc.map(pct).unwrap_or_else(|| "-".into())
            );
        }
        out
    }
}

/// Fraction as a percentage with two decimals.
pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> LabelMask {
        LabelMask::new(h, w, 1, v.to_vec()).unwrap()
    }

    fn worked() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(2, 2, &[0, 1, 1, 1]), &mask(2, 2, &[0, 0, 1, 1]), 255)
            .unwrap();
        cm
    }

    #[test]
    fn worked_example() {
        let cm = worked();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));
        assert_eq!(cm.miou().unwrap(), 7.0 / 12.0);
        assert_eq!(cm.fwiou().unwrap(), 7.0 / 12.0);
        assert!((cm.macc().unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = mask(2, 2, &[0, 1, 2, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt, 255).unwrap();
        assert!((0..3).all(|g| (0..3).all(|p| g == p || cm.get(g, p) == 0)));
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.fwiou().unwrap(), 1.0);
        assert_eq!(cm.macc().unwrap(), 1.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(1, 2, &[1, 1]), &mask(1, 2, &[0, 0]), 255).unwrap();
        assert_eq!(cm.class_iou(0), Some(0.0));
    }

    #[test]
    fn ignored_and_absent_classes() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(1, 2, &[0, 1]), &mask(1, 2, &[255, 255]), 255).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.miou(), Err(Error::UndefinedMetric(_))));
        assert!(matches!(cm.fwiou(), Err(Error::UndefinedMetric(_))));
        assert!(matches!(cm.macc(), Err(Error::UndefinedMetric(_))));

        cm.accumulate(&mask(1, 2, &[0, 0]), &mask(1, 2, &[0, 0]), 255).unwrap();
        assert_eq!(cm.class_acc(2), None);
        assert_eq!(cm.macc().unwrap(), 1.0);
    }

    #[test]
    fn equal_frequencies_make_fwiou_equal_miou() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(1, 4, &[0, 1, 1, 0]), &mask(1, 4, &[0, 0, 1, 1]), 255)
            .unwrap();
        assert!((cm.fwiou().unwrap() - cm.miou().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn shape_and_range_errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&mask(1, 2, &[0, 0]), &mask(2, 1, &[0, 0]), 255).is_err());
        assert!(cm.accumulate(&mask(1, 1, &[5]), &mask(1, 1, &[0]), 255).is_err());
    }

    #[test]
    fn report_formats() {
        let cm = worked();
        let r = MetricsReport::from_confusion(&cm, &["a,b".into(), "c".into()]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "overall,,58.33,75.00,58.33,4");
        assert_eq!(lines[2], "class,\"a,b\",50.00,50.00,,2");
        assert_eq!(lines[3], "class,c,66.67,100.00,,2");
        assert!(r.to_text().starts_with("mIoU 58.33  fwIoU 58.33  mACC 75.00"));
    }
}
