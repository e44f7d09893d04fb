//! Confusion counts and the five evaluation metrics.
//!
//! `miou` is the cloud-class IoU `tp / (tp + fn + fp)`. The two-class mean
//! (cloud and clear IoU averaged) is reported separately as `miou_2class`.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(self, other: Self) -> Self {
        self + other
    }

    pub fn metrics(&self) -> Metrics {
        Metrics::from_counts(self)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn binary<T: Scalar>(v: T, what: &str) -> Result<bool> {
    if v == T::one() {
        Ok(true)
    } else if v == T::zero() {
        Ok(false)
    } else {
        Err(Error::Data(format!("{what} mask has non-binary value {}", v.f64())))
    }
}

/// Pixel counts with cloud (1) as the positive class.
pub fn confusion<T: Scalar>(pred: &[T], target: &[T]) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return Err(Error::shape("confusion", format!("{} predicted vs {} target pixels", pred.len(), target.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (binary(p, "predicted")?, binary(t, "target")?) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Each metric is `None` when its denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub miou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub oa: Option<f64>,
    pub miou_2class: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let miou = ratio(c.tp, c.tp + c.fn_ + c.fp);
        let clear = ratio(c.tn, c.tn + c.fn_ + c.fp);
        Metrics {
            miou,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            oa: ratio(c.tp + c.tn, c.total()),
            miou_2class: miou.zip(clear).map(|(a, b)| (a + b) / 2.0),
        }
    }
}

pub const CSV_HEADER: &str = "method,miou,precision,recall,f1,oa,params_m,gflops,miou_2class_nonstandard";

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// One report row: metrics in percent with two decimals, `NA` when undefined.
pub fn csv_row(method: &str, m: &Metrics, params: usize, gflops: f64) -> String {
    format!(
        "{method},{},{},{},{},{},{:.2},{:.2},{}",
        pct(m.miou),
        pct(m.precision),
        pct(m.recall),
        pct(m.f1),
        pct(m.oa),
        params as f64 / 1e6,
        gflops,
        pct(m.miou_2class)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let m = ConfusionCounts { tp: 50, tn: 100, fp: 25, fn_: 25 }.metrics();
        assert_eq!(m.miou, Some(0.5));
        for v in [m.precision, m.recall, m.f1] {
            assert!((v.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(m.oa, Some(0.75));
    }

    #[test]
    fn counting() {
        let t = [1.0f32, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(confusion(&t, &t).unwrap(), ConfusionCounts { tp: 3, tn: 2, fp: 0, fn_: 0 });
        let inv: Vec<f32> = t.iter().map(|v| 1.0 - v).collect();
        let c = confusion(&inv, &t).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (0, 0, 2, 3));
        assert!(confusion(&[0.5f32], &[1.0]).is_err());
        assert!(confusion(&[1.0f32], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn undefined_is_na() {
        let m = ConfusionCounts { tp: 0, tn: 10, fp: 0, fn_: 0 }.metrics();
        assert_eq!(m.miou, None);
        assert_eq!(m.precision, None);
        assert_eq!(m.oa, Some(1.0));
        let row = csv_row("x", &m, 2_770_000, 0.4);
        assert_eq!(row, "x,NA,NA,NA,NA,100.00,2.77,0.40,NA");
        assert_eq!(ConfusionCounts::default().metrics().oa, None);
    }
}
