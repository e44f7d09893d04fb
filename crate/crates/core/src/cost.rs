//! Parameter and multiply-accumulate accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Convention string carried by every report.
pub const CONVENTION: &str = "params: trainable weights incl. batchnorm affine, excl. running stats; \
macs: conv and matmul multiply-accumulates only; flops = 2*macs; gmacs = macs/1e9";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shape: Vec<usize>,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    /// `total_macs / 1e9`.
    pub gmacs: f64,
    /// `2 * total_macs / 1e9`.
    pub gflops: f64,
    pub convention: String,
}

impl CostReport {
    pub fn from_rows(input_shape: &[usize], rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
        CostReport {
            input_shape: input_shape.to_vec(),
            rows,
            total_params,
            total_macs,
            gmacs: total_macs as f64 / 1e9,
            gflops: 2.0 * total_macs as f64 / 1e9,
            convention: CONVENTION.to_string(),
        }
    }

    /// Sums over rows whose path equals `prefix` or starts with `prefix.`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.layer == prefix || r.layer.starts_with(&format!("{prefix}.")))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.layer, r.params, r.macs);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_zero() {
        let r = CostReport::from_rows(&[1, 4, 8, 8], vec![]);
        assert_eq!((r.total_params, r.total_macs), (0, 0));
        assert_eq!(r.to_csv(), "layer,params,macs\n");
    }

    #[test]
    fn subtotal_respects_path_boundaries() {
        let rows = vec![
            CostRow { layer: "a.b".into(), params: 1, macs: 10 },
            CostRow { layer: "a.bc".into(), params: 2, macs: 20 },
            CostRow { layer: "a.b.c".into(), params: 4, macs: 40 },
        ];
        let r = CostReport::from_rows(&[1], rows);
        assert_eq!(r.subtotal("a.b"), (5, 50));
        assert_eq!(r.subtotal("a"), (7, 70));
    }
}
