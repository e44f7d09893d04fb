//! Ablation cost tables: the four encoder/neck/gate combinations of a config.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::cost::CostReport;
use crate::error::Result;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: String,
    pub params: u64,
    pub macs: u64,
    pub gmacs: f64,
    pub gflops: f64,
}

pub fn report(cfg: &ModelConfig, input_shape: &[usize]) -> Result<CostReport> {
    let (model, store) = Model::build(cfg)?;
    model.config.check_input(input_shape[1], input_shape[2], input_shape[3])?;
    model.cost(&store, input_shape)
}

pub fn ablation(cfg: &ModelConfig, input_shape: &[usize]) -> Result<Vec<AblationRow>> {
    cfg.ablations()
        .into_iter()
        .map(|(name, c)| {
            let r = report(&c, input_shape)?;
            Ok(AblationRow { method: name.to_string(), params: r.total_params, macs: r.total_macs, gmacs: r.gmacs, gflops: r.gflops })
        })
        .collect()
}

/// `method,params,params_m,macs,gmacs,gflops`; `gmacs` is the table's GFLOPs column.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,params,params_m,macs,gmacs,gflops\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.2},{},{:.4},{:.4}\n", r.method, r.params, r.params as f64 / 1e6, r.macs, r.gmacs, r.gflops));
    }
    s
}

/// Parses `BxCxHxW` or `CxHxW` (batch 1).
pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let dims = s
        .split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| crate::Error::InvalidParameter(format!("bad input shape {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    match dims.len() {
        3 => Ok(vec![1, dims[0], dims[1], dims[2]]),
        4 => Ok(dims),
        _ => Err(crate::Error::InvalidParameter(format!("input shape {s:?} must be CxHxW or BxCxHxW"))),
    }
}
