//! Procrustes-aligned joint error and per-template evaluation reports.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::body::{forward, BodyModelAsset, BodyParams};

/// Both people's joints stacked, person a first.
pub fn pair_joints(params: &[BodyParams; 2], asset: &BodyModelAsset) -> Vec<Vector3<f64>> {
    params.iter().flat_map(|p| forward(asset, p).joints).collect()
}

/// Mean per-joint error in millimetres after one similarity transform
/// (rotation, translation, scale) aligns `pred` to `gt`. Inputs in metres.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, SynthError> {
    assert_eq!(pred.len(), gt.len(), "joint sets differ in size");
    let n = pred.len();
    if n < 3 {
        return Err(SynthError::Degenerate);
    }
    let mp = pred.iter().sum::<Vector3<f64>>() / n as f64;
    let mg = gt.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dg * dp.transpose();
        spread += dp * dp.transpose();
        var_p += dp.norm_squared();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().cloned().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(SynthError::Degenerate);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_p;
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| (scale * r * (p - mp) + mg - g).norm()).sum();
    Ok(total / n as f64 * 1000.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub template: String,
    pub gt: [BodyParams; 2],
    pub init: [BodyParams; 2],
    pub fitted: [BodyParams; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub template: String,
    pub n: usize,
    pub init_pa_mpjpe: f64,
    pub fit_pa_mpjpe: f64,
    /// `fit - init`; negative is an improvement.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: EvalRow,
    pub per_template: Vec<EvalRow>,
    /// `(init, fit)` per item, input order.
    pub per_item: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("template,n,init_pa_mpjpe,fit_pa_mpjpe,delta\n");
        for r in std::iter::once(&self.overall).chain(&self.per_template) {
            out.push_str(&format!("{},{},{:.4},{:.4},{:.4}\n", r.template, r.n, r.init_pa_mpjpe, r.fit_pa_mpjpe, r.delta));
        }
        out
    }
}

fn row(template: &str, values: &[(f64, f64)]) -> EvalRow {
    let n = values.len();
    let init = values.iter().map(|v| v.0).sum::<f64>() / n as f64;
    let fit = values.iter().map(|v| v.1).sum::<f64>() / n as f64;
    EvalRow { template: template.to_string(), n, init_pa_mpjpe: init, fit_pa_mpjpe: fit, delta: fit - init }
}

/// Aggregates `(template, init, fit)` metrics into overall (`"all"`) and per-template rows (sorted).
pub fn summarize(values: &[(String, f64, f64)]) -> Result<EvalReport, SynthError> {
    if values.is_empty() {
        return Err(SynthError::Empty);
    }
    let per_item: Vec<(f64, f64)> = values.iter().map(|v| (v.1, v.2)).collect();
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (t, i, f) in values {
        groups.entry(t).or_default().push((*i, *f));
    }
    Ok(EvalReport {
        overall: row("all", &per_item),
        per_template: groups.iter().map(|(t, v)| row(t, v)).collect(),
        per_item,
    })
}

/// Mean PA-MPJPE of initializations and fits against ground truth.
pub fn evaluate(items: &[EvalItem], asset: &BodyModelAsset) -> Result<EvalReport, SynthError> {
    let mut values = Vec::with_capacity(items.len());
    for it in items {
        let gt = pair_joints(&it.gt, asset);
        values.push((it.template.clone(), pa_mpjpe(&pair_joints(&it.init, asset), &gt)?, pa_mpjpe(&pair_joints(&it.fitted, asset), &gt)?));
    }
    summarize(&values)
}
