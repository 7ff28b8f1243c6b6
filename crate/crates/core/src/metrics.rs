//! Evaluation metrics on mean opinion scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::{check_distributions, emd};
use crate::model::ModelConfig;

/// Scores at or above this are "high aesthetic" for binary accuracy.
pub const BINARY_BOUNDARY: f64 = 5.0;

/// Expected score `Σ k·d_k` over bins `1..=K`.
pub fn mos_from_dos(d: &[f64]) -> Result<f64> {
    check_distributions(d, d.len(), "dos")?;
    Ok(mos_unchecked(d))
}

fn mos_unchecked(d: &[f64]) -> f64 {
    d.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum()
}

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min_len {
        return Err(Error::Dimension(format!("need at least {min_len} samples, got {}", a.len())));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 {
        return Err(Error::ConstantInput("prediction"));
    }
    if syy == 0.0 {
        return Err(Error::ConstantInput("ground truth"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt, 2)?;
    plcc(&average_ranks(pred), &average_ranks(gt))
}

pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt, 1)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64)
}

/// Percentage of samples on the same side of `boundary` (a score equal to
/// the boundary counts as high).
pub fn binary_acc(pred: &[f64], gt: &[f64], boundary: f64) -> Result<f64> {
    check_pair(pred, gt, 1)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| (**p >= boundary) == (**g >= boundary)).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub srcc: f64,
    pub plcc: f64,
    pub acc_percent: f64,
    pub mse: f64,
    pub emd: f64,
    pub n_samples: usize,
}

/// All metrics for row-major `[n, k]` predicted and ground-truth distributions.
pub fn evaluate(pred: &[f64], gt: &[f64], k: usize) -> Result<MetricsReport> {
    check_pair(pred, gt, 2 * k.max(1))?;
    check_distributions(pred, k, "prediction")?;
    check_distributions(gt, k, "ground truth")?;
    let pm: Vec<f64> = pred.chunks_exact(k).map(mos_unchecked).collect();
    let gm: Vec<f64> = gt.chunks_exact(k).map(mos_unchecked).collect();
    let n = pm.len();
    let emd_mean = pred.chunks_exact(k).zip(gt.chunks_exact(k)).map(|(p, g)| emd(g, p)).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        srcc: srcc(&pm, &gm)?,
        plcc: plcc(&pm, &gm)?,
        acc_percent: binary_acc(&pm, &gm, BINARY_BOUNDARY)?,
        mse: mse(&pm, &gm)?,
        emd: emd_mean,
        n_samples: n,
    })
}

pub const CSV_HEADER: &str = "run_id,sa_mode,ff_mode,n_blocks,n_v,n_t,srcc,plcc,acc,mse,emd,wall_seconds";

impl MetricsReport {
    /// One row under [`CSV_HEADER`].
    pub fn csv_row(&self, run_id: &str, cfg: &ModelConfig, wall_seconds: f64) -> String {
        let mut s = String::new();
        write!(
            s,
            "{run_id},{},{},{},{},{},{:.6},{:.6},{:.2},{:.6},{:.6},{:.3}",
            cfg.sa_mode,
            cfg.ff_mode,
            cfg.n_blocks,
            cfg.visual_queries(),
            cfg.textual_queries(),
            self.srcc,
            self.plcc,
            self.acc_percent,
            self.mse,
            self.emd,
            wall_seconds
        )
        .expect("write to string");
        s
    }
}
