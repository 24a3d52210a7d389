//! Regression metrics: mean absolute error, Pearson correlation and the
//! cumulative score.

use std::io::Write;

use crate::error::{GltError, Result};

fn check_pair(op: &str, pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(GltError::Contract(format!(
            "{op}: {} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(GltError::Contract(format!("{op}: empty input")));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("mae", pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Pearson correlation, clamped to `[−1, 1]`.
pub fn pearson_r(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("pearson_r", pred, target)?;
    if pred.len() < 2 {
        return Err(GltError::UndefinedCorrelation("need at least two pairs".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GltError::UndefinedCorrelation(format!(
            "zero variance in {}",
            if sxx == 0.0 { "predictions" } else { "targets" }
        )));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Percentage of absolute errors no larger than `alpha`.
pub fn cs(pred: &[f64], target: &[f64], alpha: f64) -> Result<f64> {
    check_pair("cs", pred, target)?;
    if !(alpha >= 0.0) {
        return Err(GltError::Contract(format!("cs threshold {alpha} must be ≥ 0")));
    }
    let hits = pred.iter().zip(target).filter(|(p, t)| (*p - *t).abs() <= alpha).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Thresholds 0, 0.5, …, 5 years.
pub fn cs_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.5).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    /// `None` when either side has zero variance.
    pub pearson_r: Option<f64>,
    /// `(α, CS(α))` pairs.
    pub cs: Vec<(f64, f64)>,
    pub n: usize,
}

impl EvalReport {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        let pearson_r = match pearson_r(pred, target) {
            Ok(r) => Some(r),
            Err(GltError::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(EvalReport {
            mae: mae(pred, target)?,
            pearson_r,
            cs: cs_grid().into_iter().map(|a| cs(pred, target, a).map(|v| (a, v))).collect::<Result<_>>()?,
            n: pred.len(),
        })
    }

    fn r_text(&self) -> String {
        self.pearson_r.map_or("undefined".into(), |r| format!("{r:.6}"))
    }

    /// `metric,value` rows, one per CS threshold.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,value")?;
        writeln!(w, "n,{}", self.n)?;
        writeln!(w, "mae,{}", self.mae)?;
        writeln!(w, "pearson_r,{}", self.pearson_r.map_or(String::new(), |r| r.to_string()))?;
        for (a, v) in &self.cs {
            writeln!(w, "cs_{a:.1},{v}")?;
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("n          {}\nMAE        {:.4}\nPearson r  {}\n", self.n, self.mae, self.r_text());
        for (a, v) in &self.cs {
            s.push_str(&format!("CS({a:.1})    {v:.2}%\n"));
        }
        s
    }
}
