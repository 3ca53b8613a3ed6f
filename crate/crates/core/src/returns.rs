//! Day-over-day returns, overlapping epoch plans, and per-epoch Pearson
//! correlation matrices.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::TimeSeriesPanel;

pub const DEFAULT_RETURNS_GUARD: f64 = 1e-6;
pub const DEFAULT_WINDOW: usize = 33;
pub const DEFAULT_OVERLAP: usize = 17;

/// Relative day-over-day changes. `values[i][t]` is the return from day `t`
/// to day `t + 1` and carries the date of day `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    regions: Vec<String>,
    dates: Vec<NaiveDate>,
    values: Vec<Vec<f64>>,
}

impl ReturnsPanel {
    pub fn new(regions: Vec<String>, dates: Vec<NaiveDate>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != regions.len() || values.iter().any(|r| r.len() != dates.len()) {
            return Err(Error::Shape(
                "returns rows do not match regions × dates".into(),
            ));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite return".into()));
        }
        Ok(Self {
            regions,
            dates,
            values,
        })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn series(&self, region: usize) -> &[f64] {
        &self.values[region]
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// `|R(t)|`, for sensitivity checks against the signed definition.
    pub fn absolute(mut self) -> Self {
        for v in self.values.iter_mut().flatten() {
            *v = v.abs();
        }
        self
    }

    /// View as a panel (dates shifted by one day) for CSV export.
    pub fn to_panel(&self) -> Result<TimeSeriesPanel> {
        TimeSeriesPanel::new(
            self.regions.clone(),
            self.dates.clone(),
            self.values.clone(),
        )
    }
}

/// `R(t) = (X(t+1) − X(t)) / max(X(t), guard)`.
pub fn compute_returns(panel: &TimeSeriesPanel, guard: f64) -> Result<ReturnsPanel> {
    if !(guard.is_finite() && guard > 0.0) {
        return Err(Error::Config(format!(
            "returns guard must be > 0, got {guard}"
        )));
    }
    if panel.n_days() < 2 {
        return Err(Error::Shape(format!(
            "returns need at least 2 days, got {}",
            panel.n_days()
        )));
    }
    let values = panel
        .values()
        .iter()
        .map(|x| {
            x.windows(2)
                .map(|w| (w[1] - w[0]) / w[0].max(guard))
                .collect::<Vec<_>>()
        })
        .collect();
    ReturnsPanel::new(
        panel.regions().to_vec(),
        panel.dates()[1..].to_vec(),
        values,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub window: usize,
    pub overlap: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
}

impl EpochPlan {
    pub fn epoch_count(&self) -> usize {
        self.starts.len()
    }

    /// Inclusive day range labelling epoch `e` by its stride block, e.g. `t=16-31`.
    pub fn stride_label(&self, epoch: usize) -> String {
        let start = self.starts[epoch];
        format!("t={}-{}", start, start + self.stride - 1)
    }
}

pub fn plan_epochs(length: usize, window: usize, overlap: usize) -> Result<EpochPlan> {
    if window < 2 {
        return Err(Error::Plan(format!("window must be ≥ 2, got {window}")));
    }
    if overlap >= window {
        return Err(Error::Plan(format!(
            "overlap {overlap} must be smaller than window {window}"
        )));
    }
    if length < window {
        return Err(Error::Plan(format!(
            "series length {length} is shorter than window {window}"
        )));
    }
    let stride = window - overlap;
    let count = (length - window) / stride + 1;
    Ok(EpochPlan {
        window,
        overlap,
        stride,
        starts: (0..count).map(|e| e * stride).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub epoch_index: usize,
    pub epoch_start_day: usize,
    #[serde(rename = "matrix", with = "crate::matrix::rows")]
    pub entries: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }
}

/// What to do with a region whose returns are constant within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroVariancePolicy {
    #[default]
    Error,
    /// Zero correlation with every other region, 1 on the diagonal.
    Neutralize,
}

impl std::str::FromStr for ZeroVariancePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "error" => Ok(Self::Error),
            "neutralize" => Ok(Self::Neutralize),
            other => Err(Error::Config(format!(
                "unknown zero-variance policy `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for ZeroVariancePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Error => "error",
            Self::Neutralize => "neutralize",
        })
    }
}

/// Population-moment Pearson matrix of equally long series.
///
/// Returns `Err(i)` with the first series whose spread is zero (relative to
/// its magnitude) unless `neutralize` is set, in which case flat series get
/// zero off-diagonal entries.
pub(crate) fn pearson(
    series: &[&[f64]],
    neutralize: bool,
) -> std::result::Result<(DMatrix<f64>, Vec<usize>), usize> {
    let n = series.len();
    let mut unit: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut flat = Vec::new();
    for (i, x) in series.iter().enumerate() {
        let w = x.len() as f64;
        let mean = x.iter().sum::<f64>() / w;
        let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
        let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let sd = (ss / w).sqrt();
        if scale == 0.0 || sd <= 1e-12 * scale {
            if !neutralize {
                return Err(i);
            }
            flat.push(i);
            unit.push(None);
            continue;
        }
        let norm = ss.sqrt();
        unit.push(Some(x.iter().map(|v| (v - mean) / norm).collect()));
    }
    let mut c = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        let Some(zi) = &unit[i] else { continue };
        for j in (i + 1)..n {
            let Some(zj) = &unit[j] else { continue };
            let r: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
            let r = r.clamp(-1.0, 1.0);
            c[(i, j)] = r;
            c[(j, i)] = r;
        }
    }
    Ok((c, flat))
}

pub fn pearson_matrix(
    returns: &ReturnsPanel,
    epoch_index: usize,
    start: usize,
    window: usize,
    policy: ZeroVariancePolicy,
) -> Result<CorrelationMatrix> {
    if window < 2 {
        return Err(Error::Plan(format!("window must be ≥ 2, got {window}")));
    }
    if start + window > returns.len() {
        return Err(Error::Plan(format!(
            "epoch {start}..{} exceeds returns length {}",
            start + window,
            returns.len()
        )));
    }
    let slices: Vec<&[f64]> = returns
        .values()
        .iter()
        .map(|s| &s[start..start + window])
        .collect();
    let neutralize = policy == ZeroVariancePolicy::Neutralize;
    let (entries, flat) = pearson(&slices, neutralize).map_err(|i| Error::DegenerateSeries {
        region: returns.regions()[i].clone(),
        epoch: epoch_index,
    })?;
    for i in flat {
        log::warn!(
            "region `{}` is flat in epoch {epoch_index}; correlations set to 0",
            returns.regions()[i]
        );
    }
    Ok(CorrelationMatrix {
        epoch_index,
        epoch_start_day: start,
        entries,
    })
}

/// One matrix per planned epoch, in epoch order.
pub fn correlation_series(
    returns: &ReturnsPanel,
    plan: &EpochPlan,
    policy: ZeroVariancePolicy,
) -> Result<Vec<CorrelationMatrix>> {
    if let Some(&last) = plan.starts.last() {
        if last + plan.window > returns.len() {
            return Err(Error::Plan(format!(
                "plan needs {} return days, have {}",
                last + plan.window,
                returns.len()
            )));
        }
    }
    plan.starts
        .par_iter()
        .enumerate()
        .map(|(e, &start)| pearson_matrix(returns, e, start, plan.window, policy))
        .collect()
}
