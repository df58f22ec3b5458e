//! One-pass evaluation: Success (3-D IoU AUC), Precision (center distance
//! AUC over 0 to 2 m) and point-count binning.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, Box3D};

/// Thresholds per curve (both grids have 101 points).
pub const CURVE_POINTS: usize = 101;
pub const PRECISION_MAX_DIST: f64 = 2.0;

/// Mean over `tau = 0, 0.01, ..., 1` of the fraction with `IoU > tau`, x100.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::invalid("success_auc: no frames"));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("success_auc: IoU {v} outside [0, 1]")));
    }
    Ok(curve_area(ious, |v, k| v > k as f64 / 100.0))
}

/// Mean over `delta = 0, 0.02, ..., 2` of the fraction with
/// `distance < delta`, x100.
pub fn precision_auc(dists: &[f64]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::invalid("precision_auc: no frames"));
    }
    if let Some(v) = dists.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("precision_auc: distance {v} is negative or NaN")));
    }
    let step = PRECISION_MAX_DIST / (CURVE_POINTS - 1) as f64;
    Ok(curve_area(dists, |v, k| v < k as f64 * step))
}

fn curve_area(values: &[f64], pass: impl Fn(f64, usize) -> bool) -> f64 {
    let hits: usize = (0..CURVE_POINTS)
        .map(|k| values.iter().filter(|&&v| pass(v, k)).count())
        .sum();
    100.0 * hits as f64 / (CURVE_POINTS * values.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
    pub ious: Vec<f64>,
    pub distances: Vec<f64>,
}

impl MetricReport {
    pub fn from_lists(ious: Vec<f64>, distances: Vec<f64>) -> Result<Self> {
        if ious.len() != distances.len() {
            return Err(Error::invalid(format!(
                "{} IoUs vs {} distances",
                ious.len(),
                distances.len()
            )));
        }
        Ok(MetricReport {
            success: success_auc(&ious)?,
            precision: precision_auc(&distances)?,
            frames: ious.len(),
            ious,
            distances,
        })
    }
}

/// Per-frame IoU and center distance of predictions against gt.
pub fn evaluate(preds: &[Box3D], gts: &[Box3D]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} gt boxes",
            preds.len(),
            gts.len()
        )));
    }
    let ious = preds.iter().zip(gts).map(|(p, g)| iou3d(p, g)).collect();
    let dists = preds.iter().zip(gts).map(|(p, g)| p.center_distance(g)).collect();
    MetricReport::from_lists(ious, dists)
}

/// Frames whose gt point count lies in `[lo, hi)`; `hi = None` is open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityBin {
    pub lo: usize,
    pub hi: Option<usize>,
    pub frames: usize,
    /// `None` when the bin is empty.
    pub report: Option<MetricReport>,
}

/// Default point-count edges; four intervals.
pub const DEFAULT_SPARSITY_EDGES: [usize; 4] = [0, 150, 1000, 2500];

/// Partitions frames by `counts` into `[e_i, e_{i+1})` with the last bin
/// open-ended. Frames below `edges[0]` are dropped.
pub fn sparsity_bins(
    ious: &[f64],
    dists: &[f64],
    counts: &[usize],
    edges: &[usize],
) -> Result<Vec<SparsityBin>> {
    if ious.len() != counts.len() || dists.len() != counts.len() {
        return Err(Error::invalid("sparsity_bins: list lengths differ"));
    }
    if edges.is_empty() || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("sparsity edges {edges:?} must increase")));
    }
    edges
        .iter()
        .enumerate()
        .map(|(b, &lo)| {
            let hi = edges.get(b + 1).copied();
            let idx: Vec<usize> = (0..counts.len())
                .filter(|&i| counts[i] >= lo && hi.map_or(true, |h| counts[i] < h))
                .collect();
            let report = if idx.is_empty() {
                None
            } else {
                Some(MetricReport::from_lists(
                    idx.iter().map(|&i| ious[i]).collect(),
                    idx.iter().map(|&i| dists[i]).collect(),
                )?)
            };
            Ok(SparsityBin {
                lo,
                hi,
                frames: idx.len(),
                report,
            })
        })
        .collect()
}

/// Summary written as JSON by the evaluation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
    pub config_hash: Option<String>,
    pub bins: Vec<BinSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub lo: usize,
    pub hi: Option<usize>,
    pub frames: usize,
    pub success: Option<f64>,
    pub precision: Option<f64>,
}

impl EvalSummary {
    pub fn new(report: &MetricReport, bins: &[SparsityBin], config_hash: Option<String>) -> Self {
        EvalSummary {
            success: report.success,
            precision: report.precision,
            frames: report.frames,
            config_hash,
            bins: bins
                .iter()
                .map(|b| BinSummary {
                    lo: b.lo,
                    hi: b.hi,
                    frames: b.frames,
                    success: b.report.as_ref().map(|r| r.success),
                    precision: b.report.as_ref().map(|r| r.precision),
                })
                .collect(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// `frame,iou,distance,n_points` for external plotting.
pub fn write_frame_csv(
    frames: &[usize],
    report: &MetricReport,
    counts: &[usize],
    path: &Path,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "frame,iou,distance,n_points")?;
    for i in 0..report.frames {
        writeln!(
            f,
            "{},{},{},{}",
            frames[i], report.ious[i], report.distances[i], counts[i]
        )?;
    }
    f.flush()?;
    Ok(())
}
