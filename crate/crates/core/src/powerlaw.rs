//! Power-law analysis of saliency/density series.
//!
//! The law is `d = c·s^(−α₀)`, fitted as a line in log space. A series is
//! split into three regions: a low-saliency prefix where nothing meaningful
//! has been pruned yet (1), the power-law window (2), and a high-saliency
//! suffix where accuracy collapses (3).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, ExportError};
use crate::saliency::{SaliencySeries, SeriesPoint};

/// Ties in `r²` closer than this are broken by window length, then position.
const R2_TIE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub ln_c: f64,
    pub alpha0: f64,
    pub r_squared: f64,
}

impl LogLogFit {
    pub fn predict_ln(&self, saliency: f64) -> f64 {
        self.ln_c - self.alpha0 * saliency.ln()
    }
}

/// Least squares of `ln(density)` on `ln(saliency)`. `alpha0` is the negated
/// slope. A constant response gives `r² = 0`.
pub fn loglog_fit(points: &[(f64, f64)]) -> Result<LogLogFit, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    for (index, &(s, d)) in points.iter().enumerate() {
        if !(s > 0.0 && d > 0.0) || !s.is_finite() || !d.is_finite() {
            return Err(AnalysisError::NonPositive {
                index,
                saliency: s,
                density: d,
            });
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::TooFewPoints { needed: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy == 0.0 {
        0.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(LogLogFit {
        ln_c: intercept,
        alpha0: -slope,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// Accuracy drop, in percentage points, that marks collapse.
    pub eps_acc: f64,
    pub min_len: usize,
    pub r2_floor: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            eps_acc: 1.0,
            min_len: 4,
            r2_floor: 0.9,
        }
    }
}

/// Result of [`segment_regions`]. Points are re-sorted by increasing
/// saliency; `labels[i]` refers to `points[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub points: Vec<SeriesPoint>,
    pub labels: Vec<u8>,
    /// Inclusive index range of region 2, if a power-law window was found.
    pub region2: Option<(usize, usize)>,
    pub fit: Option<LogLogFit>,
}

impl Segmentation {
    pub fn found(&self) -> bool {
        self.region2.is_some()
    }

    /// Inclusive index range of points carrying `label`.
    pub fn span(&self, label: u8) -> Option<(usize, usize)> {
        let first = self.labels.iter().position(|&l| l == label)?;
        let last = self.labels.iter().rposition(|&l| l == label)?;
        Some((first, last))
    }
}

fn point_order(a: &SeriesPoint, b: &SeriesPoint) -> std::cmp::Ordering {
    a.threshold
        .total_cmp(&b.threshold)
        .then_with(|| b.density.total_cmp(&a.density))
        .then_with(|| b.accuracy.total_cmp(&a.accuracy))
        .then_with(|| a.epoch.cmp(&b.epoch))
}

/// Labels each point of `series` with its region.
///
/// Region 3 is the longest suffix whose accuracy is below
/// `dense_accuracy − eps_acc/100`. Region 2 is the window of at least
/// `min_len` points before it with the highest `r²` (at least `r2_floor`,
/// positive `α₀`). Points before region 2 are region 1; points between
/// region 2 and the collapse suffix join region 3. With no qualifying
/// window, every non-collapse point is labeled 1.
pub fn segment_regions(
    series: &SaliencySeries,
    dense_accuracy: f64,
    cfg: &SegmentConfig,
) -> Segmentation {
    let mut points = series.points.clone();
    points.sort_by(point_order);
    let n = points.len();
    let floor = dense_accuracy - cfg.eps_acc / 100.0;
    let mut r3 = n;
    while r3 > 0 && points[r3 - 1].accuracy < floor {
        r3 -= 1;
    }

    let min_len = cfg.min_len.max(2);
    let mut best: Option<((usize, usize), LogLogFit)> = None;
    for start in 0..r3 {
        for end in (start + min_len - 1)..r3 {
            let pairs: Vec<(f64, f64)> = points[start..=end]
                .iter()
                .map(|p| (p.threshold, p.density))
                .collect();
            let Ok(fit) = loglog_fit(&pairs) else {
                continue;
            };
            if fit.alpha0 <= 0.0 || fit.r_squared < cfg.r2_floor {
                continue;
            }
            let better = match &best {
                None => true,
                Some(((bs, be), bf)) => {
                    if fit.r_squared > bf.r_squared + R2_TIE {
                        true
                    } else if fit.r_squared >= bf.r_squared - R2_TIE {
                        end - start > be - bs
                    } else {
                        false
                    }
                }
            };
            if better {
                best = Some(((start, end), fit));
            }
        }
    }

    let mut labels = vec![3u8; n];
    match best {
        Some(((s, e), _)) => {
            labels[..s].fill(1);
            labels[s..=e].fill(2);
        }
        None => labels[..r3].fill(1),
    }
    Segmentation {
        points,
        labels,
        region2: best.map(|b| b.0),
        fit: best.map(|b| b.1),
    }
}

/// Human-readable and plot-ready summary of a segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub found: bool,
    pub c: Option<f64>,
    pub ln_c: Option<f64>,
    pub alpha0: Option<f64>,
    pub r_squared: Option<f64>,
    pub region1: Option<[usize; 2]>,
    pub region2: Option<[usize; 2]>,
    pub region3: Option<[usize; 2]>,
    pub points: Vec<ReportPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportPoint {
    pub saliency: f64,
    pub density: f64,
    pub accuracy: f64,
    pub region: u8,
    /// `ln(density)` minus the fitted prediction; absent without a fit.
    pub residual: Option<f64>,
}

pub fn fit_report(series: &SaliencySeries, seg: &Segmentation) -> FitReport {
    let points = seg
        .points
        .iter()
        .zip(&seg.labels)
        .map(|(p, &region)| ReportPoint {
            saliency: p.threshold,
            density: p.density,
            accuracy: p.accuracy,
            region,
            residual: seg
                .fit
                .filter(|_| p.threshold > 0.0 && p.density > 0.0)
                .map(|f| p.density.ln() - f.predict_ln(p.threshold)),
        })
        .collect();
    let span = |l| seg.span(l).map(|(a, b)| [a, b]);
    FitReport {
        method: series.method.to_string(),
        found: seg.found(),
        c: seg.fit.map(|f| f.ln_c.exp()),
        ln_c: seg.fit.map(|f| f.ln_c),
        alpha0: seg.fit.map(|f| f.alpha0),
        r_squared: seg.fit.map(|f| f.r_squared),
        region1: span(1),
        region2: span(2),
        region3: span(3),
        points,
    }
}

/// One row of the plot-ready CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub ln_saliency: f64,
    pub ln_density: f64,
    pub region: u8,
}

impl FitReport {
    /// Rows with positive saliency and density.
    pub fn labeled_points(&self) -> Vec<LabeledPoint> {
        self.points
            .iter()
            .filter(|p| p.saliency > 0.0 && p.density > 0.0)
            .map(|p| LabeledPoint {
                ln_saliency: p.saliency.ln(),
                ln_density: p.density.ln(),
                region: p.region,
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report fields are TOML-representable")
    }
}

pub fn write_labeled_csv<W: Write>(rows: &[LabeledPoint], writer: W) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labeled_csv<R: Read>(reader: R) -> Result<Vec<LabeledPoint>, ExportError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(ExportError::from))
        .collect()
}
