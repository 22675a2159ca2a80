//! CSV exports: weight histograms, per-layer sparsity, flip logs and
//! streamed epoch records.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ExportError;
use crate::mask::FlipLog;
use crate::net::MaskedNet;
use crate::trainer::EpochRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Histogram of active weight values with `bins` uniform bins spanning
/// `[min, max]` of the active weights. The top edge is inclusive.
pub fn export_histogram(net: &MaskedNet, bins: usize) -> Vec<HistogramBin> {
    let values: Vec<f64> = net
        .layers()
        .iter()
        .flat_map(|l| {
            l.weight
                .data()
                .iter()
                .zip(l.presence.data())
                .filter(|(_, &t)| t > 0.0)
                .map(|(&w, _)| w)
        })
        .collect();
    histogram(&values, bins)
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_low: lo + width * b as f64,
            bin_high: if b + 1 == bins {
                hi
            } else {
                lo + width * (b + 1) as f64
            },
            count: 0,
        })
        .collect();
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        out[b].count += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub active: usize,
    pub total: usize,
    pub density: f64,
}

pub fn layer_sparsity(net: &MaskedNet) -> Vec<LayerSparsity> {
    net.layers()
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            let total = l.presence.len();
            let active = l.active();
            LayerSparsity {
                layer,
                active,
                total,
                density: if total == 0 {
                    0.0
                } else {
                    active as f64 / total as f64
                },
            }
        })
        .collect()
}

pub fn write_csv<W: Write, T: Serialize>(rows: &[T], writer: W) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Header-only CSV for an empty export.
pub fn write_header<W: Write>(header: &[&str], writer: W) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], writer: W) -> Result<(), ExportError> {
    if bins.is_empty() {
        write_header(&["bin_low", "bin_high", "count"], writer)
    } else {
        write_csv(bins, writer)
    }
}

#[derive(Debug, Serialize)]
struct FlipStepRow {
    step: usize,
    regrown: u32,
    pruned: u32,
}

#[derive(Debug, Serialize)]
struct FlipWeightRow {
    layer: usize,
    index: usize,
    flips: u32,
}

/// Per-step flip counts: `step,regrown,pruned`.
pub fn write_flip_steps<W: Write>(log: &FlipLog, writer: W) -> Result<(), ExportError> {
    let rows: Vec<FlipStepRow> = log
        .steps
        .iter()
        .enumerate()
        .map(|(step, s)| FlipStepRow {
            step: step + 1,
            regrown: s.regrown,
            pruned: s.pruned,
        })
        .collect();
    if rows.is_empty() {
        return write_header(&["step", "regrown", "pruned"], writer);
    }
    write_csv(&rows, writer)
}

/// Per-weight flip totals: `layer,index,flips`.
pub fn write_flip_counts<W: Write>(
    net: &MaskedNet,
    log: &FlipLog,
    writer: W,
) -> Result<(), ExportError> {
    let rows: Vec<FlipWeightRow> = log
        .per_weight
        .iter()
        .enumerate()
        .filter_map(|(flat, &flips)| {
            net.locate(flat).map(|(layer, index)| FlipWeightRow {
                layer,
                index,
                flips,
            })
        })
        .collect();
    if rows.is_empty() {
        return write_header(&["layer", "index", "flips"], writer);
    }
    write_csv(&rows, writer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub density: f64,
    pub loss: f64,
    pub pressure_loss: f64,
    pub gamma: f64,
    pub flips: u64,
    pub acc: f64,
}

impl From<&EpochRecord> for EpochRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            density: r.density,
            loss: r.task_loss,
            pressure_loss: r.pressure_loss,
            gamma: r.gamma,
            flips: r.flips,
            acc: r.val_accuracy,
        }
    }
}

/// Appends epoch rows to a CSV file, flushing after each row so a crash
/// loses at most the epoch in progress.
pub struct EpochCsv {
    writer: csv::Writer<File>,
}

impl EpochCsv {
    pub fn create(path: &Path) -> Result<Self, ExportError> {
        Ok(Self {
            writer: csv::Writer::from_path(path)?,
        })
    }

    pub fn push(&mut self, record: &EpochRecord) -> Result<(), ExportError> {
        self.writer.serialize(EpochRow::from(record))?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochRow>, ExportError> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(ExportError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::MaskedLayer;
    use crate::Tensor;

    fn net(weights: Vec<f64>) -> MaskedNet {
        let n = weights.len();
        MaskedNet::new(vec![MaskedLayer::dense(
            Tensor::matrix(n, 1, weights).unwrap(),
            Tensor::zeros(vec![1, 1]),
        )])
        .unwrap()
    }

    #[test]
    fn hand_binned_histogram() {
        let h = export_histogram(&net(vec![-1.0, 0.5, 1.0]), 2);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(
            (h[0].bin_low, h[0].bin_high, h[1].bin_high),
            (-1.0, 0.0, 1.0)
        );
    }

    #[test]
    fn pruned_weight_excluded_and_range_recomputed() {
        let mut n = net(vec![-1.0, 0.5, 1.0]);
        n.layers_mut()[0].presence.data_mut()[0] = -0.1;
        let h = export_histogram(&n, 2);
        assert_eq!((h[0].bin_low, h[1].bin_high), (0.5, 1.0));
        // 0.5 sits on the lower edge and 1.0 on the inclusive upper edge.
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn empty_histogram_writes_header() {
        let mut n = net(vec![1.0]);
        n.layers_mut()[0].presence.data_mut()[0] = -1.0;
        let h = export_histogram(&n, 4);
        assert!(h.is_empty());
        let mut buf = Vec::new();
        write_histogram_csv(&h, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bin_low,bin_high,count\n");
    }

    #[test]
    fn constant_values_share_one_bin() {
        let h = histogram(&[2.0, 2.0], 3);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 0, 0]);
    }
}
