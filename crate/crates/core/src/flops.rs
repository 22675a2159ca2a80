//! Forward-pass FLOPs of a masked multilayer perceptron, in exact
//! arithmetic.
//!
//! A dense layer costs `2·fan_in·fan_out` (one multiply and one add per
//! weight); a masked layer costs `2·active`. Training with presence
//! parameters costs `3·f_s + f_d` per sample against a dense baseline of
//! `3·f_d`.

use num_rational::Ratio;
use serde::Serialize;

use crate::error::NetError;
use crate::net::MaskedNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub fan_in: u64,
    pub fan_out: u64,
    pub active: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub dense: u64,
    pub sparse: u64,
    /// `f_s/f_d + 1/3`: training with presence parameters relative to dense.
    pub train_ratio: Ratio<u64>,
    /// `f_s/f_d`: inference relative to dense.
    pub test_ratio: Ratio<u64>,
    /// `3f_s / 3f_d`: training a fixed sparse mask without presence
    /// parameters; exactly 1 for a dense net.
    pub fixed_mask_train_ratio: Ratio<u64>,
}

impl FlopsReport {
    pub fn train_ratio_f64(&self) -> f64 {
        ratio_f64(self.train_ratio)
    }

    pub fn test_ratio_f64(&self) -> f64 {
        ratio_f64(self.test_ratio)
    }
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn flops_from_counts(layers: &[LayerCount]) -> Result<FlopsReport, NetError> {
    let dense: u64 = layers.iter().map(|l| 2 * l.fan_in * l.fan_out).sum();
    let sparse: u64 = layers
        .iter()
        .map(|l| 2 * l.active.min(l.fan_in * l.fan_out))
        .sum();
    if dense == 0 {
        return Err(NetError::NoWeights);
    }
    let test_ratio = Ratio::new(sparse, dense);
    Ok(FlopsReport {
        dense,
        sparse,
        train_ratio: test_ratio + Ratio::new(1, 3),
        test_ratio,
        fixed_mask_train_ratio: Ratio::new(3 * sparse, 3 * dense),
    })
}

pub fn flops_account(net: &MaskedNet) -> Result<FlopsReport, NetError> {
    let counts: Vec<LayerCount> = net
        .layers()
        .iter()
        .map(|l| LayerCount {
            fan_in: l.fan_in() as u64,
            fan_out: l.fan_out() as u64,
            active: l.active() as u64,
        })
        .collect();
    flops_from_counts(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tenth_density() {
        let r = flops_from_counts(&[LayerCount {
            fan_in: 10,
            fan_out: 10,
            active: 10,
        }])
        .unwrap();
        assert_eq!(r.test_ratio, Ratio::new(1, 10));
        assert_eq!(r.train_ratio, Ratio::new(13, 30));
    }

    #[test]
    fn dense_and_empty() {
        let dense = flops_from_counts(&[LayerCount {
            fan_in: 3,
            fan_out: 4,
            active: 12,
        }])
        .unwrap();
        assert_eq!(dense.train_ratio, Ratio::new(4, 3));
        assert_eq!(dense.fixed_mask_train_ratio, Ratio::from_integer(1));
        let empty = flops_from_counts(&[LayerCount {
            fan_in: 3,
            fan_out: 4,
            active: 0,
        }])
        .unwrap();
        assert_eq!(empty.test_ratio, Ratio::from_integer(0));
        assert_eq!(empty.train_ratio, Ratio::new(1, 3));
        assert!(flops_from_counts(&[]).is_err());
    }
}
