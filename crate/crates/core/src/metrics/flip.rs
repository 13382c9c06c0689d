use crate::error::{LabError, Result};
use crate::routing::RouterDecision;

/// Activation states of every layer on one batch, `[L × T × E′]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMasks {
    pub layers: usize,
    pub tokens: usize,
    pub experts: usize,
    pub bits: Vec<bool>,
}

impl ActivationMasks {
    pub fn new(layers: usize, tokens: usize, experts: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != layers * tokens * experts {
            return Err(LabError::Usage(format!(
                "{} mask bits for {layers}x{tokens}x{experts}",
                bits.len()
            )));
        }
        Ok(Self {
            layers,
            tokens,
            experts,
            bits,
        })
    }

    pub fn from_decisions(decisions: &[RouterDecision]) -> Result<Self> {
        let (tokens, experts) = decisions.first().map_or((0, 0), |d| (d.tokens, d.experts));
        let bits = decisions.iter().flat_map(|d| d.active_mask.iter().copied()).collect();
        Self::new(decisions.len(), tokens, experts, bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipStats {
    pub flip_rate: f64,
    pub flip_count: f64,
    /// Identifies the calibration batch the masks came from.
    pub calibration_id: u64,
}

/// Fraction of activation states that changed between two evaluations of
/// the same calibration batch, and that fraction scaled by `E′`.
pub fn flip_stats(prev: &ActivationMasks, curr: &ActivationMasks, calibration_id: u64) -> Result<FlipStats> {
    if (prev.layers, prev.tokens, prev.experts) != (curr.layers, curr.tokens, curr.experts) {
        return Err(LabError::Usage(format!(
            "flip masks differ in shape: {}x{}x{} vs {}x{}x{}",
            prev.layers, prev.tokens, prev.experts, curr.layers, curr.tokens, curr.experts
        )));
    }
    if prev.bits.is_empty() {
        return Err(LabError::Usage("flip statistics of empty masks".into()));
    }
    let flips = prev.bits.iter().zip(&curr.bits).filter(|(a, b)| a != b).count();
    let flip_rate = flips as f64 / prev.bits.len() as f64;
    Ok(FlipStats {
        flip_rate,
        flip_count: curr.experts as f64 * flip_rate,
        calibration_id,
    })
}
