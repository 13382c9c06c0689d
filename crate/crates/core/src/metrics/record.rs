use super::flip::FlipStats;
use crate::training::Stage;

/// Everything logged for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub reg_loss: f64,
    /// Coefficient applied at this step (before the controller update).
    pub lambda: f64,
    pub lr: f64,
    pub s_overall: f64,
    pub s_per_layer: Vec<f64>,
    /// Row-major `[L × E′]` fraction of this batch's tokens routed to each expert.
    pub f_matrix: Vec<f64>,
    pub mean_active: f64,
    pub stage: Stage,
    /// Present on steps where the calibration batch was re-routed.
    pub flip: Option<FlipStats>,
}

impl MetricsRecord {
    /// Whether every logged number is finite.
    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.lm_loss,
            self.reg_loss,
            self.lambda,
            self.lr,
            self.s_overall,
            self.mean_active,
        ];
        let flip_ok = self
            .flip
            .is_none_or(|f| f.flip_rate.is_finite() && f.flip_count.is_finite());
        scalars
            .iter()
            .chain(&self.s_per_layer)
            .chain(&self.f_matrix)
            .all(|v| v.is_finite())
            && flip_ok
    }

    /// `1 − mean_l density_l`.
    pub fn sparsity_from_layers(&self) -> Option<f64> {
        if self.s_per_layer.is_empty() {
            return None;
        }
        let density: f64 = self.s_per_layer.iter().map(|s| 1.0 - s).sum::<f64>() / self.s_per_layer.len() as f64;
        Some(1.0 - density)
    }
}
