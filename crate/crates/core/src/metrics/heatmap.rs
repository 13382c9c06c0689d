use serde::{Deserialize, Serialize};

use crate::routing::RouterDecision;

/// Experts receiving fewer than this fraction of a layer's tokens are dead.
pub const DEAD_EXPERT_THRESHOLD: f64 = 1.0 / 64.0;

/// `[L × E′]` fraction of tokens routed to each expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub layers: usize,
    pub experts: usize,
    pub tokens: usize,
    pub ratios: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn get(&self, layer: usize, expert: usize) -> f64 {
        self.ratios[layer][expert]
    }

    pub fn dead_experts(&self) -> Vec<(usize, usize)> {
        let mut dead = Vec::new();
        for (l, row) in self.ratios.iter().enumerate() {
            for (e, &r) in row.iter().enumerate() {
                if r < DEAD_EXPERT_THRESHOLD {
                    dead.push((l, e));
                }
            }
        }
        dead
    }

    /// Row sum, which equals the layer's mean active experts per token.
    pub fn mean_active(&self, layer: usize) -> f64 {
        self.ratios[layer].iter().sum()
    }
}

/// Running routed-token counts across several batches.
#[derive(Debug, Clone, Default)]
pub struct HeatmapAccumulator {
    counts: Vec<Vec<u64>>,
    tokens: usize,
}

impl HeatmapAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, decisions: &[RouterDecision]) {
        if self.counts.is_empty() {
            self.counts = decisions.iter().map(|d| vec![0; d.experts]).collect();
        }
        for (row, d) in self.counts.iter_mut().zip(decisions) {
            for (c, &n) in row.iter_mut().zip(&d.tokens_per_expert) {
                *c += n as u64;
            }
        }
        self.tokens += decisions.first().map_or(0, |d| d.tokens);
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    pub fn finish(&self) -> Heatmap {
        let n = self.tokens.max(1) as f64;
        Heatmap {
            layers: self.counts.len(),
            experts: self.counts.first().map_or(0, Vec::len),
            tokens: self.tokens,
            ratios: self
                .counts
                .iter()
                .map(|row| row.iter().map(|&c| c as f64 / n).collect())
                .collect(),
        }
    }
}

/// Heatmap over a set of per-batch decision lists.
pub fn routed_ratio_heatmap<'a>(batches: impl IntoIterator<Item = &'a [RouterDecision]>) -> Heatmap {
    let mut acc = HeatmapAccumulator::new();
    for b in batches {
        acc.add(b);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::routing::route_hash;

    #[test]
    fn always_on_expert() {
        let mut tape = Tape::new();
        let mut rows = vec![vec![0.0; 4]; 10];
        rows.iter_mut().for_each(|r| r[2] = 0.7);
        let w = tape.constant(Tensor::from_rows(&rows).unwrap());
        let d = RouterDecision::from_weights(&tape, w, None);
        let h = routed_ratio_heatmap([std::slice::from_ref(&d)]);
        assert_eq!(h.ratios[0], vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(h.dead_experts(), vec![(0, 0), (0, 1), (0, 3)]);
        assert_eq!(h.mean_active(0), 1.0);
    }

    #[test]
    fn hash_router_is_uniform() {
        let mut tape = Tape::new();
        let ids: Vec<usize> = (0..4096).map(|i| (i * 2_654_435_761usize) % 256).collect();
        let d = route_hash(&mut tape, &ids, 8, 1).unwrap();
        let h = routed_ratio_heatmap([std::slice::from_ref(&d)]);
        for &r in &h.ratios[0] {
            assert!((r - 0.125).abs() < 0.01, "{r}");
        }
        assert!(h.dead_experts().is_empty());
    }

    #[test]
    fn row_sum_is_mean_active() {
        let mut tape = Tape::new();
        let rows = vec![
            vec![0.1, 0.2, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.3, 0.3, 0.3],
            vec![0.0, 0.5, 0.0],
        ];
        let w = tape.constant(Tensor::from_rows(&rows).unwrap());
        let d = RouterDecision::from_weights(&tape, w, None);
        let h = routed_ratio_heatmap([std::slice::from_ref(&d), std::slice::from_ref(&d)]);
        let direct = (0..4).map(|t| d.row_active(t)).sum::<usize>() as f64 / 4.0;
        assert!((h.mean_active(0) - direct).abs() < 1e-15);
        assert!(h.ratios[0].iter().all(|r| (0.0..=1.0).contains(r)));
        assert_eq!(h.tokens, 8);
    }
}
