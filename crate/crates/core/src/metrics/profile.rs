use std::collections::BTreeMap;

use crate::error::{LabError, Result};
use crate::routing::RouterDecision;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub token_id: usize,
    pub count: u64,
    /// Active experts per occurrence, averaged over layers and occurrences.
    pub mean_active: f64,
}

/// Per token id: occurrences and active experts per occurrence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenExpertProfile {
    stats: BTreeMap<usize, (u64, f64)>,
}

impl TokenExpertProfile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one batch. `token_ids[t]` is the token routed at row `t`.
    pub fn accumulate(&mut self, decisions: &[RouterDecision], token_ids: &[usize]) -> Result<()> {
        let Some(first) = decisions.first() else {
            return Ok(());
        };
        if first.tokens != token_ids.len() {
            return Err(LabError::Usage(format!(
                "{} token ids for {} routed rows",
                token_ids.len(),
                first.tokens
            )));
        }
        let layers = decisions.len() as f64;
        for (t, &id) in token_ids.iter().enumerate() {
            let active: usize = decisions.iter().map(|d| d.row_active(t)).sum();
            let entry = self.stats.entry(id).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 += active as f64 / layers;
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<ProfileRow> {
        self.stats
            .iter()
            .map(|(&token_id, &(count, sum))| ProfileRow {
                token_id,
                count,
                mean_active: sum / count as f64,
            })
            .collect()
    }

    /// Rows ordered by descending frequency, ties by token id.
    pub fn rank_ordered(&self) -> Vec<ProfileRow> {
        let mut rows = self.rows();
        rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.token_id.cmp(&b.token_id)));
        rows
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Spearman correlation of `ln(count)` against mean active experts.
    pub fn frequency_correlation(&self) -> Option<f64> {
        let rows = self.rows();
        let x: Vec<f64> = rows.iter().map(|r| (r.count as f64).ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.mean_active).collect();
        spearman(&x, &y)
    }
}

/// Profile of a single batch.
pub fn token_expert_profile(decisions: &[RouterDecision], token_ids: &[usize]) -> Result<TokenExpertProfile> {
    let mut p = TokenExpertProfile::new();
    p.accumulate(decisions, token_ids)?;
    Ok(p)
}

/// Ranks starting at 1, ties receive their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation; `None` when undefined (fewer than two points or a constant series).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
