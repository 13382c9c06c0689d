//! Online three-phase labelling of a sparsity trace.
//!
//! * Dense: from the start until sparsity crosses upward through half the
//!   target (previous value below, current at or above).
//! * Sparsifying: from that crossing until stable.
//! * Stable: once `|S − target| < band` has held for `window` consecutive
//!   steps; the step completing the window is the onset.
//!
//! Labels never move backwards, and a trace can go straight from dense to
//! stable.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Dense,
    Sparsifying,
    Stable,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Dense => "I",
            Stage::Sparsifying => "II",
            Stage::Stable => "III",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "I" => Some(Stage::Dense),
            "II" => Some(Stage::Sparsifying),
            "III" => Some(Stage::Stable),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageDetector {
    pub target: f64,
    pub band: f64,
    pub window: usize,
    stage: Stage,
    prev: Option<f64>,
    in_band: usize,
    step: usize,
    sparsifying_onset: Option<usize>,
    stable_onset: Option<usize>,
}

impl StageDetector {
    pub fn new(target: f64, band: f64, window: usize) -> Self {
        Self {
            target,
            band,
            window: window.max(1),
            stage: Stage::Dense,
            prev: None,
            in_band: 0,
            step: 0,
            sparsifying_onset: None,
            stable_onset: None,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn sparsifying_onset(&self) -> Option<usize> {
        self.sparsifying_onset
    }

    /// Step index at which the stable stage began; the settling time.
    pub fn stable_onset(&self) -> Option<usize> {
        self.stable_onset
    }

    pub fn observe(&mut self, s: f64) -> Stage {
        let half = 0.5 * self.target;
        if self.stage == Stage::Dense && self.prev.is_some_and(|p| p < half) && s >= half {
            self.stage = Stage::Sparsifying;
            self.sparsifying_onset = Some(self.step);
        }
        if (s - self.target).abs() < self.band {
            self.in_band += 1;
        } else {
            self.in_band = 0;
        }
        if self.stage != Stage::Stable && self.in_band >= self.window {
            self.stage = Stage::Stable;
            self.stable_onset = Some(self.step);
        }
        self.prev = Some(s);
        self.step += 1;
        self.stage
    }
}

/// Stage label for every entry of `history`.
pub fn detect_stage(history: &[f64], target: f64, band: f64, window: usize) -> Vec<Stage> {
    let mut d = StageDetector::new(target, band, window);
    history.iter().map(|&s| d.observe(s)).collect()
}

/// First index of each stage present in `labels`.
pub fn stage_boundaries(labels: &[Stage]) -> Vec<(Stage, usize)> {
    let mut out: Vec<(Stage, usize)> = Vec::new();
    for (i, &s) in labels.iter().enumerate() {
        if out.last().is_none_or(|&(prev, _)| prev != s) {
            out.push((s, i));
        }
    }
    out
}
