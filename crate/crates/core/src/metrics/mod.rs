//! Routing diagnostics and their on-disk forms.

mod flip;
mod heatmap;
mod profile;
mod record;
mod table;

pub use flip::{flip_stats, ActivationMasks, FlipStats};
pub use heatmap::{routed_ratio_heatmap, Heatmap, HeatmapAccumulator, DEAD_EXPERT_THRESHOLD};
pub use profile::{spearman, token_expert_profile, ProfileRow, TokenExpertProfile};
pub use record::MetricsRecord;
pub use table::{csv_header, format_row, parse_csv, write_csv, CsvAppender};
mod sidecar;
pub use sidecar::{append_eval, write_domain_heatmaps, write_heatmap, write_profile};
