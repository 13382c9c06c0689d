use std::fs;
use std::path::Path;

use serde::Serialize;

use super::heatmap::Heatmap;
use super::profile::ProfileRow;
use crate::error::{LabError, Result};

#[derive(Serialize)]
struct HeatmapFile<'a> {
    step: usize,
    #[serde(flatten)]
    heatmap: &'a Heatmap,
    dead: Vec<(usize, usize)>,
}

/// `heatmap_<step>.json` beside the metrics CSV.
pub fn write_heatmap(dir: &Path, step: usize, heatmap: &Heatmap) -> Result<()> {
    let path = dir.join(format!("heatmap_{step}.json"));
    let body = HeatmapFile {
        step,
        heatmap,
        dead: heatmap.dead_experts(),
    };
    let text = serde_json::to_string_pretty(&body).map_err(|e| LabError::Invariant(e.to_string()))?;
    fs::write(&path, text).map_err(|e| LabError::io(&path, e))
}

/// One heatmap per labelled domain in `heatmap_domains_<step>.json`.
pub fn write_domain_heatmaps(dir: &Path, step: usize, maps: &[(String, Heatmap)]) -> Result<()> {
    let path = dir.join(format!("heatmap_domains_{step}.json"));
    let body: serde_json::Map<String, serde_json::Value> = maps
        .iter()
        .map(|(label, h)| Ok((label.clone(), serde_json::to_value(h)?)))
        .collect::<std::result::Result<_, serde_json::Error>>()
        .map_err(|e| LabError::Invariant(e.to_string()))?;
    let text = serde_json::to_string_pretty(&body).map_err(|e| LabError::Invariant(e.to_string()))?;
    fs::write(&path, text).map_err(|e| LabError::io(&path, e))
}

/// `profile_<step>.csv` with rows in descending frequency.
pub fn write_profile(dir: &Path, step: usize, rows: &[ProfileRow]) -> Result<()> {
    let path = dir.join(format!("profile_{step}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| LabError::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let io = |e: csv::Error| LabError::Format {
        path: path.clone(),
        reason: e.to_string(),
    };
    w.write_record(["token_id", "count", "mean_active"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.token_id.to_string(),
            r.count.to_string(),
            format!("{:.8e}", r.mean_active),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| LabError::io(&path, e))
}

/// Appends `step,valid_loss` to `eval.csv`, creating it with a header.
pub fn append_eval(dir: &Path, step: usize, valid_loss: f64) -> Result<()> {
    use std::io::Write;
    let path = dir.join("eval.csv");
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| LabError::io(&path, e))?;
    if fresh {
        writeln!(f, "step,valid_loss").map_err(|e| LabError::io(&path, e))?;
    }
    writeln!(f, "{step},{valid_loss:.8e}").map_err(|e| LabError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecars_written() {
        let dir = tempfile::tempdir().unwrap();
        let h = Heatmap {
            layers: 1,
            experts: 2,
            tokens: 64,
            ratios: vec![vec![1.0, 0.0]],
        };
        write_heatmap(dir.path(), 7, &h).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("heatmap_7.json")).unwrap()).unwrap();
        assert_eq!(v["dead"], serde_json::json!([[0, 1]]));
        assert_eq!(v["ratios"][0][0], 1.0);
        write_profile(
            dir.path(),
            7,
            &[ProfileRow {
                token_id: 65,
                count: 3,
                mean_active: 1.5,
            }],
        )
        .unwrap();
        let p = fs::read_to_string(dir.path().join("profile_7.csv")).unwrap();
        assert_eq!(p, "token_id,count,mean_active\n65,3,1.50000000e0\n");
        append_eval(dir.path(), 0, 5.5).unwrap();
        append_eval(dir.path(), 10, 4.5).unwrap();
        let e = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(e.lines().count(), 3);
    }
}
