//! File emitters. Every writer builds the complete byte string first and
//! writes it in one call, so outputs are reproducible byte-for-byte from
//! `(config, seed)`. Floats go through Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fedlease_core::federation::{RoundReport, RunOutput, ServerState};

use crate::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, &text)
}

/// One JSON record per round.
pub fn write_metrics_jsonl(path: &Path, reports: &[RoundReport]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in reports {
        let line = serde_json::to_string(r)
            .map_err(|e| CliError::Runtime(format!("serializing round {}: {e}", r.round)))?;
        text.push_str(&line);
        text.push('\n');
    }
    write_file(path, &text)
}

/// Key-value summary: final per-client accuracy, the mean, and the max-delta
/// series, as `kind,key,value` rows.
pub fn write_summary_csv(path: &Path, out: &RunOutput) -> Result<(), CliError> {
    let mut text = String::from("kind,key,value\n");
    for (client, acc) in out.final_client_accuracy.iter().enumerate() {
        let _ = writeln!(text, "client_accuracy,{client},{acc}");
    }
    let _ = writeln!(text, "mean_accuracy,,{}", out.final_mean_accuracy);
    for r in &out.reports {
        let _ = writeln!(text, "delta,{},{}", r.round, r.max_delta);
    }
    write_file(path, &text)
}

/// Per-round expert participation counts plus the mean unique-expert count.
pub fn write_selection_csv(path: &Path, reports: &[RoundReport]) -> Result<(), CliError> {
    let experts = reports
        .iter()
        .filter_map(|r| r.selection.as_ref())
        .map(|s| s.expert_counts.len())
        .max()
        .unwrap_or(0);
    let mut text = String::from("round");
    for e in 0..experts {
        let _ = write!(text, ",expert_{e}");
    }
    text.push_str(",mean_unique\n");
    for r in reports {
        let Some(sel) = &r.selection else { continue };
        let _ = write!(text, "{}", r.round);
        for e in 0..experts {
            let _ = write!(text, ",{}", sel.expert_counts.get(e).copied().unwrap_or(0));
        }
        let _ = writeln!(text, ",{}", sel.mean_unique);
    }
    write_file(path, &text)
}

/// Serialized server state after allocation (`round_0000`) and after every
/// round.
pub fn write_checkpoints(
    dir: &Path,
    initial: &ServerState,
    snapshots: &[ServerState],
) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_checkpoint(dir, 0, initial)?;
    for (i, snap) in snapshots.iter().enumerate() {
        write_checkpoint(dir, i + 1, snap)?;
    }
    Ok(())
}

fn write_checkpoint(dir: &Path, index: usize, state: &ServerState) -> Result<(), CliError> {
    let mut text = serde_json::to_string(state)
        .map_err(|e| CliError::Runtime(format!("serializing checkpoint {index}: {e}")))?;
    text.push('\n');
    write_file(&dir.join(format!("round_{index:04}.json")), &text)
}

/// Plain numeric rows, one line per client.
pub fn distance_matrix_csv(dist: &fedlease_core::clustering::DistanceMatrix) -> String {
    let n = dist.len();
    let mut text = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                text.push(',');
            }
            let _ = write!(text, "{}", dist.get(i, j));
        }
        text.push('\n');
    }
    text
}

pub fn silhouette_csv(per_k: &std::collections::BTreeMap<usize, f64>) -> String {
    let mut text = String::from("k,score\n");
    for (k, s) in per_k {
        let _ = writeln!(text, "{k},{s}");
    }
    text
}
