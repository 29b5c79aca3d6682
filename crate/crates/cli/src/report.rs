//! Plot-ready CSVs from `metrics.json` files.

use std::fs;
use std::path::{Path, PathBuf};

use sesame_core::se_fusion::{format_sig17, write_layer_weight_csv};
use sesame_core::Metrics;

use crate::CliError;

/// `dir/metrics.json` and `dir/*/metrics.json`, sorted by path.
fn find_metrics(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut found = Vec::new();
    let own = dir.join("metrics.json");
    if own.is_file() {
        found.push(own);
    }
    let mut sub = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::usage(e.to_string()))?.path();
        let candidate = path.join("metrics.json");
        if path.is_dir() && candidate.is_file() {
            sub.push(candidate);
        }
    }
    sub.sort();
    found.extend(sub);
    Ok(found)
}

/// Writes `loss_curve.csv`, `layer_weights.csv` and `heuristics.csv` next
/// to every metrics file. A CSV whose data the run did not record (no
/// excitation gate, no diagnostic split) gets its header only.
pub fn report(dir: &Path) -> Result<(), CliError> {
    let files = find_metrics(dir)?;
    if files.is_empty() {
        return Err(CliError::usage(format!("no metrics.json in {} or its subdirectories", dir.display())));
    }
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| CliError::usage(format!("cannot read {}: {e}", file.display())))?;
        let metrics: Metrics = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{} is not a metrics file: {e}", file.display())))?;
        let run_dir = file.parent().expect("file is inside a directory");
        write_csvs(run_dir, &metrics)?;
        println!("wrote CSVs for {}", run_dir.display());
    }
    Ok(())
}

fn write_csvs(dir: &Path, metrics: &Metrics) -> Result<(), CliError> {
    super::commands::write_file(&dir.join("loss_curve.csv"), |w| {
        writeln!(w, "step,loss")?;
        for (i, loss) in metrics.per_step_loss.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, format_sig17(*loss))?;
        }
        Ok(())
    })?;
    super::commands::write_file(&dir.join("layer_weights.csv"), |w| {
        write_layer_weight_csv(w, metrics.layer_weights.as_deref().unwrap_or_default())
    })?;
    super::commands::write_file(&dir.join("heuristics.csv"), |w| match &metrics.heuristic_table {
        Some(t) => t.write_csv(w),
        None => {
            writeln!(w, "heuristic,subset,correct,total,accuracy")?;
            Ok(())
        }
    })
}
