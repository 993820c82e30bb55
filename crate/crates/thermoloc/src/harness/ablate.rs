//! Ablation driver: trains and evaluates a grid of model variants with a
//! shared seed and dataset, tolerating per-variant failures.

use std::fs;
use std::path::Path;

use crate::data::Sequence;
use crate::error::Result;
use crate::model::BridgeMode;

use super::{evaluate, train, TrainConfig};

/// One grid entry's outcome: mean errors, or the failure that stopped it.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub mean_pos_m: Option<f64>,
    pub mean_rot_deg: Option<f64>,
    pub error: Option<String>,
}

/// Depth sweep plus an optional mask-based attention variant.
pub fn depth_grid(base: &TrainConfig, depths: &[usize], with_mask: bool) -> Vec<(String, TrainConfig)> {
    let mut grid = Vec::new();
    for &depth in depths {
        let mut cfg = base.clone();
        cfg.model.depth = depth;
        grid.push((format!("depth_{depth}"), cfg));
    }
    if with_mask {
        let mut cfg = base.clone();
        cfg.model.use_mask = true;
        grid.push(("mask_based".to_string(), cfg));
    }
    grid
}

/// The three feature-to-token bridge variants.
pub fn bridge_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [BridgeMode::PatchFirst, BridgeMode::ShapeFirst, BridgeMode::VintLike]
        .into_iter()
        .map(|mode| {
            let mut cfg = base.clone();
            cfg.model.bridge_mode = mode;
            (mode.to_string(), cfg)
        })
        .collect()
}

/// Trains and evaluates every variant; a failing variant becomes an error
/// row and the run continues. Writes `ablation.csv` (variant, mean position
/// m, mean rotation deg, status) under `out_dir` and returns the rows.
pub fn ablate(
    grid: &[(String, TrainConfig)],
    train_seqs: &[Sequence],
    test_seqs: &[Sequence],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (variant, cfg) in grid {
        let run_dir = out_dir.join(variant);
        let outcome = train(cfg, train_seqs, &run_dir)
            .and_then(|summary| evaluate(&summary.checkpoint_dir, test_seqs, None));
        rows.push(match outcome {
            Ok(report) => {
                let avg = report.average();
                AblationRow {
                    variant: variant.clone(),
                    mean_pos_m: Some(avg.mean_pos_m),
                    mean_rot_deg: Some(avg.mean_rot_deg),
                    error: None,
                }
            }
            Err(e) => AblationRow {
                variant: variant.clone(),
                mean_pos_m: None,
                mean_rot_deg: None,
                error: Some(e.to_string()),
            },
        });
    }

    let mut text = String::from("variant,mean_pos_m,mean_rot_deg,status\n");
    for row in &rows {
        match (&row.mean_pos_m, &row.mean_rot_deg) {
            (Some(p), Some(r)) => text.push_str(&format!("{},{p},{r},ok\n", row.variant)),
            _ => text.push_str(&format!(
                "{},,,failed: {}\n",
                row.variant,
                row.error.as_deref().unwrap_or("unknown")
            )),
        }
    }
    fs::write(out_dir.join("ablation.csv"), text)?;
    Ok(rows)
}
