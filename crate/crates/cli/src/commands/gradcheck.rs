use std::path::Path;

use anyhow::{bail, Result};
use p3d_core::backbone::audit_gradients;
use p3d_core::evalharness::{write_metrics_csv, MetricRow};

use super::create_dir;
use crate::config::GradcheckConfig;

pub fn run(cfg: &GradcheckConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let model = cfg.model.resolve()?;
    let checks = audit_gradients(&model, [cfg.resolution; 3], cfg.seed, cfg.entries, cfg.h)?;
    let rows: Vec<MetricRow> = checks
        .iter()
        .map(|c| MetricRow {
            run: "gradcheck".into(),
            step: 0,
            metric: c.name.clone(),
            value: c.max_rel_err(),
        })
        .collect();
    write_metrics_csv(&out.join("gradcheck.csv"), &rows)?;
    let failed: Vec<_> = checks.iter().filter(|c| !(c.max_rel_err() <= cfg.tolerance)).collect();
    let worst = checks.iter().map(|c| c.max_rel_err()).fold(0.0, f64::max);
    println!("{} parameter tensors, worst relative error {worst:.3e}", checks.len());
    if !failed.is_empty() {
        for c in &failed {
            eprintln!("{}: {:.3e}", c.name, c.max_rel_err());
        }
        bail!("{} parameter tensors exceed tolerance {}", failed.len(), cfg.tolerance);
    }
    Ok(())
}
