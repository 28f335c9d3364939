//! (alpha, beta) grid search minimizing mean ECE over seeds.

use std::fs;
use std::io::Write as _;

use promptcal::error::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;
use crate::experiment::{compute, prepare, Prepared};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub mean_ece: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best_alpha: f64,
    pub best_beta: f64,
    pub rows: Vec<GridRow>,
}

fn validate_grid(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} grid is empty")));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} grid contains non-finite value {bad}"
        )));
    }
    Ok(())
}

/// Checks the grids and the target method before any compute.
pub fn validate_inputs(alphas: &[f64], betas: &[f64], cfg: &ResolvedConfig) -> Result<()> {
    validate_grid(alphas, "alpha")?;
    validate_grid(betas, "beta")?;
    let target = &cfg.methods[0];
    if target.n_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid target method {:?} runs no tuning steps, so alpha and beta have no effect",
            target.name
        )));
    }
    Ok(())
}

/// Runs the first configured method once per (alpha, beta) pair and picks
/// the pair with the least mean ECE, breaking ties toward smaller alpha,
/// then smaller beta. Cells that score nothing rank after every real value.
pub fn grid_search(cfg: &ResolvedConfig, alphas: &[f64], betas: &[f64]) -> Result<GridOutcome> {
    validate_inputs(alphas, betas, cfg)?;
    let prepared = prepare(cfg)?;
    search_prepared(cfg, &prepared, alphas, betas)
}

/// Grid body, separated so callers control the prepare phase.
pub fn search_prepared(
    cfg: &ResolvedConfig,
    prepared: &Prepared,
    alphas: &[f64],
    betas: &[f64],
) -> Result<GridOutcome> {
    let mut rows = Vec::with_capacity(alphas.len() * betas.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &alpha in alphas {
        for &beta in betas {
            let mut cell_cfg = cfg.clone();
            cell_cfg.methods = vec![cfg.methods[0].clone()];
            cell_cfg.methods[0].alpha = alpha;
            cell_cfg.methods[0].beta = beta;
            cell_cfg.methods[0].weights().validate()?;
            let computed = compute(&cell_cfg, prepared)?;
            let means = &computed.method_means[0];
            rows.push(GridRow {
                alpha,
                beta,
                mean_ece: means.mean_ece,
                mean_accuracy: means.mean_accuracy,
            });
            let score = means.mean_ece.unwrap_or(f64::INFINITY);
            let candidate = (score, alpha, beta);
            let better = match best {
                None => true,
                Some(current) => {
                    candidate.0 < current.0
                        || (candidate.0 == current.0
                            && (candidate.1 < current.1
                                || (candidate.1 == current.1 && candidate.2 < current.2)))
                }
            };
            if better {
                best = Some(candidate);
            }
        }
    }
    let (_, best_alpha, best_beta) = best.unwrap();
    Ok(GridOutcome {
        best_alpha,
        best_beta,
        rows,
    })
}

/// Writes grid.tsv and grid.json into the config's output directory.
pub fn write_grid(cfg: &ResolvedConfig, outcome: &GridOutcome) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let mut tsv = String::from("alpha\tbeta\tmean_ece\tmean_accuracy\n");
    for r in &outcome.rows {
        let fmt = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x}"));
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.alpha,
            r.beta,
            fmt(r.mean_ece),
            fmt(r.mean_accuracy)
        ));
    }
    let mut f = fs::File::create(cfg.output_dir.join("grid.tsv"))?;
    f.write_all(tsv.as_bytes())?;

    let json = serde_json::to_string_pretty(outcome)
        .map_err(|e| Error::Format(format!("grid serialization failed: {e}")))?;
    let mut f = fs::File::create(cfg.output_dir.join("grid.json"))?;
    f.write_all(format!("{json}\n").as_bytes())?;
    Ok(())
}
