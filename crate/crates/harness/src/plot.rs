//! Plot-ready CSVs derived from a finished run's reports.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail};
use clap::ValueEnum;
use felicia_core::eval::{median, read_reports_csv, write_coverage_csv, Split};
use felicia_core::partition::ClusterSplit;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::pipeline::{read_csv, subgroup_gap, write_csv, AggregateRow, CLUSTER_SPLIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    /// Generated and real points in the principal plane.
    Coverage,
    /// Focus-subgroup accuracy per bias level and recipe.
    Beta,
    /// Median validation AUC per λ pair.
    Lambda,
    /// Box statistics per recipe and metric.
    Box,
}

#[derive(Serialize)]
struct BetaRow {
    config_id: String,
    recipe: String,
    subgroup: String,
    median_accuracy: f64,
    median_gap: f64,
    n: usize,
}

#[derive(Serialize)]
struct LambdaRow {
    config_id: String,
    lambda1: f64,
    lambda2: f64,
    median_auc: f64,
    n: usize,
}

/// Writes the data behind `figure` under `<run>/plots/` and returns the
/// files written.
pub fn emit_plot_data(manifest: &RunManifest, figure: Figure) -> anyhow::Result<Vec<PathBuf>> {
    if !manifest.is_complete() {
        bail!(
            "run in {} is not complete; resume it first",
            manifest.output_dir.display()
        );
    }
    let artifact = |name: &str| {
        manifest
            .artifact(name)
            .ok_or_else(|| anyhow!("run has no {name} artifact"))
    };
    let dir = manifest.output_dir.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    match figure {
        Figure::Coverage => {
            let split: ClusterSplit =
                serde_json::from_slice(&std::fs::read(manifest.output_dir.join(CLUSTER_SPLIT))?)
                    .map_err(|e| anyhow!("run has no cluster split: {e}"))?;
            let real = dir.join("coverage_real.csv");
            let by_cluster: Vec<Vec<[f64; 2]>> = [1u8, 2]
                .iter()
                .map(|&c| {
                    split
                        .members(c)
                        .iter()
                        .map(|&i| split.embedding[i])
                        .collect()
                })
                .collect();
            write_coverage_csv(
                &real,
                &[
                    ("real_cluster1", &by_cluster[0]),
                    ("real_cluster2", &by_cluster[1]),
                ],
            )?;
            written.push(real);
            for (name, rel) in &manifest.artifacts {
                if let Some(rest) = name.strip_prefix("coverage/") {
                    let target = dir.join(format!("coverage_{}.csv", rest.replace('/', "_")));
                    std::fs::copy(manifest.output_dir.join(rel), &target)?;
                    written.push(target);
                }
            }
        }
        Figure::Beta => {
            let reports = read_reports_csv(&artifact("final_test_metrics")?, Split::Test)?;
            let mut groups: BTreeMap<(String, String, String), (Vec<f64>, Vec<f64>)> =
                BTreeMap::new();
            for r in &reports {
                for (name, acc) in &r.per_subgroup {
                    let g = groups
                        .entry((r.config_id.clone(), r.recipe.clone(), name.clone()))
                        .or_default();
                    g.0.push(*acc);
                    g.1.push(subgroup_gap(r));
                }
            }
            let rows: Vec<BetaRow> = groups
                .into_iter()
                .map(|((config_id, recipe, subgroup), (acc, gap))| BetaRow {
                    config_id,
                    recipe,
                    subgroup,
                    median_accuracy: median(&acc).unwrap_or(f64::NAN),
                    median_gap: median(&gap).unwrap_or(f64::NAN),
                    n: acc.len(),
                })
                .collect();
            let path = dir.join("beta_accuracy.csv");
            write_csv(&path, &rows)?;
            written.push(path);
        }
        Figure::Lambda => {
            let reports = read_reports_csv(&artifact("validation_reports")?, Split::Validation)?;
            let mut groups: BTreeMap<(String, u64, u64), Vec<f64>> = BTreeMap::new();
            for r in reports.iter().filter(|r| r.lambdas.len() == 2) {
                groups
                    .entry((
                        r.config_id.clone(),
                        r.lambdas[0].to_bits(),
                        r.lambdas[1].to_bits(),
                    ))
                    .or_default()
                    .push(r.auc);
            }
            let rows: Vec<LambdaRow> = groups
                .into_iter()
                .map(|((config_id, a, b), auc)| LambdaRow {
                    config_id,
                    lambda1: f64::from_bits(a),
                    lambda2: f64::from_bits(b),
                    median_auc: median(&auc).unwrap_or(f64::NAN),
                    n: auc.len(),
                })
                .collect();
            let path = dir.join("lambda_auc.csv");
            write_csv(&path, &rows)?;
            written.push(path);
        }
        Figure::Box => {
            let rows: Vec<AggregateRow> = read_csv(&artifact("aggregate")?)?;
            let path = dir.join("box.csv");
            write_csv(&path, &rows)?;
            written.push(path);
        }
    }
    Ok(written)
}
