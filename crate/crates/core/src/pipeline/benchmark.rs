use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::{fit_pipeline, EvalMode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::synthsite::generate_cohort;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    /// `None` on the mean row.
    pub seed: Option<u64>,
    pub pdsm_r2: f64,
    pub pdsm_mse: f64,
    pub single_model_r2: f64,
    pub single_model_mse: f64,
    pub single_visit_r2: f64,
    pub single_visit_mse: f64,
}

/// One row per seed followed by the mean row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn seed_rows(&self) -> &[BenchmarkRow] {
        &self.rows[..self.rows.len() - 1]
    }

    pub fn mean(&self) -> &BenchmarkRow {
        self.rows.last().expect("table has a mean row")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>9} {:>9} {:>10} {:>10} {:>10} {:>10}\n",
            "seed", "pdsm_r2", "pdsm_mse", "single_r2", "single_mse", "visit_r2", "visit_mse"
        );
        for r in &self.rows {
            let label = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                label,
                r.pdsm_r2,
                r.pdsm_mse,
                r.single_model_r2,
                r.single_model_mse,
                r.single_visit_r2,
                r.single_visit_mse
            );
        }
        out
    }
}

fn run_seed(config: &RunConfig, seed: u64) -> Result<BenchmarkRow> {
    let cohort = generate_cohort(&config.cohort, seed)?;
    let (train, test) = cohort.split()?;
    let bundle = fit_pipeline(&train, &cohort.images, config, seed)?;
    let eval = |mode| bundle.evaluate(&test, &cohort.images, mode);
    let (pdsm, single, visit) = (
        eval(EvalMode::Pdsm)?,
        eval(EvalMode::SingleModel)?,
        eval(EvalMode::SingleVisit)?,
    );
    info!(
        "seed {seed}: PDSM R2 {:.4}, single-model R2 {:.4}, single-visit R2 {:.4}",
        pdsm.r2, single.r2, visit.r2
    );
    Ok(BenchmarkRow {
        seed: Some(seed),
        pdsm_r2: pdsm.r2,
        pdsm_mse: pdsm.mse,
        single_model_r2: single.r2,
        single_model_mse: single.mse,
        single_visit_r2: visit.r2,
        single_visit_mse: visit.mse,
    })
}

/// For each seed: generate a cohort, split it, fit a bundle on the training
/// patients and evaluate all three modes on the test patients.
pub fn run_benchmark(config: &RunConfig, seeds: &[u64]) -> Result<BenchmarkTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("benchmark needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(seeds.len() + 1);
    for &seed in seeds {
        rows.push(run_seed(config, seed).map_err(|e| Error::Seed {
            seed,
            source: Box::new(e),
        })?);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&BenchmarkRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_row = BenchmarkRow {
        seed: None,
        pdsm_r2: mean(|r| r.pdsm_r2),
        pdsm_mse: mean(|r| r.pdsm_mse),
        single_model_r2: mean(|r| r.single_model_r2),
        single_model_mse: mean(|r| r.single_model_mse),
        single_visit_r2: mean(|r| r.single_visit_r2),
        single_visit_mse: mean(|r| r.single_visit_mse),
    };
    rows.push(mean_row);
    Ok(BenchmarkTable { rows })
}
