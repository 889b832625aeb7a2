//! Bundle directory layout:
//!
//! ```text
//! bundle.json          config, seed, fit report, SHA-256 of every other file
//! style/  cluster/  pretrained/  pdsm_00/ .. pdsm_{k-1}/  [baseline/]  pca/  forest/
//! train/               patients.json, outcomes/z0/z12 and single-model features
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::{FitReport, PipelineBundle, TrainingFeatures};
use crate::cluster::ClusterModel;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forest::ForestModel;
use crate::numcore::tns;
use crate::reduce::PcaModel;
use crate::styleembed::StyleModel;
use crate::taskmodel::TaskNetwork;

const FORMAT: &str = "pdsm-bundle-1";
const MANIFEST: &str = "bundle.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format: String,
    seed: u64,
    k: usize,
    input_channels: usize,
    image_size: usize,
    fallbacks: Vec<bool>,
    has_baseline: bool,
    config: BTreeMap<String, Value>,
    report: FitReport,
    /// Relative path → hex SHA-256.
    components: BTreeMap<String, String>,
}

fn write_rows(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    tns::write(path, &[rows.len(), cols], &flat)
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f32>>> {
    let (dims, values) = tns::read(path)?;
    match dims[..] {
        [_, m] if m > 0 => Ok(values.chunks_exact(m).map(<[f32]>::to_vec).collect()),
        [n, 0] => Ok(vec![Vec::new(); n]),
        _ => Err(Error::format(
            path.display().to_string(),
            format!("expected a matrix, found dims {dims:?}"),
        )),
    }
}

fn widen(rows: Vec<Vec<f32>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| r.into_iter().map(f64::from).collect())
        .collect()
}

fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::invalid(format!("walking {}: {e}", dir.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("inside dir");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        out.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

fn pdsm_dir(d: usize) -> String {
    format!("pdsm_{d:02}")
}

impl PipelineBundle {
    fn write_components(&self, dir: &Path) -> Result<()> {
        self.style.save(&dir.join("style"))?;
        self.cluster.save(&dir.join("cluster"))?;
        self.pretrained.save(&dir.join("pretrained"))?;
        for (d, net) in self.pdsms.iter().enumerate() {
            net.save(&dir.join(pdsm_dir(d)))?;
        }
        if let Some(b) = &self.baseline {
            b.save(&dir.join("baseline"))?;
        }
        self.pca.save(&dir.join("pca"))?;
        self.forest.save(&dir.join("forest"))?;

        let train = dir.join("train");
        fs::create_dir_all(&train).map_err(|e| Error::io(&train, e))?;
        let t = &self.training;
        let path = train.join("patients.json");
        fs::write(&path, serde_json::to_vec_pretty(&t.patient_ids)?).map_err(|e| Error::io(&path, e))?;
        let outcomes: Vec<f32> = t.outcomes.iter().map(|&v| v as f32).collect();
        tns::write(&train.join("outcomes.tns"), &[outcomes.len()], &outcomes)?;
        write_rows(&train.join("z0.tns"), &t.z0)?;
        write_rows(&train.join("z12.tns"), &t.z12)?;
        let wide = |rows: &[Vec<f32>]| {
            rows.iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect::<Vec<_>>()
        };
        write_rows(&train.join("single_f0.tns"), &wide(&t.baseline_f0))?;
        write_rows(&train.join("single_f12.tns"), &wide(&t.baseline_f12))?;

        let (input_channels, image_size) = self.input_shape();
        let manifest = BundleManifest {
            format: FORMAT.into(),
            seed: self.seed,
            k: self.k(),
            input_channels,
            image_size,
            fallbacks: self.pdsms.iter().map(TaskNetwork::is_fallback).collect(),
            has_baseline: self.baseline.is_some(),
            config: self.config.to_flat(),
            report: self.report.clone(),
            components: hash_files(dir)?,
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Writes the bundle into a temporary sibling directory and renames it
    /// into place, replacing any existing directory at `out`.
    pub fn save(&self, out: &Path) -> Result<()> {
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => std::env::current_dir().map_err(|e| Error::io(".", e))?,
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let tmp = tempfile::Builder::new()
            .prefix(".pdsm-bundle-")
            .tempdir_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        self.write_components(tmp.path())?;
        if out.exists() {
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
        let staged = tmp.keep();
        fs::rename(&staged, out).map_err(|e| Error::io(out, e))
    }

    /// Loads a bundle, verifying every component hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest: BundleManifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if manifest.format != FORMAT {
            return Err(Error::format(
                "bundle",
                format!("unsupported format `{}`", manifest.format),
            ));
        }
        let found = hash_files(dir)?;
        if found != manifest.components {
            let bad: Vec<&String> = manifest
                .components
                .keys()
                .chain(found.keys())
                .filter(|k| manifest.components.get(*k) != found.get(*k))
                .collect();
            return Err(Error::format("bundle", format!("component hash mismatch: {bad:?}")));
        }
        let config_text = serde_json::to_string(&manifest.config)?;
        let config = RunConfig::from_json(&config_text)?;

        let pdsms = (0..manifest.k)
            .map(|d| TaskNetwork::load(&dir.join(pdsm_dir(d))))
            .collect::<Result<Vec<_>>>()?;
        let baseline = if manifest.has_baseline {
            Some(TaskNetwork::load(&dir.join("baseline"))?)
        } else {
            None
        };
        let train = dir.join("train");
        let path = train.join("patients.json");
        let patient_ids: Vec<String> = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let outcomes = tns::read_expect(&train.join("outcomes.tns"), &[patient_ids.len()])?
            .into_iter()
            .map(f64::from)
            .collect();
        let bundle = Self {
            config,
            seed: manifest.seed,
            style: StyleModel::load(&dir.join("style"))?,
            cluster: ClusterModel::load(&dir.join("cluster"))?,
            pretrained: TaskNetwork::load(&dir.join("pretrained"))?,
            pdsms,
            baseline,
            pca: PcaModel::load(&dir.join("pca"))?,
            forest: ForestModel::load(&dir.join("forest"))?,
            training: TrainingFeatures {
                patient_ids,
                outcomes,
                z0: widen(read_rows(&train.join("z0.tns"))?),
                z12: widen(read_rows(&train.join("z12.tns"))?),
                baseline_f0: read_rows(&train.join("single_f0.tns"))?,
                baseline_f12: read_rows(&train.join("single_f12.tns"))?,
            },
            report: manifest.report,
        };
        if bundle.cluster.k() != bundle.k() {
            return Err(Error::format("bundle", "PDSM count differs from the cluster count"));
        }
        Ok(bundle)
    }
}
