use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{rng_derive, stream_key, tns, Tensor3};

pub const WEEKS: [u32; 3] = [0, 12, 48];
pub(crate) const KIND_SPLIT: u32 = 5;

/// One visit of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitRecord {
    pub patient_id: String,
    pub site_id: String,
    pub week: u32,
    /// Relative to the manifest's directory unless absolute.
    pub image_path: String,
    pub qsteatosis: Option<f64>,
}

impl VisitRecord {
    pub fn image_id(&self) -> String {
        format!("{}_w{:02}", self.patient_id, self.week)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    config_hash: String,
    seed: u64,
}

/// Visit records plus the generator config hash and seed. Serialized as
/// JSON lines: a header line, then one line per record.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<VisitRecord>,
    /// Directory that relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl CohortManifest {
    /// Checks week values and label nullability; each label must be
    /// finite when present and a patient may not repeat a week.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !WEEKS.contains(&r.week) {
                return Err(Error::invalid(format!(
                    "{}: week {} is not one of 0/12/48",
                    r.patient_id, r.week
                )));
            }
            let labelled = r.week != 12;
            match r.qsteatosis {
                Some(v) if !labelled => {
                    return Err(Error::invalid(format!(
                        "{}: week-12 visit carries a label {v}",
                        r.patient_id
                    )))
                }
                None if labelled => {
                    return Err(Error::invalid(format!(
                        "{}: week-{} visit has no label",
                        r.patient_id, r.week
                    )))
                }
                Some(v) if !v.is_finite() => return Err(Error::NonFinite(format!("label of {}", r.image_id()))),
                _ => {}
            }
            if !seen.insert((r.patient_id.as_str(), r.week)) {
                return Err(Error::invalid(format!("{}: duplicate week {}", r.patient_id, r.week)));
            }
        }
        Ok(())
    }

    pub fn patient_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.patient_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Patients that do not have exactly the three visits.
    pub fn incomplete_patients(&self) -> Vec<String> {
        let mut weeks: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for r in &self.records {
            weeks.entry(&r.patient_id).or_default().insert(r.week);
        }
        weeks
            .into_iter()
            .filter(|(_, w)| w.len() != WEEKS.len())
            .map(|(p, _)| p.to_string())
            .collect()
    }

    pub fn resolve(&self, record: &VisitRecord) -> PathBuf {
        self.base_dir.join(&record.image_path)
    }

    pub fn load_image(&self, record: &VisitRecord) -> Result<Tensor3<f32>> {
        let path = self.resolve(record);
        let (dims, values) = tns::read(&path)?;
        match dims[..] {
            [c, h, w] => Tensor3::from_vec(c, h, w, values),
            _ => Err(Error::format(
                path.display().to_string(),
                format!("expected a rank-3 image, found dims {dims:?}"),
            )),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let what = path.display().to_string();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::format(what.clone(), "empty manifest"))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| Error::format(what.clone(), format!("header: {e}")))?;
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::format(what.clone(), format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<VisitRecord>>>()?;
        let manifest = Self {
            config_hash: header.config_hash,
            seed: header.seed,
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn subset(&self, patients: &BTreeSet<&str>) -> Self {
        Self {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            records: self
                .records
                .iter()
                .filter(|r| patients.contains(r.patient_id.as_str()))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Patient-level split: `round(fraction · n)` patients (at least one on each
/// side) go to the training manifest, chosen by a seeded shuffle of the
/// sorted patient ids.
pub fn split_train_test(
    manifest: &CohortManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(CohortManifest, CohortManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut ids = manifest.patient_ids();
    let n = ids.len();
    if n < 2 {
        return Err(Error::invalid(format!("splitting needs at least 2 patients, got {n}")));
    }
    rng_derive(seed, stream_key(KIND_SPLIT, 0)).shuffle(&mut ids);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train: BTreeSet<&str> = ids[..n_train].iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = ids[n_train..].iter().map(String::as_str).collect();
    Ok((manifest.subset(&train), manifest.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> CohortManifest {
        let mut records = Vec::new();
        for p in 0..n {
            for w in WEEKS {
                records.push(VisitRecord {
                    patient_id: format!("P{p:03}"),
                    site_id: "S00".into(),
                    week: w,
                    image_path: format!("images/p{p:03}_w{w:02}.tns"),
                    qsteatosis: (w != 12).then_some(1.0 + p as f64 / 10.0),
                });
            }
        }
        CohortManifest {
            config_hash: "abc".into(),
            seed: 1,
            records,
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let m = manifest(74);
        let (tr, te) = split_train_test(&m, 0.72, 3).unwrap();
        assert_eq!(tr.patient_ids().len(), 53);
        assert_eq!(te.patient_ids().len(), 21);
        assert_eq!(tr.records.len(), 159);
        assert!(tr.patient_ids().iter().all(|p| !te.patient_ids().contains(p)));
        let (tr2, _) = split_train_test(&m, 0.72, 3).unwrap();
        assert_eq!(tr, tr2);
        let (tr3, _) = split_train_test(&m, 0.72, 4).unwrap();
        assert_ne!(tr.patient_ids(), tr3.patient_ids());
        assert_eq!(tr3.patient_ids().len(), 53);
    }

    #[test]
    fn split_errors() {
        assert!(split_train_test(&manifest(5), 1.0, 1).is_err());
        assert!(split_train_test(&manifest(5), 0.0, 1).is_err());
        assert!(split_train_test(&manifest(1), 0.5, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let m = manifest(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        m.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("config_hash"));
        assert!(text.contains("\"qsteatosis\":null"));
        let back = CohortManifest::read(&path).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.base_dir, dir.path());
    }

    #[test]
    fn validation() {
        let mut m = manifest(2);
        m.records[1].qsteatosis = Some(2.0);
        assert!(m.validate().is_err());
        let mut m = manifest(2);
        m.records[0].qsteatosis = None;
        assert!(m.validate().is_err());
        let mut m = manifest(2);
        m.records[0].week = 24;
        assert!(m.validate().is_err());
        let mut m = manifest(2);
        m.records.remove(1);
        assert!(m.validate().is_ok());
        assert_eq!(m.incomplete_patients(), vec!["P000".to_string()]);
    }
}
