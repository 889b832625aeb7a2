use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::synthsite::{CohortManifest, ImageStore, VisitRecord};

/// One labelled image of the feature-extractor training set.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image_id: String,
    pub target: f64,
}

/// One patient of the prediction training set: the week-0 and week-12
/// images and the week-48 score.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub patient_id: String,
    pub baseline_image: String,
    pub followup_image: String,
    pub outcome: f64,
}

/// Builds the labelled image set (weeks 0 and 48, two per patient) and the
/// per-patient triplets, both ordered by patient id.
pub fn build_feature_sets(manifest: &CohortManifest) -> Result<(Vec<LabeledImage>, Vec<Triplet>)> {
    manifest.validate()?;
    let incomplete = manifest.incomplete_patients();
    if !incomplete.is_empty() {
        return Err(Error::IncompleteVisits { patients: incomplete });
    }
    let mut by_patient: BTreeMap<&str, BTreeMap<u32, &VisitRecord>> = BTreeMap::new();
    for r in &manifest.records {
        by_patient.entry(&r.patient_id).or_default().insert(r.week, r);
    }
    let mut labeled = Vec::with_capacity(2 * by_patient.len());
    let mut triplets = Vec::with_capacity(by_patient.len());
    for (patient, visits) in &by_patient {
        for week in [0, 48] {
            let r = visits[&week];
            labeled.push(LabeledImage {
                image_id: r.image_id(),
                target: r.qsteatosis.expect("validated label"),
            });
        }
        triplets.push(Triplet {
            patient_id: patient.to_string(),
            baseline_image: visits[&0].image_id(),
            followup_image: visits[&12].image_id(),
            outcome: visits[&48].qsteatosis.expect("validated label"),
        });
    }
    Ok((labeled, triplets))
}

/// Confirms every referenced image is present.
pub(crate) fn require_images<'a>(images: &ImageStore, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let missing: Vec<&str> = ids.into_iter().filter(|id| !images.contains_key(*id)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("images not loaded: {}", missing.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthsite::WEEKS;

    fn manifest(n: usize) -> CohortManifest {
        let mut records = Vec::new();
        for p in 0..n {
            for w in WEEKS {
                records.push(VisitRecord {
                    patient_id: format!("P{p:03}"),
                    site_id: "S00".into(),
                    week: w,
                    image_path: String::new(),
                    qsteatosis: (w != 12).then_some(p as f64 + w as f64 / 100.0),
                });
            }
        }
        CohortManifest {
            config_hash: String::new(),
            seed: 0,
            records,
            base_dir: Default::default(),
        }
    }

    #[test]
    fn sizes_and_contents() {
        let (df, dp) = build_feature_sets(&manifest(74)).unwrap();
        assert_eq!(df.len(), 148);
        assert_eq!(dp.len(), 74);
        assert!(df.iter().all(|l| !l.image_id.ends_with("_w12")));
        assert_eq!(dp[3].outcome, 3.48);
        assert_eq!(dp[3].followup_image, "P003_w12");
    }

    #[test]
    fn missing_visit_is_reported() {
        let mut m = manifest(4);
        m.records.retain(|r| !(r.patient_id == "P002" && r.week == 12));
        match build_feature_sets(&m).unwrap_err() {
            Error::IncompleteVisits { patients } => assert_eq!(patients, vec!["P002".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
