//! Synthetic multi-site longitudinal cohort: sites with vendor-specific
//! scanner appearance, three visits per patient (weeks 0, 12, 48) and
//! scores observed at weeks 0 and 48 only.

mod manifest;
mod render;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use manifest::{split_train_test, CohortManifest, VisitRecord, WEEKS};
pub use render::{blob_fraction, render_image, render_tissue, SiteProfile, MAX_BLOB_COVERAGE};

use crate::error::{Error, Result};
use crate::numcore::{rng_derive, stream_key, tns, Tensor3};

const KIND_SITE: u32 = 1;
const KIND_PATIENT: u32 = 2;
const KIND_IMAGE: u32 = 3;
const KIND_ASSIGN: u32 = 4;

/// Images keyed by [`VisitRecord::image_id`].
pub type ImageStore = BTreeMap<String, Tensor3<f32>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub patients: usize,
    pub sites: usize,
    pub vendors: usize,
    pub echoes: usize,
    pub image_size: usize,
    /// Scales every site's departure from the neutral appearance.
    pub heterogeneity: f64,
    pub train_fraction: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            patients: 74,
            sites: 28,
            vendors: 3,
            echoes: 6,
            image_size: 64,
            heterogeneity: 1.0,
            train_fraction: 0.72,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients < 2 {
            return Err(Error::invalid("cohort needs at least 2 patients"));
        }
        if self.sites == 0 || self.vendors == 0 || self.echoes == 0 {
            return Err(Error::invalid("cohort needs at least one site, vendor and echo"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid(format!("image size {} is below 8", self.image_size)));
        }
        if !(self.heterogeneity.is_finite() && self.heterogeneity >= 0.0) {
            return Err(Error::invalid("heterogeneity must be finite and non-negative"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plain struct serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Appearance offsets from neutral for one vendor family:
/// `(gain, gamma, bias amplitude, blur sigma, extra noise sigma)`.
struct Archetype([f64; 5]);

const ARCHETYPES: [Archetype; 6] = [
    Archetype([0.50, -0.60, 0.20, 0.0, 0.00]),
    Archetype([-0.50, 0.80, 0.10, 3.0, 0.04]),
    Archetype([0.00, 0.10, 0.70, 1.2, 0.12]),
    Archetype([0.30, 0.60, 0.50, 0.0, 0.20]),
    Archetype([-0.30, -0.40, 0.00, 4.4, 0.00]),
    Archetype([0.70, 0.30, 0.40, 2.0, 0.08]),
];
const JITTER: [f64; 5] = [0.10, 0.10, 0.06, 0.30, 0.01];
const BASE_NOISE: f64 = 0.02;

/// Draws site `index`'s appearance from its vendor archetype.
pub fn site_profile(config: &CohortConfig, index: usize, seed: u64) -> SiteProfile {
    let vendor = index % config.vendors;
    let arch = &ARCHETYPES[vendor % ARCHETYPES.len()].0;
    let mut rng = rng_derive(seed, stream_key(KIND_SITE, index as u64));
    let h = config.heterogeneity;
    let mut p = [0.0; 5];
    for (i, v) in p.iter_mut().enumerate() {
        *v = h * (arch[i] + JITTER[i] * rng.normal());
    }
    let bias_angle = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    SiteProfile {
        site_id: format!("S{index:02}"),
        vendor,
        gain: (1.0 + p[0]).clamp(0.5, 1.5),
        gamma: (1.0 + p[1]).clamp(0.6, 1.6),
        bias_amplitude: p[2].max(0.0),
        bias_angle,
        blur_sigma: p[3].max(0.0),
        noise_sigma: (BASE_NOISE + p[4]).max(0.0),
    }
}

/// Latent trajectory of one patient. Scores are rounded to `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientSim {
    pub patient_id: String,
    pub site_id: String,
    pub s0: f64,
    pub responder: bool,
    /// Unobserved week-12 latent, used only for rendering.
    pub s12: f64,
    pub s48: f64,
}

impl PatientSim {
    pub fn latent(&self, week: u32) -> f64 {
        match week {
            0 => self.s0,
            12 => self.s12,
            _ => self.s48,
        }
    }
}

fn patient_sim(index: usize, site_id: String, seed: u64) -> PatientSim {
    let mut rng = rng_derive(seed, stream_key(KIND_PATIENT, index as u64));
    let s0 = rng.uniform(0.5, 3.5) as f32 as f64;
    let responder = rng.bernoulli(0.6);
    let delta = rng.uniform(0.5, 1.5);
    let eps = rng.gaussian(0.0, 0.1);
    let drop = if responder { delta } else { 0.0 };
    let s48 = (s0 - drop + eps).clamp(0.0, 4.0) as f32 as f64;
    PatientSim {
        patient_id: format!("P{index:03}"),
        site_id,
        s0,
        responder,
        s12: s0 + 0.35 * (s48 - s0),
        s48,
    }
}

/// Stream seed for one visit image.
pub fn image_seed(seed: u64, patient: usize, week: u32) -> u64 {
    rng_derive(seed, stream_key(KIND_IMAGE, ((patient as u64) << 8) | week as u64)).child_seed()
}

/// A generated cohort held in memory.
#[derive(Clone, Debug)]
pub struct GeneratedCohort {
    pub config: CohortConfig,
    pub seed: u64,
    pub sites: Vec<SiteProfile>,
    pub patients: Vec<PatientSim>,
    pub manifest: CohortManifest,
    pub images: ImageStore,
}

pub fn generate_cohort(config: &CohortConfig, seed: u64) -> Result<GeneratedCohort> {
    config.validate()?;
    let sites: Vec<SiteProfile> = (0..config.sites).map(|i| site_profile(config, i, seed)).collect();
    let mut order: Vec<usize> = (0..config.sites).collect();
    rng_derive(seed, stream_key(KIND_ASSIGN, 0)).shuffle(&mut order);
    let patients: Vec<PatientSim> = (0..config.patients)
        .map(|p| patient_sim(p, sites[order[p % config.sites]].site_id.clone(), seed))
        .collect();

    let mut records = Vec::with_capacity(3 * patients.len());
    let mut jobs = Vec::with_capacity(3 * patients.len());
    for (p, sim) in patients.iter().enumerate() {
        let site = &sites[order[p % config.sites]];
        for week in WEEKS {
            let record = VisitRecord {
                patient_id: sim.patient_id.clone(),
                site_id: site.site_id.clone(),
                week,
                image_path: String::new(),
                qsteatosis: match week {
                    0 => Some(sim.s0),
                    48 => Some(sim.s48),
                    _ => None,
                },
            };
            jobs.push((record.image_id(), sim.latent(week), site, image_seed(seed, p, week)));
            records.push(VisitRecord {
                image_path: format!("images/{}.tns", record.image_id()),
                ..record
            });
        }
    }
    let images: ImageStore = jobs
        .par_iter()
        .map(|(id, latent, site, s)| {
            Ok((
                id.clone(),
                render_image(*latent, site, config.echoes, config.image_size, *s)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    let manifest = CohortManifest {
        config_hash: config.hash(),
        seed,
        records,
        base_dir: Default::default(),
    };
    info!(
        "generated {} patients over {} sites ({} images)",
        patients.len(),
        sites.len(),
        images.len()
    );
    Ok(GeneratedCohort {
        config: config.clone(),
        seed,
        sites,
        patients,
        manifest,
        images,
    })
}

impl GeneratedCohort {
    pub fn split(&self) -> Result<(CohortManifest, CohortManifest)> {
        split_train_test(&self.manifest, self.config.train_fraction, self.seed)
    }

    /// Vendor archetype of every site id.
    pub fn vendor_of_site(&self) -> BTreeMap<String, usize> {
        self.sites.iter().map(|s| (s.site_id.clone(), s.vendor)).collect()
    }

    /// Writes `manifest.jsonl`, `train.jsonl`, `test.jsonl`, `sites.json`
    /// and `images/<image id>.tns` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for record in &self.manifest.records {
            let img = &self.images[&record.image_id()];
            let (c, h, w) = img.shape();
            tns::write(&dir.join(&record.image_path), &[c, h, w], img.data())?;
        }
        let (train, test) = self.split()?;
        self.manifest.write(&dir.join("manifest.jsonl"))?;
        train.write(&dir.join("train.jsonl"))?;
        test.write(&dir.join("test.jsonl"))?;
        let path = dir.join("sites.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.sites)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Loads every image referenced by a manifest.
pub fn load_images(manifest: &CohortManifest) -> Result<ImageStore> {
    manifest
        .records
        .par_iter()
        .map(|r| Ok((r.image_id(), manifest.load_image(r)?)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}
