//! End-to-end method: pre-train, discover pseudo-domains, fine-tune one
//! network per domain, extract and reduce per-visit features, and regress
//! the week-48 score with a random forest. Also evaluation against the
//! single-model and single-visit comparisons, and the seeded benchmark.

mod benchmark;
mod bundle;
mod datasets;

use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use benchmark::{run_benchmark, BenchmarkRow, BenchmarkTable};
pub use datasets::{build_feature_sets, LabeledImage, Triplet};

use crate::cluster::{kmeans_fit, ClusterModel};
use crate::config::{Baseline, RunConfig};
use crate::error::{check_dim, Error, Result};
use crate::forest::{rf_fit, ForestModel};
use crate::numcore::{rng_derive, stream_key, Tensor3};
use crate::reduce::{pca_fit, PcaModel};
use crate::styleembed::{style_embedding, StyleModel};
use crate::synthsite::{CohortManifest, ImageStore};
use crate::taskmodel::{finetune, pretrain, Architecture, TaskNetwork, TrainReport, TrainSample};
use datasets::require_images;

const KIND_STAGE: u32 = 16;
const STAGE_INIT: u64 = 0;
const STAGE_PRETRAIN: u64 = 1;
const STAGE_STYLE: u64 = 2;
const STAGE_CLUSTER: u64 = 3;
const STAGE_FINETUNE: u64 = 4;
const STAGE_POOLED: u64 = 5;
const STAGE_FOREST: u64 = 6;

/// Seed of one fitting stage, derived from the run seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    rng_derive(seed, stream_key(KIND_STAGE, stage)).child_seed()
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Per-domain fine-tuning summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: usize,
    pub images: usize,
    pub fallback: bool,
    pub training_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub pretrain: TrainReport,
    pub domains: Vec<DomainSummary>,
    pub baseline: Option<TrainReport>,
}

/// Training-set quantities kept with the bundle so the single-visit and
/// single-model comparisons can be re-fitted without the training images.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingFeatures {
    pub patient_ids: Vec<String>,
    pub outcomes: Vec<f64>,
    pub z0: Vec<Vec<f64>>,
    pub z12: Vec<Vec<f64>>,
    pub baseline_f0: Vec<Vec<f32>>,
    pub baseline_f12: Vec<Vec<f32>>,
}

/// Everything needed to predict outcomes from image pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineBundle {
    pub config: RunConfig,
    pub seed: u64,
    pub style: StyleModel,
    pub cluster: ClusterModel,
    pub pretrained: TaskNetwork,
    pub pdsms: Vec<TaskNetwork>,
    /// Separately fine-tuned comparison network; `None` means the
    /// pre-trained network serves as the single model.
    pub baseline: Option<TaskNetwork>,
    pub pca: PcaModel,
    pub forest: ForestModel,
    pub training: TrainingFeatures,
    pub report: FitReport,
}

/// PCA fitted on the pooled week-0 and week-12 features, the projected
/// (and `f32`-rounded) rows, and the forest on `[z0, z12]`.
struct Head {
    pca: PcaModel,
    z0: Vec<Vec<f64>>,
    z12: Vec<Vec<f64>>,
    forest: ForestModel,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn project(pca: &PcaModel, feature: &[f32]) -> Result<Vec<f64>> {
    Ok(round_f32(pca.transform(&to_f64(feature))?))
}

fn fit_head(config: &RunConfig, seed: u64, f0: &[Vec<f32>], f12: &[Vec<f32>], outcomes: &[f64]) -> Result<Head> {
    let rows: Vec<Vec<f64>> = f0.iter().chain(f12).map(|f| to_f64(f)).collect();
    let pca = pca_fit(&rows, config.reduce.components)
        .map_err(|e| e.in_stage("reduce"))?
        .quantized();
    let z0 = f0.iter().map(|f| project(&pca, f)).collect::<Result<Vec<_>>>()?;
    let z12 = f12.iter().map(|f| project(&pca, f)).collect::<Result<Vec<_>>>()?;
    let x: Vec<Vec<f64>> = z0.iter().zip(&z12).map(|(a, b)| concat(a, b)).collect();
    let forest =
        rf_fit(&x, outcomes, config.forest, stage_seed(seed, STAGE_FOREST)).map_err(|e| e.in_stage("forest"))?;
    Ok(Head { pca, z0, z12, forest })
}

fn samples<'a>(labeled: &'a [LabeledImage], images: &'a ImageStore) -> Vec<TrainSample<'a>> {
    labeled
        .iter()
        .map(|l| TrainSample {
            id: &l.image_id,
            image: &images[&l.image_id],
            target: l.target,
        })
        .collect()
}

/// Fits every component on a training manifest. Only images referenced by
/// `manifest` are read from `images`.
pub fn fit_pipeline(
    manifest: &CohortManifest,
    images: &ImageStore,
    config: &RunConfig,
    seed: u64,
) -> Result<PipelineBundle> {
    config.validate()?;
    let (labeled, triplets) = build_feature_sets(manifest).map_err(|e| e.in_stage("datasets"))?;
    let min_patients = config.cluster.k.max(2);
    if triplets.len() < min_patients {
        return Err(Error::invalid(format!(
            "fitting needs at least {min_patients} training patients, got {}",
            triplets.len()
        ))
        .in_stage("datasets"));
    }
    require_images(
        images,
        manifest
            .records
            .iter()
            .map(|r| r.image_id())
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    )
    .map_err(|e| e.in_stage("datasets"))?;
    let first = &images[&labeled[0].image_id];
    let (channels, size, width) = first.shape();
    check_dim("pipeline", "image width", size, width)?;
    info!(
        "fitting on {} patients ({} labelled images), k = {}",
        triplets.len(),
        labeled.len(),
        config.cluster.k
    );

    // Step 1: pooled pre-training.
    let df = samples(&labeled, images);
    let init = TaskNetwork::init(Architecture::standard(channels, size), stage_seed(seed, STAGE_INIT))
        .map_err(|e| e.in_stage("pretrain"))?;
    let pretrain_cfg = config.taskmodel.pretrain.with_seed(stage_seed(seed, STAGE_PRETRAIN));
    let (pretrained, pretrain_report) = pretrain(init, &df, &pretrain_cfg).map_err(|e| e.in_stage("pretrain"))?;

    // Step 2: style embeddings and pseudo-domains.
    let style = match &config.style.weights {
        Some(dir) => StyleModel::load(dir).map_err(|e| e.in_stage("style"))?,
        None => StyleModel::default_seeded(channels, stage_seed(seed, STAGE_STYLE)),
    };
    let embeddings = df
        .par_iter()
        .map(|s| style_embedding(&style, s.image, s.id))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("style"))?;
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
    let cluster = kmeans_fit(&points, config.cluster, stage_seed(seed, STAGE_CLUSTER))
        .map_err(|e| e.in_stage("cluster"))?
        .quantized();
    let mut parts: Vec<Vec<TrainSample<'_>>> = vec![Vec::new(); cluster.k()];
    for (s, e) in df.iter().zip(&embeddings) {
        parts[cluster.assign(e).map_err(|e| e.in_stage("cluster"))?].push(*s);
    }
    info!(
        "pseudo-domain sizes: {:?}",
        parts.iter().map(Vec::len).collect::<Vec<_>>()
    );

    // Step 3: one fine-tuned network per pseudo-domain.
    let finetune_seed = stage_seed(seed, STAGE_FINETUNE);
    let tuned = parts
        .par_iter()
        .enumerate()
        .map(|(d, part)| {
            let cfg = config
                .taskmodel
                .finetune
                .with_seed(rng_derive(finetune_seed, d as u64).child_seed());
            finetune(&pretrained, part, &cfg, d, config.taskmodel.min_finetune_samples)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("finetune"))?;
    let domains = tuned
        .iter()
        .zip(&parts)
        .enumerate()
        .map(|(d, ((net, report), part))| DomainSummary {
            domain: d,
            images: part.len(),
            fallback: net.is_fallback(),
            training_mse: report.final_mse,
        })
        .collect();
    let pdsms: Vec<TaskNetwork> = tuned.into_iter().map(|(n, _)| n).collect();

    let (baseline, baseline_report) = match config.pipeline.baseline {
        Baseline::Pretrained => (None, None),
        Baseline::PooledFinetune => {
            let cfg = config.taskmodel.finetune.with_seed(stage_seed(seed, STAGE_POOLED));
            let (net, report) = finetune(&pretrained, &df, &cfg, 0, 0).map_err(|e| e.in_stage("baseline"))?;
            (Some(net), Some(report))
        }
    };

    // Step 4: per-visit features, PCA and the forest.
    let single = baseline.as_ref().unwrap_or(&pretrained);
    let partial = PartialBundle {
        style: &style,
        cluster: &cluster,
        pdsms: &pdsms,
    };
    let extracted = triplets
        .par_iter()
        .map(|t| {
            let x0 = &images[&t.baseline_image];
            let x12 = &images[&t.followup_image];
            Ok([
                partial.pdsm_features(x0)?,
                partial.pdsm_features(x12)?,
                single.features(x0)?,
                single.features(x12)?,
            ])
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("features"))?;
    let [mut f0, mut f12, mut b0, mut b12] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for [a, b, c, d] in extracted {
        f0.push(a);
        f12.push(b);
        b0.push(c);
        b12.push(d);
    }
    let outcomes: Vec<f64> = triplets.iter().map(|t| t.outcome as f32 as f64).collect();
    let head = fit_head(config, seed, &f0, &f12, &outcomes)?;
    info!(
        "reduced {}-wide features to {} components; forest of {} trees",
        f0[0].len(),
        head.pca.n_components(),
        head.forest.trees().len()
    );

    Ok(PipelineBundle {
        config: config.clone(),
        seed,
        style,
        cluster,
        pretrained,
        pdsms,
        baseline,
        pca: head.pca,
        forest: head.forest,
        training: TrainingFeatures {
            patient_ids: triplets.iter().map(|t| t.patient_id.clone()).collect(),
            outcomes,
            z0: head.z0,
            z12: head.z12,
            baseline_f0: b0,
            baseline_f12: b12,
        },
        report: FitReport {
            pretrain: pretrain_report,
            domains,
            baseline: baseline_report,
        },
    })
}

struct PartialBundle<'a> {
    style: &'a StyleModel,
    cluster: &'a ClusterModel,
    pdsms: &'a [TaskNetwork],
}

impl PartialBundle<'_> {
    fn domain_of(&self, image: &Tensor3<f32>) -> Result<usize> {
        self.cluster.assign(&style_embedding(self.style, image, "")?)
    }

    fn pdsm_features(&self, image: &Tensor3<f32>) -> Result<Vec<f32>> {
        self.pdsms[self.domain_of(image)?].features(image)
    }
}

impl PipelineBundle {
    fn partial(&self) -> PartialBundle<'_> {
        PartialBundle {
            style: &self.style,
            cluster: &self.cluster,
            pdsms: &self.pdsms,
        }
    }

    pub fn k(&self) -> usize {
        self.pdsms.len()
    }

    /// `(channels, size)` of the images the bundle accepts.
    pub fn input_shape(&self) -> (usize, usize) {
        let a = self.pretrained.architecture();
        (a.input_channels, a.input_size)
    }

    fn check_image(&self, image: &Tensor3<f32>) -> Result<()> {
        let (c, s) = self.input_shape();
        check_dim("prediction", "image channels", c, image.channels())?;
        check_dim("prediction", "image height", s, image.height())?;
        check_dim("prediction", "image width", s, image.width())
    }

    /// Pseudo-domain of an image under the trained clustering.
    pub fn domain_of(&self, image: &Tensor3<f32>) -> Result<usize> {
        self.check_image(image)?;
        self.partial().domain_of(image)
    }

    /// Reduced features of one image, routed through its pseudo-domain's
    /// network.
    pub fn project(&self, image: &Tensor3<f32>) -> Result<Vec<f64>> {
        self.check_image(image)?;
        project(&self.pca, &self.partial().pdsm_features(image)?)
    }

    /// Forest input for a visit pair: `[z0, z12]`.
    pub fn forest_input(&self, baseline: &Tensor3<f32>, followup: &Tensor3<f32>) -> Result<Vec<f64>> {
        Ok(concat(&self.project(baseline)?, &self.project(followup)?))
    }

    /// Predicted week-48 score from the week-0 and week-12 images.
    pub fn predict_outcome(&self, baseline: &Tensor3<f32>, followup: &Tensor3<f32>) -> Result<f64> {
        self.forest.predict(&self.forest_input(baseline, followup)?)
    }

    /// The single-model network (pre-trained unless a pooled fine-tune was
    /// configured).
    pub fn single_model(&self) -> &TaskNetwork {
        self.baseline.as_ref().unwrap_or(&self.pretrained)
    }

    pub fn evaluate(&self, manifest: &CohortManifest, images: &ImageStore, mode: EvalMode) -> Result<EvalReport> {
        let (_, triplets) = build_feature_sets(manifest)?;
        if triplets.len() < 2 {
            return Err(Error::invalid(format!(
                "evaluation needs at least 2 patients, got {}",
                triplets.len()
            )));
        }
        require_images(
            images,
            triplets
                .iter()
                .flat_map(|t| [t.baseline_image.as_str(), t.followup_image.as_str()]),
        )?;
        let pair = |t: &Triplet| (&images[&t.baseline_image], &images[&t.followup_image]);
        let predictions: Vec<f64> = match mode {
            EvalMode::Pdsm => triplets
                .par_iter()
                .map(|t| {
                    let (x0, x12) = pair(t);
                    self.predict_outcome(x0, x12)
                })
                .collect::<Result<_>>()?,
            EvalMode::SingleModel => {
                let t = &self.training;
                let head = fit_head(&self.config, self.seed, &t.baseline_f0, &t.baseline_f12, &t.outcomes)?;
                let net = self.single_model();
                triplets
                    .par_iter()
                    .map(|t| {
                        let (x0, x12) = pair(t);
                        self.check_image(x0)?;
                        self.check_image(x12)?;
                        let z0 = project(&head.pca, &net.features(x0)?)?;
                        let z12 = project(&head.pca, &net.features(x12)?)?;
                        head.forest.predict(&concat(&z0, &z12))
                    })
                    .collect::<Result<_>>()?
            }
            EvalMode::SingleVisit => {
                let forest = rf_fit(
                    &self.training.z12,
                    &self.training.outcomes,
                    self.config.forest,
                    stage_seed(self.seed, STAGE_FOREST),
                )?;
                triplets
                    .par_iter()
                    .map(|t| forest.predict(&self.project(pair(t).1)?))
                    .collect::<Result<_>>()?
            }
        };
        let truth: Vec<f64> = triplets.iter().map(|t| t.outcome).collect();
        let (r2, mse) = r2_mse(&truth, &predictions)?;
        Ok(EvalReport {
            mode,
            r2,
            mse,
            n_test: truth.len(),
            pairs: triplets
                .iter()
                .zip(truth.iter().zip(&predictions))
                .map(|(t, (&truth, &prediction))| PatientPrediction {
                    patient_id: t.patient_id.clone(),
                    truth,
                    prediction,
                })
                .collect(),
        })
    }
}

/// `R² = 1 − Σ(y − ŷ)² / Σ(y − ȳ)²` and the mean squared residual.
pub fn r2_mse(truth: &[f64], prediction: &[f64]) -> Result<(f64, f64)> {
    check_dim("metrics", "prediction count", truth.len(), prediction.len())?;
    if truth.len() < 2 {
        return Err(Error::invalid("R² needs at least 2 targets"));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(prediction).map(|(y, p)| (y - p).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::UndefinedR2);
    }
    Ok((1.0 - ss_res / ss_tot, ss_res / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Both visits through their pseudo-domain networks.
    Pdsm,
    /// Both visits through the single pooled network.
    SingleModel,
    /// Week-12 pseudo-domain features only.
    SingleVisit,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Pdsm => "pdsm",
            EvalMode::SingleModel => "single_model",
            EvalMode::SingleVisit => "single_visit",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pdsm" => Ok(EvalMode::Pdsm),
            "single_model" => Ok(EvalMode::SingleModel),
            "single_visit" => Ok(EvalMode::SingleVisit),
            other => Err(Error::invalid(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub truth: f64,
    pub prediction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub r2: f64,
    pub mse: f64,
    pub n_test: usize,
    pub pairs: Vec<PatientPrediction>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mode: {}\nn_test: {}\nR2: {:.4}\nMSE: {:.4}\n\n{:<10} {:>8} {:>10}\n",
            self.mode.as_str(),
            self.n_test,
            self.r2,
            self.mse,
            "patient",
            "truth",
            "predicted"
        );
        for p in &self.pairs {
            let _ = writeln!(out, "{:<10} {:>8.4} {:>10.4}", p.patient_id, p.truth, p.prediction);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_definitions() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r2_mse(&y, &y).unwrap(), (1.0, 0.0));
        let (r2, mse) = r2_mse(&y, &[2.5; 4]).unwrap();
        assert_eq!(r2, 0.0);
        assert_eq!(mse, 1.25);
        assert!(matches!(r2_mse(&[2.0, 2.0], &[1.0, 2.0]), Err(Error::UndefinedR2)));
        assert!(r2_mse(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mode_names() {
        for m in [EvalMode::Pdsm, EvalMode::SingleModel, EvalMode::SingleVisit] {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.as_str());
        }
        assert!("both".parse::<EvalMode>().is_err());
    }
}
