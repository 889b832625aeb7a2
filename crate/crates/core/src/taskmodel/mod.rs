//! Image-to-score convolutional regressor: architecture, training and
//! fine-tuning, feature extraction and persistence.

mod network;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use network::{Architecture, ConvLayer, DenseLayer, Forward, Grads, Lineage, TaskNetwork, FEATURE_WIDTH};
pub use train::{finetune, pretrain, train_sgd, training_mse, TrainConfig, TrainReport, TrainSample};

use crate::error::{Error, Result};
use crate::numcore::{tns, KernelBank, Tensor3};

/// Penultimate-layer features of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub values: Vec<f32>,
    pub lineage: Lineage,
}

impl TaskNetwork<f32> {
    pub fn predict_qsteatosis(&self, image: &Tensor3<f32>) -> Result<f64> {
        self.predict(image)
    }

    pub fn extract_features(&self, image: &Tensor3<f32>, image_id: &str) -> Result<FeatureVector> {
        Ok(FeatureVector {
            image_id: image_id.to_string(),
            values: self.features(image)?,
            lineage: self.lineage.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let k = &c.kernels;
            let [o, ci, kh, kw] = k.dims();
            files.push((format!("conv{i}_weight.tns"), vec![o, ci, kh, kw], k.data().to_vec()));
            files.push((format!("conv{i}_bias.tns"), vec![o], c.bias.clone()));
        }
        let h = &self.hidden;
        files.push(("hidden_weight.tns".into(), vec![h.outputs, h.inputs], h.weights.clone()));
        files.push(("hidden_bias.tns".into(), vec![h.outputs], h.bias.clone()));
        files.push((
            "head_weight.tns".into(),
            vec![1, self.head.inputs],
            self.head.weights.clone(),
        ));
        files.push(("head_bias.tns".into(), vec![1], self.head.bias.clone()));
        for (name, dims, values) in &files {
            tns::write(&dir.join(name), dims, values)?;
        }
        let meta = NetworkMeta {
            architecture: self.arch.clone(),
            lineage: self.lineage.clone(),
            seed: self.seed,
            target_mean: self.target_mean,
            target_std: self.target_std,
        };
        let path = dir.join("network.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("network.json");
        let meta: NetworkMeta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let mut net = TaskNetwork::<f32>::init(meta.architecture, meta.seed)?;
        for (i, c) in net.convs.iter_mut().enumerate() {
            let [o, ci, kh, kw] = c.kernels.dims();
            let data = tns::read_expect(&dir.join(format!("conv{i}_weight.tns")), &[o, ci, kh, kw])?;
            c.kernels = KernelBank::from_vec(o, ci, kh, kw, data)?;
            c.bias = tns::read_expect(&dir.join(format!("conv{i}_bias.tns")), &[o])?;
        }
        let h = &mut net.hidden;
        h.weights = tns::read_expect(&dir.join("hidden_weight.tns"), &[h.outputs, h.inputs])?;
        h.bias = tns::read_expect(&dir.join("hidden_bias.tns"), &[h.outputs])?;
        net.head.weights = tns::read_expect(&dir.join("head_weight.tns"), &[1, net.head.inputs])?;
        net.head.bias = tns::read_expect(&dir.join("head_bias.tns"), &[1])?;
        net.set_target_standardization(meta.target_mean, meta.target_std)?;
        net.lineage = meta.lineage;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkMeta {
    architecture: Architecture,
    lineage: Lineage,
    seed: u64,
    target_mean: f64,
    target_std: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let mut net = TaskNetwork::<f32>::init(Architecture::standard(6, 64), 8).unwrap();
        net.set_target_standardization(1.25, 0.5).unwrap();
        net.lineage = Lineage::Finetuned {
            domain: 3,
            fallback: false,
        };
        net.head.bias[0] = 0.1;
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let loaded = TaskNetwork::load(dir.path()).unwrap();
        assert_eq!(loaded, net);
        let img = Tensor3::from_vec(6, 64, 64, (0..6 * 64 * 64).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        assert_eq!(
            loaded.predict_qsteatosis(&img).unwrap(),
            net.predict_qsteatosis(&img).unwrap()
        );
        let f = loaded.extract_features(&img, "x").unwrap();
        assert_eq!(f.values.len(), FEATURE_WIDTH);
        assert_eq!(f.lineage, net.lineage);
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let net = TaskNetwork::<f32>::init(Architecture::standard(6, 64), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        tns::write(&dir.path().join("head_bias.tns"), &[2], &[0.0, 0.0]).unwrap();
        assert!(TaskNetwork::load(dir.path()).is_err());
    }
}
