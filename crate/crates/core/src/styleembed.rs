//! Style embeddings: Gram-matrix statistics of a fixed convolutional model.
//!
//! For every selected layer the `C × C` Gram matrix of its ReLU feature maps
//! (normalized by the number of spatial positions) is flattened to its upper
//! triangle, L2-normalized as a block, and the blocks are concatenated in
//! layer order. The resulting vector describes image appearance (contrast,
//! texture, blur, noise) rather than spatial layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numcore::{conv2d_forward, rng_derive, sym_eig, tns, DenseMatrix, KernelBank, Real, Tensor3};

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleLayer {
    pub kernels: KernelBank<f32>,
    pub stride: usize,
    pub padding: usize,
}

/// Fixed convolutional feature extractor. Weights cannot be modified after
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleModel {
    layers: Vec<StyleLayer>,
    selected: Vec<usize>,
    provenance: String,
}

impl StyleModel {
    /// `selected` holds zero-based layer indices; it is sorted and
    /// deduplicated.
    pub fn new(layers: Vec<StyleLayer>, mut selected: Vec<usize>, provenance: impl Into<String>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("style model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_dim(
                "style model",
                "layer input channels",
                pair[0].kernels.out_channels(),
                pair[1].kernels.in_channels(),
            )?;
        }
        if layers.iter().any(|l| l.stride == 0) {
            return Err(Error::invalid("style layer stride must be at least 1"));
        }
        selected.sort_unstable();
        selected.dedup();
        if selected.is_empty() {
            return Err(Error::invalid("style model needs a non-empty layer selection"));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= layers.len()) {
            return Err(Error::invalid(format!(
                "selected style layer {bad} out of range ({} layers)",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            selected,
            provenance: provenance.into(),
        })
    }

    /// The default fixed random filter bank: 5×5/stride 2 to 8 channels,
    /// then 3×3/stride 2 to 16 channels, no padding, no bias, both layers
    /// selected.
    pub fn default_seeded(input_channels: usize, seed: u64) -> Self {
        let specs = [(input_channels, 8, 5, 2), (8, 16, 3, 2)];
        let layers = specs
            .iter()
            .enumerate()
            .map(|(idx, &(cin, cout, k, stride))| {
                let mut rng = rng_derive(seed, idx as u64);
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                let data = (0..cout * cin * k * k).map(|_| (rng.normal() * std) as f32).collect();
                StyleLayer {
                    kernels: KernelBank::from_vec(cout, cin, k, k, data).expect("sizes match"),
                    stride,
                    padding: 0,
                }
            })
            .collect();
        Self::new(layers, vec![0, 1], format!("seed:{seed}")).expect("default architecture is valid")
    }

    pub fn layers(&self) -> &[StyleLayer] {
        &self.layers
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].kernels.in_channels()
    }

    /// Σ C(C+1)/2 over the selected layers.
    pub fn embedding_dim(&self) -> usize {
        self.selected
            .iter()
            .map(|&i| {
                let c = self.layers[i].kernels.out_channels();
                c * (c + 1) / 2
            })
            .sum()
    }

    /// Feature maps of the selected layers in ascending layer order (conv
    /// followed by ReLU at every layer).
    pub fn forward<T: Real>(&self, image: &Tensor3<T>) -> Result<Vec<Tensor3<T>>> {
        check_dim("style model", "input channels", self.input_channels(), image.channels())?;
        let last = *self.selected.last().expect("selection is non-empty");
        let mut maps = Vec::with_capacity(self.selected.len());
        let mut current = image.clone();
        for (idx, layer) in self.layers.iter().enumerate().take(last + 1) {
            let kernels = layer.kernels.cast::<T>();
            current = conv2d_forward(&current, &kernels, layer.stride, layer.padding)?.map(|v| v.max(T::zero()));
            if self.selected.contains(&idx) {
                maps.push(current.clone());
            }
        }
        Ok(maps)
    }

    pub fn embed(&self, image: &Tensor3<f32>, image_id: impl Into<String>) -> Result<StyleEmbedding> {
        style_embedding(self, image, image_id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let file = format!("layer_{idx}.tns");
            tns::write(&dir.join(&file), &layer.kernels.dims(), layer.kernels.data())?;
            entries.push(LayerEntry {
                file,
                stride: layer.stride,
                padding: layer.padding,
                dims: layer.kernels.dims(),
            });
        }
        let manifest = StyleManifest {
            layers: entries,
            selected: self.selected.clone(),
            provenance: self.provenance.clone(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StyleManifest = serde_json::from_slice(&text)?;
        let layers = manifest
            .layers
            .iter()
            .map(|entry| {
                let values = tns::read_expect(&dir.join(&entry.file), &entry.dims)?;
                let [o, i, kh, kw] = entry.dims;
                Ok(StyleLayer {
                    kernels: KernelBank::from_vec(o, i, kh, kw, values)?,
                    stride: entry.stride,
                    padding: entry.padding,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, manifest.selected, manifest.provenance)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    file: String,
    stride: usize,
    padding: usize,
    dims: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct StyleManifest {
    layers: Vec<LayerEntry>,
    selected: Vec<usize>,
    provenance: String,
}

/// Channel co-activation matrix of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub layer: usize,
    size: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn trace(&self) -> f64 {
        (0..self.size).map(|i| self.get(i, i)).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let m = DenseMatrix::from_vec(self.size, self.size, self.values.clone())?;
        let eig = sym_eig(&m)?;
        Ok(eig.values.last().copied().unwrap_or(0.0))
    }

    /// min eigenvalue ≥ −1e-6 · trace.
    pub fn is_psd(&self) -> Result<bool> {
        Ok(self.min_eigenvalue()? >= -1e-6 * self.trace())
    }

    /// Upper triangle including the diagonal, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.size * (self.size + 1) / 2);
        for i in 0..self.size {
            for j in i..self.size {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// `G_ij = (1 / HW) Σ_p F_ip F_jp`.
///
/// Products are formed in `f64` and summed in sorted order, which makes the
/// result exactly invariant to any permutation of spatial positions.
pub fn gram_matrix<T: Real>(feature_map: &Tensor3<T>, layer: usize) -> Result<GramMatrix> {
    let (c, h, w) = feature_map.shape();
    if c == 0 || h * w == 0 {
        return Err(Error::invalid("gram matrix of an empty feature map"));
    }
    let positions = (h * w) as f64;
    let planes: Vec<Vec<f64>> = (0..c)
        .map(|i| feature_map.plane(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut values = vec![0.0; c * c];
    let mut products = vec![0.0; h * w];
    for i in 0..c {
        for j in i..c {
            for ((p, a), b) in products.iter_mut().zip(&planes[i]).zip(&planes[j]) {
                *p = a * b;
            }
            products.sort_unstable_by(f64::total_cmp);
            let g = products.iter().sum::<f64>() / positions;
            values[i * c + j] = g;
            values[j * c + i] = g;
        }
    }
    Ok(GramMatrix { layer, size: c, values })
}

/// Style vector of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub image_id: String,
    pub values: Vec<f64>,
}

impl StyleEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn style_embedding(
    model: &StyleModel,
    image: &Tensor3<f32>,
    image_id: impl Into<String>,
) -> Result<StyleEmbedding> {
    let maps = model.forward(image)?;
    let mut values = Vec::with_capacity(model.embedding_dim());
    for (map, &layer) in maps.iter().zip(model.selected()) {
        let mut block = gram_matrix(map, layer)?.upper_triangle();
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= DEGENERATE_NORM {
            block.iter_mut().for_each(|v| *v /= norm);
        } else {
            block.iter_mut().for_each(|v| *v = 0.0);
        }
        values.extend(block);
    }
    Ok(StyleEmbedding {
        image_id: image_id.into(),
        values,
    })
}
