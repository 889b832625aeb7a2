//! PCA reduction of penultimate-layer features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numcore::{sym_eig, tns, DenseMatrix};

pub const DEFAULT_COMPONENTS: usize = 32;

/// Mean vector, orthonormal component columns (`d × m`) and their explained
/// variances (descending).
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    components: DenseMatrix,
    variances: Vec<f64>,
}

/// Fits PCA by eigen-decomposing the sample covariance (divisor `n − 1`).
/// The component count is `min(requested, n − 1, d)`.
pub fn pca_fit(rows: &[Vec<f64>], requested: usize) -> Result<PcaModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if requested == 0 {
        return Err(Error::invalid("PCA needs at least one component"));
    }
    let d = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        check_dim("PCA fit", "feature dimension", d, r.len())?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("PCA row {i}")));
        }
    }

    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DenseMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in rows {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        let data = cov.data_mut();
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut data[i * d + i..(i + 1) * d];
            for (dst, &cj) in row.iter_mut().zip(&centered[i..]) {
                *dst += ci * cj;
            }
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) * scale;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    let eig = sym_eig(&cov)?;
    let m = requested.min(n - 1).min(d);
    let mut components = DenseMatrix::zeros(d, m);
    for c in 0..m {
        for r in 0..d {
            components.set(r, c, eig.vectors.get(r, c));
        }
    }
    let variances = eig.values[..m].iter().map(|&v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        variances,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.variances.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &DenseMatrix {
        &self.components
    }

    pub fn explained_variances(&self) -> &[f64] {
        &self.variances
    }

    /// `z = Cᵀ (f − mean)`.
    pub fn transform(&self, feature: &[f64]) -> Result<Vec<f64>> {
        check_dim("PCA transform", "feature dimension", self.input_dim(), feature.len())?;
        let m = self.n_components();
        let mut z = vec![0.0; m];
        for (r, (f, mu)) in feature.iter().zip(&self.mean).enumerate() {
            let c = f - mu;
            let row = &self.components.data()[r * m..(r + 1) * m];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += w * c;
            }
        }
        Ok(z)
    }

    /// `C z + mean`.
    pub fn inverse_transform(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("PCA inverse", "component count", self.n_components(), z.len())?;
        Ok((0..self.input_dim())
            .map(|r| self.mean[r] + self.components.row(r).iter().zip(z).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    /// Copy with every parameter rounded to `f32`, i.e. exactly what
    /// [`PcaModel::save`] persists.
    pub fn quantized(&self) -> Self {
        let q = |v: &f64| *v as f32 as f64;
        Self {
            mean: self.mean.iter().map(q).collect(),
            components: DenseMatrix::from_vec(
                self.components.rows(),
                self.components.cols(),
                self.components.data().iter().map(q).collect(),
            )
            .expect("same shape"),
            variances: self.variances.iter().map(q).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        tns::write(&dir.join("mean.tns"), &[self.input_dim()], &f(&self.mean))?;
        tns::write(
            &dir.join("components.tns"),
            &[self.input_dim(), self.n_components()],
            &f(self.components.data()),
        )?;
        tns::write(&dir.join("variances.tns"), &[self.n_components()], &f(&self.variances))?;
        let meta = PcaMeta {
            input_dim: self.input_dim(),
            components: self.n_components(),
        };
        let path = dir.join("pca.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("pca.json");
        let meta: PcaMeta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let f = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
        let mean = f(tns::read_expect(&dir.join("mean.tns"), &[meta.input_dim])?);
        let comps = f(tns::read_expect(
            &dir.join("components.tns"),
            &[meta.input_dim, meta.components],
        )?);
        let variances = f(tns::read_expect(&dir.join("variances.tns"), &[meta.components])?);
        Ok(Self {
            mean,
            components: DenseMatrix::from_vec(meta.input_dim, meta.components, comps)?,
            variances,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PcaMeta {
    input_dim: usize,
    components: usize,
}
