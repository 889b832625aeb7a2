use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{rng_derive, SeededRng, Tensor3};

/// Fraction of the image covered by fat blobs at latent 4.
pub const MAX_BLOB_COVERAGE: f64 = 0.25;
const BLOB_INTENSITY: f64 = 0.4;
const ECHO_DECAY: f64 = 0.04;

/// Scanner appearance of one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub site_id: String,
    pub vendor: usize,
    pub gain: f64,
    pub bias_amplitude: f64,
    /// Direction of the linear bias-field gradient, in radians.
    pub bias_angle: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub gamma: f64,
}

impl SiteProfile {
    /// Identity transform except for the given noise level.
    pub fn neutral(site_id: impl Into<String>, noise_sigma: f64) -> Self {
        Self {
            site_id: site_id.into(),
            vendor: 0,
            gain: 1.0,
            bias_amplitude: 0.0,
            bias_angle: 0.0,
            noise_sigma,
            blur_sigma: 0.0,
            gamma: 1.0,
        }
    }
}

/// Smooth field in roughly `[-1, 1]`: a coarse grid of normal draws,
/// bilinearly upsampled.
fn smooth_field(rng: &mut SeededRng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.normal().clamp(-2.5, 2.5) / 2.5).collect();
    let scale = cells as f64 / (size.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 * scale;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 * scale;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Binary blob mask covering at least `fraction` of the pixels.
fn blob_mask(rng: &mut SeededRng, size: usize, fraction: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let target = (fraction * (size * size) as f64).ceil() as usize;
    let mut covered = 0;
    while covered < target {
        let cy = rng.uniform(0.0, size as f64);
        let cx = rng.uniform(0.0, size as f64);
        let r = rng.uniform(1.5, 4.5);
        let lo_y = (cy - r).floor().max(0.0) as usize;
        let hi_y = ((cy + r).ceil() as usize).min(size);
        let lo_x = (cx - r).floor().max(0.0) as usize;
        let hi_x = ((cx + r).ceil() as usize).min(size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let m = &mut mask[y * size + x];
                if !*m && dy * dy + dx * dx <= r * r {
                    *m = true;
                    covered += 1;
                }
            }
        }
    }
    mask
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicated borders.
fn blur(plane: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |i: i64| i.clamp(0, size as i64 - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * plane[y * size + clamp(x as i64 + j as i64 - r)])
                .sum();
        }
    }
    for y in 0..size {
        for x in 0..size {
            plane[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clamp(y as i64 + j as i64 - r) * size + x])
                .sum();
        }
    }
}

/// Area fraction of the image covered by blobs at latent `s`.
pub fn blob_fraction(latent: f64) -> f64 {
    MAX_BLOB_COVERAGE * latent / 4.0
}

/// Tissue image for a latent steatosis value before any site transform:
/// a smooth base field (decaying slowly over echoes) plus fat blobs whose
/// per-echo intensity alternates with the latent.
pub fn render_tissue(latent: f64, echoes: usize, size: usize, seed: u64) -> Result<(Tensor3<f64>, Vec<bool>)> {
    if !(0.0..=4.0).contains(&latent) {
        return Err(Error::invalid(format!("latent steatosis {latent} outside [0, 4]")));
    }
    if echoes == 0 || size < 2 {
        return Err(Error::invalid("image needs at least one echo and two pixels per side"));
    }
    let field = smooth_field(&mut rng_derive(seed, 0), size, 4);
    let mask = blob_mask(&mut rng_derive(seed, 1), size, blob_fraction(latent));
    let mut img = Tensor3::zeros(echoes, size, size);
    for e in 0..echoes {
        let decay = 1.0 - ECHO_DECAY * e as f64;
        let blob = BLOB_INTENSITY * (1.0 + 0.5 * (latent / 4.0) * (std::f64::consts::PI * e as f64).cos());
        for (i, v) in img.plane_mut(e).iter_mut().enumerate() {
            *v = decay * (0.5 + 0.1 * field[i]) + if mask[i] { blob } else { 0.0 };
        }
    }
    Ok((img, mask))
}

/// Renders one visit: tissue image, then the site's gamma, gain, bias field,
/// blur and additive noise, in that order.
pub fn render_image(latent: f64, site: &SiteProfile, echoes: usize, size: usize, seed: u64) -> Result<Tensor3<f32>> {
    let (mut img, _) = render_tissue(latent, echoes, size, seed)?;
    let mut noise = rng_derive(seed, 2);
    let (sin, cos) = site.bias_angle.sin_cos();
    let coord = |i: usize| 2.0 * i as f64 / (size - 1) as f64 - 1.0;
    let bias: Vec<f64> = (0..size * size)
        .map(|i| 1.0 + site.bias_amplitude * (coord(i % size) * cos + coord(i / size) * sin) / std::f64::consts::SQRT_2)
        .collect();
    for e in 0..echoes {
        let plane = img.plane_mut(e);
        for (v, b) in plane.iter_mut().zip(&bias) {
            *v = v.max(0.0).powf(site.gamma) * site.gain * b;
        }
        blur(plane, size, site.blur_sigma);
        for v in plane.iter_mut() {
            *v += site.noise_sigma * noise.normal();
        }
    }
    Ok(img.cast())
}
