//! Synthetic latent-factor multi-view data.
//!
//! Sample `i` has class `i mod classes`. Its latent is
//! `signal * mu_class + e` with `e ~ N(0, I)` and `mu_class` a random unit
//! vector. Every view of the sample is computed from that one latent:
//! `x^m = map_m(z) + offset_m + noise * e_m` with fresh per-view noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{MultiViewDataset, ViewKind, ViewSpec};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMap {
    /// `x = z`; requires view dim == latent dim.
    Identity,
    /// `x = A z + 0.5 tanh(A z)` with a seeded Gaussian `A / sqrt(latent)`.
    #[default]
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub latent_dim: usize,
    pub classes: usize,
    pub view_dims: Vec<usize>,
    pub map: ViewMap,
    /// Std of the independent per-view noise.
    pub noise: f64,
    /// Distance scale of the class means from the origin.
    pub signal: f64,
    /// Constant added to every coordinate of view `m`; empty means zeros.
    pub view_offsets: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            latent_dim: 8,
            classes: 2,
            view_dims: vec![16, 16, 16],
            map: ViewMap::Nonlinear,
            noise: 0.5,
            signal: 3.0,
            view_offsets: Vec::new(),
            seed: 0,
        }
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Generate `n` samples. A pure function of `(spec, n)`; the seed lives in the spec.
/// Zero noise with coincident latents yields duplicate samples, which is allowed.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Result<MultiViewDataset> {
    if spec.classes == 0 || n < spec.classes {
        return Err(Error::invalid(format!(
            "need N >= classes, got N={n}, classes={}",
            spec.classes
        )));
    }
    if spec.view_dims.is_empty() || spec.latent_dim == 0 {
        return Err(Error::invalid(
            "synthetic spec needs at least one view and a latent dimension",
        ));
    }
    if !spec.view_offsets.is_empty() && spec.view_offsets.len() != spec.view_dims.len() {
        return Err(Error::invalid(
            "view_offsets must be empty or have one entry per view",
        ));
    }
    if spec.map == ViewMap::Identity && spec.view_dims.iter().any(|&d| d != spec.latent_dim) {
        return Err(Error::invalid(
            "identity maps need every view dim equal to latent_dim",
        ));
    }
    let k = spec.latent_dim;
    let mut rng = rng::stream(spec.seed, &[tag::SYNTH]);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v = normal_vec(&mut rng, k);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let maps: Vec<Vec<f64>> = spec
        .view_dims
        .iter()
        .map(|&d| {
            let s = 1.0 / (k as f64).sqrt();
            normal_vec(&mut rng, d * k)
                .into_iter()
                .map(|x| x * s)
                .collect()
        })
        .collect();

    let mut views: Vec<Vec<f64>> = spec
        .view_dims
        .iter()
        .map(|&d| Vec::with_capacity(n * d))
        .collect();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class as u32);
        let eps = normal_vec(&mut rng, k);
        let z: Vec<f64> = means[class]
            .iter()
            .zip(&eps)
            .map(|(m, e)| spec.signal * m + e)
            .collect();
        for (m, &d) in spec.view_dims.iter().enumerate() {
            let offset = spec.view_offsets.get(m).copied().unwrap_or(0.0);
            let noise = normal_vec(&mut rng, d);
            for r in 0..d {
                let base = match spec.map {
                    ViewMap::Identity => z[r],
                    ViewMap::Nonlinear => {
                        let a: f64 = maps[m][r * k..(r + 1) * k]
                            .iter()
                            .zip(&z)
                            .map(|(w, x)| w * x)
                            .sum();
                        a + 0.5 * a.tanh()
                    }
                };
                views[m].push(base + offset + spec.noise * noise[r]);
            }
        }
    }
    let specs = spec
        .view_dims
        .iter()
        .enumerate()
        .map(|(m, &dim)| ViewSpec {
            kind: ViewKind::Synthetic(m),
            dim,
            range: (f64::NEG_INFINITY, f64::INFINITY),
        })
        .collect();
    MultiViewDataset::new(specs, views, Some(labels))
}
