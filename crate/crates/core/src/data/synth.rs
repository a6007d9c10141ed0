//! Gaussian-cluster surrogate for foundation-model embeddings.
//!
//! Class `c` is centred at `spread · e_c` with isotropic noise of standard
//! deviation `1/√2`, so the noise difference between any two samples has unit
//! variance per axis. The second view applies a fixed random rotation to the
//! class mean plus noise that shares half its variance with the first view's
//! noise, which makes the two views correlated yet complementary.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{default_class_names, EmbeddingDataset, PairedDataset};
use crate::error::{usage_err, Result};

pub const NOISE_STD: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(dim: usize, per_class: usize, spread: f64, seed: u64) -> Self {
        Self {
            n_classes: 8,
            dim,
            per_class,
            spread,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: PairedDataset,
    pub test: PairedDataset,
}

/// Random orthogonal matrix (row-major) via Gram-Schmidt on a Gaussian draw.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q: Vec<f64> = (0..dim * dim).map(|_| StandardNormal.sample(rng)).collect();
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = (0..dim).map(|k| q[i * dim + k] * q[j * dim + k]).sum();
            for k in 0..dim {
                q[i * dim + k] -= dot * q[j * dim + k];
            }
        }
        let norm = (0..dim).map(|k| q[i * dim + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..dim {
            q[i * dim + k] /= norm;
        }
    }
    q
}

/// Generates two paired views, split 80/20 per class into train and test.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SyntheticData> {
    let SynthConfig {
        n_classes,
        dim,
        per_class,
        spread,
        seed,
    } = *cfg;
    if per_class < 5 {
        return Err(usage_err!("per-class count must be at least 5, got {per_class}"));
    }
    if n_classes < 2 || n_classes > u16::MAX as usize {
        return Err(usage_err!("class count {n_classes} out of range"));
    }
    if dim < n_classes {
        return Err(usage_err!("dimension {dim} smaller than class count {n_classes}"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(usage_err!("spread must be finite and non-negative, got {spread}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = random_rotation(dim, &mut rng);
    let mix = std::f64::consts::FRAC_1_SQRT_2;

    let total = n_classes * per_class;
    let mut va = Vec::with_capacity(total * dim);
    let mut vb = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    let mut latent = vec![0.0f64; dim];
    for c in 0..n_classes {
        for k in 0..per_class {
            for (i, slot) in latent.iter_mut().enumerate() {
                let mean = if i == c { spread } else { 0.0 };
                let za: f64 = StandardNormal.sample(&mut rng);
                let zf: f64 = StandardNormal.sample(&mut rng);
                let noise_a = NOISE_STD * za;
                let fresh = NOISE_STD * zf;
                va.push((mean + noise_a) as f32);
                *slot = mean + mix * (noise_a + fresh);
            }
            for row in rotation.chunks(dim) {
                let v: f64 = row.iter().zip(&latent).map(|(r, x)| r * x).sum();
                vb.push(v as f32);
            }
            labels.push(c as u16);
            ids.push(format!("syn-{c:02}-{k:05}"));
        }
    }

    let n_train = per_class * 4 / 5;
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for c in 0..n_classes {
        let mut rows: Vec<usize> = (c * per_class..(c + 1) * per_class).collect();
        rows.shuffle(&mut rng);
        let (tr, te) = rows.split_at(n_train);
        train_rows.extend_from_slice(tr);
        test_rows.extend_from_slice(te);
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let view = |name: &str, vectors: Vec<f32>| EmbeddingDataset {
        dim,
        fm_name: name.to_string(),
        class_names: default_class_names(n_classes),
        labels: labels.clone(),
        vectors,
        sample_ids: Some(ids.clone()),
    };
    let a = view("synthetic-a", va);
    let b = view("synthetic-b", vb);
    Ok(SyntheticData {
        train: PairedDataset {
            a: a.subset(&train_rows),
            b: b.subset(&train_rows),
        },
        test: PairedDataset {
            a: a.subset(&test_rows),
            b: b.subset(&test_rows),
        },
    })
}
