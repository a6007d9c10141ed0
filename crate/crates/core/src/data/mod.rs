//! Embedding datasets: the `EMB1` container, pairing of two views, seeded
//! batching and a synthetic generator.

mod batch;
mod emb;
mod pair;
mod synth;

use std::collections::HashSet;

pub use batch::batches;
pub use emb::{read_embedding_bytes, read_embedding_file, write_embedding_bytes, write_embedding_file, EMB_MAGIC, EMB_VERSION};
pub use pair::{pair_datasets, PairedDataset};
pub use synth::{synth_dataset, SynthConfig, SyntheticData};

use crate::error::{dim_err, validation_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `A01 … Ann`.
pub fn default_class_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("A{i:02}")).collect()
}

/// Fixed-dimension embeddings with integer source labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub fm_name: String,
    pub class_names: Vec<String>,
    pub labels: Vec<u16>,
    /// Row-major `count × dim`.
    pub vectors: Vec<f32>,
    pub sample_ids: Option<Vec<String>>,
}

impl EmbeddingDataset {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > u32::MAX as usize {
            return Err(validation_err!("dimension {} out of range", self.dim));
        }
        if self.count() == 0 {
            return Err(validation_err!("dataset is empty"));
        }
        if self.vectors.len() != self.count() * self.dim {
            return Err(validation_err!(
                "{} values for {} rows of dimension {}",
                self.vectors.len(),
                self.count(),
                self.dim
            ));
        }
        if self.class_names.is_empty() || self.class_names.len() > u16::MAX as usize {
            return Err(validation_err!("class name list must hold 1..=65535 names"));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= self.class_names.len()) {
            return Err(validation_err!(
                "label {bad} out of range for {} classes",
                self.class_names.len()
            ));
        }
        if let Some(i) = self.vectors.iter().position(|v| !v.is_finite()) {
            return Err(validation_err!("non-finite value in row {}", i / self.dim));
        }
        if let Some(ids) = &self.sample_ids {
            if ids.len() != self.count() {
                return Err(validation_err!("{} sample ids for {} rows", ids.len(), self.count()));
            }
            let mut seen = HashSet::with_capacity(ids.len());
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(validation_err!("duplicate sample id {id:?}"));
                }
            }
        }
        Ok(())
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingDataset {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            vectors.extend_from_slice(self.row(i));
        }
        EmbeddingDataset {
            dim: self.dim,
            fm_name: self.fm_name.clone(),
            class_names: self.class_names.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            vectors,
            sample_ids: self
                .sample_ids
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect()),
        }
    }

    /// Rows `indices` upcast into a `[indices.len(), dim]` tensor.
    pub fn features<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        if indices.is_empty() {
            return Err(dim_err!("empty row selection"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![indices.len(), self.dim], data)
    }
}
