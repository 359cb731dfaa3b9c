//! Point cloud ingestion: OFF meshes, surface sampling, normalization and
//! the packed dataset file.

mod dataset;
mod off;
mod sample;
pub mod synthetic;

pub use dataset::{ingest_modelnet, read_dataset, write_dataset, Dataset, Split, DATASET_MAGIC};
pub use off::{parse_off, write_off, Mesh};
pub use sample::{grid_quantize, jitter, normalize, sample_surface, subsample};

use crate::nn::{Real, Tensor};

/// Number of ModelNet40 classes.
pub const CLASSES: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub label: usize,
    pub source: String,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, label: usize) -> Self {
        PointCloud {
            points,
            label,
            source: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The cloud as a `3 × P` matrix, one column per point.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(3, self.points.len(), |r, c| T::lit(self.points[c][r] as f64))
    }

    /// The points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
            source: self.source.clone(),
        }
    }
}

/// Concatenates equally sized clouds into a `3 × (B·P)` batch.
pub fn batch_tensor<T: Real>(clouds: &[&PointCloud]) -> Tensor<T> {
    let p = clouds.first().map_or(0, |c| c.len());
    debug_assert!(clouds.iter().all(|c| c.len() == p));
    Tensor::from_fn(3, clouds.len() * p, |r, c| {
        T::lit(clouds[c / p].points[c % p][r] as f64)
    })
}
