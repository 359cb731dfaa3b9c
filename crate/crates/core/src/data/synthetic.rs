//! Procedural stand-in for ModelNet40.
//!
//! Each class is a sphere deformed by a class-specific combination of
//! low-order polynomial bumps and an anisotropic scale; instances perturb
//! the class parameters. Useful for smoke runs and tests where the real
//! dataset is not available.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

use super::{normalize, sample_surface, write_off, Dataset, Mesh, PointCloud};

const BASIS: usize = 12;
const RINGS: usize = 12;
const SEGMENTS: usize = 24;

fn basis(d: [f64; 3]) -> [f64; BASIS] {
    let [x, y, z] = d;
    [
        x,
        y,
        z,
        x * x - y * y,
        z * z - 1.0 / 3.0,
        x * y,
        y * z,
        z * x,
        x * x * x,
        y * y * y,
        z * z * z,
        x * y * z,
    ]
}

#[derive(Debug, Clone)]
struct ShapeParams {
    coeffs: [f64; BASIS],
    scale: [f64; 3],
    twist: f64,
}

fn class_params(class: usize, seed: u64) -> ShapeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1)));
    ShapeParams {
        coeffs: std::array::from_fn(|_| rng.random_range(-0.6..0.6)),
        scale: std::array::from_fn(|_| rng.random_range(0.5..1.5)),
        twist: 0.0,
    }
}

fn instance_params<R: Rng>(base: &ShapeParams, rng: &mut R) -> ShapeParams {
    let n = Normal::new(0.0, 0.08).unwrap();
    ShapeParams {
        coeffs: base.coeffs.map(|c| c + n.sample(rng)),
        scale: base.scale.map(|s| s * (1.0 + 0.5 * n.sample(rng))),
        twist: rng.random_range(-0.25..0.25),
    }
}

fn mesh_from(params: &ShapeParams) -> Mesh {
    let mut vertices = Vec::with_capacity(2 + RINGS * SEGMENTS);
    let mut push = |d: [f64; 3]| {
        let b = basis(d);
        let r = (1.0 + b.iter().zip(&params.coeffs).map(|(a, c)| a * c).sum::<f64>()).max(0.15);
        let p = [0, 1, 2].map(|k| d[k] * r * params.scale[k]);
        let (s, c) = params.twist.sin_cos();
        vertices.push([c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]);
    };
    push([0.0, 0.0, 1.0]);
    for ring in 1..=RINGS {
        let theta = std::f64::consts::PI * ring as f64 / (RINGS + 1) as f64;
        for seg in 0..SEGMENTS {
            let phi = 2.0 * std::f64::consts::PI * seg as f64 / SEGMENTS as f64;
            push([theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]);
        }
    }
    push([0.0, 0.0, -1.0]);

    let at = |ring: usize, seg: usize| 1 + (ring - 1) * SEGMENTS + seg % SEGMENTS;
    let south = vertices.len() - 1;
    let mut triangles = Vec::new();
    for seg in 0..SEGMENTS {
        triangles.push([0, at(1, seg), at(1, seg + 1)]);
        triangles.push([south, at(RINGS, seg + 1), at(RINGS, seg)]);
    }
    for ring in 1..RINGS {
        for seg in 0..SEGMENTS {
            triangles.push([at(ring, seg), at(ring + 1, seg), at(ring + 1, seg + 1)]);
            triangles.push([at(ring, seg), at(ring + 1, seg + 1), at(ring, seg + 1)]);
        }
    }
    Mesh {
        vertices,
        triangles,
    }
}

/// Mesh of instance `instance` of class `class`.
pub fn instance_mesh(class: usize, instance: u64, seed: u64) -> Mesh {
    let base = class_params(class, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(instance.wrapping_mul(0x2545_f491_4f6c_dd1d)) ^ class as u64);
    mesh_from(&instance_params(&base, &mut rng))
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("shape{c:02}")).collect()
}

/// Balanced synthetic dataset of normalized clouds.
pub fn generate(classes: usize, train_per_class: usize, test_per_class: usize, points: usize, seed: u64) -> Dataset {
    let make = |offset: u64, per_class: usize| -> Vec<PointCloud> {
        let mut out = Vec::with_capacity(classes * per_class);
        for i in 0..per_class {
            for c in 0..classes {
                let instance = offset + i as u64;
                let mesh = instance_mesh(c, instance, seed);
                let cloud = sample_surface(&mesh, points, seed ^ (instance << 8) ^ c as u64)
                    .expect("synthetic meshes have positive area");
                let mut cloud = normalize(&cloud);
                cloud.label = c;
                cloud.source = format!("shape{c:02}/{instance}");
                out.push(cloud);
            }
        }
        out
    };
    Dataset {
        points,
        classes: class_names(classes),
        train: make(0, train_per_class),
        test: make(1 << 32, test_per_class),
    }
}

/// Writes a ModelNet-style directory tree of OFF files.
pub fn write_tree(root: &Path, classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<()> {
    for (c, name) in class_names(classes).iter().enumerate() {
        for (split, offset, n) in [("train", 0u64, train_per_class), ("test", 1 << 32, test_per_class)] {
            let dir = root.join(name).join(split);
            fs::create_dir_all(&dir)?;
            for i in 0..n {
                let mesh = instance_mesh(c, offset + i as u64, seed);
                fs::write(dir.join(format!("{name}_{:04}.off", i + 1)), write_off(&mesh))?;
            }
        }
    }
    Ok(())
}
