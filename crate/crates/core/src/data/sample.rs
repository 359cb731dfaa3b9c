use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{Mesh, PointCloud};

/// Draws `points` samples uniformly over the mesh surface: triangles are
/// picked in proportion to their area, positions within a triangle via
/// square-root barycentric sampling. Deterministic in `seed`.
pub fn sample_surface(mesh: &Mesh, points: usize, seed: u64) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::format("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(points);
    for _ in 0..points {
        let target = rng.random::<f64>() * total;
        let t = cumulative
            .partition_point(|&c| c <= target)
            .min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
        let r1 = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        out.push([0, 1, 2].map(|k| (wa * a[k] + wb * b[k] + wc * c[k]) as f32));
    }
    Ok(PointCloud::new(out, 0))
}

/// Moves the centroid to the origin and scales the farthest point onto the
/// unit sphere.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len().max(1) as f64;
    let mut centroid = [0.0f64; 3];
    for p in &cloud.points {
        for k in 0..3 {
            centroid[k] += p[k] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [0, 1, 2].map(|k| p[k] as f64 - centroid[k]))
        .collect();
    let radius = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    PointCloud {
        points: centered
            .iter()
            .map(|p| p.map(|v| (v * scale) as f32))
            .collect(),
        label: cloud.label,
        source: cloud.source.clone(),
    }
}

/// Uniform sampling of `points` points without replacement.
pub fn subsample(cloud: &PointCloud, points: usize, seed: u64) -> Result<PointCloud> {
    if points > cloud.len() {
        return Err(Error::Config(format!(
            "cannot subsample {points} points from a cloud of {}",
            cloud.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, cloud.len(), points).into_vec();
    Ok(cloud.select(&picked))
}

/// Snaps coordinates to the grid `round(x·S) / S` and drops duplicates,
/// keeping first occurrences in order.
pub fn grid_quantize(cloud: &PointCloud, scale: u32) -> Result<PointCloud> {
    if scale == 0 {
        return Err(Error::Config("input scaling S must be at least 1".into()));
    }
    let s = scale as f64;
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    for p in &cloud.points {
        let cell = p.map(|v| (v as f64 * s).round() as i64);
        if seen.insert(cell) {
            points.push(cell.map(|c| (c as f64 / s) as f32));
        }
    }
    Ok(PointCloud {
        points,
        label: cloud.label,
        source: cloud.source.clone(),
    })
}

/// Gaussian coordinate jitter, for optional training-time augmentation.
pub fn jitter<R: Rng + ?Sized>(cloud: &PointCloud, sigma: f32, rng: &mut R) -> PointCloud {
    let normal = Normal::new(0.0f32, sigma).expect("sigma must be finite and nonnegative");
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| p.map(|v| v + normal.sample(rng)))
            .collect(),
        label: cloud.label,
        source: cloud.source.clone(),
    }
}
