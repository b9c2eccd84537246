//! Compress view evidence into a small set of weighted prototypes.
//!
//! Attention is rescaled against its maximum, thresholded into a support
//! set (intersected with the optional mask, tiny 4-connected islands
//! dropped), the support is clustered with attention-weighted k-means, and
//! each cluster becomes one prototype: attention-weighted centroid,
//! normalized semantic and appearance descriptors, and a mass.
//!
//! Pixels are `(y, x)` pairs indexing rasters row-major; geometric math
//! uses `(x, y)` positions to match camera projections.

use nalgebra::Vector2;
use ndarray::{Array1, Array2, Array3};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{MassMode, PrototypeConfig};
use crate::error::PipelineError;
use crate::evidence::EditedViewEvidence;
use crate::fsio;
use crate::seeding::stage_rng;

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("attention raster is identically zero")]
    AllZeroAttention,
    #[error("no support pixels survive thresholding")]
    EmptySupport,
    #[error("support has {got} pixels but {needed} prototypes were requested")]
    TooFewPixels { needed: usize, got: usize },
    #[error("prototype count must be at least 1")]
    ZeroPrototypes,
    #[error("region {0} carries zero attention mass")]
    ZeroRegionAttention(usize),
    #[error("raster shape {actual:?} does not match attention shape {expected:?}")]
    RasterShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("clustering did not produce {expected} non-empty regions (got {got})")]
    DegeneratePartition { expected: usize, got: usize },
}

/// Support pixels grouped into clusters.
///
/// Every region is non-empty; `centroids` are attention-weighted means in
/// `(x, y)` coordinates, parallel to `regions`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPartition {
    pub regions: Vec<Vec<(u32, u32)>>,
    pub centroids: Vec<Vector2<f64>>,
}

impl SupportPartition {
    pub fn support_len(&self) -> usize {
        self.regions.iter().map(Vec::len).sum()
    }
}

/// One compressed unit of view evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    /// Attention-weighted pixel centroid, `(x, y)`.
    pub position: Vector2<f64>,
    /// Normalized semantic descriptor.
    pub semantic: Array1<f64>,
    /// Normalized appearance descriptor.
    pub appearance: Array1<f64>,
    pub mass: f64,
    pub pixel_count: usize,
}

/// Prototype extraction output for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrototypes {
    pub attention_norm: Array2<f64>,
    pub partition: SupportPartition,
    pub prototypes: Vec<Prototype>,
}

fn xi(p: (u32, u32)) -> Vector2<f64> {
    Vector2::new(f64::from(p.1), f64::from(p.0))
}

/// Rescale attention to `a / (max + eps)`.
pub fn normalize_attention(
    attention: &Array2<f64>,
    eps: f64,
) -> Result<Array2<f64>, PrototypeError> {
    let max = attention.iter().fold(0.0f64, |m, &v| m.max(v));
    if max <= 0.0 {
        return Err(PrototypeError::AllZeroAttention);
    }
    Ok(attention.mapv(|v| v / (max + eps)))
}

/// Threshold normalized attention into support pixels.
///
/// Keeps pixels with value at or above `threshold` that pass the mask, then
/// drops 4-connected components smaller than `min_component` pixels. The
/// result is sorted row-major.
pub fn extract_support(
    attention_norm: &Array2<f64>,
    threshold: f64,
    mask: Option<&Array2<bool>>,
    min_component: usize,
) -> Result<Vec<(u32, u32)>, PrototypeError> {
    if let Some(m) = mask {
        if m.shape() != attention_norm.shape() {
            return Err(PrototypeError::RasterShape {
                expected: attention_norm.shape().to_vec(),
                actual: m.shape().to_vec(),
            });
        }
    }
    let (h, w) = attention_norm.dim();
    let mut kept = Array2::<bool>::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            kept[[y, x]] = attention_norm[[y, x]] >= threshold && mask.is_none_or(|m| m[[y, x]]);
        }
    }

    let mut visited = Array2::<bool>::from_elem((h, w), false);
    let mut support = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !kept[[y, x]] || visited[[y, x]] {
                continue;
            }
            let mut component = Vec::new();
            visited[[y, x]] = true;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                component.push((cy as u32, cx as u32));
                let mut push = |ny: usize, nx: usize| {
                    if kept[[ny, nx]] && !visited[[ny, nx]] {
                        visited[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx);
                }
                if cy + 1 < h {
                    push(cy + 1, cx);
                }
                if cx > 0 {
                    push(cy, cx - 1);
                }
                if cx + 1 < w {
                    push(cy, cx + 1);
                }
            }
            if component.len() >= min_component {
                support.extend(component);
            }
        }
    }
    if support.is_empty() {
        return Err(PrototypeError::EmptySupport);
    }
    support.sort_unstable();
    Ok(support)
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = Some(i);
            if u < w {
                return Some(i);
            }
            u -= w;
        }
    }
    last_positive
}

/// Cluster support pixels with attention-weighted k-means.
///
/// Seeding is weighted k-means++; Lloyd iterations assign each pixel to the
/// nearest centroid (ties to the lower index) and re-seed any emptied
/// cluster at the pixel with the largest weighted squared distance to its
/// centroid. Deterministic given `seed`.
pub fn cluster_support(
    support: &[(u32, u32)],
    attention_norm: &Array2<f64>,
    num_clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<SupportPartition, PrototypeError> {
    if num_clusters == 0 {
        return Err(PrototypeError::ZeroPrototypes);
    }
    if support.len() < num_clusters {
        return Err(PrototypeError::TooFewPixels {
            needed: num_clusters,
            got: support.len(),
        });
    }
    let points: Vec<Vector2<f64>> = support.iter().map(|&p| xi(p)).collect();
    let weights: Vec<f64> = support
        .iter()
        .map(|&(y, x)| attention_norm[[y as usize, x as usize]])
        .collect();
    let mut rng = stage_rng(seed, "kmeans-seeding", 0);

    let mut centroids: Vec<Vector2<f64>> = Vec::with_capacity(num_clusters);
    let first = weighted_pick(&mut rng, &weights).ok_or(PrototypeError::AllZeroAttention)?;
    centroids.push(points[first]);
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| (p - centroids[0]).norm_squared())
        .collect();
    while centroids.len() < num_clusters {
        let scores: Vec<f64> = weights.iter().zip(&dist2).map(|(w, d)| w * d).collect();
        let next = match weighted_pick(&mut rng, &scores) {
            Some(i) => i,
            // All remaining mass already sits on centroids; take the first
            // point that is not one yet.
            None => (0..points.len())
                .find(|&i| {
                    centroids
                        .iter()
                        .all(|c| (points[i] - c).norm_squared() > 0.0)
                })
                .ok_or(PrototypeError::TooFewPixels {
                    needed: num_clusters,
                    got: centroids.len(),
                })?,
        };
        let c = points[next];
        centroids.push(c);
        for (d, p) in dist2.iter_mut().zip(&points) {
            *d = d.min((p - c).norm_squared());
        }
    }

    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = (p - centroids[0]).norm_squared();
            for (m, c) in centroids.iter().enumerate().skip(1) {
                let d = (p - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = m;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }

        let mut counts = vec![0usize; num_clusters];
        for &a in &assignment {
            counts[a] += 1;
        }
        for m in 0..num_clusters {
            if counts[m] > 0 {
                continue;
            }
            // Re-seed at the highest-residual pixel from a shareable cluster.
            let donor = (0..points.len())
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| {
                    let ra = weights[a] * (points[a] - centroids[assignment[a]]).norm_squared();
                    let rb = weights[b] * (points[b] - centroids[assignment[b]]).norm_squared();
                    ra.total_cmp(&rb).then(b.cmp(&a))
                })
                .ok_or(PrototypeError::DegeneratePartition {
                    expected: num_clusters,
                    got: num_clusters - 1,
                })?;
            counts[assignment[donor]] -= 1;
            assignment[donor] = m;
            counts[m] = 1;
            centroids[m] = points[donor];
            changed = true;
        }

        let mut sums = vec![Vector2::<f64>::zeros(); num_clusters];
        let mut mass = vec![0.0f64; num_clusters];
        for (i, p) in points.iter().enumerate() {
            sums[assignment[i]] += weights[i] * p;
            mass[assignment[i]] += weights[i];
        }
        for m in 0..num_clusters {
            if mass[m] > 0.0 {
                centroids[m] = sums[m] / mass[m];
            }
        }

        if !changed {
            break;
        }
    }

    let mut regions = vec![Vec::new(); num_clusters];
    for (i, &p) in support.iter().enumerate() {
        regions[assignment[i]].push(p);
    }
    let got = regions.iter().filter(|r| !r.is_empty()).count();
    if got != num_clusters {
        return Err(PrototypeError::DegeneratePartition {
            expected: num_clusters,
            got,
        });
    }
    Ok(SupportPartition { regions, centroids })
}

/// Attention-weighted squared scatter of a partition around the weighted
/// mean of each region. This is the quantity k-means descends.
pub fn clustering_objective(regions: &[Vec<(u32, u32)>], attention_norm: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for region in regions {
        if region.is_empty() {
            continue;
        }
        let mut mean = Vector2::<f64>::zeros();
        let mut mass = 0.0;
        for &p in region {
            let w = attention_norm[[p.0 as usize, p.1 as usize]];
            mean += w * xi(p);
            mass += w;
        }
        if mass <= 0.0 {
            continue;
        }
        mean /= mass;
        for &p in region {
            let w = attention_norm[[p.0 as usize, p.1 as usize]];
            total += w * (xi(p) - mean).norm_squared();
        }
    }
    total
}

fn pooled_descriptor(
    region: &[(u32, u32)],
    attention_norm: &Array2<f64>,
    raster: &Array3<f64>,
    eps: f64,
) -> (Array1<f64>, f64) {
    let channels = raster.shape()[2];
    let mut acc = Array1::<f64>::zeros(channels);
    let mut mass = 0.0;
    for &(y, x) in region {
        let w = attention_norm[[y as usize, x as usize]];
        mass += w;
        for c in 0..channels {
            acc[c] += w * raster[[y as usize, x as usize, c]];
        }
    }
    if mass > 0.0 {
        acc.mapv_inplace(|v| v / mass);
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    (acc.mapv(|v| v / (norm + eps)), mass)
}

/// Turn a support partition into prototypes.
pub fn build_prototypes(
    partition: &SupportPartition,
    attention_norm: &Array2<f64>,
    semantic: &Array3<f64>,
    appearance: &Array3<f64>,
    cfg: &PrototypeConfig,
) -> Result<Vec<Prototype>, PrototypeError> {
    for raster in [semantic, appearance] {
        if raster.shape()[..2] != attention_norm.shape()[..2] {
            return Err(PrototypeError::RasterShape {
                expected: attention_norm.shape().to_vec(),
                actual: raster.shape().to_vec(),
            });
        }
    }
    let region_mass = |region: &[(u32, u32)]| -> f64 {
        region
            .iter()
            .map(|&(y, x)| attention_norm[[y as usize, x as usize]])
            .sum()
    };
    let total_mass: f64 = partition.regions.iter().map(|r| region_mass(r)).sum();
    if total_mass <= 0.0 {
        return Err(PrototypeError::AllZeroAttention);
    }

    let mut prototypes = Vec::with_capacity(partition.regions.len());
    for (m, region) in partition.regions.iter().enumerate() {
        let mass = region_mass(region);
        if mass <= 0.0 {
            return Err(PrototypeError::ZeroRegionAttention(m));
        }
        let mut position = Vector2::<f64>::zeros();
        for &p in region {
            position += attention_norm[[p.0 as usize, p.1 as usize]] * xi(p);
        }
        position /= mass;
        let (sem, _) = pooled_descriptor(region, attention_norm, semantic, cfg.eps_semantic);
        let (app, _) = pooled_descriptor(region, attention_norm, appearance, cfg.eps_appearance);
        let scaled_mass = match cfg.mass_mode {
            MassMode::Normalized => mass / total_mass,
            MassMode::Raw => mass,
        };
        prototypes.push(Prototype {
            position,
            semantic: sem,
            appearance: app,
            mass: scaled_mass,
            pixel_count: region.len(),
        });
    }
    Ok(prototypes)
}

/// Full extraction for one view: normalize, threshold, cluster, build.
pub fn extract_prototypes(
    evidence: &EditedViewEvidence,
    cfg: &PrototypeConfig,
    seed: u64,
) -> Result<ViewPrototypes, PipelineError> {
    evidence.validate()?;
    let attention_norm = normalize_attention(&evidence.attention, cfg.eps_attention)?;
    let support = extract_support(
        &attention_norm,
        cfg.attention_threshold,
        evidence.mask.as_ref(),
        cfg.min_component,
    )?;
    let partition = cluster_support(
        &support,
        &attention_norm,
        cfg.num_prototypes,
        cfg.max_lloyd_iters,
        seed,
    )?;
    let prototypes = build_prototypes(
        &partition,
        &attention_norm,
        &evidence.semantic_features,
        &evidence.appearance_features,
        cfg,
    )?;
    Ok(ViewPrototypes {
        attention_norm,
        partition,
        prototypes,
    })
}

/// Serialized form of a [`Prototype`]; position is `(x, y)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub position: [f64; 2],
    pub semantic: Vec<f64>,
    pub appearance: Vec<f64>,
    pub mass: f64,
    pub pixel_count: usize,
}

impl From<&Prototype> for PrototypeRecord {
    fn from(p: &Prototype) -> Self {
        PrototypeRecord {
            position: [p.position.x, p.position.y],
            semantic: p.semantic.to_vec(),
            appearance: p.appearance.to_vec(),
            mass: p.mass,
            pixel_count: p.pixel_count,
        }
    }
}

impl From<PrototypeRecord> for Prototype {
    fn from(r: PrototypeRecord) -> Self {
        Prototype {
            position: Vector2::new(r.position[0], r.position[1]),
            semantic: Array1::from_vec(r.semantic),
            appearance: Array1::from_vec(r.appearance),
            mass: r.mass,
            pixel_count: r.pixel_count,
        }
    }
}

pub fn save_prototypes(
    path: &std::path::Path,
    prototypes: &[Prototype],
) -> Result<(), PipelineError> {
    let records: Vec<PrototypeRecord> = prototypes.iter().map(PrototypeRecord::from).collect();
    fsio::write_json_atomic(path, &records)
}

pub fn load_prototypes(path: &std::path::Path) -> Result<Vec<Prototype>, PipelineError> {
    let records: Vec<PrototypeRecord> = fsio::read_json(path)?;
    Ok(records.into_iter().map(Prototype::from).collect())
}
