//! Gaussian scene primitives, pinhole cameras, and a CPU splat renderer.
//!
//! Rendering follows the usual splatting recipe: project each Gaussian's
//! mean, push its covariance through the projection Jacobian to get a 2D
//! footprint, then alpha-composite footprints front to back. Besides the
//! image, [`render_view`] reports which Gaussians are visible, their
//! composited per-pixel footprint weights, and a scalar visibility per
//! Gaussian; the transport stage is built on those three outputs.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RenderConfig;
use crate::error::PipelineError;
use crate::fsio;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("gaussian {id}: covariance is not symmetric positive-definite")]
    InvalidCovariance { id: u64 },
    #[error("gaussian {id}: opacity {value} outside the open interval (0, 1)")]
    InvalidOpacity { id: u64, value: f64 },
    #[error("gaussian {id}: color component {value} outside [0, 1]")]
    InvalidColor { id: u64, value: f64 },
    #[error("gaussian {id}: empty semantic latent")]
    EmptyLatent { id: u64 },
    #[error("gaussian {id}: non-finite field value")]
    NonFinite { id: u64 },
    #[error("duplicate gaussian id {0}")]
    DuplicateId(u64),
    #[error("semantic latent dimension mismatch: {0} vs {1}")]
    MixedLatentDims(usize, usize),
    #[error("scene contains no gaussians")]
    EmptyScene,
    #[error("camera rotation is not orthonormal (deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },
    #[error("camera focal length must be positive, got ({0}, {1})")]
    InvalidFocal(f64, f64),
    #[error("invalid image size {width}x{height}")]
    InvalidImageSize { width: u32, height: u32 },
}

/// Anisotropic 3D Gaussian with appearance and a semantic latent.
///
/// `original_color` freezes the color the Gaussian had before any edit;
/// the leakage penalty measures drift against it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub id: u64,
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub semantic_latent: Array1<f64>,
    pub original_color: Vector3<f64>,
}

impl Gaussian {
    pub fn validate(&self) -> Result<(), SceneError> {
        let id = self.id;
        let finite = self.center.iter().all(|v| v.is_finite())
            && self.covariance.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.original_color.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.semantic_latent.iter().all(|v| v.is_finite());
        if !finite {
            return Err(SceneError::NonFinite { id });
        }
        if self.semantic_latent.is_empty() {
            return Err(SceneError::EmptyLatent { id });
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(SceneError::InvalidOpacity {
                id,
                value: self.opacity,
            });
        }
        for &c in self.color.iter().chain(self.original_color.iter()) {
            if !(0.0..=1.0).contains(&c) {
                return Err(SceneError::InvalidColor { id, value: c });
            }
        }
        let scale = 1.0 + self.covariance.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let asym = (self.covariance - self.covariance.transpose())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if asym > 1e-9 * scale || nalgebra::Cholesky::new(self.covariance).is_none() {
            return Err(SceneError::InvalidCovariance { id });
        }
        Ok(())
    }
}

pub fn validate_scene(scene: &[Gaussian]) -> Result<(), SceneError> {
    if scene.is_empty() {
        return Err(SceneError::EmptyScene);
    }
    let mut ids = BTreeSet::new();
    let dim = scene[0].semantic_latent.len();
    for g in scene {
        g.validate()?;
        if !ids.insert(g.id) {
            return Err(SceneError::DuplicateId(g.id));
        }
        if g.semantic_latent.len() != dim {
            return Err(SceneError::MixedLatentDims(dim, g.semantic_latent.len()));
        }
    }
    Ok(())
}

/// Pinhole camera: world-to-camera rotation and translation plus intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: Vector2<f64>,
    pub principal_point: Vector2<f64>,
    pub width: u32,
    pub height: u32,
}

/// Returned when a point sits at or behind the camera plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("point is behind the camera")]
pub struct BehindCamera;

impl Camera {
    pub fn validate(&self) -> Result<(), SceneError> {
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max((self.rotation.determinant() - 1.0).abs());
        if !dev.is_finite() || dev > 1e-9 {
            return Err(SceneError::InvalidRotation { deviation: dev });
        }
        if !(self.focal.x > 0.0 && self.focal.y > 0.0) {
            return Err(SceneError::InvalidFocal(self.focal.x, self.focal.y));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidImageSize {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Camera at `position` looking toward `target`.
    ///
    /// Rows of the rotation are `[right, down, forward]` with
    /// `right = up x forward` and `down = forward x right`, which keeps the
    /// matrix a proper rotation; the image row axis therefore runs along
    /// world `-up`ward motion projecting to increasing row index.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: Vector2<f64>,
        principal_point: Vector2<f64>,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - position).normalize();
        let right = up.cross(&forward).normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera {
            rotation,
            translation: -rotation * position,
            focal,
            principal_point,
            width,
            height,
        }
    }

    fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Project a world point to pixel coordinates `(x, y)`.
    pub fn project(
        &self,
        point: &Vector3<f64>,
        depth_epsilon: f64,
    ) -> Result<Vector2<f64>, BehindCamera> {
        let p = self.to_camera(point);
        if p.z <= depth_epsilon {
            return Err(BehindCamera);
        }
        Ok(Vector2::new(
            self.focal.x * p.x / p.z + self.principal_point.x,
            self.focal.y * p.y / p.z + self.principal_point.y,
        ))
    }
}

/// One pixel of a Gaussian's footprint in a view.
///
/// `weight` is the raw splat weight `alpha * G(p)`; `kappa` is the same
/// weight after front-to-back occlusion, which is what compositing and all
/// downstream pooling use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintPixel {
    pub y: u32,
    pub x: u32,
    pub weight: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Footprint {
    pub pixels: Vec<FootprintPixel>,
}

impl Footprint {
    pub fn weight_sum(&self) -> f64 {
        self.pixels.iter().map(|p| p.weight).sum()
    }

    pub fn kappa_sum(&self) -> f64 {
        self.pixels.iter().map(|p| p.kappa).sum()
    }
}

/// Result of rendering one view.
///
/// `visible`, `footprints` and `visibility` are parallel, sorted by
/// Gaussian id.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `(height, width, 3)` RGB image with values in `[0, 1]`.
    pub image: Array3<f64>,
    pub visible: Vec<u64>,
    pub footprints: Vec<Footprint>,
    /// Occluded fraction of each footprint: composited mass over raw mass.
    pub visibility: Vec<f64>,
}

impl RenderOutput {
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.visible.binary_search(&id).ok()
    }
}

struct ProjectedSplat {
    order: usize,
    id: u64,
    depth: f64,
    pixels: Vec<(u32, u32, f64)>,
    weight_sum: f64,
}

/// Kernel weight sum and per-pixel (x, y, weight) entries of one splat.
type SplatPixels = (f64, Vec<(u32, u32, f64)>);

fn splat_pixels(camera: &Camera, gaussian: &Gaussian, cfg: &RenderConfig) -> Option<SplatPixels> {
    let p = camera.to_camera(&gaussian.center);
    if p.z <= cfg.depth_epsilon {
        return None;
    }
    let (fx, fy) = (camera.focal.x, camera.focal.y);
    let z2 = p.z * p.z;
    let mean = Vector2::new(
        fx * p.x / p.z + camera.principal_point.x,
        fy * p.y / p.z + camera.principal_point.y,
    );
    let jac = Matrix2x3::new(fx / p.z, 0.0, -fx * p.x / z2, 0.0, fy / p.z, -fy * p.y / z2);
    let cov_cam = camera.rotation * gaussian.covariance * camera.rotation.transpose();
    let cov2: Matrix2<f64> = jac * cov_cam * jac.transpose();

    let trace = cov2.trace();
    let det = cov2.determinant();
    if det.is_nan() || det <= 1e-300 || !trace.is_finite() {
        return None;
    }
    let lam_max = 0.5 * (trace + (trace * trace - 4.0 * det).max(0.0).sqrt());
    let radius = cfg.cutoff_sigma * lam_max.sqrt();

    let x0 = (mean.x - radius).floor().max(0.0) as i64;
    let x1 = (mean.x + radius).ceil().min(f64::from(camera.width - 1)) as i64;
    let y0 = (mean.y - radius).floor().max(0.0) as i64;
    let y1 = (mean.y + radius).ceil().min(f64::from(camera.height - 1)) as i64;
    if x0 > x1 || y0 > y1 || mean.x + radius < 0.0 || mean.y + radius < 0.0 {
        return None;
    }

    let inv = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
    let mut pixels = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = Vector2::new(x as f64 - mean.x, y as f64 - mean.y);
            let q = d.dot(&(inv * d));
            let w = gaussian.opacity * (-0.5 * q).exp();
            if w > 0.0 {
                pixels.push((y as u32, x as u32, w));
            }
        }
    }
    if pixels.is_empty() {
        return None;
    }
    Some((p.z, pixels))
}

/// Render a view: RGB image plus per-Gaussian footprints and visibility.
pub fn render_view(
    scene: &[Gaussian],
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<RenderOutput, SceneError> {
    validate_scene(scene)?;
    camera.validate()?;

    let mut splats: Vec<ProjectedSplat> = Vec::new();
    for (order, g) in scene.iter().enumerate() {
        if let Some((depth, pixels)) = splat_pixels(camera, g, cfg) {
            let weight_sum: f64 = pixels.iter().map(|&(_, _, w)| w).sum();
            if weight_sum >= cfg.footprint_min {
                splats.push(ProjectedSplat {
                    order,
                    id: g.id,
                    depth,
                    pixels,
                    weight_sum,
                });
            }
        }
    }

    // Front to back; ties broken by id so compositing is deterministic.
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));

    let (h, w) = (camera.height as usize, camera.width as usize);
    let mut image = Array3::<f64>::zeros((h, w, 3));
    let mut transmittance = ndarray::Array2::<f64>::ones((h, w));
    let mut composited: Vec<(u64, Footprint, f64)> = Vec::with_capacity(splats.len());

    for splat in &splats {
        let color = scene[splat.order].color;
        let mut pixels = Vec::with_capacity(splat.pixels.len());
        let mut kappa_sum = 0.0;
        for &(y, x, weight) in &splat.pixels {
            let t = transmittance[[y as usize, x as usize]];
            let kappa = t * weight;
            for c in 0..3 {
                image[[y as usize, x as usize, c]] += kappa * color[c];
            }
            transmittance[[y as usize, x as usize]] = t * (1.0 - weight);
            kappa_sum += kappa;
            pixels.push(FootprintPixel {
                y,
                x,
                weight,
                kappa,
            });
        }
        let visibility = (kappa_sum / splat.weight_sum).clamp(0.0, 1.0);
        composited.push((splat.id, Footprint { pixels }, visibility));
    }

    composited.sort_by_key(|&(id, _, _)| id);
    let mut visible = Vec::with_capacity(composited.len());
    let mut footprints = Vec::with_capacity(composited.len());
    let mut visibility = Vec::with_capacity(composited.len());
    for (id, fp, vis) in composited {
        visible.push(id);
        footprints.push(fp);
        visibility.push(vis);
    }

    Ok(RenderOutput {
        image,
        visible,
        footprints,
        visibility,
    })
}

/// Serialized form of a [`Gaussian`]; covariance is row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaussianRecord {
    pub id: u64,
    pub center: [f64; 3],
    pub covariance: [f64; 9],
    pub color: [f64; 3],
    pub opacity: f64,
    pub semantic_latent: Vec<f64>,
    pub original_color: [f64; 3],
}

impl From<&Gaussian> for GaussianRecord {
    fn from(g: &Gaussian) -> Self {
        let mut covariance = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                covariance[r * 3 + c] = g.covariance[(r, c)];
            }
        }
        GaussianRecord {
            id: g.id,
            center: [g.center.x, g.center.y, g.center.z],
            covariance,
            color: [g.color.x, g.color.y, g.color.z],
            opacity: g.opacity,
            semantic_latent: g.semantic_latent.to_vec(),
            original_color: [g.original_color.x, g.original_color.y, g.original_color.z],
        }
    }
}

impl TryFrom<GaussianRecord> for Gaussian {
    type Error = SceneError;

    fn try_from(r: GaussianRecord) -> Result<Self, SceneError> {
        let g = Gaussian {
            id: r.id,
            center: Vector3::from_column_slice(&r.center),
            covariance: Matrix3::from_row_slice(&r.covariance),
            color: Vector3::from_column_slice(&r.color),
            opacity: r.opacity,
            semantic_latent: Array1::from_vec(r.semantic_latent),
            original_color: Vector3::from_column_slice(&r.original_color),
        };
        g.validate()?;
        Ok(g)
    }
}

/// Serialized form of a [`Camera`]; rotation is row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for col in 0..3 {
                rotation[r * 3 + col] = c.rotation[(r, col)];
            }
        }
        CameraRecord {
            rotation,
            translation: [c.translation.x, c.translation.y, c.translation.z],
            focal: [c.focal.x, c.focal.y],
            principal_point: [c.principal_point.x, c.principal_point.y],
            width: c.width,
            height: c.height,
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = SceneError;

    fn try_from(r: CameraRecord) -> Result<Self, SceneError> {
        let c = Camera {
            rotation: Matrix3::from_row_slice(&r.rotation),
            translation: Vector3::from_column_slice(&r.translation),
            focal: Vector2::new(r.focal[0], r.focal[1]),
            principal_point: Vector2::new(r.principal_point[0], r.principal_point[1]),
            width: r.width,
            height: r.height,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Load a scene file (a JSON array of Gaussian records), validate it, and
/// return the Gaussians sorted by id.
pub fn load_scene(path: &Path) -> Result<Vec<Gaussian>, PipelineError> {
    let records: Vec<GaussianRecord> = fsio::read_json(path)?;
    let mut scene = records
        .into_iter()
        .map(Gaussian::try_from)
        .collect::<Result<Vec<_>, _>>()?;
    scene.sort_by_key(|g| g.id);
    validate_scene(&scene)?;
    Ok(scene)
}

pub fn save_scene(path: &Path, scene: &[Gaussian]) -> Result<(), PipelineError> {
    let records: Vec<GaussianRecord> = scene.iter().map(GaussianRecord::from).collect();
    fsio::write_json_atomic(path, &records)
}

pub fn load_camera(path: &Path) -> Result<Camera, PipelineError> {
    let record: CameraRecord = fsio::read_json(path)?;
    Ok(Camera::try_from(record)?)
}

pub fn save_camera(path: &Path, camera: &Camera) -> Result<(), PipelineError> {
    fsio::write_json_atomic(path, &CameraRecord::from(camera))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn plain_camera() -> Camera {
        Camera {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            focal: Vector2::new(100.0, 100.0),
            principal_point: Vector2::new(50.0, 50.0),
            width: 101,
            height: 101,
        }
    }

    fn blob(id: u64, center: Vector3<f64>, sigma2: f64, opacity: f64) -> Gaussian {
        Gaussian {
            id,
            center,
            covariance: Matrix3::identity() * sigma2,
            color: Vector3::new(0.8, 0.4, 0.2),
            opacity,
            semantic_latent: Array1::zeros(4),
            original_color: Vector3::new(0.8, 0.4, 0.2),
        }
    }

    #[test]
    fn projection_matches_hand_values() {
        let cam = plain_camera();
        let eps = 1e-6;
        let p = cam.project(&Vector3::new(0.0, 0.0, 1.0), eps).unwrap();
        assert_abs_diff_eq!(p.x, 50.0);
        assert_abs_diff_eq!(p.y, 50.0);
        let p = cam.project(&Vector3::new(0.5, 0.0, 2.0), eps).unwrap();
        assert_abs_diff_eq!(p.x, 75.0);
        assert_abs_diff_eq!(p.y, 50.0);
        assert_eq!(
            cam.project(&Vector3::new(0.0, 0.0, -1.0), eps),
            Err(BehindCamera)
        );
        // Depth epsilon counts as behind.
        assert_eq!(
            cam.project(&Vector3::new(0.0, 0.0, 1e-7), eps),
            Err(BehindCamera)
        );
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -5.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            Vector2::new(40.0, 40.0),
            Vector2::new(15.5, 15.5),
            32,
            32,
        );
        cam.validate().unwrap();
        let p = cam.project(&Vector3::zeros(), 1e-6).unwrap();
        assert_abs_diff_eq!(p.x, 15.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 15.5, epsilon = 1e-12);
        // Row axis follows forward x right: world +y lands on larger rows.
        let p = cam.project(&Vector3::new(0.0, 0.5, 0.0), 1e-6).unwrap();
        assert!(p.y > 15.5);
        // Off-axis cameras stay proper rotations.
        let oblique = Camera::look_at(
            Vector3::new(3.0, 1.0, -4.0),
            Vector3::new(0.2, -0.1, 0.3),
            Vector3::new(0.0, 1.0, 0.0),
            Vector2::new(40.0, 40.0),
            Vector2::new(15.5, 15.5),
            32,
            32,
        );
        oblique.validate().unwrap();
    }

    #[test]
    fn single_splat_puts_opacity_at_center_pixel() {
        let cam = plain_camera();
        let g = blob(7, Vector3::new(0.0, 0.0, 1.0), 1e-4, 0.6);
        let out = render_view(&[g], &cam, &RenderConfig::default()).unwrap();
        assert_eq!(out.visible, vec![7]);
        // sigma_px = 100 * 0.01 = 1 pixel; center pixel weight is alpha.
        let fp = &out.footprints[0];
        let center = fp
            .pixels
            .iter()
            .find(|p| p.y == 50 && p.x == 50)
            .expect("center pixel in footprint");
        assert_abs_diff_eq!(center.weight, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(center.kappa, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out.image[[50, 50, 0]], 0.6 * 0.8, epsilon = 1e-12);
        // Nothing occludes a single splat.
        assert_abs_diff_eq!(out.visibility[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_layers_composite_with_transmittance() {
        let cam = plain_camera();
        // Both on the optical axis with near-delta footprints; front at z=1.
        let mut front = blob(1, Vector3::new(0.0, 0.0, 1.0), 2.5e-9, 0.99);
        front.color = Vector3::new(1.0, 0.0, 0.0);
        let mut back = blob(2, Vector3::new(0.0, 0.0, 2.0), 1e-8, 0.99);
        back.color = Vector3::new(0.0, 1.0, 0.0);
        let out = render_view(&[front, back], &cam, &RenderConfig::default()).unwrap();
        assert_eq!(out.visible, vec![1, 2]);
        assert_abs_diff_eq!(out.image[[50, 50, 0]], 0.99, epsilon = 1e-9);
        assert_abs_diff_eq!(out.image[[50, 50, 1]], 0.01 * 0.99, epsilon = 1e-9);
        assert_abs_diff_eq!(out.visibility[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.visibility[1], 0.01, epsilon = 1e-9);
    }

    #[test]
    fn per_pixel_kappa_never_exceeds_unit_mass() {
        let cam = plain_camera();
        let scene: Vec<Gaussian> = (0..6)
            .map(|i| {
                blob(
                    i,
                    Vector3::new(0.002 * i as f64, -0.003 * i as f64, 1.0 + 0.1 * i as f64),
                    4e-4,
                    0.9,
                )
            })
            .collect();
        let out = render_view(&scene, &cam, &RenderConfig::default()).unwrap();
        let mut mass = ndarray::Array2::<f64>::zeros((101, 101));
        for fp in &out.footprints {
            for p in &fp.pixels {
                mass[[p.y as usize, p.x as usize]] += p.kappa;
            }
        }
        for &m in &mass {
            assert!(m <= 1.0 + 1e-12, "pixel mass {m} above 1");
        }
    }

    #[test]
    fn image_is_linear_in_colors() {
        let cam = plain_camera();
        let scene: Vec<Gaussian> = (0..4)
            .map(|i| {
                blob(
                    i,
                    Vector3::new(0.01 * i as f64, 0.0, 1.0 + 0.2 * i as f64),
                    4e-4,
                    0.7,
                )
            })
            .collect();
        let out = render_view(&scene, &cam, &RenderConfig::default()).unwrap();
        let halved: Vec<Gaussian> = scene
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.color *= 0.5;
                g
            })
            .collect();
        let out_half = render_view(&halved, &cam, &RenderConfig::default()).unwrap();
        // Halving colors is exact in binary floating point.
        assert_eq!(out_half.image, out.image.mapv(|v| 0.5 * v));
    }

    #[test]
    fn rendering_is_deterministic() {
        let cam = plain_camera();
        let scene: Vec<Gaussian> = (0..5)
            .map(|i| blob(i, Vector3::new(0.01 * i as f64, 0.02, 1.5), 3e-4, 0.5))
            .collect();
        let a = render_view(&scene, &cam, &RenderConfig::default()).unwrap();
        let b = render_view(&scene, &cam, &RenderConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn behind_camera_gaussian_is_invisible() {
        let cam = plain_camera();
        let visible = blob(0, Vector3::new(0.0, 0.0, 1.0), 1e-4, 0.5);
        let behind = blob(1, Vector3::new(0.0, 0.0, -2.0), 1e-4, 0.5);
        let out = render_view(&[visible, behind], &cam, &RenderConfig::default()).unwrap();
        assert_eq!(out.visible, vec![0]);
    }

    #[test]
    fn faint_footprint_is_dropped() {
        let cam = plain_camera();
        let mut faint = blob(3, Vector3::new(0.0, 0.0, 1.0), 1e-4, 0.5);
        faint.opacity = 1e-6;
        let out = render_view(&[faint], &cam, &RenderConfig::default()).unwrap();
        assert!(out.visible.is_empty());
        assert_eq!(out.image.iter().filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn validation_rejects_bad_primitives() {
        let mut g = blob(0, Vector3::zeros(), 1e-4, 0.5);
        g.covariance[(0, 1)] = 0.5; // asymmetric
        assert!(matches!(
            g.validate(),
            Err(SceneError::InvalidCovariance { .. })
        ));

        let mut g = blob(0, Vector3::zeros(), 1e-4, 0.5);
        g.covariance = Matrix3::identity() * -1.0;
        assert!(matches!(
            g.validate(),
            Err(SceneError::InvalidCovariance { .. })
        ));

        let g = blob(0, Vector3::zeros(), 1e-4, 1.0);
        assert!(matches!(
            g.validate(),
            Err(SceneError::InvalidOpacity { .. })
        ));

        let mut g = blob(0, Vector3::zeros(), 1e-4, 0.5);
        g.color.x = 1.5;
        assert!(matches!(g.validate(), Err(SceneError::InvalidColor { .. })));

        let mut cam = plain_camera();
        cam.rotation[(0, 0)] = 2.0;
        assert!(matches!(
            cam.validate(),
            Err(SceneError::InvalidRotation { .. })
        ));

        let dup = vec![
            blob(1, Vector3::zeros(), 1e-4, 0.5),
            blob(1, Vector3::zeros(), 1e-4, 0.5),
        ];
        assert!(matches!(
            validate_scene(&dup),
            Err(SceneError::DuplicateId(1))
        ));
    }

    #[test]
    fn records_round_trip() {
        let g = blob(11, Vector3::new(0.1, -0.2, 3.0), 2e-3, 0.42);
        let record = GaussianRecord::from(&g);
        let text = serde_json::to_string(&record).unwrap();
        let back: GaussianRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(Gaussian::try_from(back).unwrap(), g);

        let cam = plain_camera();
        let record = CameraRecord::from(&cam);
        let text = serde_json::to_string(&record).unwrap();
        let back: CameraRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(Camera::try_from(back).unwrap(), cam);
    }
}
