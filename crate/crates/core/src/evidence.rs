//! Per-view edit evidence: edited image, attention, and feature rasters.
//!
//! Evidence normally comes from an external 2D editing model. For tests and
//! the toy preset, [`generate_synthetic_evidence`] fabricates it from a
//! ground-truth edit: it recolors the target Gaussians, renders, uses the
//! targets' composited footprint as attention, stamps the target semantic
//! vector (plus noise) inside that footprint, and derives appearance
//! descriptors from local patch statistics of the edited image.
//!
//! On disk a view is a directory: `manifest.json` lists the field names and
//! the camera file; each field is a JSON header (shape and dtype) next to a
//! raw little-endian payload, row-major with channels last.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RenderConfig;
use crate::error::PipelineError;
use crate::fsio;
use crate::scene::{load_camera, render_view, save_camera, Camera, Gaussian};
use crate::seeding::stage_rng;

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("field {field}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        field: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("attention must be non-negative (found {0})")]
    NegativeAttention(f64),
    #[error("evidence contains non-finite values in field {0}")]
    NonFinite(&'static str),
    #[error("edit target id {0} is not in the scene")]
    TargetNotInScene(u64),
    #[error("edit target region is empty")]
    EmptyTargetRegion,
    #[error("no target gaussian is visible in this view")]
    NoVisibleTarget,
    #[error("appearance descriptors need at least {required} channels, got {got}")]
    DescriptorDim { required: usize, got: usize },
    #[error("target semantic vector is empty or does not match the scene latent dimension")]
    BadTargetSemantic,
    #[error("view manifest is missing required field {0:?}")]
    MissingField(String),
    #[error("view manifest lists unknown field {0:?}")]
    UnknownField(String),
    #[error("field {field}: header declares dtype {dtype:?}, expected {expected:?}")]
    DtypeMismatch {
        field: String,
        dtype: String,
        expected: &'static str,
    },
    #[error("field {field}: payload holds {actual} bytes, header implies {expected}")]
    PayloadSize {
        field: String,
        expected: usize,
        actual: usize,
    },
}

/// Evidence one view contributes to the edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EditedViewEvidence {
    /// `(height, width, 3)` edited RGB image.
    pub edited_image: Array3<f64>,
    /// `(height, width)` non-negative edit attention.
    pub attention: Array2<f64>,
    /// `(height, width, d_e)` semantic feature raster.
    pub semantic_features: Array3<f64>,
    /// `(height, width, d_a)` appearance feature raster.
    pub appearance_features: Array3<f64>,
    /// Optional `(height, width)` region-of-interest mask.
    pub mask: Option<Array2<bool>>,
}

impl EditedViewEvidence {
    pub fn height(&self) -> usize {
        self.attention.nrows()
    }

    pub fn width(&self) -> usize {
        self.attention.ncols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_features.shape()[2]
    }

    pub fn appearance_dim(&self) -> usize {
        self.appearance_features.shape()[2]
    }

    pub fn validate(&self) -> Result<(), EvidenceError> {
        let (h, w) = (self.height(), self.width());
        let expect = |field: &'static str, actual: &[usize], expected: Vec<usize>| {
            if actual == expected.as_slice() {
                Ok(())
            } else {
                Err(EvidenceError::ShapeMismatch {
                    field,
                    expected,
                    actual: actual.to_vec(),
                })
            }
        };
        expect("edited_image", self.edited_image.shape(), vec![h, w, 3])?;
        expect(
            "semantic_features",
            self.semantic_features.shape(),
            vec![h, w, self.semantic_dim()],
        )?;
        expect(
            "appearance_features",
            self.appearance_features.shape(),
            vec![h, w, self.appearance_dim()],
        )?;
        if let Some(mask) = &self.mask {
            expect("mask", mask.shape(), vec![h, w])?;
        }
        for (field, ok) in [
            (
                "edited_image",
                self.edited_image.iter().all(|v| v.is_finite()),
            ),
            ("attention", self.attention.iter().all(|v| v.is_finite())),
            (
                "semantic_features",
                self.semantic_features.iter().all(|v| v.is_finite()),
            ),
            (
                "appearance_features",
                self.appearance_features.iter().all(|v| v.is_finite()),
            ),
        ] {
            if !ok {
                return Err(EvidenceError::NonFinite(field));
            }
        }
        if let Some(&bad) = self.attention.iter().find(|&&a| a < 0.0) {
            return Err(EvidenceError::NegativeAttention(bad));
        }
        Ok(())
    }
}

/// Ground-truth edit used to fabricate evidence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EditSpec {
    /// Gaussian ids the edit should affect.
    pub target_region: BTreeSet<u64>,
    /// Semantic vector the edit pushes targets toward.
    pub target_semantic: Vec<f64>,
    /// Color the edited image shows on targets.
    pub target_color: [f64; 3],
    pub attention_noise_sigma: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

/// Number of informative appearance channels the generator produces.
pub const APPEARANCE_BASE_CHANNELS: usize = 6;

/// Fabricate one view's evidence from a ground-truth edit.
///
/// Deterministic given `spec.seed`; callers wanting per-view streams derive
/// a per-view seed before calling.
pub fn generate_synthetic_evidence(
    scene: &[Gaussian],
    camera: &Camera,
    spec: &EditSpec,
    render_cfg: &RenderConfig,
    appearance_dim: usize,
    with_mask: bool,
) -> Result<EditedViewEvidence, PipelineError> {
    if spec.target_region.is_empty() {
        return Err(EvidenceError::EmptyTargetRegion.into());
    }
    let ids: BTreeSet<u64> = scene.iter().map(|g| g.id).collect();
    if let Some(&missing) = spec.target_region.iter().find(|id| !ids.contains(id)) {
        return Err(EvidenceError::TargetNotInScene(missing).into());
    }
    if appearance_dim < APPEARANCE_BASE_CHANNELS {
        return Err(EvidenceError::DescriptorDim {
            required: APPEARANCE_BASE_CHANNELS,
            got: appearance_dim,
        }
        .into());
    }
    let semantic_dim = scene[0].semantic_latent.len();
    if spec.target_semantic.is_empty() || spec.target_semantic.len() != semantic_dim {
        return Err(EvidenceError::BadTargetSemantic.into());
    }

    let edited_scene: Vec<Gaussian> = scene
        .iter()
        .map(|g| {
            let mut g = g.clone();
            if spec.target_region.contains(&g.id) {
                g.color = nalgebra::Vector3::new(
                    spec.target_color[0],
                    spec.target_color[1],
                    spec.target_color[2],
                );
            }
            g
        })
        .collect();
    let render = render_view(&edited_scene, camera, render_cfg)?;

    let (h, w) = (camera.height as usize, camera.width as usize);
    let mut footprint = Array2::<f64>::zeros((h, w));
    let mut any_target_visible = false;
    for (idx, id) in render.visible.iter().enumerate() {
        if spec.target_region.contains(id) {
            any_target_visible = true;
            for p in &render.footprints[idx].pixels {
                footprint[[p.y as usize, p.x as usize]] += p.kappa;
            }
        }
    }
    if !any_target_visible {
        return Err(EvidenceError::NoVisibleTarget.into());
    }

    let mut attention = footprint.clone();
    if spec.attention_noise_sigma > 0.0 {
        let mut rng = stage_rng(spec.seed, "attention-noise", 0);
        let noise = Normal::new(0.0, spec.attention_noise_sigma).expect("finite sigma");
        attention.mapv_inplace(|a| (a + noise.sample(&mut rng)).max(0.0));
    }

    let mut semantic = Array3::<f64>::zeros((h, w, semantic_dim));
    let mut rng = stage_rng(spec.seed, "feature-noise", 0);
    let noise = if spec.feature_noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.feature_noise_sigma).expect("finite sigma"))
    } else {
        None
    };
    for y in 0..h {
        for x in 0..w {
            if footprint[[y, x]] > 0.0 {
                for (c, &base) in spec.target_semantic.iter().enumerate() {
                    let jitter = noise.map_or(0.0, |n| n.sample(&mut rng));
                    semantic[[y, x, c]] = base + jitter;
                }
            }
        }
    }

    let appearance = patch_descriptors(&render.image, appearance_dim);
    let mask = with_mask.then(|| footprint.mapv(|a| a > render_cfg.footprint_min));

    let out = EditedViewEvidence {
        edited_image: render.image,
        attention,
        semantic_features: semantic,
        appearance_features: appearance,
        mask,
    };
    out.validate()?;
    Ok(out)
}

/// Per-pixel appearance descriptors from a replicate-padded 3x3 patch:
/// mean color per channel, then central-difference gradient magnitude per
/// channel, zero-padded to `dim` channels.
pub fn patch_descriptors(image: &Array3<f64>, dim: usize) -> Array3<f64> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = Array3::<f64>::zeros((h, w, dim));
    let cy = |v: i64| v.clamp(0, h as i64 - 1) as usize;
    let cx = |v: i64| v.clamp(0, w as i64 - 1) as usize;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for c in 0..3 {
                let px = |dy: i64, dx: i64| image[[cy(y + dy), cx(x + dx), c]];
                let mut mean = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        mean += px(dy, dx);
                    }
                }
                mean /= 9.0;
                let col = |dx: i64| (px(-1, dx) + px(0, dx) + px(1, dx)) / 3.0;
                let row = |dy: i64| (px(dy, -1) + px(dy, 0) + px(dy, 1)) / 3.0;
                let gx = (col(1) - col(-1)) / 2.0;
                let gy = (row(1) - row(-1)) / 2.0;
                out[[y as usize, x as usize, c]] = mean;
                out[[y as usize, x as usize, 3 + c]] = gx.hypot(gy);
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ViewManifest {
    camera: String,
    fields: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    field: String,
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
}

const F32_FIELDS: [&str; 4] = [
    "edited_image",
    "attention",
    "semantic_features",
    "appearance_features",
];

fn write_f32_field(
    dir: &Path,
    name: &str,
    data: &[f64],
    h: usize,
    w: usize,
    channels: usize,
) -> Result<(), PipelineError> {
    let header = FieldHeader {
        field: name.to_string(),
        height: h,
        width: w,
        channels,
        dtype: "f32".to_string(),
    };
    fsio::write_json_atomic(&dir.join(format!("{name}.json")), &header)?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fsio::write_bytes_atomic(&dir.join(format!("{name}.bin")), &bytes)
}

/// Write a view directory: manifest, camera, and all field rasters.
///
/// Payloads are stored as little-endian `f32` (the mask as `u8`), so loading
/// and re-storing a directory reproduces it byte for byte.
pub fn store_evidence(
    dir: &Path,
    evidence: &EditedViewEvidence,
    camera: &Camera,
) -> Result<(), PipelineError> {
    evidence.validate()?;
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir.display().to_string(), e))?;
    let (h, w) = (evidence.height(), evidence.width());

    save_camera(&dir.join("camera.json"), camera)?;
    let img = evidence.edited_image.as_standard_layout();
    write_f32_field(dir, "edited_image", img.as_slice().unwrap(), h, w, 3)?;
    let att = evidence.attention.as_standard_layout();
    write_f32_field(dir, "attention", att.as_slice().unwrap(), h, w, 1)?;
    let sem = evidence.semantic_features.as_standard_layout();
    write_f32_field(
        dir,
        "semantic_features",
        sem.as_slice().unwrap(),
        h,
        w,
        evidence.semantic_dim(),
    )?;
    let app = evidence.appearance_features.as_standard_layout();
    write_f32_field(
        dir,
        "appearance_features",
        app.as_slice().unwrap(),
        h,
        w,
        evidence.appearance_dim(),
    )?;

    let mut fields: Vec<String> = F32_FIELDS.iter().map(|s| s.to_string()).collect();
    if let Some(mask) = &evidence.mask {
        let header = FieldHeader {
            field: "mask".to_string(),
            height: h,
            width: w,
            channels: 1,
            dtype: "u8".to_string(),
        };
        fsio::write_json_atomic(&dir.join("mask.json"), &header)?;
        let bytes: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
        fsio::write_bytes_atomic(&dir.join("mask.bin"), &bytes)?;
        fields.push("mask".to_string());
    }

    fsio::write_json_atomic(
        &dir.join("manifest.json"),
        &ViewManifest {
            camera: "camera.json".to_string(),
            fields,
        },
    )
}

fn read_field(
    dir: &Path,
    name: &str,
    expect_dtype: &'static str,
) -> Result<(FieldHeader, Vec<u8>), PipelineError> {
    let header: FieldHeader = fsio::read_json(&dir.join(format!("{name}.json")))?;
    if header.dtype != expect_dtype {
        return Err(EvidenceError::DtypeMismatch {
            field: name.to_string(),
            dtype: header.dtype,
            expected: expect_dtype,
        }
        .into());
    }
    let path = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&path).map_err(|e| PipelineError::io(path.display().to_string(), e))?;
    let unit = if expect_dtype == "f32" { 4 } else { 1 };
    let expected = header.height * header.width * header.channels * unit;
    if bytes.len() != expected {
        return Err(EvidenceError::PayloadSize {
            field: name.to_string(),
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    Ok((header, bytes))
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

/// Load a view directory written by [`store_evidence`].
pub fn load_evidence(dir: &Path) -> Result<(EditedViewEvidence, Camera), PipelineError> {
    let manifest: ViewManifest = fsio::read_json(&dir.join("manifest.json"))?;
    for name in &manifest.fields {
        if name != "mask" && !F32_FIELDS.contains(&name.as_str()) {
            return Err(EvidenceError::UnknownField(name.clone()).into());
        }
    }
    for required in F32_FIELDS {
        if !manifest.fields.iter().any(|f| f == required) {
            return Err(EvidenceError::MissingField(required.to_string()).into());
        }
    }
    let camera = load_camera(&dir.join(&manifest.camera))?;

    let f32_field = |name: &str| -> Result<(FieldHeader, Vec<f64>), PipelineError> {
        let (header, bytes) = read_field(dir, name, "f32")?;
        Ok((header, decode_f32(&bytes)))
    };
    let (img_h, img_data) = f32_field("edited_image")?;
    let (att_h, att_data) = f32_field("attention")?;
    let (sem_h, sem_data) = f32_field("semantic_features")?;
    let (app_h, app_data) = f32_field("appearance_features")?;

    let shape_err = |field: &'static str, h: &FieldHeader| EvidenceError::ShapeMismatch {
        field,
        expected: vec![att_h.height, att_h.width],
        actual: vec![h.height, h.width],
    };
    for (name, h) in [
        ("edited_image", &img_h),
        ("semantic_features", &sem_h),
        ("appearance_features", &app_h),
    ] {
        if h.height != att_h.height || h.width != att_h.width {
            return Err(shape_err(name, h).into());
        }
    }

    let (h, w) = (att_h.height, att_h.width);
    let into3 =
        |data: Vec<f64>, c: usize| Array3::from_shape_vec((h, w, c), data).expect("sized payload");
    let mask = if manifest.fields.iter().any(|f| f == "mask") {
        let (mask_h, bytes) = read_field(dir, "mask", "u8")?;
        if mask_h.height != h || mask_h.width != w {
            return Err(shape_err("mask", &mask_h).into());
        }
        Some(
            Array2::from_shape_vec((h, w), bytes.iter().map(|&b| b != 0).collect())
                .expect("sized payload"),
        )
    } else {
        None
    };

    let evidence = EditedViewEvidence {
        edited_image: into3(img_data, 3),
        attention: Array2::from_shape_vec((h, w), att_data).expect("sized payload"),
        semantic_features: into3(sem_data, sem_h.channels),
        appearance_features: into3(app_data, app_h.channels),
        mask,
    };
    evidence.validate()?;
    Ok((evidence, camera))
}
