//! Structured-text and binary file formats: rig (chains), calibration,
//! calibration datasets, pipeline configuration and flat arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::adaptors::{AdaptConfig, ExternalBackend, BackendRegistry, Rig};
use crate::calibration::{Calibration, CalibrationMetrics, CalibrationSample, RefineConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CropBox, Grid};
use crate::kinematics::{
    rot6d_to_rotmat, ArmModel, JointKind, JointMapEntry, JointSpec, KinematicChain, Platform, Pose, Rot6D,
};
use crate::raster::{PrimitiveShape, ShapeKind, DEFAULT_COLOR};
use crate::recording::{load_color, load_depth, load_mask, save_color, save_depth, save_mask, write_atomic, FORMAT_VERSION};
use crate::trajectory::SamplingThresholds;

fn parse_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a TOML file; syntax and schema errors are configuration errors.
fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::data(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Rigid transform as written in files: translation plus an optional
/// quaternion `[w, x, y, z]` or 6D rotation (identity when both are absent).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternion: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rot6d: Option<[f64; 6]>,
}

impl PoseFile {
    pub fn from_pose(p: &Pose) -> Self {
        let quaternion = (p.rotation != Matrix3::identity()).then(|| p.quaternion_wxyz());
        Self {
            translation: p.translation.into(),
            quaternion,
            rot6d: None,
        }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        let t = Vector3::from(self.translation);
        match (self.quaternion, self.rot6d) {
            (Some(_), Some(_)) => Err(Error::config("pose gives both a quaternion and a 6D rotation")),
            (Some(q), None) => Pose::from_quaternion(q, t),
            (None, Some(r)) => Ok(Pose {
                rotation: rot6d_to_rotmat(&Rot6D(r))?,
                translation: t,
            }),
            (None, None) => Ok(Pose::from_translation(t)),
        }
    }
}

fn is_identity(p: &PoseFile) -> bool {
    *p == PoseFile::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFile {
    #[serde(flatten)]
    pub kind: ShapeKind,
    #[serde(default, skip_serializing_if = "is_identity")]
    pub origin: PoseFile,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
}

fn default_color() -> [u8; 3] {
    DEFAULT_COLOR
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointFile {
    pub name: String,
    pub kind: JointKind,
    #[serde(default)]
    pub axis: [f64; 3],
    #[serde(default, skip_serializing_if = "is_identity")]
    pub origin: PoseFile,
    #[serde(default)]
    pub limits: [f64; 2],
    #[serde(default = "one")]
    pub encoder_scale: f64,
    #[serde(default = "one")]
    pub encoder_sign: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub geometry: Vec<ShapeFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "is_identity")]
    pub mount: PoseFile,
    #[serde(default, skip_serializing_if = "is_identity")]
    pub tool: PoseFile,
    pub joints: Vec<JointFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformFile {
    pub arms: Vec<ArmFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingFile {
    pub arm: String,
    pub joints: Vec<JointMapEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub exoskeleton: PlatformFile,
    pub robot: PlatformFile,
    #[serde(default)]
    pub mapping: Vec<MappingFile>,
}

fn platform_from_file(f: &PlatformFile) -> Result<Platform> {
    let arms = f
        .arms
        .iter()
        .map(|a| {
            let mut joints = Vec::with_capacity(a.joints.len());
            let mut geometry = Vec::with_capacity(a.joints.len());
            for j in &a.joints {
                joints.push(JointSpec {
                    name: j.name.clone(),
                    kind: j.kind,
                    axis: Vector3::from(j.axis),
                    origin: j.origin.to_pose()?,
                    limits: j.limits,
                    encoder_scale: j.encoder_scale,
                    encoder_sign: j.encoder_sign,
                });
                geometry.push(
                    j.geometry
                        .iter()
                        .map(|s| {
                            let shape = PrimitiveShape {
                                kind: s.kind,
                                local: s.origin.to_pose()?,
                                color: s.color,
                            };
                            shape.validate()?;
                            Ok(shape)
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            let chain = KinematicChain::new(joints, geometry, a.tool.to_pose()?)
                .map_err(|e| Error::config(format!("arm '{}': {e}", a.name)))?;
            Ok(ArmModel {
                name: a.name.clone(),
                chain,
                mount: a.mount.to_pose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Platform { arms })
}

fn platform_to_file(p: &Platform) -> PlatformFile {
    PlatformFile {
        arms: p
            .arms
            .iter()
            .map(|a| ArmFile {
                name: a.name.clone(),
                mount: PoseFile::from_pose(&a.mount),
                tool: PoseFile::from_pose(&a.chain.tool),
                joints: a
                    .chain
                    .joints
                    .iter()
                    .zip(a.chain.link_geometry.iter().map(Some).chain(std::iter::repeat(None)))
                    .map(|(j, g)| JointFile {
                        name: j.name.clone(),
                        kind: j.kind,
                        axis: j.axis.into(),
                        origin: PoseFile::from_pose(&j.origin),
                        limits: j.limits,
                        encoder_scale: j.encoder_scale,
                        encoder_sign: j.encoder_sign,
                        geometry: g
                            .into_iter()
                            .flatten()
                            .map(|s| ShapeFile {
                                kind: s.kind,
                                origin: PoseFile::from_pose(&s.local),
                                color: s.color,
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

impl RigFile {
    pub fn from_rig(rig: &Rig) -> Self {
        Self {
            exoskeleton: platform_to_file(&rig.exoskeleton),
            robot: platform_to_file(&rig.robot),
            mapping: rig
                .robot
                .arms
                .iter()
                .zip(&rig.mapping)
                .map(|(a, m)| MappingFile {
                    arm: a.name.clone(),
                    joints: m.clone(),
                })
                .collect(),
        }
    }

    /// Builds the rig; arms without a mapping entry map joints one to one.
    pub fn to_rig(&self) -> Result<Rig> {
        let exoskeleton = platform_from_file(&self.exoskeleton)?;
        let robot = platform_from_file(&self.robot)?;
        for m in &self.mapping {
            if robot.arm(&m.arm).is_none() {
                return Err(Error::config(format!("mapping names unknown robot arm '{}'", m.arm)));
            }
        }
        let mapping = robot
            .arms
            .iter()
            .map(|a| match self.mapping.iter().find(|m| m.arm == a.name) {
                Some(m) => m.joints.clone(),
                None => (0..a.chain.dof()).map(JointMapEntry::identity).collect(),
            })
            .collect();
        let rig = Rig {
            exoskeleton,
            robot,
            mapping,
        };
        rig.validate()?;
        Ok(rig)
    }
}

pub fn load_rig(path: &Path) -> Result<Rig> {
    read_toml::<RigFile>(path)?.to_rig()
}

pub fn save_rig(rig: &Rig, path: &Path) -> Result<()> {
    write_toml(&RigFile::from_rig(rig), path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mask_diff_percent_mean: f64,
    pub mask_diff_percent_std: f64,
    pub depth_diff_mm_mean: f64,
    pub depth_diff_mm_std: f64,
}

impl From<&CalibrationMetrics> for MetricsSummary {
    fn from(m: &CalibrationMetrics) -> Self {
        Self {
            mask_diff_percent_mean: m.mask.mean,
            mask_diff_percent_std: m.mask.std,
            depth_diff_mm_mean: m.depth.mean,
            depth_diff_mm_std: m.depth.std,
        }
    }
}

/// `camera_from_base` is a row-major 4x4 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub camera_from_base: [[f64; 4]; 4],
    pub q_calib: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsSummary>,
}

pub fn load_calibration(path: &Path) -> Result<(Calibration, Option<MetricsSummary>)> {
    let f: CalibrationFile = read_toml(path)?;
    let camera_from_base = Pose::from_rows(&f.camera_from_base)
        .map_err(|e| Error::config(format!("{}: camera_from_base: {e}", path.display())))?;
    Ok((
        Calibration {
            camera_from_base,
            q_calib: f.q_calib,
        },
        f.metrics,
    ))
}

pub fn save_calibration(c: &Calibration, metrics: Option<MetricsSummary>, path: &Path) -> Result<()> {
    write_toml(
        &CalibrationFile {
            camera_from_base: c.camera_from_base.to_rows(),
            q_calib: c.q_calib.clone(),
            metrics,
        },
        path,
    )
}

/// Marker observations for the closed-form first calibration stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerFile {
    pub camera_from_marker: [[f64; 4]; 4],
    pub base_from_marker: [[f64; 4]; 4],
    /// Encoder zero positions per arm.
    pub q_calib: Vec<Vec<f64>>,
}

pub fn load_markers(path: &Path) -> Result<(Pose, Pose, Vec<Vec<f64>>)> {
    let f: MarkerFile = read_toml(path)?;
    let cm = Pose::from_rows(&f.camera_from_marker).map_err(|e| Error::config(format!("camera_from_marker: {e}")))?;
    let bm = Pose::from_rows(&f.base_from_marker).map_err(|e| Error::config(format!("base_from_marker: {e}")))?;
    Ok((cm, bm, f.q_calib))
}

pub fn save_markers(f: &MarkerFile, path: &Path) -> Result<()> {
    write_toml(f, path)
}

/// Annotated calibration samples on disk:
///
/// ```text
/// metadata.toml              format version, intrinsics, sample count
/// samples.jsonl              {"sample": i, "q_raw": [[..], ..]}
/// depth/000000.png           16-bit millimeters
/// depth_mask/000000.png      8-bit, nonzero = supervised
/// model_mask/000000.bin      f32 array [h, w] in [0, 1]
/// color/000000.png           optional
/// ```
#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    sample_count: usize,
    intrinsics: CameraIntrinsics,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    sample: usize,
    q_raw: Vec<Vec<f64>>,
}

fn sample_file(dir: &Path, sub: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{i:06}.{ext}"))
}

pub fn save_dataset(samples: &[CalibrationSample], k: &CameraIntrinsics, dir: &Path) -> Result<()> {
    for s in samples {
        s.validate(k)?;
    }
    let with_color = samples.first().is_some_and(|s| s.color.is_some());
    for sub in ["depth", "depth_mask", "model_mask"].into_iter().chain(with_color.then_some("color")) {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut lines = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        save_depth(&s.depth, &sample_file(dir, "depth", i, "png"))?;
        save_mask(&s.depth_mask, &sample_file(dir, "depth_mask", i, "png"))?;
        let data: Vec<f64> = s.model_mask.data.iter().map(|&m| m as f64).collect();
        write_array(
            &sample_file(dir, "model_mask", i, "bin"),
            &Array {
                dtype: DType::F32,
                shape: vec![k.height, k.width],
                data,
            },
        )?;
        if let Some(c) = &s.color {
            save_color(c, &sample_file(dir, "color", i, "png"))?;
        }
        serde_json::to_writer(
            &mut lines,
            &SampleLine {
                sample: i,
                q_raw: s.q_raw.clone(),
            },
        )
        .expect("sample lines serialize");
        lines.push(b'\n');
    }
    write_atomic(&dir.join("samples.jsonl"), &lines)?;
    write_toml(
        &DatasetMeta {
            format_version: FORMAT_VERSION,
            sample_count: samples.len(),
            intrinsics: *k,
        },
        &dir.join("metadata.toml"),
    )
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<CalibrationSample>, CameraIntrinsics)> {
    let meta_path = dir.join("metadata.toml");
    let meta: DatasetMeta = toml::from_str(&read_text(&meta_path)?).map_err(|e| parse_err(&meta_path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let k = meta.intrinsics;
    k.validate()?;
    let lines_path = dir.join("samples.jsonl");
    let lines: Vec<SampleLine> = read_text(&lines_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| parse_err(&lines_path, e)))
        .collect::<Result<_>>()?;
    if lines.len() != meta.sample_count {
        return Err(Error::data(format!(
            "{} sample records for {} samples",
            lines.len(),
            meta.sample_count
        )));
    }
    let with_color = dir.join("color").is_dir();
    let mut samples = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let img = |sub: &str, what: &'static str| -> Result<PathBuf> {
            let p = sample_file(dir, sub, i, if sub == "model_mask" { "bin" } else { "png" });
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::MissingFrame { frame: i, what, path: p })
            }
        };
        let corrupt = |what: &'static str, path: PathBuf| {
            move |message: String| Error::CorruptFrame {
                frame: i,
                what,
                path,
                message,
            }
        };
        let p = img("depth", "depth image")?;
        let depth = load_depth(&p).map_err(corrupt("depth image", p))?;
        let p = img("depth_mask", "depth mask")?;
        let depth_mask = load_mask(&p).map_err(corrupt("depth mask", p))?;
        let p = img("model_mask", "model mask")?;
        let arr = read_array(&p)?;
        if arr.shape != [k.height, k.width] {
            return Err(corrupt("model mask", p)(format!("shape {:?}", arr.shape)));
        }
        let model_mask = Grid::from_vec(k.width, k.height, arr.data.iter().map(|&v| v as f32).collect())?;
        let color = if with_color {
            let p = img("color", "color image")?;
            Some(load_color(&p).map_err(corrupt("color image", p))?)
        } else {
            None
        };
        let s = CalibrationSample {
            depth,
            q_raw: line.q_raw,
            model_mask,
            depth_mask,
            color,
        };
        s.validate(&k).map_err(|e| e.at_stage(i, "load dataset"))?;
        samples.push(s);
    }
    Ok((samples, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// N-dimensional little-endian array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let a = Self {
            dtype: DType::F64,
            shape,
            data,
        };
        a.check()?;
        Ok(a)
    }

    fn check(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("shape {:?} holds {n} values, got {}", self.shape, self.data.len())));
        }
        Ok(())
    }
}

const ARRAY_MAGIC: &[u8; 4] = b"DARR";

/// Layout: `"DARR"`, version byte (1), element size in bytes (4 or 8),
/// rank as u16, rank u64 dimensions, then the values; all little-endian.
pub fn write_array(path: &Path, a: &Array) -> Result<()> {
    a.check()?;
    let size = match a.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(8 + 8 * a.shape.len() + size * a.data.len());
    out.extend_from_slice(ARRAY_MAGIC);
    out.push(1);
    out.push(size as u8);
    out.extend_from_slice(&(a.shape.len() as u16).to_le_bytes());
    for &d in &a.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &a.data {
        match a.dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    write_atomic(path, &out)
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| parse_err(path, m);
    if bytes.len() < 8 || &bytes[..4] != ARRAY_MAGIC {
        return Err(bad("not an array file"));
    }
    if bytes[4] != 1 {
        return Err(Error::Version {
            found: bytes[4] as u32,
            expected: 1,
        });
    }
    let dtype = match bytes[5] {
        4 => DType::F32,
        8 => DType::F64,
        _ => return Err(bad("unknown element size")),
    };
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows"))?;
    let size = if dtype == DType::F32 { 4 } else { 8 };
    let body = &bytes[header..];
    if Some(body.len()) != n.checked_mul(size) {
        return Err(bad(&format!("expected {n} values, file holds {} bytes", body.len())));
    }
    let data = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Array { dtype, shape, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintConfig {
    pub backend: String,
    /// External backends by name: argument vectors with `{image}`, `{mask}`
    /// and `{output}` placeholders.
    pub external: BTreeMap<String, Vec<String>>,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            backend: "baseline".into(),
            external: BTreeMap::new(),
        }
    }
}

impl InpaintConfig {
    pub fn registry(&self) -> BackendRegistry {
        let mut reg = BackendRegistry::default();
        for (name, command) in &self.external {
            reg.register(Box::new(ExternalBackend {
                name: name.clone(),
                command: command.clone(),
            }));
        }
        reg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Samples drawn uniformly from the clip.
    pub samples: usize,
    pub supersample: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let r = RefineConfig::default();
        Self {
            beta: r.loss.beta,
            lr: r.lr,
            iterations: r.iters,
            samples: 40,
            supersample: r.loss.supersample,
        }
    }
}

impl CalibrationSettings {
    pub fn refine_config(&self, seed: u64) -> RefineConfig {
        let mut r = RefineConfig {
            lr: self.lr,
            iters: self.iterations,
            seed,
            ..RefineConfig::default()
        };
        r.loss.beta = self.beta;
        r.loss.supersample = self.supersample;
        r
    }
}

/// Every pipeline constant; a missing file or key yields the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// meters
    pub voxel_size: f64,
    pub crop: String,
    pub sampling: SamplingThresholds,
    pub calibration: CalibrationSettings,
    pub adapt: AdaptConfig,
    pub inpaint: InpaintConfig,
    /// Write cropped, voxelized point clouds next to the adapted frames.
    pub point_clouds: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            voxel_size: 0.005,
            crop: "in-the-wild".into(),
            sampling: SamplingThresholds::default(),
            calibration: CalibrationSettings::default(),
            adapt: AdaptConfig::default(),
            inpaint: InpaintConfig::default(),
            point_clouds: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn crop_box(&self) -> Result<CropBox> {
        CropBox::preset(&self.crop)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.calibration;
        let positive = self.voxel_size > 0.0
            && c.beta > 0.0
            && c.lr > 0.0
            && c.iterations > 0
            && c.samples > 0
            && c.supersample > 0
            && self.adapt.supersample > 0
            && self.adapt.mask_threshold > 0.0;
        if !positive {
            return Err(Error::config(format!("numeric settings must be positive: {self:?}")));
        }
        self.sampling.validate()?;
        self.crop_box()?;
        self.inpaint.registry().get(&self.inpaint.backend)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn rig_round_trip() {
        let rig = Rig {
            exoskeleton: synth::dual_arm(synth::EXO_PALETTE),
            robot: synth::dual_arm(synth::ROBOT_PALETTE),
            mapping: vec![synth::identity_mapping(synth::ARM_DOF); 2],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rig.toml");
        save_rig(&rig, &p).unwrap();
        assert_eq!(load_rig(&p).unwrap(), rig);
    }

    #[test]
    fn rotated_origins_survive_approximately() {
        let mut rig = Rig {
            exoskeleton: synth::dual_arm(synth::EXO_PALETTE),
            robot: synth::dual_arm(synth::ROBOT_PALETTE),
            mapping: vec![synth::identity_mapping(synth::ARM_DOF); 2],
        };
        let rot = Pose::from_axis_angle(&Vector3::new(0.3, 0.4, 0.5).normalize(), 0.7, Vector3::new(0.1, 0.0, 0.0));
        rig.robot.arms[0].mount = rot;
        let back = RigFile::from_rig(&rig).to_rig().unwrap();
        let m = back.robot.arms[0].mount;
        assert!((m.rotation - rot.rotation).abs().max() < 1e-14);
    }

    #[test]
    fn missing_mapping_is_identity() {
        let text = r#"
[[exoskeleton.arms]]
name = "a"
[[exoskeleton.arms.joints]]
name = "j"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
limits = [-1.0, 1.0]
geometry = [{ type = "sphere", radius = 0.05 }]

[[robot.arms]]
name = "a"
[[robot.arms.joints]]
name = "j"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
limits = [-1.0, 1.0]
geometry = [{ type = "capsule", radius = 0.05, a = [0.0, 0.0, 0.0], b = [0.0, 0.0, 0.1], color = [1, 2, 3] }]
"#;
        let rig = toml::from_str::<RigFile>(text).unwrap().to_rig().unwrap();
        assert_eq!(rig.mapping, vec![vec![JointMapEntry::identity(0)]]);
        assert_eq!(rig.robot.arms[0].chain.link_geometry[0][0].color, [1, 2, 3]);
    }

    #[test]
    fn calibration_round_trip() {
        let c = Calibration {
            camera_from_base: synth::camera_from_base(),
            q_calib: vec![vec![0.1, -0.2 / 3.0], vec![1e-300]],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        save_calibration(&c, None, &p).unwrap();
        let (back, m) = load_calibration(&p).unwrap();
        assert_eq!(back, c);
        assert!(m.is_none());
    }

    #[test]
    fn array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let a = Array::f64(vec![2, 3], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300, 0.0, -0.0]).unwrap();
        write_array(&p, &a).unwrap();
        assert_eq!(read_array(&p).unwrap(), a);
        assert!(Array::f64(vec![2, 2], vec![1.0]).is_err());
        fs::write(&p, b"DARR\x01\x08\x01\x00").unwrap();
        assert!(read_array(&p).is_err());
    }

    #[test]
    fn config_defaults() {
        let c: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.voxel_size, 0.005);
        assert_eq!(c.calibration.beta, 5.0);
        assert_eq!(c.calibration.lr, 1e-4);
        assert_eq!(c.calibration.iterations, 1000);
        assert_eq!(c.sampling.rotation, std::f64::consts::PI / 24.0);
        c.validate().unwrap();
        let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_rejects_bad_values() {
        let c: PipelineConfig = toml::from_str("voxel_size = -1.0").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c: PipelineConfig = toml::from_str("[inpaint]\nbackend = \"nope\"").unwrap();
        assert!(c.validate().is_err());
        assert!(toml::from_str::<PipelineConfig>("unknown = 1").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let k = synth::intrinsics(32, 18);
        let scene = synth::calibration_scene(3, 2, &k, 2, Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&scene.samples, &k, dir.path()).unwrap();
        let (back, k2) = load_dataset(dir.path()).unwrap();
        assert_eq!(k2, k);
        assert_eq!(back, scene.samples);
    }
}
