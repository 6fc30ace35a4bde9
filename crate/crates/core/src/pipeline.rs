//! End-to-end conversion: load, calibrate joints, adapt, resample,
//! preprocess point clouds, save.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::adaptors::{adapt_demonstration, Rig};
use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::geometry::{crop, unproject, voxel_downsample, CropBox, PointCloud};
use crate::io::{load_calibration, load_rig, save_rig, write_array, Array, MetricsSummary, PipelineConfig, DType};
use crate::recording::{load_recording, save_recording, DemoRecording, Frame};
use crate::trajectory::{resample_indices, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub name: &'static str,
    pub seconds: f64,
    pub frames: usize,
}

/// Machine-readable summary of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub skipped_stages: Vec<&'static str>,
    pub frames_input: usize,
    pub frames_adapted: usize,
    pub frames_resampled: usize,
    pub retained_indices: Vec<usize>,
    pub calibration_metrics: Option<MetricsSummary>,
    /// Largest per-pixel change between input and adapted depth where both
    /// are valid, millimeters.
    pub max_depth_delta_mm: u16,
    pub point_cloud_points: Vec<usize>,
}

pub struct PipelineInputs<'a> {
    pub demo: &'a Path,
    pub calibration: &'a Path,
    /// Rig file; defaults to the one named by the recording's metadata.
    pub rig: Option<&'a Path>,
    pub out: &'a Path,
}

struct Timer {
    stages: Vec<StageReport>,
}

impl Timer {
    fn run<T>(&mut self, name: &'static str, frames: impl Fn(&T) -> usize, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f()?;
        let frames = frames(&out);
        self.stages.push(StageReport {
            name,
            seconds: t0.elapsed().as_secs_f64(),
            frames,
        });
        log::info!("{name}: {frames} frames in {:.2}s", t0.elapsed().as_secs_f64());
        Ok(out)
    }
}

fn max_depth_delta(input: &DemoRecording, adapted: &DemoRecording) -> u16 {
    input
        .frames
        .iter()
        .zip(&adapted.frames)
        .flat_map(|(a, b)| a.depth.data.iter().zip(&b.depth.data))
        .filter(|(&a, &b)| a > 0 && b > 0)
        .map(|(&a, &b)| a.abs_diff(b))
        .max()
        .unwrap_or(0)
}

/// Keeps the frames at `indices`, renumbered from 0.
pub fn select_frames(rec: &DemoRecording, indices: &[usize]) -> Result<DemoRecording> {
    let frames = indices
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            let mut f: Frame = rec
                .frames
                .get(old)
                .cloned()
                .ok_or_else(|| Error::dim(format!("frame {old} of {}", rec.frames.len())))?;
            f.joints.frame = new;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let actions = rec
        .actions
        .as_ref()
        .map(|a| Trajectory {
            records: indices.iter().map(|&i| a.records[i].clone()).collect(),
        });
    Ok(DemoRecording {
        frames,
        actions,
        ..rec.clone()
    })
}

/// Colored, cropped, voxelized cloud of one frame; attributes are RGB in [0, 1].
pub fn frame_cloud(frame: &Frame, rec: &DemoRecording, bbox: &CropBox, voxel: f64) -> Result<PointCloud> {
    let org = unproject(&frame.depth, &rec.intrinsics)?;
    let mut points = Vec::new();
    let mut attrs = Vec::new();
    for (i, (p, &ok)) in org.points.iter().zip(&org.valid).enumerate() {
        if ok {
            points.push(*p);
            attrs.extend(frame.color.data[i].iter().map(|&c| c as f64 / 255.0));
        }
    }
    let pc = PointCloud::with_attributes(points, 3, attrs)?;
    voxel_downsample(&crop(&pc, bbox), voxel)
}

fn write_clouds(rec: &DemoRecording, cfg: &PipelineConfig, dir: &Path) -> Result<Vec<usize>> {
    let bbox = cfg.crop_box()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    rec.frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let pc = frame_cloud(f, rec, &bbox, cfg.voxel_size).map_err(|e| e.at_stage(i, "point cloud"))?;
            let mut data = Vec::with_capacity(pc.len() * 6);
            for (j, p) in pc.points.iter().enumerate() {
                data.extend(p.iter());
                data.extend(pc.attributes(j));
            }
            write_array(
                &dir.join(format!("{i:06}.bin")),
                &Array {
                    dtype: DType::F32,
                    shape: vec![pc.len(), 6],
                    data,
                },
            )?;
            Ok(pc.len())
        })
        .collect()
}

fn staging_dir(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    out.with_file_name(name)
}

/// Runs the full conversion. Output goes to a staging directory that is
/// renamed to `out` on success and removed on failure.
pub fn run_pipeline(cfg: &PipelineConfig, inputs: &PipelineInputs<'_>) -> Result<PipelineReport> {
    cfg.validate()?;
    if inputs.out.exists() && fs::read_dir(inputs.out).map_err(|e| Error::io(inputs.out, e))?.next().is_some() {
        return Err(Error::config(format!("output directory {} is not empty", inputs.out.display())));
    }
    let stage = staging_dir(inputs.out);
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    let result = run_into(cfg, inputs, &stage);
    match result {
        Ok(report) => {
            if inputs.out.exists() {
                fs::remove_dir(inputs.out).map_err(|e| Error::io(inputs.out, e))?;
            }
            fs::rename(&stage, inputs.out).map_err(|e| Error::io(inputs.out, e))?;
            Ok(report)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&stage);
            Err(e)
        }
    }
}

fn run_into(cfg: &PipelineConfig, inputs: &PipelineInputs<'_>, stage: &Path) -> Result<PipelineReport> {
    let mut timer = Timer { stages: Vec::new() };
    let rec = timer.run("load", DemoRecording::len, || load_recording(inputs.demo))?;
    let rig_path = match (inputs.rig, &rec.rig) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => inputs.demo.join(r),
        (None, None) => return Err(Error::config("no rig file given and the recording names none")),
    };
    let rig: Rig = load_rig(&rig_path)?;
    let (calib, metrics): (Calibration, _) = load_calibration(inputs.calibration)?;

    timer.run("joint calibration", |n: &usize| *n, || {
        for (i, f) in rec.frames.iter().enumerate() {
            calib
                .joint_values(&rig.exoskeleton, &f.joints.q)
                .map_err(|e| e.at_stage(i, "joint calibration"))?;
        }
        Ok(rec.len())
    })?;

    let backends = cfg.inpaint.registry();
    let backend = backends.get(&cfg.inpaint.backend)?;
    let adapted = timer.run("adapt", DemoRecording::len, || {
        adapt_demonstration(&rec, &calib, &rig, &cfg.adapt, backend)
    })?;
    let delta = max_depth_delta(&rec, &adapted);

    let indices = timer.run("resample", Vec::len, || match &adapted.actions {
        Some(a) if !a.is_empty() => resample_indices(a, &cfg.sampling),
        _ => Ok(Vec::new()),
    })?;
    let kept = select_frames(&adapted, &indices)?;

    let mut skipped = Vec::new();
    let points = if cfg.point_clouds {
        timer.run("point clouds", Vec::len, || write_clouds(&kept, cfg, &stage.join("clouds")))?
    } else {
        skipped.push("point clouds");
        Vec::new()
    };

    timer.run("save", |_: &()| kept.len(), || {
        let mut out = kept.clone();
        out.rig = Some("rig.toml".into());
        save_recording(&out, stage)?;
        save_rig(&rig, &stage.join("rig.toml"))
    })?;

    Ok(PipelineReport {
        seed: cfg.seed,
        stages: timer.stages,
        skipped_stages: skipped,
        frames_input: rec.len(),
        frames_adapted: adapted.len(),
        frames_resampled: kept.len(),
        retained_indices: indices,
        calibration_metrics: metrics,
        max_depth_delta_mm: delta,
        point_cloud_points: points,
    })
}
