//! Operation-space, depth and image adaptors: turn an exoskeleton
//! recording into a robot-domain recording.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::process::Command;

use rayon::prelude::*;

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, ColorImage, DepthImage, Grid};
use crate::kinematics::{forward_kinematics_values, map_exo_to_robot, JointMapEntry, JointState, Platform, Pose};
use crate::raster::{render, render_robot_overlay, Overlay, RenderOutput, SceneModel};
use crate::recording::{load_color, save_color, save_mask, DemoRecording, Domain, Frame, JointRecord};
use crate::trajectory::{ActionRecord, ArmAction, Trajectory};

pub const MASK_THRESHOLD: f64 = 0.5;
pub const DEFAULT_DILATION: usize = 2;

pub type ReferenceDepth = DepthImage;
pub type CombinedMask = BinaryMask;

pub fn to_camera_frame(pose_base: &Pose, camera_from_base: &Pose) -> Pose {
    camera_from_base.compose(pose_base)
}

/// First-frame depth where valid and unmasked, empty-workspace depth elsewhere.
pub fn build_reference_depth(
    empty_ws: &DepthImage,
    first_frame: &DepthImage,
    first_frame_mask: &CombinedMask,
) -> Result<ReferenceDepth> {
    empty_ws.ensure_same_shape(first_frame, "first-frame depth")?;
    empty_ws.ensure_same_shape(first_frame_mask, "first-frame mask")?;
    Ok(Grid::from_fn(empty_ws.width, empty_ws.height, |u, v| {
        let d = *first_frame.get(u, v);
        if d > 0 && !first_frame_mask.get(u, v) {
            d
        } else {
            *empty_ws.get(u, v)
        }
    }))
}

pub fn inpaint_depth(d: &DepthImage, mask: &CombinedMask, reference: &ReferenceDepth) -> Result<DepthImage> {
    d.ensure_same_shape(mask, "mask")?;
    d.ensure_same_shape(reference, "reference depth")?;
    let mut out = d.clone();
    for ((o, &m), &r) in out.data.iter_mut().zip(&mask.data).zip(&reference.data) {
        if m {
            *o = r;
        }
    }
    Ok(out)
}

fn meters_to_mm(z: f64) -> u16 {
    (z * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
}

/// Z-min compositing of the rendered robot over the scene depth.
pub fn merge_depth(scene: &DepthImage, robot: &RenderOutput) -> Result<DepthImage> {
    scene.ensure_same_shape(&robot.mask, "robot render")?;
    let mut out = scene.clone();
    for ((o, &m), &z) in out.data.iter_mut().zip(&robot.mask.data).zip(&robot.depth.data) {
        if m >= MASK_THRESHOLD && z.is_finite() {
            let r = meters_to_mm(z);
            *o = if *o > 0 { (*o).min(r) } else { r };
        }
    }
    Ok(out)
}

/// Threshold-and-union followed by a square dilation of `radius` pixels.
pub fn combine_masks(
    exo_mask: &Grid<f64>,
    human_mask: Option<&BinaryMask>,
    threshold: f64,
    radius: usize,
) -> Result<CombinedMask> {
    if let Some(h) = human_mask {
        exo_mask.ensure_same_shape(h, "human mask")?;
    }
    let union = Grid::from_fn(exo_mask.width, exo_mask.height, |u, v| {
        *exo_mask.get(u, v) >= threshold || human_mask.is_some_and(|h| *h.get(u, v))
    });
    Ok(dilate(&union, radius))
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    // separable: rows then columns
    let mut rows = Grid::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            if *mask.get(u, v) {
                for x in u.saturating_sub(radius)..=(u + radius).min(w - 1) {
                    *rows.get_mut(x, v) = true;
                }
            }
        }
    }
    let mut out = Grid::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            if *rows.get(u, v) {
                for y in v.saturating_sub(radius)..=(v + radius).min(h - 1) {
                    *out.get_mut(u, y) = true;
                }
            }
        }
    }
    out
}

/// `alpha * robot + (1 - alpha) * inpainted`, rounded half up.
pub fn composite_image(inpainted: &ColorImage, overlay: &Overlay) -> Result<ColorImage> {
    inpainted.ensure_same_shape(&overlay.color, "robot overlay")?;
    inpainted.ensure_same_shape(&overlay.mask, "robot overlay mask")?;
    let mut out = inpainted.clone();
    for ((o, r), &a) in out.data.iter_mut().zip(&overlay.color.data).zip(&overlay.mask.data) {
        if a <= 0.0 {
            continue;
        }
        for c in 0..3 {
            let v = a * r[c] as f64 + (1.0 - a) * o[c] as f64;
            o[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Fills masked pixels of every frame of a clip. Unmasked pixels of the
/// result are restored from the input afterwards, whatever the backend does.
pub trait InpaintBackend: Send + Sync {
    fn name(&self) -> &str;

    fn inpaint_clip(&self, frames: &[ColorImage], masks: &[CombinedMask]) -> Result<Vec<ColorImage>>;
}

/// Reference-frame fill: each masked pixel takes the color of the first
/// frame of the clip where it is unmasked, otherwise the color of the
/// nearest (4-connected) filled pixel of the same frame.
#[derive(Debug, Default, Clone, Copy)]
pub struct BaselineBackend;

impl InpaintBackend for BaselineBackend {
    fn name(&self) -> &str {
        "baseline"
    }

    fn inpaint_clip(&self, frames: &[ColorImage], masks: &[CombinedMask]) -> Result<Vec<ColorImage>> {
        let Some(first) = frames.first() else {
            return Ok(Vec::new());
        };
        let n = first.len();
        let mut reference: Vec<Option<[u8; 3]>> = vec![None; n];
        for (img, mask) in frames.iter().zip(masks) {
            for ((r, &c), &m) in reference.iter_mut().zip(&img.data).zip(&mask.data) {
                if r.is_none() && !m {
                    *r = Some(c);
                }
            }
        }
        Ok(frames
            .par_iter()
            .zip(masks)
            .map(|(img, mask)| {
                let mut out = img.clone();
                let mut filled: Vec<bool> = mask.data.iter().map(|&m| !m).collect();
                for (i, &m) in mask.data.iter().enumerate() {
                    if let (true, Some(c)) = (m, reference[i]) {
                        out.data[i] = c;
                        filled[i] = true;
                    }
                }
                diffuse_nearest(&mut out, &mut filled);
                out
            })
            .collect())
    }
}

/// Multi-source BFS from filled pixels; each unfilled pixel copies the
/// pixel it was reached from. A frame with no filled pixel is left as is.
fn diffuse_nearest(img: &mut ColorImage, filled: &mut [bool]) {
    let (w, h) = (img.width, img.height);
    let mut queue: VecDeque<usize> = (0..filled.len()).filter(|&i| filled[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (u, v) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !filled[j] {
                filled[j] = true;
                img.data[j] = img.data[i];
                queue.push_back(j);
            }
        };
        if u > 0 {
            visit(i - 1);
        }
        if u + 1 < w {
            visit(i + 1);
        }
        if v > 0 {
            visit(i - w);
        }
        if v + 1 < h {
            visit(i + w);
        }
    }
}

/// Runs an external program once per frame. `{image}`, `{mask}` and
/// `{output}` in the arguments are replaced by file paths; the program must
/// exit 0 and write an RGB PNG of the input size to `{output}`.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub name: String,
    pub command: Vec<String>,
}

impl ExternalBackend {
    fn run_frame(&self, dir: &Path, img: &ColorImage, mask: &CombinedMask) -> Result<ColorImage> {
        let (image, mask_path, output) = (dir.join("image.png"), dir.join("mask.png"), dir.join("output.png"));
        save_color(img, &image)?;
        save_mask(mask, &mask_path)?;
        let args: Vec<String> = self
            .command
            .iter()
            .map(|a| {
                a.replace("{image}", &image.to_string_lossy())
                    .replace("{mask}", &mask_path.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
            })
            .collect();
        let (prog, rest) = args
            .split_first()
            .ok_or_else(|| Error::config(format!("backend '{}' has an empty command", self.name)))?;
        let status = Command::new(prog)
            .args(rest)
            .status()
            .map_err(|e| Error::io(prog, e))?;
        if !status.success() {
            return Err(Error::data(format!("backend '{}' exited with {status}", self.name)));
        }
        let out = load_color(&output).map_err(|m| Error::data(format!("backend '{}' output: {m}", self.name)))?;
        out.ensure_same_shape(img, "backend output")?;
        Ok(out)
    }
}

impl InpaintBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn inpaint_clip(&self, frames: &[ColorImage], masks: &[CombinedMask]) -> Result<Vec<ColorImage>> {
        frames
            .par_iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (img, mask))| {
                let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
                self.run_frame(dir.path(), img, mask).map_err(|e| e.at_stage(i, "inpaint"))
            })
            .collect()
    }
}

/// Named inpainting backends; always holds `baseline`.
pub struct BackendRegistry {
    backends: BTreeMap<String, Box<dyn InpaintBackend>>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self {
            backends: BTreeMap::new(),
        };
        r.register(Box::new(BaselineBackend));
        r
    }
}

impl BackendRegistry {
    pub fn register(&mut self, backend: Box<dyn InpaintBackend>) {
        self.backends.insert(backend.name().to_string(), backend);
    }

    pub fn get(&self, name: &str) -> Result<&dyn InpaintBackend> {
        self.backends.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::config(format!(
                "unknown inpainting backend '{name}' (registered: {})",
                self.backends.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

/// Inpaints a whole clip and restores every unmasked pixel.
pub fn inpaint_clip(frames: &[ColorImage], masks: &[CombinedMask], backend: &dyn InpaintBackend) -> Result<Vec<ColorImage>> {
    if frames.len() != masks.len() {
        return Err(Error::dim(format!("{} frames, {} masks", frames.len(), masks.len())));
    }
    for (i, (f, m)) in frames.iter().zip(masks).enumerate() {
        f.ensure_same_shape(m, "mask").map_err(|e| e.at_stage(i, "inpaint"))?;
    }
    let mut out = backend.inpaint_clip(frames, masks)?;
    if out.len() != frames.len() {
        return Err(Error::data(format!(
            "backend '{}' returned {} frames for {}",
            backend.name(),
            out.len(),
            frames.len()
        )));
    }
    for (i, ((o, f), m)) in out.iter_mut().zip(frames).zip(masks).enumerate() {
        o.ensure_same_shape(f, "backend output").map_err(|e| e.at_stage(i, "inpaint"))?;
        for ((po, &pf), &pm) in o.data.iter_mut().zip(&f.data).zip(&m.data) {
            if !pm {
                *po = pf;
            }
        }
    }
    Ok(out)
}

pub fn inpaint_image(img: &ColorImage, mask: &CombinedMask, backend: &dyn InpaintBackend) -> Result<ColorImage> {
    Ok(inpaint_clip(std::slice::from_ref(img), std::slice::from_ref(mask), backend)?.remove(0))
}

/// Exoskeleton and robot models plus the per-arm joint mapping between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub exoskeleton: Platform,
    pub robot: Platform,
    pub mapping: Vec<Vec<JointMapEntry>>,
}

impl Rig {
    pub fn validate(&self) -> Result<()> {
        self.exoskeleton.validate()?;
        self.robot.validate()?;
        let arms = self.exoskeleton.arms.len();
        if self.robot.arms.len() != arms || self.mapping.len() != arms {
            return Err(Error::config(format!(
                "rig has {arms} exoskeleton arms, {} robot arms, {} joint mappings",
                self.robot.arms.len(),
                self.mapping.len()
            )));
        }
        for (m, arm) in self.mapping.iter().zip(&self.robot.arms) {
            if m.len() != arm.chain.dof() {
                return Err(Error::config(format!(
                    "mapping for arm '{}' covers {} of {} joints",
                    arm.name,
                    m.len(),
                    arm.chain.dof()
                )));
            }
        }
        Ok(())
    }

    /// Robot joint values (per arm) for calibrated exoskeleton joint values.
    pub fn robot_joints(&self, q_exo: &[Vec<f64>], gripper: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.robot
            .arms
            .iter()
            .zip(&self.mapping)
            .zip(q_exo.iter().zip(gripper))
            .map(|((arm, map), (q, &g))| {
                let state = JointState {
                    q: q.clone(),
                    gripper_width: g,
                    timestamp: 0.0,
                };
                Ok(map_exo_to_robot(&state, map, &arm.chain)?.q)
            })
            .collect()
    }
}

/// End-effector actions of the robot in the camera frame.
pub fn camera_frame_actions(
    robot: &Platform,
    camera_from_base: &Pose,
    q: &[Vec<f64>],
    gripper: &[f64],
    timestamp: f64,
) -> Result<ActionRecord> {
    let arms = robot
        .arms
        .iter()
        .zip(q.iter().zip(gripper))
        .map(|(arm, (qa, &g))| {
            let ee = arm.mount.compose(&forward_kinematics_values(&arm.chain, qa)?.end_effector);
            Ok(ArmAction::from_pose(&to_camera_frame(&ee, camera_from_base), g.max(0.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActionRecord { timestamp, arms })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub supersample: usize,
    pub mask_threshold: f64,
    pub dilation: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            supersample: 2,
            mask_threshold: MASK_THRESHOLD,
            dilation: DEFAULT_DILATION,
        }
    }
}

struct FrameRender {
    mask: CombinedMask,
    overlay: Overlay,
    robot_q: Vec<Vec<f64>>,
    action: ActionRecord,
}

/// Converts an exoskeleton recording into a robot recording of the same
/// length and layout.
pub fn adapt_demonstration(
    rec: &DemoRecording,
    calib: &Calibration,
    rig: &Rig,
    cfg: &AdaptConfig,
    backend: &dyn InpaintBackend,
) -> Result<DemoRecording> {
    rig.validate()?;
    rec.validate()?;
    if rec.domain != Domain::Exoskeleton {
        return Err(Error::data("adaptation expects an exoskeleton recording"));
    }
    let k = rec.intrinsics;
    let exo_scene = calib.scene(&rig.exoskeleton);
    let robot_scene = SceneModel {
        platform: rig.robot.clone(),
        camera_from_base: calib.camera_from_base,
    };

    let renders: Vec<FrameRender> = rec
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let q_exo = calib
                .joint_values(&rig.exoskeleton, &f.joints.q)
                .map_err(|e| e.at_stage(i, "joint calibration"))?;
            let robot_q = rig
                .robot_joints(&q_exo, &f.joints.gripper)
                .map_err(|e| e.at_stage(i, "joint mapping"))?;
            let exo = render(&exo_scene, &q_exo, &k, cfg.supersample).map_err(|e| e.at_stage(i, "render exoskeleton"))?;
            let overlay = render_robot_overlay(&robot_scene, &robot_q, &k, cfg.supersample)
                .map_err(|e| e.at_stage(i, "render robot"))?;
            let mask = combine_masks(&exo.mask, f.human_mask.as_ref(), cfg.mask_threshold, cfg.dilation)
                .map_err(|e| e.at_stage(i, "combine masks"))?;
            let action = camera_frame_actions(&rig.robot, &calib.camera_from_base, &robot_q, &f.joints.gripper, f.joints.timestamp)
                .map_err(|e| e.at_stage(i, "actions"))?;
            Ok(FrameRender {
                mask,
                overlay,
                robot_q,
                action,
            })
        })
        .collect::<Result<_>>()?;

    let colors: Vec<ColorImage> = rec.frames.iter().map(|f| f.color.clone()).collect();
    let masks: Vec<CombinedMask> = renders.iter().map(|r| r.mask.clone()).collect();
    let inpainted = inpaint_clip(&colors, &masks, backend)?;

    let reference = match rec.frames.first() {
        Some(f0) => {
            let empty = rec
                .empty_workspace
                .clone()
                .unwrap_or_else(|| Grid::filled(k.width, k.height, 0));
            Some(build_reference_depth(&empty, &f0.depth, &masks[0]).map_err(|e| e.at_stage(0, "reference depth"))?)
        }
        None => None,
    };

    let frames: Vec<Frame> = rec
        .frames
        .par_iter()
        .zip(renders.par_iter())
        .zip(inpainted.into_par_iter())
        .enumerate()
        .map(|(i, ((f, r), img))| {
            let reference = reference.as_ref().expect("non-empty recording has a reference");
            let depth = inpaint_depth(&f.depth, &r.mask, reference).map_err(|e| e.at_stage(i, "inpaint depth"))?;
            let robot = RenderOutput {
                mask: r.overlay.mask.clone(),
                depth: r.overlay.depth.clone(),
            };
            let depth = merge_depth(&depth, &robot).map_err(|e| e.at_stage(i, "merge depth"))?;
            let color = composite_image(&img, &r.overlay).map_err(|e| e.at_stage(i, "composite"))?;
            Ok(Frame {
                color,
                depth,
                human_mask: None,
                joints: JointRecord {
                    frame: i,
                    timestamp: f.joints.timestamp,
                    q: r.robot_q.clone(),
                    gripper: r.action.arms.iter().map(|a| a.gripper_width).collect(),
                },
            })
        })
        .collect::<Result<_>>()?;

    let actions = Trajectory::new(renders.into_iter().map(|r| r.action).collect())?;
    Ok(DemoRecording {
        domain: Domain::Robot,
        intrinsics: k,
        rig: rec.rig.clone(),
        frames,
        empty_workspace: rec.empty_workspace.clone(),
        actions: Some(actions),
    })
}
