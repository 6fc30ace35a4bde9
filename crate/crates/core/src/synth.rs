//! Synthetic rigs, calibration scenes and demonstrations for tests and the
//! `synth` command.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::adaptors::{composite_image, merge_depth, Rig};
use crate::calibration::{Calibration, CalibrationSample};
use crate::error::Result;
use crate::geometry::{BinaryMask, CameraIntrinsics, ColorImage, DepthImage, Grid};
use crate::kinematics::{ArmModel, JointKind, JointMapEntry, JointSpec, KinematicChain, Platform, Pose};
use crate::raster::{render, render_robot_overlay, PrimitiveShape, RenderOutput};
use crate::recording::{DemoRecording, Domain, Frame, JointRecord};

pub const ARM_DOF: usize = 7;

/// Joint-space center of the synthetic play motion.
pub const REST_POSE: [f64; ARM_DOF] = [0.0, 0.8, 0.0, 1.2, 0.0, 0.3, 0.0];

fn cap(r: f64, a: [f64; 3], b: [f64; 3]) -> PrimitiveShape {
    PrimitiveShape::capsule(r, Vector3::from(a), Vector3::from(b))
}

fn cuboid(h: [f64; 3], at: [f64; 3]) -> PrimitiveShape {
    PrimitiveShape::cuboid(h, Pose::from_translation(Vector3::from(at)))
}

/// Representative 7-DoF arm: alternating roll/pitch joints, capsule links,
/// box gripper. Offsets on the roll links keep every joint observable.
pub fn arm_chain(palette: [[u8; 3]; 3]) -> KinematicChain {
    let lim = |a: f64| [-a, a];
    let t = |x: f64, y: f64, z: f64| Pose::from_translation(Vector3::new(x, y, z));
    let (z, y) = (Vector3::z(), Vector3::y());
    let joints = vec![
        JointSpec::revolute("shoulder_yaw", z, t(0.0, 0.0, 0.10), lim(2.8)),
        JointSpec::revolute("shoulder_pitch", y, t(0.0, 0.0, 0.05), lim(2.2)),
        JointSpec::revolute("upper_roll", z, t(0.0, 0.0, 0.28), lim(2.8)),
        JointSpec::revolute("elbow", y, t(0.0, 0.0, 0.03), lim(2.6)),
        JointSpec::revolute("forearm_roll", z, t(0.0, 0.0, 0.24), lim(2.8)),
        JointSpec::revolute("wrist_pitch", y, t(0.0, 0.0, 0.03), lim(2.6)),
        JointSpec::revolute("wrist_roll", z, t(0.0, 0.0, 0.08), lim(2.8)),
    ];
    let [body, joint, hand] = palette;
    let geometry = vec![
        vec![cap(0.05, [0.0, 0.0, -0.10], [0.0, 0.0, 0.04]).with_color(body)],
        vec![cap(0.045, [0.0, 0.0, 0.0], [0.0, 0.0, 0.27]).with_color(body)],
        vec![
            cuboid([0.035, 0.03, 0.03], [0.045, 0.0, 0.0]).with_color(joint),
            cap(0.03, [0.0, 0.0, 0.0], [-0.05, 0.0, 0.0]).with_color(joint),
        ],
        vec![cap(0.04, [0.0, 0.0, 0.0], [0.0, 0.0, 0.23]).with_color(body)],
        vec![cuboid([0.03, 0.025, 0.025], [0.04, 0.0, 0.0]).with_color(joint)],
        vec![cap(0.035, [0.0, 0.0, 0.0], [0.0, 0.0, 0.07]).with_color(body)],
        vec![
            cuboid([0.075, 0.025, 0.025], [0.0, 0.0, 0.03]).with_color(hand),
            cuboid([0.012, 0.018, 0.04], [0.055, 0.0, 0.09]).with_color(hand),
            cuboid([0.012, 0.018, 0.04], [-0.055, 0.0, 0.09]).with_color(hand),
        ],
    ];
    // Tool center sits midway between the fingers.
    KinematicChain::new(joints, geometry, t(0.0, 0.0, 0.09)).expect("fixture chain is valid")
}

pub const EXO_PALETTE: [[u8; 3]; 3] = [[170, 170, 175], [60, 60, 65], [90, 90, 95]];
pub const ROBOT_PALETTE: [[u8; 3]; 3] = [[235, 235, 235], [40, 90, 200], [50, 50, 50]];

/// Two arms mounted 0.5 m apart on a shared base (x forward, y left, z up).
pub fn dual_arm(palette: [[u8; 3]; 3]) -> Platform {
    let arm = arm_chain(palette);
    Platform {
        arms: vec![
            ArmModel {
                name: "left".into(),
                chain: arm.clone(),
                mount: Pose::from_translation(Vector3::new(0.0, 0.25, 0.0)),
            },
            ArmModel {
                name: "right".into(),
                chain: arm,
                mount: Pose::from_translation(Vector3::new(0.0, -0.25, 0.0)),
            },
        ],
    }
}

pub fn identity_mapping(dof: usize) -> Vec<JointMapEntry> {
    (0..dof).map(JointMapEntry::identity).collect()
}

/// Camera-from-world pose of a camera at `eye` looking at `target`, with
/// image "up" toward `+z`.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let fwd = (target - eye).normalize();
    let right = fwd.cross(&Vector3::z()).normalize();
    let down = fwd.cross(&right);
    let world_from_camera = Pose {
        rotation: Matrix3::from_columns(&[right, down, fwd]),
        translation: eye,
    };
    world_from_camera.inverse()
}

/// Global camera behind and above the base, looking over the arms.
pub fn camera_from_base() -> Pose {
    look_at(Vector3::new(-0.35, 0.0, 0.95), Vector3::new(0.5, 0.0, 0.15))
}

/// 640x360 sensor intrinsics scaled to `width x height`.
pub fn intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    let full = CameraIntrinsics {
        fx: 460.0,
        fy: 460.0,
        cx: 319.5,
        cy: 179.5,
        width: 640,
        height: 360,
    };
    full.resized(width, height)
}

/// Depth of the base plane `z = 0` seen by the camera, meters (`inf` if missed).
pub fn ground_depth(k: &CameraIntrinsics, camera_from_base: &Pose) -> Grid<f64> {
    let base_from_camera = camera_from_base.inverse();
    let normal = base_from_camera.rotation.transpose() * Vector3::z();
    let origin_h = base_from_camera.translation.z;
    Grid::from_fn(k.width, k.height, |u, v| {
        let d = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
        let denom = normal.dot(&d);
        let t = -origin_h / denom;
        if denom.abs() > 1e-12 && t > 0.0 { t } else { f64::INFINITY }
    })
}

pub fn to_depth_mm(z: f64) -> u16 {
    if z.is_finite() && z > 0.0 {
        (z * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
    } else {
        0
    }
}

/// Smooth joint-space play motion around [`REST_POSE`], `frames` long.
pub fn play_motion(rng: &mut impl Rng, frames: usize, arms: usize, amplitude: f64) -> Vec<Vec<Vec<f64>>> {
    let waves: Vec<Vec<[f64; 3]>> = (0..arms)
        .map(|_| {
            (0..ARM_DOF)
                .map(|_| {
                    [
                        rng.random_range(0.5..1.0) * amplitude,
                        rng.random_range(1.0..3.0),
                        rng.random_range(0.0..2.0 * PI),
                    ]
                })
                .collect()
        })
        .collect();
    (0..frames)
        .map(|f| {
            let s = f as f64 / frames.max(1) as f64;
            waves
                .iter()
                .map(|arm| {
                    arm.iter()
                        .zip(REST_POSE)
                        .map(|(w, rest)| rest + w[0] * (2.0 * PI * w[1] * s + w[2]).sin())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Applies `R(axis, angle)` to a pose's rotation in place.
fn rotate(pose: &Pose, axis: &Vector3<f64>, angle: f64) -> Pose {
    let r = Pose::from_axis_angle(axis, angle, Vector3::zeros());
    Pose {
        rotation: r.rotation * pose.rotation,
        translation: pose.translation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub translation: f64,
    pub rotation_deg: f64,
    pub joint_deg: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            translation: 0.020,
            rotation_deg: 2.0,
            joint_deg: 2.0,
        }
    }
}

/// Ground truth, perturbed initialization and rendered annotations.
#[derive(Debug, Clone)]
pub struct CalibrationScene {
    pub platform: Platform,
    pub k: CameraIntrinsics,
    pub truth: Calibration,
    pub init: Calibration,
    pub samples: Vec<CalibrationSample>,
}

/// Annotates one frame from a ground-truth render: soft model mask, depth
/// mask on fully covered pixels, depth from the render over the ground plane.
pub fn annotate(render: &RenderOutput, ground: &Grid<f64>, q_raw: Vec<Vec<f64>>) -> CalibrationSample {
    let depth_mask = render.mask.map(|&m| m >= 1.0);
    let depth = Grid::from_fn(render.mask.width, render.mask.height, |u, v| {
        if *render.mask.get(u, v) >= 0.5 {
            to_depth_mm(*render.depth.get(u, v))
        } else {
            to_depth_mm(*ground.get(u, v))
        }
    });
    CalibrationSample {
        depth,
        q_raw,
        model_mask: render.mask.map(|&m| m as f32),
        depth_mask,
        color: None,
    }
}

pub fn calibration_scene(
    seed: u64,
    n_samples: usize,
    k: &CameraIntrinsics,
    supersample: usize,
    perturb: Perturbation,
) -> Result<CalibrationScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let platform = dual_arm(EXO_PALETTE);
    let arms = platform.arms.len();

    // encoder zero positions as they truly are
    let zero: Vec<Vec<f64>> = (0..arms)
        .map(|_| (0..ARM_DOF).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    let truth = Calibration {
        camera_from_base: camera_from_base(),
        q_calib: zero,
    };

    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let axis: [f64; 3] = UnitSphere.sample(&mut rng);
    let mut init_pose = rotate(
        &truth.camera_from_base,
        &Vector3::from(axis),
        perturb.rotation_deg.to_radians(),
    );
    init_pose.translation += Vector3::from(dir) * perturb.translation;
    let init = Calibration {
        camera_from_base: init_pose,
        q_calib: truth
            .q_calib
            .iter()
            .map(|q| {
                q.iter()
                    .map(|z| {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        z + sign * perturb.joint_deg.to_radians()
                    })
                    .collect()
            })
            .collect(),
    };

    // uniform temporal sampling of a play trajectory
    let frames = n_samples * 10;
    let motion = play_motion(&mut rng, frames, arms, 0.45);
    let scene = truth.scene(&platform);
    let ground = ground_depth(k, &truth.camera_from_base);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let q = &motion[i * frames / n_samples];
        let q_raw: Vec<Vec<f64>> = q
            .iter()
            .zip(&truth.q_calib)
            .zip(&platform.arms)
            .map(|((qa, za), arm)| encoder_readings(&arm.chain, qa, za))
            .collect();
        let r = render(&scene, q, k, supersample)?;
        samples.push(annotate(&r, &ground, q_raw));
    }
    Ok(CalibrationScene {
        platform,
        k: *k,
        truth,
        init,
        samples,
    })
}

/// Raw readings that the encoder calibration maps back onto `q`.
pub fn encoder_readings(chain: &KinematicChain, q: &[f64], zero: &[f64]) -> Vec<f64> {
    chain
        .joints
        .iter()
        .zip(q.iter().zip(zero))
        .map(|(j, (q, z))| match j.kind {
            JointKind::Fixed => 0.0,
            _ => (q + z) / (j.encoder_sign * j.encoder_scale),
        })
        .collect()
}

pub fn solid_color(k: &CameraIntrinsics, c: [u8; 3]) -> ColorImage {
    ColorImage::filled(k.width, k.height, c)
}

pub fn empty_mask(k: &CameraIntrinsics) -> BinaryMask {
    BinaryMask::filled(k.width, k.height, false)
}

pub fn depth_from_meters(z: &Grid<f64>) -> DepthImage {
    z.map(|&v| to_depth_mm(v))
}

/// Textured backdrop so inpainting errors are visible.
pub fn background(k: &CameraIntrinsics) -> ColorImage {
    Grid::from_fn(k.width, k.height, |u, v| {
        let check = ((u / 16 + v / 16) % 2) as u8 * 40;
        [
            (60 + u * 120 / k.width) as u8 + check,
            (80 + v * 100 / k.height) as u8,
            150 - check,
        ]
    })
}

/// Synthetic exoskeleton recording together with its rig and calibration.
#[derive(Debug, Clone)]
pub struct SynthDemo {
    pub recording: DemoRecording,
    pub rig: Rig,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    /// Joint-space amplitude of the play motion, radians.
    pub amplitude: f64,
    pub supersample: usize,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            frames: 30,
            width: 160,
            height: 90,
            fps: 30.0,
            amplitude: 0.3,
            supersample: 2,
        }
    }
}

/// Renders a demonstration of the exoskeleton over a ground plane. The
/// exoskeleton and robot share geometry and map joints one to one, so an
/// adapted recording reproduces the input depth; no human pixels.
pub fn demo(seed: u64, spec: &DemoSpec) -> Result<SynthDemo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = intrinsics(spec.width, spec.height);
    let exo = dual_arm(EXO_PALETTE);
    let rig = Rig {
        exoskeleton: exo.clone(),
        robot: dual_arm(ROBOT_PALETTE),
        mapping: vec![identity_mapping(ARM_DOF); exo.arms.len()],
    };
    let calibration = Calibration {
        camera_from_base: camera_from_base(),
        q_calib: (0..exo.arms.len())
            .map(|_| (0..ARM_DOF).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect(),
    };
    let scene = calibration.scene(&exo);
    let motion = play_motion(&mut rng, spec.frames, exo.arms.len(), spec.amplitude);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let ground = depth_from_meters(&ground_depth(&k, &calibration.camera_from_base));
    let backdrop = background(&k);

    let mut rec = DemoRecording::new(Domain::Exoskeleton, k);
    rec.rig = Some("rig.toml".into());
    rec.empty_workspace = Some(ground.clone());
    for (i, q) in motion.iter().enumerate() {
        let overlay = render_robot_overlay(&scene, q, &k, spec.supersample)?;
        let color = composite_image(&backdrop, &overlay)?;
        let depth = merge_depth(
            &ground,
            &RenderOutput {
                mask: overlay.mask.clone(),
                depth: overlay.depth.clone(),
            },
        )?;
        let t = i as f64 / spec.fps;
        let gripper = (0..q.len())
            .map(|a| 0.05 + 0.03 * (2.0 * PI * 0.5 * t + phase + a as f64).sin())
            .collect();
        let q_raw = q
            .iter()
            .zip(&calibration.q_calib)
            .zip(&exo.arms)
            .map(|((qa, za), arm)| encoder_readings(&arm.chain, qa, za))
            .collect();
        rec.frames.push(Frame {
            color,
            depth,
            human_mask: None,
            joints: JointRecord {
                frame: i,
                timestamp: t,
                q: q_raw,
                gripper,
            },
        });
    }
    Ok(SynthDemo {
        recording: rec,
        rig,
        calibration,
    })
}
