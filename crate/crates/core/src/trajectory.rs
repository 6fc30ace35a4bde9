//! Action trajectories: threshold resampling, relative/absolute
//! conversion and fixed-horizon chunking.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{rot6d_to_rotmat, rotmat_to_rot6d, Pose, Rot6D};

/// End-effector target for one arm, camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmAction {
    pub translation: [f64; 3],
    pub rotation: Rot6D,
    pub gripper_width: f64,
}

impl ArmAction {
    pub fn from_pose(pose: &Pose, gripper_width: f64) -> Self {
        Self {
            translation: pose.translation.into(),
            rotation: pose.rot6d(),
            gripper_width,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Ok(Pose {
            rotation: rot6d_to_rotmat(&self.rotation)?,
            translation: Vector3::from(self.translation),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub timestamp: f64,
    pub arms: Vec<ArmAction>,
}

impl ActionRecord {
    pub fn validate(&self) -> Result<()> {
        for a in &self.arms {
            rot6d_to_rotmat(&a.rotation)?;
            if !(a.gripper_width >= 0.0) {
                return Err(Error::data(format!(
                    "negative gripper width {} at t={}",
                    a.gripper_width, self.timestamp
                )));
            }
        }
        Ok(())
    }
}

/// Time-ordered action records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub records: Vec<ActionRecord>,
}

impl Trajectory {
    pub fn new(records: Vec<ActionRecord>) -> Result<Self> {
        let t = Self { records };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(Error::data(format!(
                    "timestamps not strictly increasing: {} then {}",
                    w[0].timestamp, w[1].timestamp
                )));
            }
            if w[0].arms.len() != w[1].arms.len() {
                return Err(Error::data("arm count changes within trajectory"));
            }
        }
        self.records.iter().try_for_each(ActionRecord::validate)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingThresholds {
    /// meters
    pub translation: f64,
    /// radians
    pub rotation: f64,
    /// meters
    pub width: f64,
}

impl Default for SamplingThresholds {
    fn default() -> Self {
        Self {
            translation: 0.005,
            rotation: std::f64::consts::PI / 24.0,
            width: 0.005,
        }
    }
}

impl SamplingThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.translation > 0.0 && self.rotation > 0.0 && self.width > 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!("sampling thresholds must be positive: {self:?}")))
        }
    }
}

/// Geodesic angle of `R1^T R2` in `[0, pi]`.
///
/// Evaluated as `atan2(|vee(R - R^T)| / 2, (tr R - 1) / 2)`, which equals
/// `acos((tr R - 1) / 2)` but stays accurate near 0 and pi.
pub fn rotation_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let r = r1.transpose() * r2;
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = (v.norm() / 2.0).min(1.0);
    sin.atan2(cos).clamp(0.0, std::f64::consts::PI)
}

/// Indices kept by threshold resampling.
pub fn resample_indices(traj: &Trajectory, th: &SamplingThresholds) -> Result<Vec<usize>> {
    if traj.is_empty() {
        return Err(Error::data("cannot resample an empty trajectory"));
    }
    th.validate()?;
    let rotations: Vec<Vec<Matrix3<f64>>> = traj
        .records
        .iter()
        .map(|r| r.arms.iter().map(|a| rot6d_to_rotmat(&a.rotation)).collect())
        .collect::<Result<_>>()?;
    let n = traj.len();
    let mut keep = vec![0];
    let mut anchor = 0;
    for i in 1..n {
        let (a, b) = (&traj.records[anchor], &traj.records[i]);
        let differs = a.arms.iter().zip(&b.arms).enumerate().any(|(arm, (x, y))| {
            let dt = (Vector3::from(x.translation) - Vector3::from(y.translation)).norm();
            let dr = rotation_distance(&rotations[anchor][arm], &rotations[i][arm]);
            let dw = (x.gripper_width - y.gripper_width).abs();
            dt >= th.translation || dr >= th.rotation || dw >= th.width
        });
        if differs || i == n - 1 {
            keep.push(i);
            anchor = i;
        }
    }
    Ok(keep)
}

/// Drops every record whose translation, rotation and width all differ by
/// less than the thresholds from the last kept record, on every arm. The
/// first and last records are always kept.
pub fn resample(traj: &Trajectory, th: &SamplingThresholds) -> Result<Trajectory> {
    let keep = resample_indices(traj, th)?;
    Ok(Trajectory {
        records: keep.into_iter().map(|i| traj.records[i].clone()).collect(),
    })
}

/// Motion of one arm between consecutive records, expressed in the earlier
/// end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub translation: [f64; 3],
    pub rotation: Rot6D,
    pub gripper_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeStep {
    /// Timestamp of the record this step arrives at.
    pub timestamp: f64,
    pub arms: Vec<ArmDelta>,
}

pub fn absolute_to_relative(traj: &Trajectory) -> Result<Vec<RelativeStep>> {
    if traj.len() < 2 {
        return Err(Error::data("relative actions need at least two records"));
    }
    traj.records
        .windows(2)
        .map(|w| {
            let arms = w[0]
                .arms
                .iter()
                .zip(&w[1].arms)
                .map(|(a, b)| {
                    let delta = a.pose()?.inverse().compose(&b.pose()?);
                    Ok(ArmDelta {
                        translation: delta.translation.into(),
                        rotation: rotmat_to_rot6d(&delta.rotation),
                        gripper_delta: b.gripper_width - a.gripper_width,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(RelativeStep {
                timestamp: w[1].timestamp,
                arms,
            })
        })
        .collect()
}

pub fn relative_to_absolute(start: &ActionRecord, steps: &[RelativeStep]) -> Result<Trajectory> {
    if steps.is_empty() {
        return Err(Error::data("no relative steps to integrate"));
    }
    let mut records = Vec::with_capacity(steps.len() + 1);
    records.push(start.clone());
    let mut poses: Vec<Pose> = start.arms.iter().map(ArmAction::pose).collect::<Result<_>>()?;
    let mut widths: Vec<f64> = start.arms.iter().map(|a| a.gripper_width).collect();
    for step in steps {
        if step.arms.len() != poses.len() {
            return Err(Error::dim("relative step arm count differs from start record"));
        }
        let mut arms = Vec::with_capacity(poses.len());
        for ((pose, width), d) in poses.iter_mut().zip(widths.iter_mut()).zip(&step.arms) {
            let delta = Pose {
                rotation: rot6d_to_rotmat(&d.rotation)?,
                translation: Vector3::from(d.translation),
            };
            *pose = pose.compose(&delta);
            *width += d.gripper_delta;
            arms.push(ArmAction::from_pose(pose, *width));
        }
        records.push(ActionRecord {
            timestamp: step.timestamp,
            arms,
        });
    }
    Ok(Trajectory { records })
}

/// Fixed-horizon window; `padded[j]` marks repeats of the final record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub start: usize,
    pub actions: Vec<ActionRecord>,
    pub padded: Vec<bool>,
}

/// One window per record, stride 1, padded with the final record.
pub fn chunk(traj: &Trajectory, horizon: usize) -> Result<Vec<ActionChunk>> {
    if horizon == 0 {
        return Err(Error::config("chunk horizon must be at least 1"));
    }
    let n = traj.len();
    Ok((0..n)
        .map(|k| {
            let (actions, padded) = (0..horizon)
                .map(|j| {
                    let idx = k + j;
                    if idx < n {
                        (traj.records[idx].clone(), false)
                    } else {
                        (traj.records[n - 1].clone(), true)
                    }
                })
                .unzip();
            ActionChunk {
                start: k,
                actions,
                padded,
            }
        })
        .collect())
}
