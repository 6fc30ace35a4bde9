//! End-effector accuracy on an evaluation board and reporting statistics.

use std::fmt;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::function::beta::checked_beta_reg;

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics_values, JointKind, JointSpec, KinematicChain, Pose};

/// Distance between neighboring board holes, meters.
pub const HOLE_SPACING: f64 = 0.020;

/// End-effector translations recorded at consecutive holes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackMeasurement {
    pub positions: Vec<Vector3<f64>>,
    /// Nominal hole spacing, meters.
    pub spacing: f64,
}

impl TrackMeasurement {
    pub fn new(positions: Vec<Vector3<f64>>, spacing: f64) -> Result<Self> {
        let m = Self { positions, spacing };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() < 2 {
            return Err(Error::data(format!(
                "a track needs at least 2 positions, got {}",
                self.positions.len()
            )));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(Error::config(format!("invalid hole spacing {}", self.spacing)));
        }
        Ok(())
    }
}

/// `|1000 |p_{k+1} - p_k| - 1000 spacing|` in millimeters for every
/// consecutive pair. Positions are scaled to millimeters before
/// differencing.
pub fn displacement_errors(m: &TrackMeasurement) -> Result<Vec<f64>> {
    m.validate()?;
    let nominal = m.spacing * 1000.0;
    Ok(m.positions
        .windows(2)
        .map(|w| ((w[1] * 1000.0 - w[0] * 1000.0).norm() - nominal).abs())
        .collect())
}

/// Mean, sample standard deviation and maximum, millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl ErrorSummary {
    pub const HEADER: &'static str = "Avg ± Std / Max";

    /// `mean±std / max` with three decimals.
    pub fn row(&self) -> String {
        format!("{self} / {:.3}", self.max)
    }

    pub fn table_row(&self, label: &str) -> String {
        format!("| {label} | {self} | {:.3} |", self.max)
    }

    pub fn table_header() -> String {
        "| Method | Avg ± Std (mm) | Max (mm) |\n|---|---|---|".to_string()
    }
}

impl fmt::Display for ErrorSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

/// Sample statistics of `errors`. A single value has zero spread.
pub fn summarize(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::data("cannot summarize an empty error list"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numerical("non-finite error value".into()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let std = if errors.len() > 1 {
        (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ErrorSummary {
        mean,
        std,
        max: errors.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub dof: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sample t-test without the equal-variance assumption.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::data(format!(
            "Welch's test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::data("samples contain non-finite values"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(Error::data("both samples have zero variance"));
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    // P(|T| > |t|) = I_{dof / (dof + t^2)}(dof / 2, 1 / 2)
    let p = checked_beta_reg(dof / 2.0, 0.5, dof / (dof + t * t))
        .map_err(|e| Error::Numerical(format!("incomplete beta: {e}")))?;
    Ok(WelchResult { t, dof, p: p.clamp(0.0, 1.0) })
}

/// A chain carrying the end effector along an evaluation board: a prismatic
/// rail along base `x` followed by revolute joints that hold the tool.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRig {
    pub chain: KinematicChain,
    pub holes: usize,
    pub spacing: f64,
}

impl AccuracyRig {
    pub fn board(holes: usize) -> Self {
        let t = |x: f64, y: f64, z: f64| Pose::from_translation(Vector3::new(x, y, z));
        let mut joints = vec![JointSpec {
            name: "rail".into(),
            kind: JointKind::Prismatic,
            axis: Vector3::x(),
            origin: Pose::identity(),
            limits: [-1.0, 5.0],
            encoder_scale: 1.0,
            encoder_sign: 1.0,
        }];
        let axes = [Vector3::z(), Vector3::y(), Vector3::z(), Vector3::y(), Vector3::z(), Vector3::y()];
        let lengths = [0.10, 0.30, 0.05, 0.25, 0.05, 0.10];
        for (i, (axis, len)) in axes.iter().zip(lengths).enumerate() {
            joints.push(JointSpec::revolute(&format!("joint{}", i + 1), *axis, t(0.0, 0.0, len), [-3.0, 3.0]));
        }
        let chain = KinematicChain::new(joints, vec![], t(0.0, 0.0, 0.12)).expect("board rig is valid");
        Self {
            chain,
            holes,
            spacing: HOLE_SPACING,
        }
    }

    /// Joint values that put the tool exactly over each hole.
    pub fn hole_states(&self) -> Vec<Vec<f64>> {
        let dof = self.chain.dof();
        (0..self.holes)
            .map(|k| {
                let mut q = vec![0.0; dof];
                q[0] = (k as f64 * self.spacing * 1000.0).round() / 1000.0;
                q
            })
            .collect()
    }

    pub fn measure(&self, states: &[Vec<f64>]) -> Result<TrackMeasurement> {
        track_from_states(&self.chain, states, self.spacing)
    }

    /// Errors of one noisy pass over the board: every revolute reading gets
    /// `N(0, sigma_deg)` degrees of encoder noise.
    pub fn simulate(&self, sigma_deg: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if !(sigma_deg >= 0.0) {
            return Err(Error::config(format!("noise sigma must be non-negative, got {sigma_deg}")));
        }
        let mut states = self.hole_states();
        for q in &mut states {
            for (v, j) in q.iter_mut().zip(&self.chain.joints) {
                if j.kind == JointKind::Revolute {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += (z * sigma_deg).to_radians();
                }
            }
        }
        displacement_errors(&self.measure(&states)?)
    }
}

/// End-effector translations from per-hole joint values.
pub fn track_from_states(chain: &KinematicChain, states: &[Vec<f64>], spacing: f64) -> Result<TrackMeasurement> {
    let positions = states
        .iter()
        .enumerate()
        .map(|(i, q)| {
            forward_kinematics_values(chain, q)
                .map(|fk| fk.end_effector.translation)
                .map_err(|e| e.at_stage(i, "forward-kinematics"))
        })
        .collect::<Result<_>>()?;
    TrackMeasurement::new(positions, spacing)
}
