//! Two-stage rig calibration.
//!
//! The first stage composes the marker observation into camera-from-base
//! extrinsics. The second refines `{delta_t, rot6d, delta_q}` by Adam on
//! central finite-difference gradients of a render-and-compare loss: a
//! weighted mean squared mask difference plus a mean squared depth
//! difference over the annotated depth mask.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraIntrinsics, ColorImage, DepthImage, Grid};
use crate::kinematics::{apply_joint_calibration, rot6d_to_rotmat, JointKind, Platform, Pose, Rot6D};
use crate::optim::{central_difference_gradient, central_difference_points, Adam};
use crate::raster::{pose_scene, render_primitives, Primitive, Rasterizer, RenderOutput, SceneModel};

/// Camera-from-base extrinsics and per-arm joint zero positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub camera_from_base: Pose,
    pub q_calib: Vec<Vec<f64>>,
}

/// Result of the marker-based first stage.
pub type InitialCalibration = Calibration;

impl Calibration {
    /// Final joint values of every arm for raw encoder readings.
    pub fn joint_values(&self, platform: &Platform, q_raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        calibrated_joints(platform, q_raw, &self.q_calib, None)
    }

    pub fn scene(&self, platform: &Platform) -> SceneModel {
        SceneModel {
            platform: platform.clone(),
            camera_from_base: self.camera_from_base,
        }
    }
}

fn calibrated_joints(
    platform: &Platform,
    q_raw: &[Vec<f64>],
    q_calib: &[Vec<f64>],
    delta_q: Option<&[Vec<f64>]>,
) -> Result<Vec<Vec<f64>>> {
    if q_raw.len() != platform.arms.len() || q_calib.len() != platform.arms.len() {
        return Err(Error::dim(format!(
            "{} arms, {} raw joint vectors, {} zero-position vectors",
            platform.arms.len(),
            q_raw.len(),
            q_calib.len()
        )));
    }
    platform
        .arms
        .iter()
        .enumerate()
        .map(|(i, arm)| {
            let zeros;
            let dq = match delta_q {
                Some(d) => &d[i],
                None => {
                    zeros = vec![0.0; arm.chain.dof()];
                    &zeros
                }
            };
            apply_joint_calibration(&arm.chain, &q_raw[i], &q_calib[i], dq)
        })
        .collect()
}

/// `T_camera_base = T_camera_marker * T_base_marker^-1`.
pub fn initial_extrinsics(camera_from_marker: &Pose, base_from_marker: &Pose) -> Pose {
    camera_from_marker.compose(&base_from_marker.inverse())
}

/// Optimizable parameters: translation and joint offsets are deltas on the
/// initial calibration, the rotation is absolute in 6D form.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationParams {
    pub delta_t: Vector3<f64>,
    pub rot6d: Rot6D,
    pub delta_q: Vec<Vec<f64>>,
}

impl CalibrationParams {
    /// Starting point `{0, r_init, 0, 0}`.
    pub fn initial(init: &Calibration) -> Self {
        Self {
            delta_t: Vector3::zeros(),
            rot6d: init.camera_from_base.rot6d(),
            delta_q: init.q_calib.iter().map(|q| vec![0.0; q.len()]).collect(),
        }
    }
}

pub fn recover_calibration(p: &CalibrationParams, init: &Calibration) -> Result<Calibration> {
    if p.delta_q.len() != init.q_calib.len()
        || p.delta_q.iter().zip(&init.q_calib).any(|(d, q)| d.len() != q.len())
    {
        return Err(Error::dim("joint offset shape does not match the initial calibration"));
    }
    let rotation = rot6d_to_rotmat(&p.rot6d)?;
    Ok(Calibration {
        camera_from_base: Pose {
            rotation,
            translation: init.camera_from_base.translation + p.delta_t,
        },
        q_calib: init
            .q_calib
            .iter()
            .zip(&p.delta_q)
            .map(|(q, d)| q.iter().zip(d).map(|(a, b)| a + b).collect())
            .collect(),
    })
}

/// Which entries of [`CalibrationParams`] are optimized, and their flat order:
/// `delta_t (3) | rot6d (6) | delta_q of revolute joints, arm by arm`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub joints: Vec<Vec<usize>>,
    pub dof: Vec<usize>,
}

impl ParamLayout {
    pub fn for_platform(platform: &Platform) -> Self {
        Self {
            joints: platform
                .arms
                .iter()
                .map(|a| {
                    a.chain
                        .joints
                        .iter()
                        .enumerate()
                        .filter(|(_, j)| j.kind == JointKind::Revolute)
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect(),
            dof: platform.arms.iter().map(|a| a.chain.dof()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        9 + self.joints.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flatten(&self, p: &CalibrationParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(p.delta_t.iter());
        v.extend(p.rot6d.0);
        for (arm, idx) in self.joints.iter().enumerate() {
            v.extend(idx.iter().map(|&j| p.delta_q[arm][j]));
        }
        v
    }

    pub fn unflatten(&self, v: &[f64]) -> CalibrationParams {
        let mut delta_q: Vec<Vec<f64>> = self.dof.iter().map(|&n| vec![0.0; n]).collect();
        let mut at = 9;
        for (arm, idx) in self.joints.iter().enumerate() {
            for &j in idx {
                delta_q[arm][j] = v[at];
                at += 1;
            }
        }
        CalibrationParams {
            delta_t: Vector3::new(v[0], v[1], v[2]),
            rot6d: Rot6D([v[3], v[4], v[5], v[6], v[7], v[8]]),
            delta_q,
        }
    }

    /// `(arm, joint)` of a flat joint-offset entry.
    pub fn joint_of(&self, flat: usize) -> Option<(usize, usize)> {
        let mut at = 9;
        for (arm, idx) in self.joints.iter().enumerate() {
            if flat >= at && flat < at + idx.len() {
                return Some((arm, idx[flat - at]));
            }
            at += idx.len();
        }
        None
    }

    /// Finite-difference step per flat entry.
    pub fn steps(&self, fd: &FdSteps) -> Vec<f64> {
        let mut s = vec![fd.translation; 3];
        s.extend([fd.rot6d; 6]);
        s.extend(std::iter::repeat_n(fd.joint, self.len() - 9));
        s
    }
}

/// One annotated image-joint pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    /// Observed depth, millimeters.
    pub depth: DepthImage,
    /// Raw encoder readings per arm.
    pub q_raw: Vec<Vec<f64>>,
    /// Annotated model coverage in `[0, 1]`; binary annotations use 0 and 1.
    pub model_mask: Grid<f32>,
    /// Pixels whose observed depth supervises the render.
    pub depth_mask: BinaryMask,
    pub color: Option<ColorImage>,
}

impl CalibrationSample {
    pub fn validate(&self, k: &CameraIntrinsics) -> Result<()> {
        let dims_ok = self.depth.width == k.width
            && self.depth.height == k.height
            && self.depth.same_shape(&self.model_mask)
            && self.depth.same_shape(&self.depth_mask)
            && self.color.as_ref().is_none_or(|c| c.same_shape(&self.depth));
        if !dims_ok {
            return Err(Error::dim("calibration sample images disagree with the intrinsics"));
        }
        if self
            .model_mask
            .data
            .iter()
            .any(|&m| !(0.0..=1.0).contains(&m))
        {
            return Err(Error::data("model mask values must lie in [0, 1]"));
        }
        if self
            .depth_mask
            .data
            .iter()
            .zip(&self.model_mask.data)
            .any(|(&d, &m)| d && m <= 0.0)
        {
            return Err(Error::data("depth mask is not contained in the model mask"));
        }
        Ok(())
    }

    /// Box-filters the sample by an integer factor. Depth-mask pixels survive
    /// only when the whole block is masked with valid depth.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.depth.width % factor != 0 || self.depth.height % factor != 0 {
            return Err(Error::dim(format!(
                "cannot downsample {}x{} by {factor}",
                self.depth.width, self.depth.height
            )));
        }
        let (w, h) = (self.depth.width / factor, self.depth.height / factor);
        let n = (factor * factor) as f64;
        let mut depth = DepthImage::filled(w, h, 0);
        let mut mask = Grid::filled(w, h, 0.0f32);
        let mut dmask = BinaryMask::filled(w, h, false);
        let mut color = self.color.as_ref().map(|_| ColorImage::filled(w, h, [0, 0, 0]));
        for v in 0..h {
            for u in 0..w {
                let mut msum = 0.0f64;
                let mut dsum = 0.0f64;
                let mut full = true;
                let mut csum = [0.0f64; 3];
                for dv in 0..factor {
                    for du in 0..factor {
                        let (x, y) = (u * factor + du, v * factor + dv);
                        msum += *self.model_mask.get(x, y) as f64;
                        let d = *self.depth.get(x, y);
                        full &= *self.depth_mask.get(x, y) && d > 0;
                        dsum += d as f64;
                        if let Some(c) = &self.color {
                            for (a, b) in csum.iter_mut().zip(c.get(x, y)) {
                                *a += *b as f64;
                            }
                        }
                    }
                }
                *mask.get_mut(u, v) = (msum / n) as f32;
                if full {
                    *dmask.get_mut(u, v) = true;
                }
                if dsum > 0.0 {
                    *depth.get_mut(u, v) = (dsum / n).round() as u16;
                }
                if let Some(c) = color.as_mut() {
                    *c.get_mut(u, v) = csum.map(|s| (s / n).round() as u8);
                }
            }
        }
        Ok(Self {
            depth,
            q_raw: self.q_raw.clone(),
            model_mask: mask,
            depth_mask: dmask,
            color,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdSteps {
    pub translation: f64,
    pub rot6d: f64,
    pub joint: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            translation: 1e-3,
            rot6d: 1e-3,
            joint: 0.1f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the mask term.
    pub beta: f64,
    /// Depth charged to annotated depth pixels the render misses, meters.
    pub far_plane: f64,
    pub supersample: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 5.0,
            far_plane: crate::geometry::CropBox::IN_THE_WILD.far_plane(),
            supersample: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleLoss {
    /// `beta * mean over pixels (M - M_hat)^2`
    pub mask_term: f64,
    /// mean over depth-mask pixels of `(d - d_hat)^2`, meters^2
    pub depth_term: f64,
    pub depth_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub samples: Vec<SampleLoss>,
    /// No sample has a usable depth pixel; only the mask term is active.
    pub mask_only: bool,
}

struct PreparedSample {
    q_raw: Vec<Vec<f64>>,
    ma: Vec<f64>,
    /// observed depth in meters on the depth mask, NaN elsewhere
    dm: Vec<f64>,
    sum_ma2: f64,
    sum_far: f64,
    n_depth: usize,
}

#[derive(Debug, Clone, Copy)]
struct PixelTerm {
    idx: usize,
    mask: f64,
    depth: f64,
}

/// Posed primitives and per-pixel loss terms at a base parameter point.
#[derive(Debug, Clone)]
pub struct BaseState {
    prims: Vec<Vec<Primitive>>,
    patches: Vec<Vec<PixelTerm>>,
}

/// Base terms with every pixel present in `region` replaced, in pixel order.
fn merge_patches<'a>(base: &'a [PixelTerm], region: &'a [PixelTerm]) -> impl Iterator<Item = &'a PixelTerm> {
    let mut b = base.iter().peekable();
    let mut r = region.iter().peekable();
    std::iter::from_fn(move || match (b.peek(), r.peek()) {
        (Some(x), Some(y)) if x.idx < y.idx => b.next(),
        (Some(x), Some(y)) if x.idx == y.idx => {
            b.next();
            r.next()
        }
        (_, Some(_)) => r.next(),
        (Some(_), None) => b.next(),
        (None, None) => None,
    })
}

/// Precomputed annotations for fast repeated loss evaluation.
pub struct CalibrationProblem<'a> {
    platform: &'a Platform,
    init: &'a Calibration,
    k: CameraIntrinsics,
    cfg: LossConfig,
    samples: Vec<PreparedSample>,
}

impl<'a> CalibrationProblem<'a> {
    pub fn new(
        platform: &'a Platform,
        init: &'a Calibration,
        samples: &[CalibrationSample],
        k: &CameraIntrinsics,
        cfg: LossConfig,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("calibration needs at least one sample"));
        }
        if cfg.supersample == 0 || !(cfg.beta >= 0.0) || !cfg.far_plane.is_finite() {
            return Err(Error::config(format!("invalid loss configuration {cfg:?}")));
        }
        let mut prepared = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            s.validate(k).map_err(|e| e.at_stage(i, "calibration-sample"))?;
            if s.q_raw.len() != platform.arms.len() {
                return Err(Error::dim(format!(
                    "sample {i} has joints for {} arms, platform has {}",
                    s.q_raw.len(),
                    platform.arms.len()
                )));
            }
            let ma: Vec<f64> = s.model_mask.data.iter().map(|&m| m as f64).collect();
            let dm: Vec<f64> = s
                .depth
                .data
                .iter()
                .zip(&s.depth_mask.data)
                .map(|(&d, &m)| if m && d > 0 { d as f64 / 1000.0 } else { f64::NAN })
                .collect();
            let sum_ma2 = ma.iter().map(|a| a * a).sum();
            let sum_far = dm
                .iter()
                .filter(|d| !d.is_nan())
                .map(|d| (d - cfg.far_plane).powi(2))
                .sum();
            let n_depth = dm.iter().filter(|d| !d.is_nan()).count();
            prepared.push(PreparedSample {
                q_raw: s.q_raw.clone(),
                ma,
                dm,
                sum_ma2,
                sum_far,
                n_depth,
            });
        }
        Ok(Self {
            platform,
            init,
            k: *k,
            cfg,
            samples: prepared,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn loss(&self, p: &CalibrationParams) -> Result<LossReport> {
        self.loss_with(p, &mut Rasterizer::new())
    }

    pub fn loss_with(&self, p: &CalibrationParams, raster: &mut Rasterizer) -> Result<LossReport> {
        let mut patch = Vec::new();
        let scenes = self.posed(p)?;
        let mut out = Vec::with_capacity(self.samples.len());
        for (s, prims) in self.samples.iter().zip(&scenes) {
            self.trace(s, prims, None, raster, &mut patch);
            out.push(self.sample_loss(s, patch.iter()));
        }
        Ok(self.report(out))
    }

    /// Loss at `p` plus the per-pixel state that lets
    /// [`CalibrationProblem::joint_probe`] re-render only what a joint moves.
    pub fn base_state(&self, p: &CalibrationParams, raster: &mut Rasterizer) -> Result<(LossReport, BaseState)> {
        let prims = self.posed(p)?;
        let mut patches = Vec::with_capacity(self.samples.len());
        let mut out = Vec::with_capacity(self.samples.len());
        for (s, pr) in self.samples.iter().zip(&prims) {
            let mut patch = Vec::new();
            self.trace(s, pr, None, raster, &mut patch);
            out.push(self.sample_loss(s, patch.iter()));
            patches.push(patch);
        }
        Ok((self.report(out), BaseState { prims, patches }))
    }

    /// Loss at `p`, which may differ from the base only in the offset of
    /// `joint` on `arm`. Equal bit for bit to [`CalibrationProblem::loss`].
    pub fn joint_probe(
        &self,
        base: &BaseState,
        p: &CalibrationParams,
        (arm, joint): (usize, usize),
        raster: &mut Rasterizer,
    ) -> Result<LossReport> {
        let scenes = self.posed(p)?;
        let moved = |q: &Primitive| q.arm == arm && q.link >= joint;
        let mut region = Vec::new();
        let mut patch = Vec::new();
        let mut out = Vec::with_capacity(self.samples.len());
        for (i, (s, prims)) in self.samples.iter().zip(&scenes).enumerate() {
            region.clear();
            region.extend(base.prims[i].iter().filter(|q| moved(q)));
            region.extend(prims.iter().filter(|q| moved(q)));
            self.trace(s, prims, Some(&region), raster, &mut patch);
            out.push(self.sample_loss(s, merge_patches(&base.patches[i], &patch)));
        }
        Ok(self.report(out))
    }

    fn posed(&self, p: &CalibrationParams) -> Result<Vec<Vec<Primitive>>> {
        let calib = recover_calibration(p, self.init)?;
        let scene = SceneModel {
            platform: self.platform.clone(),
            camera_from_base: calib.camera_from_base,
        };
        self.samples
            .iter()
            .map(|s| pose_scene(&scene, &calibrated_joints(self.platform, &s.q_raw, &calib.q_calib, None)?))
            .collect()
    }

    /// Per-pixel corrections relative to an empty render, in pixel order.
    fn trace(
        &self,
        s: &PreparedSample,
        prims: &[Primitive],
        region: Option<&[Primitive]>,
        raster: &mut Rasterizer,
        patch: &mut Vec<PixelTerm>,
    ) {
        patch.clear();
        let nsub = (self.cfg.supersample * self.cfg.supersample) as f64;
        let far = self.cfg.far_plane;
        let mut visit = |idx: usize, hits: usize, depth_sum: f64| {
            let c = hits as f64 / nsub;
            let a = s.ma[idx];
            let mask = (a - c) * (a - c) - a * a;
            let d = s.dm[idx];
            let depth = if !d.is_nan() && hits > 0 {
                let z = depth_sum / hits as f64;
                (d - z) * (d - z) - (d - far) * (d - far)
            } else {
                0.0
            };
            patch.push(PixelTerm { idx, mask, depth });
        };
        match region {
            None => raster.cast_coverage(prims, &self.k, self.cfg.supersample, visit),
            Some(r) => raster.cast_coverage_region(prims, r, &self.k, self.cfg.supersample, &mut visit),
        }
    }

    fn sample_loss<'p>(&self, s: &PreparedSample, terms: impl Iterator<Item = &'p PixelTerm>) -> SampleLoss {
        let npix = (self.k.width * self.k.height) as f64;
        let mut mask_corr = 0.0;
        let mut depth_corr = 0.0;
        for t in terms {
            mask_corr += t.mask;
            depth_corr += t.depth;
        }
        let mask_term = self.cfg.beta * (s.sum_ma2 + mask_corr).max(0.0) / npix;
        let depth_term = if s.n_depth > 0 {
            (s.sum_far + depth_corr).max(0.0) / s.n_depth as f64
        } else {
            0.0
        };
        SampleLoss {
            mask_term,
            depth_term,
            depth_pixels: s.n_depth,
        }
    }

    fn report(&self, samples: Vec<SampleLoss>) -> LossReport {
        let total = samples.iter().map(|s| s.mask_term + s.depth_term).sum::<f64>() / samples.len() as f64;
        LossReport {
            total,
            mask_only: samples.iter().all(|s| s.depth_pixels == 0),
            samples,
        }
    }

    /// Renders every sample at `p`.
    pub fn renders(&self, p: &CalibrationParams) -> Result<Vec<RenderOutput>> {
        let calib = recover_calibration(p, self.init)?;
        let scene = calib.scene(self.platform);
        self.samples
            .iter()
            .map(|s| {
                let q = calibrated_joints(self.platform, &s.q_raw, &calib.q_calib, None)?;
                render_primitives(&pose_scene(&scene, &q)?, &self.k, self.cfg.supersample)
            })
            .collect()
    }
}

/// `L(p) = 1/N sum_i (beta * mean (M_i - M_hat_i)^2 + mean_{Md_i} (d_i - d_hat_i)^2)`.
pub fn calibration_loss(
    p: &CalibrationParams,
    samples: &[CalibrationSample],
    platform: &Platform,
    init: &Calibration,
    k: &CameraIntrinsics,
    cfg: LossConfig,
) -> Result<LossReport> {
    CalibrationProblem::new(platform, init, samples, k, cfg)?.loss(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    pub steps: FdSteps,
    /// Evaluate finite-difference probes on the rayon pool.
    pub parallel: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: 1e-4,
            iters: 1000,
            seed: 0,
            steps: FdSteps::default(),
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    /// Parameters with the lowest loss seen.
    pub params: CalibrationParams,
    pub loss: f64,
    pub initial_loss: f64,
    /// Loss at every iterate, `iters + 1` entries.
    pub raw_trace: Vec<f64>,
    /// Running minimum of `raw_trace`.
    pub trace: Vec<f64>,
    pub best_iter: usize,
}

/// Adam over central finite-difference gradients; returns the best iterate.
pub fn refine(
    p0: &CalibrationParams,
    problem: &CalibrationProblem<'_>,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    if !(cfg.lr > 0.0) {
        return Err(Error::config("learning rate must be positive"));
    }
    let layout = ParamLayout::for_platform(problem.platform);
    let steps = layout.steps(&cfg.steps);
    let mut x = layout.flatten(p0);
    let mut adam = Adam::new(x.len(), cfg.lr);
    let mut raster = Rasterizer::new();

    let eval = |v: &[f64], raster: &mut Rasterizer| -> Result<f64> {
        Ok(problem.loss_with(&layout.unflatten(v), raster)?.total)
    };

    let probe = |i: usize, v: &[f64], base: &BaseState, raster: &mut Rasterizer| -> Result<f64> {
        let p = layout.unflatten(v);
        match layout.joint_of(i / 2) {
            Some(j) => Ok(problem.joint_probe(base, &p, j, raster)?.total),
            None => eval(v, raster),
        }
    };

    let mut raw_trace = Vec::with_capacity(cfg.iters + 1);
    let mut best = (f64::INFINITY, 0usize, x.clone());
    for it in 0..=cfg.iters {
        let (report, base) = problem.base_state(&layout.unflatten(&x), &mut raster)?;
        let l = report.total;
        if !l.is_finite() {
            return Err(Error::Numerical(format!(
                "calibration loss is {l} at iteration {it}; parameters {x:?}"
            )));
        }
        raw_trace.push(l);
        if l < best.0 {
            best = (l, it, x.clone());
        }
        if it == cfg.iters {
            break;
        }
        let probes = central_difference_points(&x, &steps);
        let values: Vec<f64> = if cfg.parallel {
            probes
                .par_iter()
                .enumerate()
                .map_init(Rasterizer::new, |r, (i, p)| probe(i, p, &base, r))
                .collect::<Result<_>>()?
        } else {
            probes
                .iter()
                .enumerate()
                .map(|(i, p)| probe(i, p, &base, &mut raster))
                .collect::<Result<_>>()?
        };
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "finite-difference probe loss is {bad} at iteration {it}"
            )));
        }
        let grad = central_difference_gradient(&values, &steps);
        adam.step(&mut x, &grad);
        log::debug!("iter {it}: loss {l:.6e}");
    }
    let trace = raw_trace
        .iter()
        .scan(f64::INFINITY, |m, &l| {
            *m = m.min(l);
            Some(*m)
        })
        .collect();
    Ok(RefineResult {
        params: layout.unflatten(&best.2),
        loss: best.0,
        initial_loss: raw_trace[0],
        raw_trace,
        trace,
        best_iter: best.1,
    })
}

/// Refined calibration with quality metrics before and after refinement.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub calibration: Calibration,
    pub refine: RefineResult,
    pub initial_metrics: CalibrationMetrics,
    pub metrics: CalibrationMetrics,
}

/// Second calibration stage end to end: refine from `init` and score both ends.
pub fn calibrate(
    platform: &Platform,
    init: &Calibration,
    samples: &[CalibrationSample],
    k: &CameraIntrinsics,
    cfg: &RefineConfig,
) -> Result<CalibrationOutcome> {
    let problem = CalibrationProblem::new(platform, init, samples, k, cfg.loss)?;
    let p0 = CalibrationParams::initial(init);
    let initial_metrics = calibration_metrics(&p0, &problem, samples)?;
    let refine = refine(&p0, &problem, cfg)?;
    let metrics = calibration_metrics(&refine.params, &problem, samples)?;
    Ok(CalibrationOutcome {
        calibration: recover_calibration(&refine.params, init)?,
        refine,
        initial_metrics,
        metrics,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationMetrics {
    pub mask_diff_percent: Vec<f64>,
    pub depth_diff_mm: Vec<f64>,
    pub mask: MeanStd,
    pub depth: MeanStd,
}

impl CalibrationMetrics {
    pub fn from_values(mask_diff_percent: Vec<f64>, depth_diff_mm: Vec<f64>) -> Self {
        Self {
            mask: MeanStd::of(&mask_diff_percent),
            depth: MeanStd::of(&depth_diff_mm),
            mask_diff_percent,
            depth_diff_mm,
        }
    }

    /// `"<mask>±<std> %, <depth>±<std> mm"` with 2 and 1 decimals.
    pub fn summary(&self) -> String {
        format!(
            "{:.2}±{:.2} %, {:.1}±{:.1} mm",
            self.mask.mean, self.mask.std, self.depth.mean, self.depth.std
        )
    }

    /// One row of the calibration comparison table.
    pub fn table_row(&self, method: &str) -> String {
        format!(
            "| {method} | {:.2}±{:.2} | {:.1}±{:.1} |",
            self.mask.mean, self.mask.std, self.depth.mean, self.depth.std
        )
    }

    pub const TABLE_HEADER: &'static str = "| Calibration Method | Mask Diff. (%) | Depth Diff. (mm) |";
}

/// Mask difference `100 * mean |M - M_hat|` and depth difference
/// `mean_{Md} |d - d_hat|` in millimeters for one sample.
pub fn sample_metrics(sample: &CalibrationSample, render: &RenderOutput, far_plane: f64) -> (f64, f64) {
    let n = sample.model_mask.len() as f64;
    let mask = 100.0
        * sample
            .model_mask
            .data
            .iter()
            .zip(&render.mask.data)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .sum::<f64>()
        / n;
    let mut dsum = 0.0;
    let mut dn = 0usize;
    for ((&d, &m), &z) in sample
        .depth
        .data
        .iter()
        .zip(&sample.depth_mask.data)
        .zip(&render.depth.data)
    {
        if m && d > 0 {
            let z = if z.is_finite() { z } else { far_plane };
            dsum += (d as f64 / 1000.0 - z).abs();
            dn += 1;
        }
    }
    let depth = if dn > 0 { 1000.0 * dsum / dn as f64 } else { 0.0 };
    (mask, depth)
}

pub fn calibration_metrics(p: &CalibrationParams, problem: &CalibrationProblem<'_>, samples: &[CalibrationSample]) -> Result<CalibrationMetrics> {
    let renders = problem.renders(p)?;
    let (mask, depth): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .zip(&renders)
        .map(|(s, r)| sample_metrics(s, r, problem.cfg.far_plane))
        .unzip();
    Ok(CalibrationMetrics::from_values(mask, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{ArmModel, JointSpec, KinematicChain};
    use crate::raster::PrimitiveShape;
    use std::f64::consts::PI;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 16.0, 12.0, 32, 24).unwrap()
    }

    /// One arm: a revolute joint about camera-facing z carrying a box whose
    /// front face sits at z = 1.0 when the base is at z = 1.25.
    fn platform() -> Platform {
        let chain = KinematicChain::new(
            vec![JointSpec::revolute("j", Vector3::z(), Pose::identity(), [-PI, PI])],
            vec![vec![PrimitiveShape::cuboid(
                [0.25, 0.125, 0.25],
                Pose::from_translation(Vector3::new(0.0, 0.0, 0.0)),
            )]],
            Pose::identity(),
        )
        .unwrap();
        Platform {
            arms: vec![ArmModel {
                name: "arm".into(),
                chain,
                mount: Pose::identity(),
            }],
        }
    }

    fn init() -> Calibration {
        Calibration {
            camera_from_base: Pose::from_translation(Vector3::new(0.0, 0.0, 1.25)),
            q_calib: vec![vec![0.0]],
        }
    }

    fn sample_from_render(r: &RenderOutput) -> CalibrationSample {
        let k = cam();
        let interior = r.mask.map(|&m| m == 1.0);
        CalibrationSample {
            depth: Grid::from_fn(k.width, k.height, |u, v| {
                let z = *r.depth.get(u, v);
                if *interior.get(u, v) { (z * 1000.0).round() as u16 } else { 0 }
            }),
            q_raw: vec![vec![0.0]],
            model_mask: r.mask.map(|&m| m as f32),
            depth_mask: interior,
            color: None,
        }
    }

    fn ground_truth_sample() -> CalibrationSample {
        let plat = platform();
        let r = render(&init().scene(&plat), &[vec![0.0]], &cam(), 4);
        sample_from_render(&r)
    }

    fn render(scene: &SceneModel, q: &[Vec<f64>], k: &CameraIntrinsics, s: usize) -> RenderOutput {
        crate::raster::render(scene, q, k, s).unwrap()
    }

    #[test]
    fn initial_extrinsics_examples() {
        let id = Pose::identity();
        assert_eq!(initial_extrinsics(&id, &id), id);
        let t = Pose::from_axis_angle(&Vector3::new(0.3, -1.0, 0.2), 1.1, Vector3::new(0.4, 0.1, -0.7));
        let e = initial_extrinsics(&t, &t);
        assert!((e.rotation - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        assert!(e.translation.norm() < 1e-12);
    }

    #[test]
    fn recover_initial_params_is_identity() {
        let mut init = init();
        init.camera_from_base = Pose::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.4, Vector3::new(0.1, 0.2, 1.0));
        init.q_calib = vec![vec![0.3]];
        let c = recover_calibration(&CalibrationParams::initial(&init), &init).unwrap();
        assert_eq!(c.camera_from_base.translation, init.camera_from_base.translation);
        assert_eq!(c.q_calib, init.q_calib);
        assert!((c.camera_from_base.rotation - init.camera_from_base.rotation).abs().max() < 1e-12);

        let mut p = CalibrationParams::initial(&init);
        p.delta_t.x = 0.01;
        let c = recover_calibration(&p, &init).unwrap();
        let dt = c.camera_from_base.translation - init.camera_from_base.translation;
        assert!((dt - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-15);

        p.rot6d = Rot6D([0.0; 6]);
        assert!(matches!(recover_calibration(&p, &init), Err(Error::Degenerate(_))));
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let plat = platform();
        let s = ground_truth_sample();
        assert!(s.depth_mask.count() > 0);
        let rep = calibration_loss(&CalibrationParams::initial(&init()), &[s], &plat, &init(), &cam(), LossConfig::default()).unwrap();
        assert_eq!(rep.total, 0.0);
        assert!(!rep.mask_only);
    }

    #[test]
    fn beta_scales_mask_term_only() {
        let plat = platform();
        let s = ground_truth_sample();
        let mut p = CalibrationParams::initial(&init());
        p.delta_t = Vector3::new(0.02, -0.01, 0.03);
        let c1 = LossConfig { beta: 5.0, ..Default::default() };
        let c2 = LossConfig { beta: 10.0, ..Default::default() };
        let a = calibration_loss(&p, std::slice::from_ref(&s), &plat, &init(), &cam(), c1).unwrap();
        let b = calibration_loss(&p, &[s], &plat, &init(), &cam(), c2).unwrap();
        assert!(a.samples[0].mask_term > 0.0);
        assert!((b.samples[0].mask_term - 2.0 * a.samples[0].mask_term).abs() < 1e-15);
        assert_eq!(a.samples[0].depth_term, b.samples[0].depth_term);
    }

    #[test]
    fn single_pixel_hand_computed_loss() {
        // empty scene (box pushed behind the camera is awkward, so annotate
        // one pixel nobody renders): mask 0.5 there, depth 0.8 m on it
        let plat = platform();
        let k = cam();
        let mut init = init();
        init.camera_from_base = Pose::from_translation(Vector3::new(0.0, 0.0, -5.0));
        let mut s = CalibrationSample {
            depth: DepthImage::filled(k.width, k.height, 0),
            q_raw: vec![vec![0.0]],
            model_mask: Grid::filled(k.width, k.height, 0.0),
            depth_mask: BinaryMask::filled(k.width, k.height, false),
            color: None,
        };
        *s.model_mask.get_mut(3, 4) = 0.5;
        *s.depth_mask.get_mut(3, 4) = true;
        *s.depth.get_mut(3, 4) = 800;
        let cfg = LossConfig { beta: 5.0, far_plane: 1.4, supersample: 2 };
        let rep = calibration_loss(&CalibrationParams::initial(&init), &[s], &plat, &init, &k, cfg).unwrap();
        let expect_mask = 5.0 * 0.25 / (32.0 * 24.0);
        let expect_depth = (0.8f64 - 1.4).powi(2);
        assert!((rep.samples[0].mask_term - expect_mask).abs() < 1e-12);
        assert!((rep.samples[0].depth_term - expect_depth).abs() < 1e-12);
        assert!((rep.total - expect_mask - expect_depth).abs() < 1e-9);
    }

    #[test]
    fn mask_only_flag_when_no_depth_pixels() {
        let plat = platform();
        let mut s = ground_truth_sample();
        s.depth_mask.data.iter_mut().for_each(|b| *b = false);
        let rep = calibration_loss(&CalibrationParams::initial(&init()), &[s], &plat, &init(), &cam(), LossConfig::default()).unwrap();
        assert!(rep.mask_only);
        assert!(calibration_loss(&CalibrationParams::initial(&init()), &[], &plat, &init(), &cam(), LossConfig::default()).is_err());
    }

    #[test]
    fn depth_mask_must_be_inside_model_mask() {
        let mut s = ground_truth_sample();
        *s.depth_mask.get_mut(0, 0) = true;
        assert!(s.validate(&cam()).is_err());
    }

    #[test]
    fn refine_from_optimum_is_stationary() {
        let plat = platform();
        let init = init();
        let s = [ground_truth_sample()];
        let prob = CalibrationProblem::new(&plat, &init, &s, &cam(), LossConfig::default()).unwrap();
        let p0 = CalibrationParams::initial(&init);
        let cfg = RefineConfig { iters: 20, ..Default::default() };
        let res = refine(&p0, &prob, &cfg).unwrap();
        assert_eq!(res.params, p0);
        assert_eq!(res.loss, 0.0);
        assert!(res.trace.iter().all(|&l| l == 0.0));
        assert_eq!(res.trace.len(), 21);
    }

    #[test]
    fn refine_never_worse_than_start() {
        let plat = platform();
        let init = init();
        let s = [ground_truth_sample()];
        let prob = CalibrationProblem::new(&plat, &init, &s, &cam(), LossConfig::default()).unwrap();
        let mut p0 = CalibrationParams::initial(&init);
        p0.delta_t = Vector3::new(0.01, 0.0, -0.01);
        p0.delta_q[0][0] = 0.05;
        let cfg = RefineConfig { iters: 60, lr: 1e-3, ..Default::default() };
        let res = refine(&p0, &prob, &cfg).unwrap();
        assert!(res.loss <= res.initial_loss);
        assert_eq!(res.trace[res.best_iter], res.loss);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.loss < 0.5 * res.initial_loss, "{} vs {}", res.loss, res.initial_loss);
    }

    #[test]
    fn metrics_examples() {
        let plat = platform();
        let init = init();
        let s = ground_truth_sample();
        let prob = CalibrationProblem::new(&plat, &init, std::slice::from_ref(&s), &cam(), LossConfig::default()).unwrap();
        let m = calibration_metrics(&CalibrationParams::initial(&init), &prob, &[s]).unwrap();
        assert_eq!(m.mask.mean, 0.0);
        assert_eq!(m.depth.mean, 0.0);

        let ann = CalibrationSample {
            depth: DepthImage::filled(10, 10, 0),
            q_raw: vec![],
            model_mask: Grid::filled(10, 10, 0.0),
            depth_mask: BinaryMask::filled(10, 10, false),
            color: None,
        };
        let mut r = RenderOutput {
            mask: Grid::filled(10, 10, 0.0),
            depth: Grid::filled(10, 10, f64::INFINITY),
        };
        *r.mask.get_mut(2, 2) = 1.0;
        assert!((sample_metrics(&ann, &r, 1.4).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_formatting() {
        let m = CalibrationMetrics {
            mask_diff_percent: vec![],
            depth_diff_mm: vec![],
            mask: MeanStd { mean: 0.78, std: 0.25 },
            depth: MeanStd { mean: 14.0, std: 2.9 },
        };
        assert_eq!(m.summary(), "0.78±0.25 %, 14.0±2.9 mm");
        assert_eq!(
            m.table_row("Two-Stage Calibration (mask + depth)"),
            "| Two-Stage Calibration (mask + depth) | 0.78±0.25 | 14.0±2.9 |"
        );
    }

    #[test]
    fn layout_round_trip() {
        let plat = platform();
        let layout = ParamLayout::for_platform(&plat);
        assert_eq!(layout.len(), 10);
        let mut p = CalibrationParams::initial(&init());
        p.delta_q[0][0] = 0.25;
        p.delta_t.y = -0.5;
        assert_eq!(layout.unflatten(&layout.flatten(&p)), p);
    }

    #[test]
    fn downsample_keeps_annotation_semantics() {
        let s = ground_truth_sample();
        let d = s.downsample(2).unwrap();
        assert_eq!((d.depth.width, d.depth.height), (16, 12));
        assert!(d.depth_mask.data.iter().zip(&d.model_mask.data).all(|(&m, &a)| !m || a > 0.0));
        assert!(s.downsample(5).is_err());
    }
}
