//! Ray-cast renderer for articulated primitive geometry.
//!
//! Every pixel is sampled by `s x s` sub-rays through sub-pixel centers. The
//! mask is the fraction of sub-rays that hit anything and the depth is the
//! mean camera-frame z of the nearest hits. Each primitive is bounded by a
//! convex screen-space polygon so only pixels inside its row spans are cast.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ColorImage, Grid};
use crate::kinematics::{forward_kinematics_values, Platform, Pose};

const T_EPS: f64 = 1e-9;
const SPAN_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere { radius: f64 },
    /// Segment `a -> b` in the shape frame, swept by `radius`.
    Capsule { radius: f64, a: [f64; 3], b: [f64; 3] },
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveShape {
    pub kind: ShapeKind,
    /// Shape frame relative to the owning link.
    pub local: Pose,
    pub color: [u8; 3],
}

pub const DEFAULT_COLOR: [u8; 3] = [200, 200, 200];

impl PrimitiveShape {
    pub fn sphere(radius: f64, local: Pose) -> Self {
        Self {
            kind: ShapeKind::Sphere { radius },
            local,
            color: DEFAULT_COLOR,
        }
    }

    pub fn capsule(radius: f64, a: Vector3<f64>, b: Vector3<f64>) -> Self {
        Self {
            kind: ShapeKind::Capsule {
                radius,
                a: a.into(),
                b: b.into(),
            },
            local: Pose::identity(),
            color: DEFAULT_COLOR,
        }
    }

    pub fn cuboid(half_extents: [f64; 3], local: Pose) -> Self {
        Self {
            kind: ShapeKind::Box { half_extents },
            local,
            color: DEFAULT_COLOR,
        }
    }

    pub fn with_color(mut self, color: [u8; 3]) -> Self {
        self.color = color;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ShapeKind::Sphere { radius } => radius > 0.0,
            ShapeKind::Capsule { radius, .. } => radius > 0.0,
            ShapeKind::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
        };
        if ok {
            self.local.validate()
        } else {
            Err(Error::config(format!("primitive with non-positive size: {:?}", self.kind)))
        }
    }

    /// Places the shape with `frame` (shape frame -> camera) and precomputes
    /// its intersection data.
    pub fn posed(&self, frame: &Pose) -> Primitive {
        let pose = frame.compose(&self.local);
        let geom = match self.kind {
            ShapeKind::Sphere { radius } => Geom::Sphere {
                c: pose.translation,
                r: radius,
            },
            ShapeKind::Capsule { radius, a, b } => {
                let a = pose.transform_point(&Vector3::from(a));
                let b = pose.transform_point(&Vector3::from(b));
                let ba = b - a;
                let baba = ba.norm_squared();
                let baoa = -ba.dot(&a);
                Geom::Capsule {
                    a,
                    b,
                    r: radius,
                    ba,
                    baba,
                    baoa,
                    qc: baba * a.norm_squared() - baoa * baoa - radius * radius * baba,
                    ca: a.norm_squared() - radius * radius,
                    cb: b.norm_squared() - radius * radius,
                }
            }
            ShapeKind::Box { half_extents } => {
                let rt = pose.rotation.transpose();
                Geom::Box {
                    rt,
                    o: -(rt * pose.translation),
                    h: Vector3::from(half_extents),
                    c: pose.translation,
                }
            }
        };
        Primitive {
            cull: Cull::of(&geom),
            geom,
            color: self.color,
            arm: 0,
            link: 0,
        }
    }
}

/// Swept-sphere bound `{p + s v : s in [0, 1]}` dilated by `r`, used to
/// reject whole pixels before casting their sub-rays.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cull {
    p: Vector3<f64>,
    v: Vector3<f64>,
    r: f64,
    pp: f64,
    pv: f64,
    vv: f64,
    zmax: f64,
}

impl Cull {
    fn of(geom: &Geom) -> Self {
        let (p, v, r) = match *geom {
            Geom::Sphere { c, r } => (c, Vector3::zeros(), r),
            Geom::Capsule { a, ba, r, .. } => (a, ba, r),
            Geom::Box { rt, h, c, .. } => {
                // capsule around the longest axis
                let l = h.imax();
                let axis: Vector3<f64> = rt.row(l).transpose();
                let r = (h.norm_squared() - h[l] * h[l]).sqrt();
                (c - axis * h[l], axis * (2.0 * h[l]), r)
            }
        };
        Self {
            p,
            v,
            r,
            pp: p.norm_squared(),
            pv: p.dot(&v),
            vv: v.norm_squared(),
            zmax: p.z.max(p.z + v.z) + r,
        }
    }

    /// False only if no ray within `spread` (per unit depth) of the line
    /// through `c` can touch the bound.
    #[inline]
    fn may_hit(&self, c: &Vector3<f64>, cc: f64, spread: f64) -> bool {
        let pc = self.p.dot(c);
        let vc = self.v.dot(c);
        // squared distance from p + s v to the line, a quadratic in s
        let qa = self.vv - vc * vc / cc;
        let qb = 2.0 * (self.pv - pc * vc / cc);
        let q0 = self.pp - pc * pc / cc;
        let f = |s: f64| (qa * s + qb) * s + q0;
        let d2 = if qa > 1e-15 {
            f((-qb / (2.0 * qa)).clamp(0.0, 1.0))
        } else {
            f(0.0).min(f(1.0))
        };
        let reach = self.r + self.zmax.max(0.0) * spread + 1e-9;
        d2 <= reach * reach || d2 <= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Geom {
    Sphere {
        c: Vector3<f64>,
        r: f64,
    },
    Capsule {
        a: Vector3<f64>,
        b: Vector3<f64>,
        r: f64,
        ba: Vector3<f64>,
        baba: f64,
        /// `ba . (origin - a)`
        baoa: f64,
        qc: f64,
        /// `|a|^2 - r^2`, `|b|^2 - r^2`
        ca: f64,
        cb: f64,
    },
    Box {
        /// camera -> box rotation
        rt: Matrix3<f64>,
        /// camera origin in the box frame
        o: Vector3<f64>,
        h: Vector3<f64>,
        c: Vector3<f64>,
    },
}

/// A shape placed in the camera frame, tagged with its owner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    geom: Geom,
    cull: Cull,
    pub color: [u8; 3],
    pub arm: usize,
    pub link: usize,
}

#[inline]
fn sphere_hit(d: &Vector3<f64>, dd: f64, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let b = d.dot(c);
    let cc = c.norm_squared() - r * r;
    let disc = b * b - dd * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (b - sq) / dd;
    if t0 > T_EPS {
        return Some(t0);
    }
    let t1 = (b + sq) / dd;
    (t1 > T_EPS).then_some(t1)
}

impl Primitive {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        PrimitiveShape::sphere(radius, Pose::identity()).posed(&Pose::from_translation(center))
    }

    pub fn cuboid(pose: &Pose, half_extents: [f64; 3]) -> Self {
        PrimitiveShape::cuboid(half_extents, Pose::identity()).posed(pose)
    }

    pub fn capsule(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Self {
        PrimitiveShape::capsule(radius, a, b).posed(&Pose::identity())
    }

    pub fn with_color(mut self, color: [u8; 3]) -> Self {
        self.color = color;
        self
    }

    /// Ray parameter (equal to camera z since `d.z == 1`) of the nearest
    /// positive hit along `t * d`.
    #[inline]
    pub fn intersect(&self, d: &Vector3<f64>) -> Option<f64> {
        let dd = d.norm_squared();
        match &self.geom {
            Geom::Sphere { c, r } => sphere_hit(d, dd, c, *r),
            Geom::Capsule {
                a,
                b,
                r,
                ba,
                baba,
                baoa,
                qc,
                ..
            } => {
                let bard = ba.dot(d);
                let rdoa = -d.dot(a);
                let qa = baba * dd - bard * bard;
                let qb = baba * rdoa - baoa * bard;
                let h = qb * qb - qa * qc;
                if h < 0.0 {
                    // misses the infinite cylinder that contains the capsule
                    return None;
                }
                let mut best = f64::INFINITY;
                if qa > 1e-12 * baba * dd {
                    let sq = h.sqrt();
                    let t = (-qb - sq) / qa;
                    let y = baoa + t * bard;
                    if t > T_EPS {
                        // entering the cylinder from outside: body or one cap
                        if y > 0.0 && y < *baba {
                            return Some(t);
                        }
                        return sphere_hit(d, dd, if y <= 0.0 { a } else { b }, *r);
                    }
                    let t = (-qb + sq) / qa;
                    let y = baoa + t * bard;
                    if t > T_EPS && y > 0.0 && y < *baba {
                        best = t;
                    }
                }
                for cap in [a, b] {
                    if let Some(t) = sphere_hit(d, dd, cap, *r) {
                        best = best.min(t);
                    }
                }
                best.is_finite().then_some(best)
            }
            Geom::Box { rt, o, h, .. } => {
                let dl = rt * d;
                let mut tn = f64::NEG_INFINITY;
                let mut tf = f64::INFINITY;
                for i in 0..3 {
                    let inv = 1.0 / dl[i];
                    let t1 = (-h[i] - o[i]) * inv;
                    let t2 = (h[i] - o[i]) * inv;
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    tn = tn.max(lo);
                    tf = tf.min(hi);
                }
                if tn > tf || tf <= T_EPS || tn.is_nan() {
                    None
                } else if tn > T_EPS {
                    Some(tn)
                } else {
                    Some(tf)
                }
            }
        }
    }

    /// [`Primitive::intersect`] for every direction `(xs[i], ys[i], 1)`,
    /// `inf` on a miss. Written branch-free so the common case vectorizes;
    /// lanes starting inside a shape fall back to the scalar path.
    #[inline(always)]
    fn intersect_batch(&self, xs: &[f64], ys: &[f64], out: &mut [f64]) {
        let n = out.len();
        let (xs, ys) = (&xs[..n], &ys[..n]);
        let inf = f64::INFINITY;
        match self.geom {
            Geom::Sphere { c, r } => {
                let cc = c.norm_squared() - r * r;
                for i in 0..n {
                    let (x, y) = (xs[i], ys[i]);
                    let dd = x * x + y * y + 1.0;
                    let b = c.x * x + c.y * y + c.z;
                    let disc = b * b - dd * cc;
                    let sq = disc.max(0.0).sqrt();
                    let t0 = (b - sq) / dd;
                    let t1 = (b + sq) / dd;
                    let t = if t0 > T_EPS { t0 } else if t1 > T_EPS { t1 } else { inf };
                    out[i] = if disc < 0.0 { inf } else { t };
                }
            }
            Geom::Capsule {
                a,
                b,
                ba,
                baba,
                baoa,
                qc,
                ca,
                cb,
                ..
            } => {
                for i in 0..n {
                    let (x, y) = (xs[i], ys[i]);
                    let dd = x * x + y * y + 1.0;
                    let bard = ba.x * x + ba.y * y + ba.z;
                    let rdoa = -(a.x * x + a.y * y + a.z);
                    let qa = baba * dd - bard * bard;
                    let qb = baba * rdoa - baoa * bard;
                    let h = qb * qb - qa * qc;
                    let t = (-qb - h.max(0.0).sqrt()) / qa;
                    let yy = baoa + t * bard;
                    // entering the cylinder from outside: body or the cap on that side
                    let below = yy <= 0.0;
                    let cx = if below { a.x } else { b.x };
                    let cy = if below { a.y } else { b.y };
                    let cz = if below { a.z } else { b.z };
                    let ccap = if below { ca } else { cb };
                    let bs = cx * x + cy * y + cz;
                    let disc = bs * bs - dd * ccap;
                    let ts = (bs - disc.max(0.0).sqrt()) / dd;
                    let cap_t = if disc >= 0.0 && ts > T_EPS { ts } else { inf };
                    let hit = if yy > 0.0 && yy < baba { t } else { cap_t };
                    let regular = qa > 1e-12 * baba * dd && t > T_EPS;
                    out[i] = if h < 0.0 {
                        inf
                    } else if regular {
                        hit
                    } else {
                        f64::NAN
                    };
                }
                for i in 0..n {
                    if out[i].is_nan() {
                        out[i] = self.intersect(&Vector3::new(xs[i], ys[i], 1.0)).unwrap_or(inf);
                    }
                }
            }
            Geom::Box { rt, o, h, .. } => {
                for i in 0..n {
                    let (x, y) = (xs[i], ys[i]);
                    let mut tn = f64::NEG_INFINITY;
                    let mut tf = f64::INFINITY;
                    for j in 0..3 {
                        let dl = rt[(j, 0)] * x + rt[(j, 1)] * y + rt[(j, 2)];
                        let inv = 1.0 / dl;
                        let t1 = (-h[j] - o[j]) * inv;
                        let t2 = (h[j] - o[j]) * inv;
                        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                        tn = tn.max(lo);
                        tf = tf.min(hi);
                    }
                    let t = if tn > T_EPS { tn } else { tf };
                    out[i] = if tn > tf || tf <= T_EPS || tn.is_nan() { inf } else { t };
                }
            }
        }
    }

    /// Outward surface normal at a surface point `p`.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match &self.geom {
            Geom::Sphere { c, .. } => (p - c).normalize(),
            Geom::Capsule { a, ba, .. } => {
                let s = ((p - a).dot(&ba) / ba.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ba * s)).normalize()
            }
            Geom::Box { rt, h, c, .. } => {
                let local = rt * (p - c);
                let mut axis = 0;
                let mut best = f64::NEG_INFINITY;
                for i in 0..3 {
                    let f = local[i].abs() / h[i];
                    if f > best {
                        best = f;
                        axis = i;
                    }
                }
                let mut n = Vector3::zeros();
                n[axis] = local[axis].signum();
                rt.transpose() * n
            }
        }
    }

    /// Screen-space convex polygon containing the projection, or `None`
    /// when the shape reaches behind the image plane.
    fn screen_hull(&self, k: &CameraIntrinsics) -> Option<Vec<(f64, f64)>> {
        let sphere_rect = |c: &Vector3<f64>, r: f64| -> Option<[f64; 4]> {
            if c.z <= r * (1.0 + 1e-6) + 1e-6 {
                return None;
            }
            let zz = c.z * c.z - r * r;
            let range = |x: f64| {
                let sq = (x * x + c.z * c.z - r * r).max(0.0).sqrt();
                ((x * c.z - r * sq) / zz, (x * c.z + r * sq) / zz)
            };
            let (x0, x1) = range(c.x);
            let (y0, y1) = range(c.y);
            Some([
                k.fx * x0 + k.cx,
                k.fx * x1 + k.cx,
                k.fy * y0 + k.cy,
                k.fy * y1 + k.cy,
            ])
        };
        let corners = |r: [f64; 4]| [(r[0], r[2]), (r[1], r[2]), (r[0], r[3]), (r[1], r[3])];
        match &self.geom {
            Geom::Sphere { c, r } => Some(corners(sphere_rect(c, *r)?).to_vec()),
            Geom::Capsule { a, b, r, .. } => {
                let mut pts = corners(sphere_rect(a, *r)?).to_vec();
                pts.extend(corners(sphere_rect(b, *r)?));
                Some(pts)
            }
            Geom::Box { rt, h, c, .. } => {
                let r = rt.transpose();
                let mut pts = Vec::with_capacity(8);
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            let p = c + r * Vector3::new(sx * h.x, sy * h.y, sz * h.z);
                            if p.z <= 1e-6 {
                                return None;
                            }
                            pts.push(k.project(&p)?);
                        }
                    }
                }
                Some(pts)
            }
        }
    }
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Per-row pixel column ranges `[u0, u1]` (inclusive) a primitive may cover.
#[derive(Debug, Clone, Default)]
struct RowSpans {
    v0: usize,
    spans: Vec<(i64, i64)>,
}

impl RowSpans {
    #[inline]
    fn get(&self, v: usize) -> Option<(i64, i64)> {
        if v < self.v0 {
            return None;
        }
        self.spans.get(v - self.v0).copied().filter(|s| s.0 <= s.1)
    }

    fn full(k: &CameraIntrinsics) -> Self {
        Self {
            v0: 0,
            spans: vec![(0, k.width as i64 - 1); k.height],
        }
    }

    fn from_hull(hull: &[(f64, f64)], k: &CameraIntrinsics) -> Self {
        let ymin = hull.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - SPAN_MARGIN;
        let ymax = hull.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + SPAN_MARGIN;
        let vlo = (ymin - 0.5).ceil().max(0.0);
        let vhi = (ymax + 0.5).floor().min(k.height as f64 - 1.0);
        if !(vlo <= vhi) {
            return Self::default();
        }
        let (vlo, vhi) = (vlo as usize, vhi as usize);
        let n = hull.len();
        let mut spans = Vec::with_capacity(vhi - vlo + 1);
        for v in vlo..=vhi {
            let (top, bot) = (v as f64 - 0.5, v as f64 + 0.5);
            let mut xmin = f64::INFINITY;
            let mut xmax = f64::NEG_INFINITY;
            for i in 0..n {
                let p = hull[i];
                if p.1 >= top - SPAN_MARGIN && p.1 <= bot + SPAN_MARGIN {
                    xmin = xmin.min(p.0);
                    xmax = xmax.max(p.0);
                }
                let q = hull[(i + 1) % n];
                for y in [top, bot] {
                    if (p.1 - y) * (q.1 - y) < 0.0 {
                        let x = p.0 + (q.0 - p.0) * (y - p.1) / (q.1 - p.1);
                        xmin = xmin.min(x);
                        xmax = xmax.max(x);
                    }
                }
            }
            if xmin > xmax {
                spans.push((1, 0));
                continue;
            }
            let u0 = (xmin - SPAN_MARGIN - 0.5).ceil().max(0.0) as i64;
            let u1 = ((xmax + SPAN_MARGIN + 0.5).floor() as i64).min(k.width as i64 - 1);
            spans.push((u0, u1));
        }
        Self { v0: vlo, spans }
    }

    fn for_primitive(p: &Primitive, k: &CameraIntrinsics) -> Self {
        match p.screen_hull(k) {
            Some(pts) if pts.iter().all(|q| q.0.is_finite() && q.1.is_finite()) => {
                Self::from_hull(&convex_hull(pts), k)
            }
            _ => Self::full(k),
        }
    }
}

/// Nearest hit of one sub-ray.
#[derive(Debug, Clone, Copy)]
pub struct SubrayHit {
    pub depth: f64,
    pub primitive: usize,
    pub dir: Vector3<f64>,
}

struct PixelRays<'a> {
    depth: &'a [f64],
    primitive: &'a [usize],
    xs: &'a [f64],
    ys: &'a [f64],
}

struct Lanes<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
    tmp: &'a mut [f64],
    best: &'a mut [f64],
    who: &'a mut [usize],
}

#[inline(always)]
fn nearest_hits_generic(prims: &[Primitive], cands: &[usize], l: Lanes<'_>) {
    for &c in cands {
        prims[c].intersect_batch(l.xs, l.ys, l.tmp);
        for i in 0..l.best.len() {
            if l.tmp[i] < l.best[i] {
                l.best[i] = l.tmp[i];
                l.who[i] = c;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn nearest_hits_avx2(prims: &[Primitive], cands: &[usize], l: Lanes<'_>) {
    nearest_hits_generic(prims, cands, l)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn nearest_hits_avx512(prims: &[Primitive], cands: &[usize], l: Lanes<'_>) {
    nearest_hits_generic(prims, cands, l)
}

/// Wider vector units when the CPU has them. Results are bit-identical:
/// no fused operations are enabled.
fn nearest_hits(prims: &[Primitive], cands: &[usize], l: Lanes<'_>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the feature was detected at runtime
        unsafe { nearest_hits_avx512(prims, cands, l) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime
        unsafe { nearest_hits_avx2(prims, cands, l) };
        return;
    }
    nearest_hits_generic(prims, cands, l)
}

/// Reusable ray-casting state.
#[derive(Debug, Default)]
pub struct Rasterizer {
    spans: Vec<RowSpans>,
    region_spans: Vec<RowSpans>,
    row_bits: Vec<u64>,
    region_bits: Vec<bool>,
    cands: Vec<usize>,
    hits: Vec<SubrayHit>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    xtab: Vec<f64>,
    ytab: Vec<f64>,
    tmp: Vec<f64>,
    best: Vec<f64>,
    who: Vec<usize>,
}

impl Rasterizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Casts all sub-rays of all pixels a primitive may cover and calls
    /// `visit(pixel_index, hits)` for each pixel with at least one hit.
    /// Pixels are visited in row-major order.
    pub fn cast<F>(&mut self, prims: &[Primitive], k: &CameraIntrinsics, supersample: usize, mut visit: F)
    where
        F: FnMut(usize, &[SubrayHit]),
    {
        let mut hits = std::mem::take(&mut self.hits);
        self.trace(prims, k, supersample, |idx, rays| {
            hits.clear();
            for i in 0..rays.depth.len() {
                if rays.depth[i] < f64::INFINITY {
                    hits.push(SubrayHit {
                        depth: rays.depth[i],
                        primitive: rays.primitive[i],
                        dir: Vector3::new(rays.xs[i], rays.ys[i], 1.0),
                    });
                }
            }
            visit(idx, &hits);
        });
        self.hits = hits;
    }

    /// Like [`Rasterizer::cast`] but reports only the number of hitting
    /// sub-rays and the sum of their depths.
    pub fn cast_coverage<F>(&mut self, prims: &[Primitive], k: &CameraIntrinsics, supersample: usize, mut visit: F)
    where
        F: FnMut(usize, usize, f64),
    {
        self.trace(prims, k, supersample, |idx, rays| {
            let mut n = 0;
            let mut sum = 0.0;
            for &d in rays.depth {
                if d < f64::INFINITY {
                    n += 1;
                    sum += d;
                }
            }
            visit(idx, n, sum);
        });
    }

    /// Like [`Rasterizer::cast_coverage`] but only over pixels that some
    /// primitive of `region` may cover, and every such pixel is reported,
    /// with zero hits if nothing in `prims` is hit.
    pub fn cast_coverage_region<F>(
        &mut self,
        prims: &[Primitive],
        region: &[Primitive],
        k: &CameraIntrinsics,
        supersample: usize,
        mut visit: F,
    ) where
        F: FnMut(usize, usize, f64),
    {
        self.trace_in(prims, Some(region), k, supersample, |idx, rays| {
            let mut n = 0;
            let mut sum = 0.0;
            for &d in rays.depth {
                if d < f64::INFINITY {
                    n += 1;
                    sum += d;
                }
            }
            visit(idx, n, sum);
        });
    }

    fn trace<F>(&mut self, prims: &[Primitive], k: &CameraIntrinsics, supersample: usize, visit: F)
    where
        F: FnMut(usize, PixelRays<'_>),
    {
        self.trace_in(prims, None, k, supersample, visit)
    }

    fn trace_in<F>(
        &mut self,
        prims: &[Primitive],
        region: Option<&[Primitive]>,
        k: &CameraIntrinsics,
        supersample: usize,
        mut visit: F,
    ) where
        F: FnMut(usize, PixelRays<'_>),
    {
        let s = supersample.max(1);
        let n = s * s;
        for buf in [&mut self.xs, &mut self.ys, &mut self.tmp, &mut self.best] {
            buf.resize(n, 0.0);
        }
        self.who.resize(n, usize::MAX);
        self.spans.clear();
        self.spans
            .extend(prims.iter().map(|p| RowSpans::for_primitive(p, k)));
        self.region_spans.clear();
        if let Some(r) = region {
            self.region_spans
                .extend(r.iter().map(|p| RowSpans::for_primitive(p, k)));
        }
        let bounds = if region.is_some() { &self.region_spans } else { &self.spans };
        let (Some(vmin), Some(vmax)) = (
            bounds.iter().filter(|s| !s.spans.is_empty()).map(|s| s.v0).min(),
            bounds
                .iter()
                .filter(|s| !s.spans.is_empty())
                .map(|s| s.v0 + s.spans.len() - 1)
                .max(),
        ) else {
            return;
        };
        // sub-ray coordinates on the z = 1 plane, per column and per row
        let inv_s = 1.0 / s as f64;
        let sub = |i: usize, c: f64, f: f64| {
            let p = (i / s) as f64 - 0.5 + ((i % s) as f64 + 0.5) * inv_s;
            (p - c) / f
        };
        self.xtab.clear();
        self.xtab.extend((0..k.width * s).map(|i| sub(i, k.cx, k.fx)));
        self.ytab.clear();
        self.ytab.extend((0..k.height * s).map(|i| sub(i, k.cy, k.fy)));
        let spread = 0.5 * (1.0 / (k.fx * k.fx) + 1.0 / (k.fy * k.fy)).sqrt();
        let centers: Vec<f64> = (0..k.width).map(|u| (u as f64 - k.cx) / k.fx).collect();
        // per-pixel candidate bitsets for the current row
        let words = prims.len().div_ceil(64);
        self.row_bits.clear();
        self.row_bits.resize(k.width * words, 0);
        self.region_bits.clear();
        self.region_bits.resize(k.width, false);
        for v in vmin..=vmax {
            let yc = (v as f64 - k.cy) / k.fy;
            self.row_bits.fill(0);
            self.region_bits.fill(false);
            let (mut umin, mut umax) = (i64::MAX, i64::MIN);
            if let Some(r) = region {
                for (i, sp) in self.region_spans.iter().enumerate() {
                    let Some((u0, u1)) = sp.get(v) else { continue };
                    umin = umin.min(u0);
                    umax = umax.max(u1);
                    for u in u0..=u1 {
                        if !self.region_bits[u as usize] {
                            let c = Vector3::new(centers[u as usize], yc, 1.0);
                            self.region_bits[u as usize] = r[i].cull.may_hit(&c, c.norm_squared(), spread);
                        }
                    }
                }
                if umin > umax {
                    continue;
                }
            }
            for (i, sp) in self.spans.iter().enumerate() {
                let Some((mut u0, mut u1)) = sp.get(v) else { continue };
                if region.is_some() {
                    u0 = u0.max(umin);
                    u1 = u1.min(umax);
                } else {
                    umin = umin.min(u0);
                    umax = umax.max(u1);
                }
                for u in u0..=u1 {
                    if region.is_some() && !self.region_bits[u as usize] {
                        continue;
                    }
                    let c = Vector3::new(centers[u as usize], yc, 1.0);
                    if prims[i].cull.may_hit(&c, c.norm_squared(), spread) {
                        self.row_bits[u as usize * words + i / 64] |= 1 << (i % 64);
                    }
                }
            }
            if umin > umax {
                continue;
            }
            for sy in 0..s {
                self.ys[sy * s..(sy + 1) * s].fill(self.ytab[v * s + sy]);
            }
            for u in umin as usize..=umax as usize {
                let bits = &self.row_bits[u * words..(u + 1) * words];
                self.cands.clear();
                for (w, b) in bits.iter().enumerate() {
                    let mut m = *b;
                    while m != 0 {
                        self.cands.push(w * 64 + m.trailing_zeros() as usize);
                        m &= m - 1;
                    }
                }
                if region.is_some() && !self.region_bits[u] {
                    continue;
                }
                self.best.fill(f64::INFINITY);
                if !self.cands.is_empty() {
                    let row = &self.xtab[u * s..(u + 1) * s];
                    for sy in 0..s {
                        self.xs[sy * s..(sy + 1) * s].copy_from_slice(row);
                    }
                    let lanes = Lanes {
                        xs: &self.xs,
                        ys: &self.ys,
                        tmp: &mut self.tmp,
                        best: &mut self.best,
                        who: &mut self.who,
                    };
                    nearest_hits(prims, &self.cands, lanes);
                } else if region.is_none() {
                    continue;
                }
                if region.is_some() || self.best.iter().any(|&d| d < f64::INFINITY) {
                    visit(
                        v * k.width + u,
                        PixelRays {
                            depth: &self.best,
                            primitive: &self.who,
                            xs: &self.xs,
                            ys: &self.ys,
                        },
                    );
                }
            }
        }
    }
}

/// Mask (hit fraction) and depth (meters, `+inf` = no hit).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub mask: Grid<f64>,
    pub depth: Grid<f64>,
}

impl RenderOutput {
    pub fn empty(k: &CameraIntrinsics) -> Self {
        Self {
            mask: Grid::filled(k.width, k.height, 0.0),
            depth: Grid::filled(k.width, k.height, f64::INFINITY),
        }
    }
}

/// Platform plus its base pose in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub platform: Platform,
    pub camera_from_base: Pose,
}

/// Places every link primitive in the camera frame for the given joint
/// values (one vector per arm).
pub fn pose_scene(model: &SceneModel, q: &[Vec<f64>]) -> Result<Vec<Primitive>> {
    if q.len() != model.platform.arms.len() {
        return Err(Error::dim(format!(
            "{} joint vectors for {} arms",
            q.len(),
            model.platform.arms.len()
        )));
    }
    let mut prims = Vec::new();
    for (ai, (arm, qa)) in model.platform.arms.iter().zip(q).enumerate() {
        if arm.chain.link_geometry.len() != arm.chain.dof() {
            return Err(Error::config(format!("arm '{}' has no link geometry", arm.name)));
        }
        let fk = forward_kinematics_values(&arm.chain, qa)?;
        let root = model.camera_from_base.compose(&arm.mount);
        for (li, (link, shapes)) in fk.links.iter().zip(&arm.chain.link_geometry).enumerate() {
            let frame = root.compose(link);
            for shape in shapes {
                let mut p = shape.posed(&frame);
                p.arm = ai;
                p.link = li;
                prims.push(p);
            }
        }
    }
    Ok(prims)
}

pub fn render_primitives(prims: &[Primitive], k: &CameraIntrinsics, supersample: usize) -> Result<RenderOutput> {
    if supersample == 0 {
        return Err(Error::config("supersample must be at least 1"));
    }
    let n = (supersample * supersample) as f64;
    let mut out = RenderOutput::empty(k);
    Rasterizer::new().cast_coverage(prims, k, supersample, |idx, hits, depth_sum| {
        out.mask.data[idx] = hits as f64 / n;
        out.depth.data[idx] = depth_sum / hits as f64;
    });
    Ok(out)
}

pub fn render(
    model: &SceneModel,
    q: &[Vec<f64>],
    k: &CameraIntrinsics,
    supersample: usize,
) -> Result<RenderOutput> {
    render_primitives(&pose_scene(model, q)?, k, supersample)
}

/// Flat-shaded rendering plus its mask and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub color: ColorImage,
    pub mask: Grid<f64>,
    pub depth: Grid<f64>,
}

/// Unit direction toward the light, camera frame (up-left, behind the camera).
fn light_dir() -> Vector3<f64> {
    Vector3::new(-0.3, -0.5, -1.0).normalize()
}

const AMBIENT: f64 = 0.35;

pub fn render_overlay_primitives(prims: &[Primitive], k: &CameraIntrinsics, supersample: usize) -> Result<Overlay> {
    if supersample == 0 {
        return Err(Error::config("supersample must be at least 1"));
    }
    let n = (supersample * supersample) as f64;
    let base = RenderOutput::empty(k);
    let mut out = Overlay {
        color: Grid::filled(k.width, k.height, [0, 0, 0]),
        mask: base.mask,
        depth: base.depth,
    };
    let light = light_dir();
    Rasterizer::new().cast(prims, k, supersample, |idx, hits| {
        let mut rgb = [0.0f64; 3];
        let mut zsum = 0.0;
        for h in hits {
            let prim = &prims[h.primitive];
            let p = h.dir * h.depth;
            let lambert = prim.normal(&p).dot(&light).max(0.0);
            let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
            for (c, &base) in rgb.iter_mut().zip(&prim.color) {
                *c += base as f64 * shade;
            }
            zsum += h.depth;
        }
        let m = hits.len() as f64;
        out.mask.data[idx] = m / n;
        out.depth.data[idx] = zsum / m;
        out.color.data[idx] = rgb.map(|c| (c / m + 0.5).floor().clamp(0.0, 255.0) as u8);
    });
    Ok(out)
}

pub fn render_robot_overlay(
    model: &SceneModel,
    q: &[Vec<f64>],
    k: &CameraIntrinsics,
    supersample: usize,
) -> Result<Overlay> {
    render_overlay_primitives(&pose_scene(model, q)?, k, supersample)
}
