//! Images, depth unprojection and point-cloud utilities.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// Depth in millimeters, 0 = invalid.
pub type DepthImage = Grid<u16>;
pub type ColorImage = Grid<[u8; 3]>;
pub type BinaryMask = Grid<bool>;
/// Per-pixel coverage in `[0, 1]`.
pub type SoftMask = Grid<f32>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Intrinsics for an image resized to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: sx * self.cx + 0.5 * (sx - 1.0),
            cy: sy * self.cy + 0.5 * (sy - 1.0),
            width,
            height,
        }
    }

    /// Continuous pixel coordinates of a camera-frame point (z > 0).
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at pixel `(u, v)` with depth `z` meters.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    fn check_image<T>(&self, img: &Grid<T>) -> Result<()> {
        if img.width == self.width && img.height == self.height {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "image {}x{} vs intrinsics {}x{}",
                img.width, img.height, self.width, self.height
            )))
        }
    }
}

/// Points with optional per-point attribute rows of width `attr_dim`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub attr_dim: usize,
    pub attrs: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            attr_dim: 0,
            attrs: Vec::new(),
        }
    }

    pub fn with_attributes(points: Vec<Vector3<f64>>, attr_dim: usize, attrs: Vec<f64>) -> Result<Self> {
        if attrs.len() != points.len() * attr_dim {
            return Err(Error::dim(format!(
                "{} points with {attr_dim} attributes each need {} values, got {}",
                points.len(),
                points.len() * attr_dim,
                attrs.len()
            )));
        }
        Ok(Self {
            points,
            attr_dim,
            attrs,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn attributes(&self, i: usize) -> &[f64] {
        &self.attrs[i * self.attr_dim..(i + 1) * self.attr_dim]
    }
}

/// Image-shaped cloud; `points[v * width + u]` belongs to pixel `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganizedCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl OrganizedCloud {
    pub fn valid_points(&self) -> PointCloud {
        PointCloud::new(
            self.points
                .iter()
                .zip(&self.valid)
                .filter(|(_, &ok)| ok)
                .map(|(p, _)| *p)
                .collect(),
        )
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn unproject(depth: &DepthImage, k: &CameraIntrinsics) -> Result<OrganizedCloud> {
    k.check_image(depth)?;
    let mut points = Vec::with_capacity(depth.len());
    let mut valid = Vec::with_capacity(depth.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = *depth.get(u, v);
            if d == 0 {
                points.push(Vector3::zeros());
                valid.push(false);
            } else {
                points.push(k.backproject(u as f64, v as f64, d as f64 / 1000.0));
                valid.push(true);
            }
        }
    }
    Ok(OrganizedCloud {
        width: depth.width,
        height: depth.height,
        points,
        valid,
    })
}

/// Axis-aligned box in the camera frame, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CropBox {
    /// Workspace range used for teleoperated robot data.
    pub const TELEOPERATION: CropBox = CropBox {
        min: [-0.70, -0.30, 0.90],
        max: [0.70, 0.55, 1.55],
    };

    /// Workspace range used for in-the-wild exoskeleton data.
    pub const IN_THE_WILD: CropBox = CropBox {
        min: [-0.70, -0.30, 0.75],
        max: [0.70, 0.45, 1.40],
    };

    pub fn preset(name: &str) -> Result<CropBox> {
        match name {
            "teleoperation" => Ok(Self::TELEOPERATION),
            "in-the-wild" | "in_the_wild" => Ok(Self::IN_THE_WILD),
            other => Err(Error::config(format!("unknown crop preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.min[i] <= self.max[i]) {
            Ok(())
        } else {
            Err(Error::config(format!("crop box min exceeds max: {self:?}")))
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn far_plane(&self) -> f64 {
        self.max[2]
    }
}

pub fn crop(pc: &PointCloud, bbox: &CropBox) -> PointCloud {
    let mut out = PointCloud {
        points: Vec::new(),
        attr_dim: pc.attr_dim,
        attrs: Vec::new(),
    };
    for (i, p) in pc.points.iter().enumerate() {
        if bbox.contains(p) {
            out.points.push(*p);
            out.attrs.extend_from_slice(pc.attributes(i));
        }
    }
    out
}

pub fn voxel_key(p: &Vector3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// Replaces the points of every occupied voxel by their centroid (attributes
/// averaged). Output is ordered by voxel index.
pub fn voxel_downsample(pc: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::config(format!("voxel size must be positive, got {voxel}")));
    }
    struct Acc {
        sum: Vector3<f64>,
        attrs: Vec<f64>,
        n: usize,
    }
    let mut bins: HashMap<[i64; 3], Acc> = HashMap::new();
    for (i, p) in pc.points.iter().enumerate() {
        let acc = bins.entry(voxel_key(p, voxel)).or_insert_with(|| Acc {
            sum: Vector3::zeros(),
            attrs: vec![0.0; pc.attr_dim],
            n: 0,
        });
        acc.sum += p;
        for (a, v) in acc.attrs.iter_mut().zip(pc.attributes(i)) {
            *a += v;
        }
        acc.n += 1;
    }
    let mut keys: Vec<_> = bins.keys().copied().collect();
    keys.sort_unstable();
    let mut out = PointCloud {
        points: Vec::with_capacity(keys.len()),
        attr_dim: pc.attr_dim,
        attrs: Vec::with_capacity(keys.len() * pc.attr_dim),
    };
    for key in keys {
        let acc = &bins[&key];
        let n = acc.n as f64;
        out.points.push(acc.sum / n);
        out.attrs.extend(acc.attrs.iter().map(|a| a / n));
    }
    Ok(out)
}

/// Pooled reference coordinates: `h x w` cells with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub h: usize,
    pub w: usize,
    pub coords: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

/// Adaptive average pooling of an organized cloud onto `h x w` cells,
/// averaging only valid points. Window `i` spans rows
/// `floor(i*H/h) .. ceil((i+1)*H/h)`.
pub fn pool_reference_coords(pc: &OrganizedCloud, h: usize, w: usize) -> Result<CoordGrid> {
    if h == 0 || w == 0 || h > pc.height || w > pc.width {
        return Err(Error::dim(format!(
            "cannot pool {}x{} cloud to {h}x{w}",
            pc.height, pc.width
        )));
    }
    let (big_h, big_w) = (pc.height, pc.width);
    let mut coords = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for i in 0..h {
        let (r0, r1) = (i * big_h / h, ((i + 1) * big_h).div_ceil(h));
        for j in 0..w {
            let (c0, c1) = (j * big_w / w, ((j + 1) * big_w).div_ceil(w));
            let mut sum = Vector3::zeros();
            let mut n = 0usize;
            for r in r0..r1 {
                for c in c0..c1 {
                    let idx = r * big_w + c;
                    if pc.valid[idx] {
                        sum += pc.points[idx];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                coords.push(sum / n as f64);
                valid.push(true);
            } else {
                coords.push(Vector3::zeros());
                valid.push(false);
            }
        }
    }
    Ok(CoordGrid {
        h,
        w,
        coords,
        valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Exact `m` nearest neighbors, ascending by distance, ties by index.
pub fn knn(query: &Vector3<f64>, refs: &[Vector3<f64>], m: usize) -> Result<Vec<Neighbor>> {
    if refs.is_empty() {
        return Err(Error::data("knn over an empty reference set"));
    }
    Ok(knn_filtered(query, refs.iter().copied().enumerate(), m))
}

/// Brute-force k-nearest over `(index, point)` candidates. Candidates must
/// arrive in ascending index order for the tie rule to hold.
pub(crate) fn knn_filtered(
    query: &Vector3<f64>,
    candidates: impl Iterator<Item = (usize, Vector3<f64>)>,
    m: usize,
) -> Vec<Neighbor> {
    let m = m.max(1);
    // (squared distance, index), kept sorted
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(m + 1);
    for (idx, p) in candidates {
        let d2 = (p - query).norm_squared();
        if best.len() == m && d2 >= best[m - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d2);
        best.insert(pos, (d2, idx));
        best.truncate(m);
    }
    best.into_iter()
        .map(|(d2, index)| Neighbor {
            index,
            distance: d2.sqrt(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 8.0, 6.0, 16, 12).unwrap()
    }

    #[test]
    fn unproject_examples() {
        let mut d = DepthImage::filled(16, 12, 0);
        *d.get_mut(8, 6) = 1000;
        // cx + fx is outside this small image; use a wide one for that example
        let pc = unproject(&d, &k()).unwrap();
        assert_eq!(pc.points[6 * 16 + 8], Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(pc.valid_count(), 1);

        let wide = CameraIntrinsics::new(10.0, 10.0, 8.0, 6.0, 32, 12).unwrap();
        let mut d = DepthImage::filled(32, 12, 0);
        *d.get_mut(18, 6) = 1000;
        let pc = unproject(&d, &wide).unwrap();
        assert_eq!(pc.points[6 * 32 + 18], Vector3::new(1.0, 0.0, 1.0));

        let empty = unproject(&DepthImage::filled(16, 12, 0), &k()).unwrap();
        assert!(empty.valid_points().is_empty());
        assert!(unproject(&DepthImage::filled(4, 4, 0), &k()).is_err());
    }

    #[test]
    fn unproject_inverts_projection() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Grid::from_fn(16, 12, |_, _| rng.random_range(1..5000u16));
        let pc = unproject(&d, &k).unwrap();
        for v in 0..12 {
            for u in 0..16 {
                let (pu, pv) = k.project(&pc.points[v * 16 + u]).unwrap();
                assert!((pu - u as f64).abs() < 1e-9 && (pv - v as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn voxel_examples() {
        let pc = PointCloud::new(vec![
            Vector3::new(0.0011, 0.0011, 0.0011),
            Vector3::new(0.0021, 0.0011, 0.0011),
        ]);
        let out = voxel_downsample(&pc, 0.005).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points[0] - Vector3::new(0.0016, 0.0011, 0.0011)).norm() < 1e-15);

        let pc = PointCloud::new(vec![Vector3::zeros(), Vector3::new(0.01, 0.0, 0.0)]);
        assert_eq!(voxel_downsample(&pc, 0.005).unwrap().len(), 2);
        assert!(voxel_downsample(&pc, 0.0).is_err());
    }

    #[test]
    fn voxel_attributes_are_averaged() {
        let pc = PointCloud::with_attributes(
            vec![Vector3::new(0.001, 0.0, 0.0), Vector3::new(0.002, 0.0, 0.0)],
            2,
            vec![1.0, 10.0, 3.0, 20.0],
        )
        .unwrap();
        let out = voxel_downsample(&pc, 0.005).unwrap();
        assert_eq!(out.attrs, vec![2.0, 15.0]);
    }

    #[test]
    fn crop_examples() {
        let b = CropBox::TELEOPERATION;
        let pc = PointCloud::new(vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 0.5)]);
        let out = crop(&pc, &b);
        assert_eq!(out.points, vec![Vector3::new(0.0, 0.0, 1.0)]);
        assert!(crop(&PointCloud::default(), &b).is_empty());
        assert_eq!(crop(&out, &b), out);
    }

    #[test]
    fn pooling_examples() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, 0.0, 3.0),
        ];
        let pc = OrganizedCloud {
            width: 2,
            height: 2,
            points: pts.clone(),
            valid: vec![true; 4],
        };
        let g = pool_reference_coords(&pc, 1, 1).unwrap();
        assert_eq!(g.coords[0], Vector3::new(0.0, 0.0, 2.0));
        let same = pool_reference_coords(&pc, 2, 2).unwrap();
        assert_eq!(same.coords, pts);
        assert!(pool_reference_coords(&pc, 3, 1).is_err());

        let none = OrganizedCloud {
            valid: vec![false; 4],
            ..pc
        };
        assert_eq!(pool_reference_coords(&none, 1, 1).unwrap().valid, vec![false]);
    }

    #[test]
    fn knn_examples() {
        let refs = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 3.0, 0.0),
        ];
        let hit = knn(&refs[2], &refs, 1).unwrap();
        assert_eq!(hit[0], Neighbor { index: 2, distance: 0.0 });
        let tie = knn(&Vector3::zeros(), &refs, 2).unwrap();
        assert_eq!(tie.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(knn(&Vector3::zeros(), &refs, 10).unwrap().len(), 3);
        assert!(knn(&Vector3::zeros(), &[], 1).is_err());
    }

    #[test]
    fn crop_presets() {
        assert_eq!(CropBox::preset("in-the-wild").unwrap().far_plane(), 1.40);
        assert!(CropBox::preset("garage").is_err());
    }
}
