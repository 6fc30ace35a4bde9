//! Spatial aligner: inverse-distance interpolation of a dense feature grid
//! onto sparse seed points.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{knn_filtered, CoordGrid};

/// Distances below this count as exact hits.
pub const EXACT_HIT: f64 = 1e-9;

pub const DEFAULT_NEIGHBORS: usize = 3;

/// Dense `h x w x C` features with one reference coordinate per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// Row-major cells, `channels` values each.
    pub features: Vec<f64>,
    pub coords: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl FeatureGrid {
    pub fn new(
        h: usize,
        w: usize,
        channels: usize,
        features: Vec<f64>,
        coords: Vec<Vector3<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let g = Self {
            h,
            w,
            channels,
            features,
            coords,
            valid,
        };
        g.validate()?;
        Ok(g)
    }

    /// Features paired with pooled reference coordinates.
    pub fn from_pooled(channels: usize, features: Vec<f64>, coords: CoordGrid) -> Result<Self> {
        Self::new(coords.h, coords.w, channels, features, coords.coords, coords.valid)
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.h * self.w;
        if self.features.len() != cells * self.channels || self.coords.len() != cells || self.valid.len() != cells {
            return Err(Error::dim(format!(
                "feature grid {}x{}x{}: {} features, {} coords, {} validity flags",
                self.h,
                self.w,
                self.channels,
                self.features.len(),
                self.coords.len(),
                self.valid.len()
            )));
        }
        Ok(())
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// `N x C_g` geometric features at seed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedFeatures {
    pub channels: usize,
    pub features: Vec<f64>,
    pub coords: Vec<Vector3<f64>>,
}

impl SeedFeatures {
    pub fn new(channels: usize, features: Vec<f64>, coords: Vec<Vector3<f64>>) -> Result<Self> {
        if features.len() != coords.len() * channels {
            return Err(Error::dim(format!(
                "{} seed features for {} seeds of {channels} channels",
                features.len(),
                coords.len()
            )));
        }
        Ok(Self {
            channels,
            features,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

/// Rows laid out as `[geometric | interpolated semantic]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub channels: usize,
    pub features: Vec<f64>,
    pub coords: Vec<Vector3<f64>>,
}

impl FusedFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

/// Inverse-distance weighted feature at `point` over its `m` nearest valid
/// cells. An exact hit returns that cell's feature unchanged.
pub fn interpolate(point: &Vector3<f64>, grid: &FeatureGrid, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::config("neighbor count must be at least 1"));
    }
    grid.validate()?;
    let candidates = grid
        .coords
        .iter()
        .zip(&grid.valid)
        .enumerate()
        .filter(|(_, (_, &v))| v)
        .map(|(i, (c, _))| (i, *c));
    let nbrs = knn_filtered(point, candidates, m);
    if nbrs.is_empty() {
        return Err(Error::data("feature grid has no valid cells"));
    }
    if let Some(hit) = nbrs.iter().find(|n| n.distance < EXACT_HIT) {
        return Ok(grid.cell(hit.index).to_vec());
    }
    let mut out = vec![0.0; grid.channels];
    let mut wsum = 0.0;
    for n in &nbrs {
        let w = 1.0 / n.distance;
        wsum += w;
        for (o, f) in out.iter_mut().zip(grid.cell(n.index)) {
            *o += w * f;
        }
    }
    out.iter_mut().for_each(|o| *o /= wsum);
    Ok(out)
}

/// Concatenates every seed's features with the grid features interpolated
/// at its coordinate.
pub fn fuse(seeds: &SeedFeatures, grid: &FeatureGrid, m: usize) -> Result<FusedFeatures> {
    grid.validate()?;
    if seeds.features.len() != seeds.len() * seeds.channels {
        return Err(Error::dim("seed feature count does not match seed coordinates"));
    }
    let rows: Vec<Vec<f64>> = (0..seeds.len())
        .into_par_iter()
        .map(|i| {
            let sem = interpolate(&seeds.coords[i], grid, m)
                .map_err(|e| Error::Data(format!("seed {i}: {e}")))?;
            let mut row = seeds.row(i).to_vec();
            row.extend(sem);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(FusedFeatures {
        channels: seeds.channels + grid.channels,
        features: rows.concat(),
        coords: seeds.coords.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Pose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_grid(xs: &[f64], feats: &[f64]) -> FeatureGrid {
        let coords = xs.iter().map(|&x| Vector3::new(x, 0.0, 0.0)).collect();
        FeatureGrid::new(1, xs.len(), 1, feats.to_vec(), coords, vec![true; xs.len()]).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureGrid {
        let n = h * w;
        let coords = (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5)))
            .collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        valid[0] = true;
        let feats = (0..n * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        FeatureGrid::new(h, w, c, feats, coords, valid).unwrap()
    }

    /// Full distance matrix, sort, weighted mean.
    fn brute(point: &Vector3<f64>, g: &FeatureGrid, m: usize) -> Vec<f64> {
        let mut d: Vec<(f64, usize)> = (0..g.h * g.w)
            .filter(|&i| g.valid[i])
            .map(|i| ((g.coords[i] - point).norm(), i))
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        d.truncate(m);
        if d[0].0 < EXACT_HIT {
            return g.cell(d[0].1).to_vec();
        }
        let num: Vec<f64> = (0..g.channels)
            .map(|c| d.iter().map(|(di, i)| g.cell(*i)[c] / di).sum())
            .collect();
        let den: f64 = d.iter().map(|(di, _)| 1.0 / di).sum();
        num.iter().map(|n| n / den).collect()
    }

    #[test]
    fn exact_hit_returns_cell() {
        let g = line_grid(&[0.0, 1.0, 2.0], &[4.0, 7.0, 9.0]);
        assert_eq!(interpolate(&Vector3::new(1.0, 0.0, 0.0), &g, 3).unwrap(), vec![7.0]);
    }

    #[test]
    fn equidistant_pair_averages() {
        let g = line_grid(&[-1.0, 1.0], &[2.0, 6.0]);
        assert_eq!(interpolate(&Vector3::zeros(), &g, 2).unwrap(), vec![4.0]);
    }

    #[test]
    fn worked_example() {
        // distances 1, 2, 2 from the origin
        let coords = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0), Vector3::new(0.0, 0.0, 2.0)];
        let g = FeatureGrid::new(1, 3, 1, vec![0.0, 3.0, 3.0], coords, vec![true; 3]).unwrap();
        let v = interpolate(&Vector3::zeros(), &g, 3).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_cells_are_skipped() {
        let mut g = line_grid(&[0.0, 0.1, 5.0], &[1.0, 100.0, 3.0]);
        g.valid[1] = false;
        let v = interpolate(&Vector3::new(0.1, 0.0, 0.0), &g, 1).unwrap();
        assert_eq!(v, vec![1.0]);
        g.valid = vec![false; 3];
        assert!(interpolate(&Vector3::zeros(), &g, 1).is_err());
        assert!(interpolate(&Vector3::zeros(), &line_grid(&[0.0], &[1.0]), 0).is_err());
    }

    #[test]
    fn fuse_layout_and_degenerate_width() {
        let g = line_grid(&[0.0, 1.0], &[10.0, 20.0]);
        let seeds = SeedFeatures::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()]).unwrap();
        let f = fuse(&seeds, &g, 3).unwrap();
        assert_eq!(f.channels, 3);
        assert_eq!(f.features, vec![1.0, 2.0, 20.0, 3.0, 4.0, 10.0]);

        let empty = FeatureGrid::new(1, 2, 0, vec![], g.coords.clone(), vec![true; 2]).unwrap();
        let f = fuse(&seeds, &empty, 3).unwrap();
        assert_eq!(f.features, seeds.features);
    }

    #[test]
    fn fuse_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (h, w, c) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..5));
            let g = random_grid(&mut rng, h, w, c);
            let n = rng.random_range(1..20);
            let coords: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5)))
                .collect();
            let seeds = SeedFeatures::new(1, vec![0.0; n], coords.clone()).unwrap();
            let m = rng.random_range(1..6);
            let f = fuse(&seeds, &g, m).unwrap();
            for (i, p) in coords.iter().enumerate() {
                let want = brute(p, &g, m);
                for (a, b) in f.row(i)[1..].iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn all_cells_is_global_idw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(&mut rng, 4, 5, 2);
        let p = Vector3::new(0.2, -0.1, 1.0);
        let all = g.valid_count();
        let got = interpolate(&p, &g, all).unwrap();
        let want = brute(&p, &g, usize::MAX);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn convex_rigid_and_permutation(seed in any::<u64>(), m in 1usize..5, angle in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, 3, 4, 2);
            let coords: Vec<Vector3<f64>> = (0..6)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5)))
                .collect();
            let feats: Vec<f64> = (0..6).map(|i| i as f64).collect();
            let seeds = SeedFeatures::new(1, feats, coords.clone()).unwrap();
            let base = fuse(&seeds, &g, m).unwrap();

            // value within the range of its neighbors
            for (i, p) in coords.iter().enumerate() {
                let cands = g.coords.iter().copied().enumerate().filter(|(j, _)| g.valid[*j]);
                let nb = knn_filtered(p, cands, m);
                for c in 0..2 {
                    let lo = nb.iter().map(|n| g.cell(n.index)[c]).fold(f64::INFINITY, f64::min);
                    let hi = nb.iter().map(|n| g.cell(n.index)[c]).fold(f64::NEG_INFINITY, f64::max);
                    let v = base.row(i)[1 + c];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }

            let t = Pose::from_axis_angle(&Vector3::new(0.3, -0.5, 0.8), angle, Vector3::new(0.4, -1.0, 2.0));
            let mut gt = g.clone();
            gt.coords.iter_mut().for_each(|c| *c = t.transform_point(c));
            let st = SeedFeatures::new(1, seeds.features.clone(), coords.iter().map(|c| t.transform_point(c)).collect()).unwrap();
            let moved = fuse(&st, &gt, m).unwrap();
            for (a, b) in base.features.iter().zip(&moved.features) {
                prop_assert!((a - b).abs() <= 1e-9);
            }

            let perm: Vec<usize> = (0..6).rev().collect();
            let sp = SeedFeatures::new(
                1,
                perm.iter().map(|&i| seeds.features[i]).collect(),
                perm.iter().map(|&i| coords[i]).collect(),
            ).unwrap();
            let fp = fuse(&sp, &g, m).unwrap();
            for (r, &i) in perm.iter().enumerate() {
                prop_assert_eq!(fp.row(r), base.row(i));
            }
        }
    }
}
