use demoadapt::geometry::{crop, knn, unproject, voxel_downsample, voxel_key, CameraIntrinsics, CropBox, Grid, PointCloud};
use nalgebra::Vector3;
use proptest::prelude::*;

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0).prop_map(Vector3::from), n)
}

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(120.0, 110.0, 15.5, 11.5, 32, 24).unwrap()
}

proptest! {
    #[test]
    fn unproject_inverts_projection(depths in prop::collection::vec(0u16..5000, 32 * 24)) {
        let k = cam();
        let d = Grid::from_vec(32, 24, depths).unwrap();
        let org = unproject(&d, &k).unwrap();
        for v in 0..24 {
            for u in 0..32 {
                let i = v * 32 + u;
                prop_assert_eq!(org.valid[i], d.data[i] > 0);
                if org.valid[i] {
                    let p = org.points[i];
                    prop_assert!((p.z - d.data[i] as f64 / 1000.0).abs() <= 1e-12);
                    let (pu, pv) = k.project(&p).unwrap();
                    let back = k.backproject(pu, pv, p.z);
                    prop_assert!((back - p).norm() <= 1e-9);
                    prop_assert!((pu - u as f64).abs() <= 1e-9 && (pv - v as f64).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn voxel_output_is_smaller_and_inside_its_voxel(pts in points(0..300), voxel in 0.01f64..0.5) {
        let pc = PointCloud::new(pts.clone());
        let out = voxel_downsample(&pc, voxel).unwrap();
        prop_assert!(out.len() <= pc.len());
        let keys: std::collections::BTreeSet<_> = pts.iter().map(|p| voxel_key(p, voxel)).collect();
        prop_assert_eq!(out.len(), keys.len());
        for p in &out.points {
            prop_assert!(keys.contains(&voxel_key(p, voxel)));
        }
    }

    #[test]
    fn voxel_is_idempotent_on_singletons(pts in points(1..100), voxel in 0.01f64..0.5) {
        // one point per voxel: keep the first point of every occupied voxel
        let mut seen = std::collections::BTreeSet::new();
        let single: Vec<_> = pts.into_iter().filter(|p| seen.insert(voxel_key(p, voxel))).collect();
        let pc = PointCloud::new(single);
        let once = voxel_downsample(&pc, voxel).unwrap();
        let twice = voxel_downsample(&once, voxel).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn crop_is_idempotent(pts in points(0..200), lo in prop::array::uniform3(-1.0f64..0.0), hi in prop::array::uniform3(0.0f64..1.0)) {
        let b = CropBox { min: lo, max: hi };
        let pc = PointCloud::new(pts);
        let once = crop(&pc, &b);
        prop_assert_eq!(crop(&once, &b), once.clone());
        prop_assert!(once.points.iter().all(|p| b.contains(p)));
    }

    #[test]
    fn knn_sorted_and_permutation_invariant(refs in points(1..60), q in prop::array::uniform3(-1.0f64..1.0), m in 1usize..8, rot in 0usize..60) {
        let q = Vector3::from(q);
        let a = knn(&q, &refs, m).unwrap();
        prop_assert!(a.windows(2).all(|w| w[0].distance <= w[1].distance));
        prop_assert_eq!(a.len(), m.min(refs.len()));
        // rotate the reference order and map indices back
        let n = refs.len();
        let shift = rot % n;
        let rotated: Vec<_> = (0..n).map(|i| refs[(i + shift) % n]).collect();
        let b = knn(&q, &rotated, m).unwrap();
        let mut back: Vec<_> = b.iter().map(|nb| ((nb.index + shift) % n, nb.distance)).collect();
        back.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        let orig: Vec<_> = a.iter().map(|nb| (nb.index, nb.distance)).collect();
        prop_assert_eq!(back, orig);
    }
}
