use demoadapt::kinematics::{rotmat_to_rot6d, Pose};
use demoadapt::trajectory::{
    absolute_to_relative, chunk, relative_to_absolute, resample, resample_indices, rotation_distance, ActionRecord,
    ArmAction, SamplingThresholds, Trajectory,
};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    (prop::array::uniform3(-1.0f64..1.0), -3.1f64..3.1).prop_filter_map("zero axis", |(a, th)| {
        let a = Vector3::from(a);
        (a.norm() > 1e-3).then(|| Pose::from_axis_angle(&a.normalize(), th, Vector3::zeros()).rotation)
    })
}

fn arm() -> impl Strategy<Value = ArmAction> {
    (prop::array::uniform3(-0.5f64..0.5), rotation(), 0.0f64..0.08).prop_map(|(t, r, w)| ArmAction {
        translation: t,
        rotation: rotmat_to_rot6d(&r),
        gripper_width: w,
    })
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    (1usize..3).prop_flat_map(|arms| {
        prop::collection::vec((0.001f64..0.1, prop::collection::vec(arm(), arms)), 1..30).prop_map(|recs| {
            let mut t = 0.0;
            Trajectory::new(
                recs.into_iter()
                    .map(|(dt, arms)| {
                        t += dt;
                        ActionRecord { timestamp: t, arms }
                    })
                    .collect(),
            )
            .unwrap()
        })
    })
}

proptest! {
    #[test]
    fn rotation_distance_is_a_symmetric_discriminator(a in rotation(), b in rotation()) {
        prop_assert!(rotation_distance(&a, &a) <= 1e-9);
        prop_assert!((rotation_distance(&a, &b) - rotation_distance(&b, &a)).abs() <= 1e-12);
        if (a - b).abs().max() > 1e-6 {
            prop_assert!(rotation_distance(&a, &b) > 0.0);
        }
    }

    #[test]
    fn relative_round_trip(traj in trajectory().prop_filter("two records", |t| t.len() >= 2)) {
        let steps = absolute_to_relative(&traj).unwrap();
        let back = relative_to_absolute(&traj.records[0], &steps).unwrap();
        for (a, b) in traj.records.iter().zip(&back.records) {
            prop_assert_eq!(a.timestamp, b.timestamp);
            for (x, y) in a.arms.iter().zip(&b.arms) {
                let (px, py) = (x.pose().unwrap(), y.pose().unwrap());
                prop_assert!((px.to_matrix() - py.to_matrix()).abs().max() <= 1e-12);
                prop_assert!((x.gripper_width - y.gripper_width).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn resample_is_idempotent_subsequence(traj in trajectory()) {
        let th = SamplingThresholds::default();
        let idx = resample_indices(&traj, &th).unwrap();
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(*idx.last().unwrap(), traj.len() - 1);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let once = resample(&traj, &th).unwrap();
        prop_assert_eq!(resample(&once, &th).unwrap(), once);
    }

    #[test]
    fn chunks_cover_every_record(traj in trajectory(), horizon in 1usize..8) {
        let chunks = chunk(&traj, horizon).unwrap();
        prop_assert_eq!(chunks.len(), traj.len());
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.start, i);
            prop_assert_eq!(c.actions.len(), horizon);
            for (j, (a, &pad)) in c.actions.iter().zip(&c.padded).enumerate() {
                prop_assert_eq!(pad, i + j >= traj.len());
                prop_assert_eq!(a, &traj.records[(i + j).min(traj.len() - 1)]);
            }
        }
    }
}

#[test]
fn constant_pose_keeps_only_endpoints() {
    let rec = |t: f64| ActionRecord {
        timestamp: t,
        arms: vec![ArmAction {
            translation: [0.3, -0.1, 0.9],
            rotation: rotmat_to_rot6d(&Matrix3::identity()),
            gripper_width: 0.04,
        }],
    };
    let traj = Trajectory::new((0..100).map(|i| rec(i as f64 / 30.0)).collect()).unwrap();
    assert_eq!(resample_indices(&traj, &SamplingThresholds::default()).unwrap(), vec![0, 99]);
}
