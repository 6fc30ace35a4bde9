use demoadapt::geometry::{CameraIntrinsics, Grid};
use demoadapt::recording::{load_recording, save_recording, DemoRecording, Domain, Frame, JointRecord};
use demoadapt::Error;
use proptest::prelude::*;

fn recording() -> impl Strategy<Value = DemoRecording> {
    (1usize..8, 1usize..6, 0usize..5, any::<bool>(), any::<bool>(), 1usize..3).prop_flat_map(
        |(w, h, n, masks, reference, arms)| {
            let frame = (
                prop::collection::vec(any::<[u8; 3]>(), w * h),
                prop::collection::vec(any::<u16>(), w * h),
                prop::collection::vec(any::<bool>(), w * h),
                prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 7), arms),
                prop::collection::vec(0.0f64..0.1, arms),
            );
            (
                prop::collection::vec(frame, n),
                prop::collection::vec(any::<u16>(), w * h),
            )
                .prop_map(move |(frames, empty)| {
                    let k = CameraIntrinsics::new(40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
                    let mut rec = DemoRecording::new(Domain::Robot, k);
                    for (i, (c, d, m, q, g)) in frames.into_iter().enumerate() {
                        rec.frames.push(Frame {
                            color: Grid::from_vec(w, h, c).unwrap(),
                            depth: Grid::from_vec(w, h, d).unwrap(),
                            human_mask: masks.then(|| Grid::from_vec(w, h, m).unwrap()),
                            joints: JointRecord {
                                frame: i,
                                timestamp: i as f64 * 0.1,
                                q,
                                gripper: g,
                            },
                        });
                    }
                    if reference {
                        rec.empty_workspace = Some(Grid::from_vec(w, h, empty).unwrap());
                    }
                    rec
                })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_is_exact(rec in recording()) {
        let dir = tempfile::tempdir().unwrap();
        save_recording(&rec, dir.path()).unwrap();
        let back = load_recording(dir.path()).unwrap();
        prop_assert_eq!(&back, &rec);
        for (a, b) in rec.frames.iter().zip(&back.frames) {
            for (x, y) in a.joints.q.iter().flatten().zip(b.joints.q.iter().flatten()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn truncated_joint_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let k = CameraIntrinsics::new(40.0, 40.0, 2.0, 2.0, 4, 4).unwrap();
    let mut rec = DemoRecording::new(Domain::Exoskeleton, k);
    for i in 0..3 {
        rec.frames.push(Frame {
            color: Grid::filled(4, 4, [1, 2, 3]),
            depth: Grid::filled(4, 4, 900),
            human_mask: None,
            joints: JointRecord {
                frame: i,
                timestamp: i as f64,
                q: vec![vec![0.0; 7]],
                gripper: vec![0.0],
            },
        });
    }
    save_recording(&rec, dir.path()).unwrap();
    let joints = dir.path().join("joints.jsonl");
    let text = std::fs::read_to_string(&joints).unwrap();
    std::fs::write(&joints, text.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
    assert!(matches!(load_recording(dir.path()), Err(Error::Data(_)) | Err(Error::Frame { .. })));
}
