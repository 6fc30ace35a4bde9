use demoadapt::adaptors::{
    adapt_demonstration, combine_masks, composite_image, inpaint_depth, merge_depth, AdaptConfig, BaselineBackend,
};
use demoadapt::geometry::Grid;
use demoadapt::raster::{Overlay, RenderOutput};
use demoadapt::recording::Domain;
use demoadapt::synth::{demo, DemoSpec};
use proptest::prelude::*;

fn grid<T: std::fmt::Debug + Clone>(s: impl Strategy<Value = T>, w: usize, h: usize) -> impl Strategy<Value = Grid<T>> {
    prop::collection::vec(s, w * h).prop_map(move |d| Grid::from_vec(w, h, d).unwrap())
}

const W: usize = 12;
const H: usize = 9;

proptest! {
    #[test]
    fn inpaint_depth_only_touches_mask(
        d in grid(0u16..4000, W, H),
        r in grid(0u16..4000, W, H),
        m in grid(any::<bool>(), W, H),
    ) {
        let out = inpaint_depth(&d, &m, &r).unwrap();
        for i in 0..d.len() {
            prop_assert_eq!(out.data[i], if m.data[i] { r.data[i] } else { d.data[i] });
        }
    }

    #[test]
    fn merge_is_z_min_inside_robot(
        d in grid(prop_oneof![Just(0u16), 200u16..4000], W, H),
        mask in grid(prop_oneof![Just(0.0f64), 0.0f64..1.0, Just(1.0)], W, H),
        z in grid(0.1f64..4.0, W, H),
    ) {
        let robot = RenderOutput { mask, depth: z };
        let out = merge_depth(&d, &robot).unwrap();
        for i in 0..d.len() {
            if robot.mask.data[i] < 0.5 {
                prop_assert_eq!(out.data[i], d.data[i]);
            } else {
                prop_assert!(out.data[i] > 0);
                if d.data[i] > 0 {
                    prop_assert!(out.data[i] <= d.data[i]);
                }
            }
        }
    }

    #[test]
    fn combined_mask_is_a_superset(
        exo in grid(0.0f64..1.0, W, H),
        human in grid(any::<bool>(), W, H),
        radius in 0usize..3,
    ) {
        let m = combine_masks(&exo, Some(&human), 0.5, radius).unwrap();
        for i in 0..m.len() {
            if exo.data[i] >= 0.5 || human.data[i] {
                prop_assert!(m.data[i]);
            }
        }
    }

    #[test]
    fn binary_composite_selects(
        img in grid(any::<[u8; 3]>(), W, H),
        fg in grid(any::<[u8; 3]>(), W, H),
        alpha in grid(any::<bool>(), W, H),
    ) {
        let ov = Overlay {
            color: fg.clone(),
            mask: alpha.map(|&a| if a { 1.0 } else { 0.0 }),
            depth: Grid::filled(W, H, 1.0),
        };
        let out = composite_image(&img, &ov).unwrap();
        for i in 0..img.len() {
            prop_assert_eq!(out.data[i], if alpha.data[i] { fg.data[i] } else { img.data[i] });
        }
    }
}

#[test]
fn adaptation_is_deterministic_and_keeps_frames() {
    let spec = DemoSpec {
        frames: 6,
        width: 64,
        height: 36,
        ..DemoSpec::default()
    };
    let d = demo(1, &spec).unwrap();
    let run = || adapt_demonstration(&d.recording, &d.calibration, &d.rig, &AdaptConfig::default(), &BaselineBackend);
    let a = run().unwrap();
    let b = run().unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), d.recording.len());
    assert_eq!(a.domain, Domain::Robot);
    assert_eq!(a.actions.as_ref().unwrap().len(), 6);
    a.validate().unwrap();
}
