use miseg::data::{dice_3d, LabelVolume};
use miseg::infomax::{mi_by_entropy, mutual_information, JointDistribution};
use miseg::ndcore::{Tape, Tensor};
use miseg::transforms::{invert, TransformKind, TransformSpec};
use proptest::prelude::*;

fn joint_strategy() -> impl Strategy<Value = Tensor> {
    (2usize..8).prop_flat_map(|k| {
        prop::collection::vec(0.0f64..1.0, k * k).prop_map(move |mut v| {
            v[0] += 1e-3;
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            Tensor::new(&[k, k], v).unwrap()
        })
    })
}

fn mi(p: &Tensor) -> f64 {
    let tape = Tape::new();
    let j = JointDistribution::new(tape.constant(p.clone()).unwrap()).unwrap();
    mutual_information(&j).unwrap().item()
}

fn kind_strategy() -> impl Strategy<Value = TransformKind> {
    prop_oneof![
        Just(TransformKind::Identity),
        Just(TransformKind::Hflip),
        Just(TransformKind::Vflip),
        (1u8..4).prop_map(|k| TransformKind::Rot90 { k }),
        (-3i32..4, -3i32..4).prop_map(|(dx, dy)| TransformKind::Translate { dx, dy }),
    ]
}

proptest! {
    #[test]
    fn mi_bounds_and_decomposition(p in joint_strategy()) {
        let k = p.shape()[0] as f64;
        let v = mi(&p);
        prop_assert!(v >= -1e-12);
        prop_assert!(v <= k.ln() + 1e-9);
        prop_assert!((v - mi_by_entropy(&p).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn mi_of_product_is_zero(a in prop::collection::vec(0.01f64..1.0, 2..7)) {
        let s: f64 = a.iter().sum();
        let m: Vec<f64> = a.iter().map(|x| x / s).collect();
        let k = m.len();
        let p = Tensor::new(&[k, k], (0..k * k).map(|i| m[i / k] * m[i % k]).collect()).unwrap();
        prop_assert!(mi(&p).abs() < 1e-12);
    }

    #[test]
    fn transforms_invert_exactly(
        steps in prop::collection::vec(kind_strategy(), 0..4),
        data in prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8),
    ) {
        let x = Tensor::new(&[1, 2, 8, 8], data).unwrap();
        let t = TransformSpec { steps };
        let y = t.apply_tensor(&x).unwrap();
        let back = invert(&t).apply_tensor(&y).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        a in prop::collection::vec(0u8..3, 2 * 4 * 4),
        b in prop::collection::vec(0u8..3, 2 * 4 * 4),
        class in 0usize..3,
    ) {
        let va = LabelVolume::new(2, 4, 4, 3, a).unwrap();
        let vb = LabelVolume::new(2, 4, 4, 3, b).unwrap();
        let d = dice_3d(&va, &vb, class).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice_3d(&vb, &va, class).unwrap());
        prop_assert_eq!(dice_3d(&va, &va, class).unwrap(), 1.0);
    }
}
