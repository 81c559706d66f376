use proptest::prelude::*;

use sctnet::cfblock::{gdn, GDN_EPS};
use sctnet::io::container::Container;
use sctnet::io::image::{decode_pgm, decode_ppm};
use sctnet::io::RunConfig;
use sctnet::model::{crop, reflect_pad};
use sctnet::ops;
use sctnet::{Graph, Shape, Tensor};

fn tensor(max_c: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 1..=max_c, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-30.0f64..30.0, n * c * h * w).prop_map(move |d| Tensor::from_vec(Shape::new(n, c, h, w), d).unwrap())
    })
}

fn pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    tensor(4).prop_flat_map(|a| {
        let s = a.shape();
        prop::collection::vec(-30.0f64..30.0, s.numel()).prop_map(move |d| (a.clone(), Tensor::from_vec(s, d).unwrap()))
    })
}

fn shift_channels(x: &Tensor<f64>, shifts: &[f64]) -> Tensor<f64> {
    let s = x.shape();
    let mut y = x.clone();
    for (i, plane) in y.data_mut().chunks_mut(s.hw()).enumerate() {
        plane.iter_mut().for_each(|v| *v += shifts[i % s.c()]);
    }
    y
}

proptest! {
    #[test]
    fn softmax_planes_sum_to_one(x in tensor(4), t in 0.1f64..8.0) {
        let y = ops::softmax_spatial(&x, t).unwrap();
        for plane in y.data().chunks(x.shape().hw()) {
            prop_assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(plane.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gdn_ignores_per_channel_shifts(x in tensor(4), shifts in prop::collection::vec(-100.0f64..100.0, 4)) {
        let mut g = Graph::<f64>::no_grad();
        let a = g.input(x.clone());
        let b = g.input(shift_channels(&x, &shifts));
        let ya = gdn(&mut g, a, 1, GDN_EPS).unwrap();
        let yb = gdn(&mut g, b, 1, GDN_EPS).unwrap();
        prop_assert!(g.value(ya).max_abs_diff(g.value(yb)).unwrap() < 1e-9);
    }

    #[test]
    fn group_l2_blocks_have_unit_norm(x in tensor(3), groups in 1usize..3) {
        let s = x.shape();
        let c = s.c() * groups;
        let mut data = Vec::new();
        for n in 0..s.n() {
            for _ in 0..groups {
                data.extend_from_slice(&x.data()[n * s.c() * s.hw()..(n + 1) * s.c() * s.hw()]);
            }
        }
        let x = Tensor::from_vec(Shape::new(s.n(), c, s.h(), s.w()), data).unwrap();
        let y = ops::group_l2_normalize(&x, groups, 0.0).unwrap();
        let gs = c / groups;
        for n in 0..s.n() {
            for gi in 0..groups {
                for p in 0..s.hw() {
                    let sq: f64 = (0..gs).map(|i| x.data()[(n * c + gi * gs + i) * s.hw() + p].powi(2)).sum();
                    if sq > 1e-20 {
                        let norm: f64 = (0..gs).map(|i| y.data()[(n * c + gi * gs + i) * s.hw() + p].powi(2)).sum::<f64>().sqrt();
                        prop_assert!((norm - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cwd_is_nonnegative_and_shift_invariant((a, b) in pair(), t in 0.5f64..8.0, shifts in prop::collection::vec(-20.0f64..20.0, 4)) {
        let l = ops::cwd_loss(&a, &b, t).unwrap().0;
        prop_assert!(l >= -1e-12);
        let ls = ops::cwd_loss(&shift_channels(&a, &shifts), &b, t).unwrap().0;
        let lt = ops::cwd_loss(&a, &shift_channels(&b, &shifts), t).unwrap().0;
        prop_assert!((l - ls).abs() < 1e-8 * l.max(1.0));
        prop_assert!((l - lt).abs() < 1e-8 * l.max(1.0));
        prop_assert!(ops::cwd_loss(&a, &a, t).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn kl_and_l2_are_nonnegative((a, b) in pair(), t in 0.5f64..8.0) {
        prop_assert!(ops::kl_loss(&a, &b, t).unwrap().0 >= -1e-12);
        prop_assert!(ops::l2_loss(&a, &b).unwrap().0 >= 0.0);
        prop_assert_eq!(ops::l2_loss(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity(x in tensor(3), dh in 0usize..40, dw in 0usize..40) {
        let s = x.shape();
        let p = reflect_pad(&x, s.h() + dh, s.w() + dw).unwrap();
        prop_assert_eq!(crop(&p, s.h(), s.w()).unwrap(), x);
    }

    #[test]
    fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        if let Ok(c) = Container::parse(&bytes) {
            prop_assert_eq!(c.to_bytes(), bytes.clone());
        }
        let _ = decode_ppm::<f32>(&bytes);
        let _ = decode_pgm(&bytes);
        let _ = RunConfig::parse(&String::from_utf8_lossy(&bytes), &[]);
    }

    #[test]
    fn container_prefixes_of_valid_files_fail_cleanly(cut in 0usize..200) {
        let mut c = Container::new();
        c.push(sctnet::io::Entry::text("__config__", "[train]\nlr = 0.1\n")).unwrap();
        c.push(sctnet::io::Entry::new("w", vec![2, 3], sctnet::io::TensorData::F32(vec![1.0; 6])).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert_eq!(Container::parse(&bytes[..cut]).is_ok(), cut == bytes.len());
    }
}
