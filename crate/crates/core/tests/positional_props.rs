use darl::positional::{rope_rotate_1d, rope_rotate_2d, Coord2D, FrequencyBank};
use darl::{Rng, Tensor};
use proptest::prelude::*;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_1d_depends_on_offset_only(seed in any::<u64>(), pairs in 1usize..9, m in -100.0f64..100.0, n in -100.0f64..100.0, s in -50.0f64..50.0) {
        let d = 2 * pairs;
        let bank = FrequencyBank::new_1d(d, 10_000.0).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let (k, q) = (rng.gaussian_tensor(&[1, d]), rng.gaussian_tensor(&[1, d]));
        let at = |z: &Tensor, p: f64| rope_rotate_1d(z, &[p], &bank).unwrap();
        let a = dot(&at(&k, m), &at(&q, n));
        let b = dot(&at(&k, m + s), &at(&q, n + s));
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        prop_assert!((at(&q, n).norm() - q.norm()).abs() < 1e-12);
    }

    #[test]
    fn rope_2d_depends_on_offsets_per_axis(seed in any::<u64>(), quads in 1usize..5, c in prop::array::uniform4(-30.0f64..30.0), sx in -20.0f64..20.0, sy in -20.0f64..20.0) {
        let d = 4 * quads;
        let bank = FrequencyBank::new_2d(d, 10_000.0).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let (k, q) = (rng.gaussian_tensor(&[1, d]), rng.gaussian_tensor(&[1, d]));
        let at = |z: &Tensor, x: f64, y: f64| rope_rotate_2d(z, &[Coord2D::new(x, y)], &bank).unwrap();
        let a = dot(&at(&k, c[0], c[1]), &at(&q, c[2], c[3]));
        let b = dot(&at(&k, c[0] + sx, c[1] + sy), &at(&q, c[2] + sx, c[3] + sy));
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        prop_assert!((at(&q, c[2], c[3]).norm() - q.norm()).abs() < 1e-12);
    }

    #[test]
    fn rope_2d_with_zero_y_is_1d_on_x_half(seed in any::<u64>(), quads in 1usize..5, x in -40.0f64..40.0) {
        let d = 4 * quads;
        let bank2 = FrequencyBank::new_2d(d, 10_000.0).unwrap();
        let bank1 = FrequencyBank::new_1d(d / 2, 10_000.0).unwrap();
        let mut z = Rng::seed_from_u64(seed).gaussian_tensor(&[1, d]);
        for v in &mut z.data_mut()[d / 2..] {
            *v = 0.0;
        }
        let full = rope_rotate_2d(&z, &[Coord2D::new(x, 0.0)], &bank2).unwrap();
        let half = Tensor::new(vec![1, d / 2], z.data()[..d / 2].to_vec()).unwrap();
        let one = rope_rotate_1d(&half, &[x], &bank1).unwrap();
        prop_assert_eq!(&full.data()[..d / 2], one.data());
        prop_assert!(full.data()[d / 2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_is_block_diagonal_matrix(z in prop::array::uniform4(-5.0f64..5.0), t0 in 0.0f64..3.2, t1 in 0.0f64..3.2, m in -10.0f64..10.0) {
        let bank = FrequencyBank::from_thetas(vec![vec![t0, t1]]).unwrap();
        let r = rope_rotate_1d(&Tensor::new(vec![1, 4], z.to_vec()).unwrap(), &[m], &bank).unwrap();
        let (c0, s0, c1, s1) = ((m * t0).cos(), (m * t0).sin(), (m * t1).cos(), (m * t1).sin());
        let matrix = [
            [c0, -s0, 0.0, 0.0],
            [s0, c0, 0.0, 0.0],
            [0.0, 0.0, c1, -s1],
            [0.0, 0.0, s1, c1],
        ];
        for (i, row) in matrix.iter().enumerate() {
            let expect: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
            prop_assert!((r.data()[i] - expect).abs() < 1e-12);
        }
    }
}
