use darl::diffusion::{
    forward_diffuse, posterior_mean_from_noise, posterior_mean_from_target, sample_patch, simplified_loss, Denoiser,
    DiffusionStep, NoiseSchedule,
};
use darl::{Rng, Tensor};
use proptest::prelude::*;

struct Shrink;

impl Denoiser for Shrink {
    fn denoise(&self, x_s: &Tensor, gamma: f64) -> darl::Result<Tensor> {
        Ok(x_s.scale(gamma.sqrt()))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn target_and_noise_parameterizations_agree(seed in any::<u64>(), gp in 0.01f64..=1.0, frac in 0.0f64..0.99, d in 1usize..32) {
        let gs = gp * frac;
        let step = DiffusionStep::new(gp, gs).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let x0 = rng.uniform_tensor(&[d]);
        let eps = rng.gaussian_tensor(&[d]);
        let x_s = forward_diffuse(&x0, gs, &eps).unwrap();
        let a = posterior_mean_from_target(&x_s, &x0, &step).unwrap();
        let b = posterior_mean_from_noise(&x_s, &eps, &step).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn simplified_loss_is_zero_on_match_and_permutation_invariant(seed in any::<u64>(), d in 1usize..40) {
        let mut rng = Rng::seed_from_u64(seed);
        let (a, b) = (rng.gaussian_tensor(&[d]), rng.gaussian_tensor(&[d]));
        prop_assert_eq!(simplified_loss(&a, &a).unwrap(), 0.0);
        let mut perm: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut perm);
        let pa = Tensor::from_vec(perm.iter().map(|&i| a.data()[i]).collect());
        let pb = Tensor::from_vec(perm.iter().map(|&i| b.data()[i]).collect());
        let (l, lp) = (simplified_loss(&a, &b).unwrap(), simplified_loss(&pa, &pb).unwrap());
        prop_assert!((l - lp).abs() <= 1e-12 * l.max(1.0));
    }

    #[test]
    fn sampler_is_deterministic_per_seed(seed in any::<u64>(), steps in 1usize..30, a in 0.2f64..5.0, b in 0.2f64..5.0) {
        let schedule = NoiseSchedule::new(a, b, steps).unwrap();
        let draw = |s: u64| sample_patch(&Shrink, &[4], &schedule, &mut Rng::seed_from_u64(s)).unwrap();
        let x = draw(seed);
        prop_assert_eq!(&x, &draw(seed));
        prop_assert!(x.all_finite());
    }

    #[test]
    fn gamma_grids_decrease_from_one_to_zero(a in 0.05f64..10.0, b in 0.05f64..10.0, steps in 1usize..200) {
        let grid = NoiseSchedule::new(a, b, steps).unwrap().gamma_grid().unwrap();
        prop_assert_eq!(grid.len(), steps + 1);
        prop_assert_eq!(grid[0], 1.0);
        prop_assert_eq!(grid[steps], 0.0);
        prop_assert!(grid.windows(2).all(|w| w[1] < w[0]));
    }
}
