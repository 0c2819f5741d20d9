use bdense::metrics::{
    mmd_rbf, mode_coverage, sliced_wasserstein, trajectory_endpoint_error, wasserstein_1d, Bandwidth, SampleSet,
};
use bdense::schedule::ScheduleSpec;
use bdense::solvers::solve;
use bdense::{Denoiser, NoiseSchedule, Result, SolverKind, Tensor, TimeGrid, TimePoint};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set(rows: usize, cols: usize, shift: f32, seed: u64) -> SampleSet {
    let t = Tensor::randn(&[rows, cols], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let data = t.data().iter().map(|v| v + shift).collect();
    SampleSet::unlabeled(Tensor::matrix(rows, cols, data).unwrap()).unwrap()
}

/// W1 between two empirical measures by expanding both to `n m` equally
/// weighted atoms and pairing them in sorted order.
fn w1_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut x: Vec<f64> = a.iter().flat_map(|&v| std::iter::repeat_n(v, b.len())).collect();
    let mut y: Vec<f64> = b.iter().flat_map(|&v| std::iter::repeat_n(v, a.len())).collect();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn w1_matches_the_expanded_coupling(
        a in prop::collection::vec(-10.0f64..10.0, 1..40),
        b in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let (mut a, mut b) = (a, b);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let want = w1_oracle(&a, &b);
        prop_assert!((wasserstein_1d(&a, &b) - want).abs() <= 1e-9 * (1.0 + want));
        prop_assert!((wasserstein_1d(&b, &a) - want).abs() <= 1e-9 * (1.0 + want));
    }

    #[test]
    fn metrics_are_symmetric_and_deterministic(n in 2usize..60, m in 2usize..60, shift in -3.0f32..3.0, seed in any::<u64>()) {
        let a = set(n, 2, 0.0, seed);
        let b = set(m, 2, shift, seed.wrapping_add(1));
        for bw in [Bandwidth::Median, Bandwidth::Fixed(0.7)] {
            let ab = mmd_rbf(&a, &b, bw).unwrap().value;
            prop_assert_eq!(ab.to_bits(), mmd_rbf(&b, &a, bw).unwrap().value.to_bits());
            prop_assert!(ab >= 0.0);
        }
        let ab = sliced_wasserstein(&a, &b, 16, seed).unwrap().value;
        let ba = sliced_wasserstein(&b, &a, 16, seed).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert_eq!(ab.to_bits(), sliced_wasserstein(&a, &b, 16, seed).unwrap().value.to_bits());
        prop_assert_eq!(sliced_wasserstein(&a, &a, 16, seed).unwrap().value, 0.0);
    }

    #[test]
    fn far_point_masses_follow_the_closed_form(d in 0.1f64..50.0, h in 0.2f64..5.0) {
        let p = |x: f64| SampleSet::unlabeled(Tensor::matrix(2, 1, vec![x as f32; 2]).unwrap()).unwrap();
        let got = mmd_rbf(&p(0.0), &p(d), Bandwidth::Fixed(h)).unwrap().value;
        let dd = (d as f32) as f64;
        let want = 2.0 - 2.0 * (-dd * dd / (2.0 * h * h)).exp();
        prop_assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn swd_in_one_dimension_is_the_exact_w1() {
    let a = set(10_000, 1, 0.0, 1);
    let b = set(10_000, 1, 1.0, 2);
    let sorted = |s: &SampleSet| {
        let mut v: Vec<f64> = s.points().data().iter().map(|&x| x as f64).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let oracle = sorted(&a).iter().zip(sorted(&b)).map(|(x, y)| (x - y).abs()).sum::<f64>() / 10_000.0;
    let got = sliced_wasserstein(&a, &b, 64, 0).unwrap().value;
    assert!((got - oracle).abs() <= 1e-9 * oracle);
    assert!((got - 1.0).abs() < 0.05, "{got}");
    let single = |x: f32| SampleSet::unlabeled(Tensor::matrix(2, 1, vec![x, x]).unwrap()).unwrap();
    assert_eq!(sliced_wasserstein(&single(0.0), &single(-2.5), 3, 0).unwrap().value, 2.5);
}

#[test]
fn swd_of_a_shifted_gaussian_matches_its_expectation() {
    // projecting a unit shift onto a uniform direction gives E|cos| = 2 / pi
    let a = set(10_000, 2, 0.0, 3);
    let mut b = set(10_000, 2, 0.0, 4).points().clone();
    b.data_mut().iter_mut().step_by(2).for_each(|v| *v += 1.0);
    let b = SampleSet::unlabeled(b).unwrap();
    let got = sliced_wasserstein(&a, &b, 1024, 9).unwrap().value;
    let want = 2.0 / std::f64::consts::PI;
    assert!((got - want).abs() < 0.05 * want, "{got} vs {want}");
}

#[test]
fn interpolating_toward_the_reference_shrinks_swd() {
    let a = set(2000, 2, 0.0, 5);
    let b = set(2000, 2, 2.0, 6);
    let values: Vec<f64> = [0.0, 0.25, 0.5, 0.75]
        .iter()
        .map(|&lam| {
            let mixed = b.points().lin_comb(1.0 - lam, a.points(), lam).unwrap();
            sliced_wasserstein(&a, &SampleSet::unlabeled(mixed).unwrap(), 64, 1).unwrap().value
        })
        .collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
}

#[test]
fn mmd_on_a_set_and_itself_is_small() {
    let a = set(300, 2, 0.0, 8);
    let r = mmd_rbf(&a, &a, Bandwidth::Median).unwrap();
    assert!(r.value <= 5.0 / 300.0, "{}", r.value);
    let far = set(300, 2, 8.0, 9);
    assert!(mmd_rbf(&a, &far, Bandwidth::Median).unwrap().value > 0.5);
    let wrong = set(300, 3, 0.0, 8);
    assert!(mmd_rbf(&a, &wrong, Bandwidth::Median).is_err());
    assert!(sliced_wasserstein(&a, &wrong, 4, 0).is_err());
}

#[test]
fn coverage_extremes_and_counts() {
    let centers = vec![vec![4.0, 0.0], vec![0.0, 4.0], vec![-4.0, 0.0], vec![0.0, -4.0]];
    let at: Vec<f32> = centers.iter().flat_map(|c| c.iter().map(|&v| v as f32)).collect();
    let hit = SampleSet::unlabeled(Tensor::matrix(4, 2, at).unwrap()).unwrap();
    let r = mode_coverage(&hit, &centers, 0.3).unwrap();
    assert_eq!((r.value, r.per_mode.clone().unwrap()), (1.0, vec![1; 4]));
    let miss = SampleSet::unlabeled(Tensor::zeros(&[50, 2]).unwrap()).unwrap();
    assert_eq!(mode_coverage(&miss, &centers, 0.3).unwrap().value, 0.0);
    assert!(mode_coverage(&miss, &[], 0.3).is_err());
    assert!(mode_coverage(&miss, &centers, 0.0).is_err());
}

/// Exact noise prediction for data concentrated at `mu` (or Gaussian with
/// std `s`), on which DDIM is exact or first order respectively.
struct Gaussian {
    mu: f64,
    s: f64,
}

impl Denoiser for Gaussian {
    fn predict_eps(&self, z: &Tensor, points: &[TimePoint]) -> Result<Tensor> {
        let c = z.cols();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = points[i / c];
                (p.sigma * (v as f64 - p.alpha * self.mu) / (p.alpha * p.alpha * self.s * self.s + p.sigma * p.sigma)) as f32
            })
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }
}

#[test]
fn endpoint_error_contracts_and_refinement() {
    let sched = NoiseSchedule::build(ScheduleSpec::vp_default(1024)).unwrap();
    let noise = Tensor::randn(&[200, 2], &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let fine = TimeGrid::uniform_indices(&sched, 256).unwrap();

    let exact = Gaussian { mu: 1.0, s: 0.0 };
    let reference = solve(&exact, &noise, &fine, SolverKind::Ddim).unwrap();
    let coarse = TimeGrid::uniform_indices(&sched, 2).unwrap();
    let r = trajectory_endpoint_error(&exact, &coarse, SolverKind::Ddim, &reference, &noise).unwrap();
    assert!(r.value < 1e-10, "{}", r.value);

    let other = Tensor::randn(&[200, 2], &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert!(trajectory_endpoint_error(&exact, &coarse, SolverKind::Ddim, &reference, &other).is_err());
    let too_fine = TimeGrid::uniform_indices(&sched, 32).unwrap();
    assert!(trajectory_endpoint_error(&exact, &too_fine, SolverKind::Ddim, &reference, &noise).is_err());

    let spread = Gaussian { mu: 0.0, s: 2.0 };
    let reference = solve(&spread, &noise, &fine, SolverKind::Ddim).unwrap();
    let errs: Vec<f64> = [2, 4, 8, 16]
        .iter()
        .map(|&nfe| {
            let grid = TimeGrid::uniform_indices(&sched, nfe).unwrap();
            trajectory_endpoint_error(&spread, &grid, SolverKind::Ddim, &reference, &noise).unwrap().value
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
}
