use liparch::blocks::{Activation, LayerNorm};
use liparch::fixtures::{random_post_ln, TransformerDims};
use liparch::lipnum::{
    accretivity_margin, analytic_lip_bound, empirical_lip_number, empirical_sup_jacobian, lip_report,
    sample_jacobian, AnalyticOptions, DomainSampler, EstimatorOptions, LipOptions,
};
use liparch::seed::random_orthogonal;
use liparch::{Block, Matrix, Seed};
use liparch_oracle as oracle;
use proptest::prelude::*;

fn from_dense(d: &oracle::Dense) -> Matrix {
    let rows: Vec<&[f64]> = d.iter().map(|r| r.as_slice()).collect();
    Matrix::from_rows(&rows)
}

fn lin(m: Matrix) -> Block {
    Block::linear(m).unwrap()
}

#[test]
fn linear_sup_jacobian_matches_svd() {
    for (i, n) in [2usize, 3, 5, 8, 13, 21].into_iter().enumerate() {
        let d = oracle::random_dense(n, n, 1000 + i as u64);
        let want = oracle::spectral_norm(&d);
        let got = empirical_sup_jacobian(&lin(from_dense(&d)), &DomainSampler::ball(2, n, 1.0), 4, Seed::new(1, i as u64)).unwrap();
        assert!((got - want).abs() <= 1e-6 * want, "n={n}: {got} vs {want}");
    }
}

#[test]
fn analytic_linear_bound_is_the_spectral_norm() {
    let d = oracle::random_dense(6, 6, 77);
    let got = analytic_lip_bound(&lin(from_dense(&d)), 1.0, &AnalyticOptions::new(3)).unwrap();
    assert!((got - oracle::spectral_norm(&d)).abs() < 1e-9);
}

#[test]
fn shear_separates_norm_and_lip_number() {
    let shear = lin(Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]));
    let sampler = DomainSampler::ball(1, 2, 1.0);
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let l = empirical_sup_jacobian(&shear, &sampler, 8, Seed::new(2, 0)).unwrap();
    assert!((l - phi).abs() <= 1e-6, "{l}");

    let est = empirical_lip_number(&shear, 32, &sampler, 8, Seed::new(2, 0)).unwrap();
    assert!(est.sequence.windows(2).all(|w| w[1].1 < w[0].1), "{:?}", est.sequence);
    let a = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
    let want = oracle::spectral_norm(&oracle::matpow(&a, 32)).powf(1.0 / 32.0);
    assert!((est.value - want).abs() <= 0.05 * want, "{} vs {want}", est.value);
}

#[test]
fn half_identity_has_lip_one_half() {
    let b = lin(Matrix::identity(3).scale(0.5));
    let est = empirical_lip_number(&b, 16, &DomainSampler::ball(2, 3, 1.0), 4, Seed::new(3, 0)).unwrap();
    assert!((est.value - 0.5).abs() < 1e-6);
    assert!((est.extrapolated - 0.5).abs() < 1e-6);
}

#[test]
fn rotations_have_unit_norm_and_lip_number() {
    let q = random_orthogonal(4, &mut Seed::new(4, 0).rng());
    let b = lin(q);
    let sampler = DomainSampler::ball(2, 4, 1.0);
    let l = empirical_sup_jacobian(&b, &sampler, 8, Seed::new(4, 1)).unwrap();
    assert!((l - 1.0).abs() < 1e-6);
    let est = empirical_lip_number(&b, 32, &sampler, 4, Seed::new(4, 2)).unwrap();
    assert!((est.value - 1.0).abs() < 1e-6);
}

#[test]
fn negative_half_identity_has_margin_one_half() {
    let f = lin(Matrix::identity(3).scale(-0.5));
    let rep = accretivity_margin(&f, &DomainSampler::ball(2, 3, 1.0), 4, Seed::new(5, 0)).unwrap();
    assert!((rep.margin - 0.5).abs() < 1e-6, "{}", rep.margin);
}

#[test]
fn expanding_map_has_negative_margin() {
    let f = lin(Matrix::identity(2).scale(0.3));
    let rep = accretivity_margin(&f, &DomainSampler::ball(1, 2, 1.0), 4, Seed::new(5, 1)).unwrap();
    assert!((rep.margin + 0.3).abs() < 1e-6, "{}", rep.margin);
}

#[test]
fn layernorm_stays_below_its_bound() {
    for eps in [1e-2, 1e-3, 1e-5] {
        let ln = Block::LayerNorm(LayerNorm::standard(6, eps));
        let bound = analytic_lip_bound(&ln, 1.0, &AnalyticOptions::new(2)).unwrap();
        assert!((bound - eps.powf(-0.5)).abs() < 1e-9 * bound);
        for radius in [1e-3, 1e-2, 1.0] {
            let l = empirical_sup_jacobian(&ln, &DomainSampler::ball(2, 6, radius), 32, Seed::new(6, 0)).unwrap();
            assert!(l <= eps.powf(-0.5) + 1e-3, "eps {eps} radius {radius}: {l}");
        }
    }
}

#[test]
fn post_ln_is_unbounded_analytically() {
    let b = random_post_ln(&TransformerDims::small(8), 1.0, Activation::Tanh, Seed::new(7, 0)).unwrap();
    let rep = lip_report(&b, &LipOptions::new(DomainSampler::ball(2, 8, 1.0))).unwrap();
    assert!(rep.analytic_upper.is_infinite());
    assert!(rep.flags.iter().any(|f| f == "analytic-bound-infinite"));
}

/// On softmax switching points the sampled Jacobian of a unit-scale post-LN
/// block grows with the domain radius. The growth is not tenfold for every
/// weight draw, so the check is on the distribution over 32 draws.
#[test]
fn post_ln_local_lipschitz_grows_with_radius() {
    let dims = TransformerDims::small(8);
    let opts = EstimatorOptions {
        n_samples: 64,
        ..Default::default()
    };
    let mut ratios: Vec<f64> = (0..32)
        .map(|s| {
            let b = random_post_ln(&dims, 1.0, Activation::Tanh, Seed::new(100 + s, 0)).unwrap();
            let at = |r: f64| {
                sample_jacobian(&b, &DomainSampler::softmax_tie(2, 8, r), &opts, Seed::new(1, 0))
                    .unwrap()
                    .sup
            };
            at(100.0) / at(1.0)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[0] > 1.0, "{ratios:?}");
    assert!(ratios[16] >= 10.0, "median growth {}", ratios[16]);
    let tenfold = ratios.iter().filter(|r| **r >= 10.0).count();
    assert!(tenfold >= 24, "only {tenfold} of 32 draws grew tenfold");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composition_is_submultiplicative(n in 2usize..6, seed in any::<u64>()) {
        let a = from_dense(&oracle::random_dense(n, n, seed));
        let b = from_dense(&oracle::random_dense(n, n, seed ^ 0x5555));
        let sampler = DomainSampler::ball(2, n, 1.0);
        let la = empirical_sup_jacobian(&lin(a.clone()), &sampler, 2, Seed::new(9, 0)).unwrap();
        let lb = empirical_sup_jacobian(&lin(b.clone()), &sampler, 2, Seed::new(9, 0)).unwrap();
        let st = Block::stack(vec![lin(a), lin(b)]).unwrap();
        let lab = empirical_sup_jacobian(&st, &sampler, 2, Seed::new(9, 0)).unwrap();
        prop_assert!(lab <= la * lb * (1.0 + 1e-6));
    }

    #[test]
    fn more_samples_never_lower_the_sup(seed in 0u64..1000, extra in 1usize..16) {
        let b = random_post_ln(&TransformerDims::small(4), 0.5, Activation::Tanh, Seed::new(seed, 0)).unwrap();
        let sampler = DomainSampler::ball(2, 4, 1.0);
        let few = EstimatorOptions { n_samples: 4, ..Default::default() };
        let many = EstimatorOptions { n_samples: 4 + extra, ..Default::default() };
        let a = sample_jacobian(&b, &sampler, &few, Seed::new(seed, 1)).unwrap().sup;
        let c = sample_jacobian(&b, &sampler, &many, Seed::new(seed, 1)).unwrap().sup;
        prop_assert!(c >= a);
    }

    #[test]
    fn scaling_a_linear_map_scales_its_norm(n in 2usize..6, seed in any::<u64>(), c in 0.1f64..10.0) {
        let a = from_dense(&oracle::random_dense(n, n, seed));
        let sampler = DomainSampler::ball(1, n, 1.0);
        let l1 = empirical_sup_jacobian(&lin(a.clone()), &sampler, 2, Seed::new(10, 0)).unwrap();
        let lc = empirical_sup_jacobian(&lin(a.scale(c)), &sampler, 2, Seed::new(10, 0)).unwrap();
        prop_assert!((lc - c * l1).abs() <= 1e-6 * lc);
    }

    /// `Lip(S D S⁻¹) = Lip(D)` whatever the conditioning of `S`, while the
    /// norms differ.
    #[test]
    fn lip_number_is_similarity_invariant(seed in any::<u64>(), cond in 1.0f64..20.0) {
        let d = Matrix::diag(&[0.9, 0.5, -0.3]);
        let q = random_orthogonal(3, &mut Seed::new(seed, 0).rng());
        let s = q.matmul(&Matrix::diag(&[1.0, cond.sqrt(), cond])).unwrap();
        let s_inv = Matrix::diag(&[1.0, 1.0 / cond.sqrt(), 1.0 / cond]).matmul(&q.transpose()).unwrap();
        let a = s.matmul(&d).unwrap().matmul(&s_inv).unwrap();
        let est = empirical_lip_number(&lin(a), 64, &DomainSampler::ball(1, 3, 1.0), 4, Seed::new(11, 0)).unwrap();
        prop_assert!((est.extrapolated - 0.9).abs() <= 0.02, "{}", est.extrapolated);
    }
}
