//! Cross-module invariants checked against independent dense oracles.

use heat::aggregate::{heat_at_levels, shrinkage_levels_round1, ShrinkageConfig};
use heat::datagen::{generate_ensemble, generate_sites, GraphKind, GraphSpec, Synthetic};
use heat::ensemble::{classify_entry, decompose, EntryClass, PrecisionEnsemble};
use heat::eval::{evaluate, loss_matrix, LossKind};
use heat::matrix::matrix_norm;
use heat::protocol::{expected_scalars, simulate, MessageKind, Payload, ProtocolConfig};
use heat::site::LocalSummary;
use heat::{Matrix, NormKind};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

fn square(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| Matrix::from_vec(n, n, v).unwrap())
}

fn small_ensemble() -> impl Strategy<Value = PrecisionEnsemble> {
    (1usize..5, 2usize..6).prop_flat_map(|(m, p)| {
        (
            prop::collection::vec(square(p), m),
            prop::collection::vec(1usize..400, m),
        )
            .prop_map(|(mats, counts)| {
                let sym = mats.into_iter().map(|a| a.symmetrized()).collect();
                PrecisionEnsemble::from_counts(sym, &counts).unwrap()
            })
    })
}

fn count_nonzero(m: &Matrix) -> usize {
    m.as_slice().iter().filter(|&&v| v != 0.0).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_norm_agrees_with_svd(a in square(10)) {
        let ours = matrix_norm(&a, NormKind::Two).unwrap();
        let svd = to_na(&a).singular_values().max();
        prop_assert!((ours - svd).abs() <= 1e-8 * (1.0 + svd));
    }

    #[test]
    fn norms_are_absolutely_homogeneous(a in square(6), c in -10.0f64..10.0) {
        for kind in [NormKind::One, NormKind::Two, NormKind::Inf, NormKind::Frobenius] {
            let lhs = matrix_norm(&a.scale(c), kind).unwrap();
            let rhs = c.abs() * matrix_norm(&a, kind).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs), "{kind:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn decomposition_reconstructs_and_identifies(ens in small_ensemble()) {
        let d = decompose(&ens);
        for m in 0..ens.sites() {
            prop_assert!(d.reconstruct(m).max_abs_diff(ens.omega(m)) <= 1e-12 * (1.0 + ens.omega(m).max_abs()));
        }
        prop_assert!(d.identification_residual() <= 1e-12 * (1.0 + ens.omegas().iter().map(Matrix::max_abs).fold(0.0, f64::max)));
    }

    #[test]
    fn l1_loss_is_dominated_by_l2_loss(a in small_ensemble(), seed in 0u64..1000, r in 1.0f64..3.0) {
        let shift = Matrix::from_fn(a.dim(), a.dim(), |j, k| ((j * 7 + k * 3) as f64 + seed as f64).sin());
        let b = PrecisionEnsemble::new(a.omegas().iter().map(|o| o.add(&shift.symmetrized()).unwrap()).collect(), a.weights().to_vec()).unwrap();
        let l1 = loss_matrix(&a, &b, LossKind::L1, r).unwrap();
        let l2 = loss_matrix(&a, &b, LossKind::L2, r).unwrap();
        for (x, y) in l1.as_slice().iter().zip(l2.as_slice()) {
            prop_assert!(*x <= y * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn unit_power_evaluation_is_symmetric(a in small_ensemble(), c in 0.1f64..3.0) {
        let b = PrecisionEnsemble::new(a.omegas().iter().map(|o| o.scale(c)).collect(), a.weights().to_vec()).unwrap();
        for kind in [LossKind::L1, LossKind::L2] {
            let ab = evaluate(&a, &b, kind, 1.0).unwrap();
            let ba = evaluate(&b, &a, kind, 1.0).unwrap();
            prop_assert_eq!(&ab.reductions, &ba.reductions);
            prop_assert!(evaluate(&a, &a, kind, 1.0).unwrap().reductions.values().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn payload_sizes_follow_the_schema(p in 1usize..6, n in 10usize..5000, cands in 1usize..4) {
        let a = Matrix::from_fn(p, p, |j, k| (j + 2 * k) as f64);
        let payloads = [
            Payload::Summary { n, kappa: 0.5, omega_bar: a.clone(), v_hat: a.clone() },
            Payload::Estimate(a.clone()),
            Payload::Iterate(a.clone()),
            Payload::Candidates(vec![a.clone(); cands]),
            Payload::Scores(vec![0.0; cands]),
        ];
        for pl in payloads {
            let bytes = pl.encode();
            prop_assert_eq!(bytes.len(), 8 * pl.kind().schema_scalars(p, cands));
            prop_assert_eq!(Payload::decode(pl.kind(), p, &bytes).unwrap(), pl);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_precisions_are_well_conditioned(p in 3usize..25, deg in 1usize..3, h in 0.0f64..=1.0, m in 1usize..5, seed in 0u64..10_000, banded in any::<bool>()) {
        let spec = if banded { GraphSpec::banded(p, deg, h, m, seed) } else { GraphSpec::erdos_renyi(p, deg, h, m, seed) };
        let (ens, profile) = generate_ensemble(&spec).unwrap();
        for omega in ens.omegas() {
            let eig = to_na(omega).symmetric_eigen().eigenvalues.min();
            prop_assert!(eig >= 0.1 - 1e-8, "min eigenvalue {eig}");
        }
        for k in 0..p {
            let (mut common, mut hete) = (0, 0);
            for j in (0..p).filter(|&j| j != k) {
                match classify_entry(&ens.entry_vector(j, k), 0.0) {
                    EntryClass::Common => common += 1,
                    EntryClass::Heterogeneous => hete += 1,
                    EntryClass::Zero => {}
                }
            }
            prop_assert!(common <= profile.s1 && hete <= profile.s2);
        }
    }

    #[test]
    fn heterogeneous_count_grows_with_ratio(seed in 0u64..10_000) {
        let count = |h: f64| {
            let (ens, _) = generate_ensemble(&GraphSpec::erdos_renyi(30, 3, h, 3, seed)).unwrap();
            let mut c = 0;
            for j in 0..30 {
                for k in (j + 1)..30 {
                    c += usize::from(classify_entry(&ens.entry_vector(j, k), 0.0) == EntryClass::Heterogeneous);
                }
            }
            c
        };
        let counts: Vec<usize> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&h| count(h)).collect();
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn larger_levels_never_add_nonzeros(seed in 0u64..10_000, factor in 1.0f64..4.0, h in 0.0f64..=1.0) {
        let syn = Synthetic::generate(&GraphSpec::erdos_renyi(12, 2, h, 3, seed), 80).unwrap();
        let sim = simulate(&syn.datasets, 1, &ProtocolConfig::default()).unwrap();
        let summaries: Vec<LocalSummary> = sim.summaries.clone();
        let cfg = ShrinkageConfig::default();
        let levels = shrinkage_levels_round1(&summaries, &cfg).unwrap();
        let base = heat_at_levels(&summaries, levels.clone(), &cfg).unwrap();
        let big = heat_at_levels(&summaries, levels.scaled(factor), &cfg).unwrap();
        prop_assert!(count_nonzero(&big.gamma_hat) <= count_nonzero(&base.gamma_hat));
        for (a, b) in big.lambda_hats.iter().zip(&base.lambda_hats) {
            prop_assert!(count_nonzero(a) <= count_nonzero(b));
        }
    }

    #[test]
    fn ledger_total_matches_closed_form(m in 1usize..5, p in 3usize..7, t in 1usize..5, seed in 0u64..1000) {
        let syn = Synthetic::generate(&GraphSpec::erdos_renyi(p, 1, 0.5, m, seed), 60).unwrap();
        let cfg = ProtocolConfig { kappa: 0.3, seed, ..ProtocolConfig::default() };
        let sim = simulate(&syn.datasets, t, &cfg).unwrap();
        prop_assert_eq!(sim.ledger.total_scalars(), expected_scalars(m, p, t));
        prop_assert_eq!(sim.ledger.count(MessageKind::SummaryUpload), m);
        prop_assert_eq!(sim.ledger.count(MessageKind::IterUpload), m * (t - 1));
    }
}

#[test]
fn generation_is_byte_identical_for_a_fixed_seed() {
    let spec = GraphSpec { kind: GraphKind::Banded, ..GraphSpec::erdos_renyi(15, 2, 0.5, 3, 42) };
    let a = Synthetic::generate(&spec, 50).unwrap();
    let b = Synthetic::generate(&spec, 50).unwrap();
    assert_eq!(a.sizes, b.sizes);
    for (x, y) in a.datasets.iter().zip(&b.datasets) {
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.raw()), bits(y.raw()));
    }
    let again = generate_sites(&a.truth, &a.sizes, 42).unwrap();
    assert_eq!(again[2].raw(), a.datasets[2].raw());
}

#[test]
fn input_order_does_not_matter() {
    let syn = Synthetic::generate(&GraphSpec::erdos_renyi(10, 2, 1.0, 4, 8), 70).unwrap();
    let cfg = ProtocolConfig { kappa: 0.3, ..ProtocolConfig::default() };
    let forward = simulate(&syn.datasets, 2, &cfg).unwrap();
    let shuffled: Vec<_> = [2, 0, 3, 1].iter().map(|&i| syn.datasets[i].clone()).collect();
    let again = simulate(&shuffled, 2, &cfg).unwrap();
    for (a, b) in forward.estimates.iter().zip(&again.estimates) {
        assert_eq!(a, b);
    }
}

#[test]
fn relabelling_sites_permutes_estimates() {
    let syn = Synthetic::generate(&GraphSpec::erdos_renyi(10, 2, 1.0, 4, 8), 70).unwrap();
    // Without splitting no randomness depends on the site id.
    let cfg = ProtocolConfig::default();
    let forward = simulate(&syn.datasets, 2, &cfg).unwrap();
    let relabelled: Vec<_> = syn.datasets.iter().map(|d| d.clone().with_site_id(3 - d.site_id())).collect();
    let reversed = simulate(&relabelled, 2, &cfg).unwrap();
    for (a, b) in forward.estimates.iter().zip(&reversed.estimates) {
        // Sums run in a different order, so agreement is to rounding.
        assert!(a.gamma_hat.max_abs_diff(&b.gamma_hat) <= 1e-12);
        for m in 0..4 {
            assert!(a.omega_tildes[m].max_abs_diff(&b.omega_tildes[3 - m]) <= 1e-12);
        }
    }
}
