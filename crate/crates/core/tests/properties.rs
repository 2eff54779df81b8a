use std::sync::Arc;

use epistemic_core::backend::{OracleEntry, SyntheticOracle};
use epistemic_core::dist::{Atom, Categorical, TupleSpace};
use epistemic_core::estimators::{estimate_mi_alg1, StabilizationParams};
use epistemic_core::missing_mass::{expected_missing_mass, missing_mass_exact};
use epistemic_core::prompt::pseudo_joint_distribution;
use epistemic_core::similarity::{cluster_texts, dedupe, f1_text};
use epistemic_core::{AbstentionPolicy, Decision, Direction, PromptFamily, ScoreName};
use proptest::prelude::*;

fn space(sizes: &[usize]) -> Arc<TupleSpace> {
    let coords = sizes
        .iter()
        .map(|&s| (0..s as i64).map(Atom::Int).collect())
        .collect();
    Arc::new(TupleSpace::new(coords).unwrap())
}

/// A joint over 1 to 3 coordinates with at most 4 values each.
fn joint() -> impl Strategy<Value = Categorical> {
    prop::collection::vec(1usize..=4, 1..=3).prop_flat_map(|sizes| {
        let n: usize = sizes.iter().product();
        prop::collection::vec(0.0f64..1.0, n)
            .prop_filter("some mass", |w| w.iter().sum::<f64>() > 1e-3)
            .prop_map(move |w| Categorical::from_unnormalized(space(&sizes), w).unwrap())
    })
}

fn full_support_joint() -> impl Strategy<Value = Categorical> {
    prop::collection::vec(1usize..=4, 1..=3).prop_flat_map(|sizes| {
        let n: usize = sizes.iter().product();
        prop::collection::vec(0.01f64..1.0, n)
            .prop_map(move |w| Categorical::from_unnormalized(space(&sizes), w).unwrap())
    })
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "london", "paris", "uk", "the", "city", "of", "Berlin", "new", "york", ",",
    ])
    .prop_map(str::to_owned)
}

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..5).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn kl_to_any_product_dominates_mi(q in joint(), seed in any::<u64>()) {
        let s = q.shared_space();
        let mut rng_w = seed;
        let marginals: Vec<Vec<f64>> = s
            .coords()
            .iter()
            .map(|c| {
                let w: Vec<f64> = (0..c.len())
                    .map(|_| {
                        rng_w = rng_w.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        0.05 + (rng_w >> 11) as f64 / (1u64 << 53) as f64
                    })
                    .collect();
                let t: f64 = w.iter().sum();
                w.into_iter().map(|x| x / t).collect()
            })
            .collect();
        let weights: Vec<f64> = (0..s.size())
            .map(|f| s.unravel(f).iter().enumerate().map(|(j, &i)| marginals[j][i]).product())
            .collect();
        let p = Categorical::from_unnormalized(Arc::clone(&s), weights).unwrap();
        prop_assert!(q.kl_divergence(&p).unwrap() >= q.mutual_information_exact() - 1e-9);
    }

    #[test]
    fn mi_is_kl_to_product_of_marginals(q in joint()) {
        let kl = q.kl_divergence(&q.product_of_marginals()).unwrap();
        prop_assert!((kl - q.mutual_information_exact()).abs() <= 1e-10);
        prop_assert!(q.mutual_information_exact() >= -1e-12);
    }

    #[test]
    fn entropy_bounded_by_log_support(q in joint()) {
        let h = q.entropy();
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (q.support_size() as f64).ln() + 1e-12);
    }

    #[test]
    fn alg1_collapses_when_all_atoms_seen(q in full_support_joint(), extra in prop::collection::vec(any::<prop::sample::Index>(), 0..10)) {
        let s = q.shared_space();
        let mut samples: Vec<Vec<usize>> = (0..s.size()).map(|f| s.unravel(f)).collect();
        samples.extend(extra.iter().map(|i| s.unravel(i.index(s.size()))));
        let est = estimate_mi_alg1(&samples, |t: &[usize]| q.prob(s.ravel(t)), StabilizationParams::zero()).unwrap();
        prop_assert!((est.value - q.mutual_information_exact()).abs() <= 1e-12);
        prop_assert!((est.z - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn coarsening_a_coordinate_cannot_raise_mi(
        w in prop::collection::vec(0.01f64..1.0, 12),
        f in prop::collection::vec(0usize..2, 4),
    ) {
        // joint over X in 0..3 and Y in 0..4, then Y mapped through f
        let fine = Categorical::from_unnormalized(space(&[3, 4]), w.clone()).unwrap();
        let mut coarse = vec![0.0; 6];
        for x in 0..3 {
            for y in 0..4 {
                coarse[x * 2 + f[y]] += fine.prob(x * 4 + y);
            }
        }
        let coarse = Categorical::from_unnormalized(space(&[3, 2]), coarse).unwrap();
        prop_assert!(coarse.mutual_information_exact() <= fine.mutual_information_exact() + 1e-12);
    }

    #[test]
    fn f1_symmetric_and_bounded(a in phrase(), b in phrase()) {
        let ab = f1_text(&a, &b);
        prop_assert_eq!(ab, f1_text(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.split_whitespace().any(|t| t.chars().any(char::is_alphanumeric)) {
            prop_assert!((f1_text(&a, &a) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn clustering_conserves_mass(items in prop::collection::vec((phrase(), 0.0f64..1.0), 1..12), tau in 0.0f64..1.0) {
        let texts: Vec<String> = items.iter().map(|(t, _)| t.clone()).collect();
        let keep = dedupe(&texts);
        let uniques: Vec<&str> = keep.iter().map(|&i| texts[i].as_str()).collect();
        let probs: Vec<f64> = keep.iter().map(|&i| items[i].1).collect();
        let c = cluster_texts(&uniques, &probs, tau);
        prop_assert!((c.mass.iter().sum::<f64>() - probs.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert_eq!(c.assignment.len(), uniques.len());
        prop_assert_eq!(c.members.iter().map(Vec::len).sum::<usize>(), uniques.len());
    }

    #[test]
    fn missing_mass_in_unit_interval(w in prop::collection::vec(0.01f64..1.0, 1..20), k in 0usize..50, seed in any::<u64>()) {
        let q = Categorical::from_unnormalized(space(&[w.len()]), w).unwrap();
        let u = missing_mass_exact(&q, &q.sample_indices(k, seed));
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&u));
        let e0 = expected_missing_mass(q.weights(), k);
        let e1 = expected_missing_mass(q.weights(), k + 1);
        prop_assert!(e1 <= e0 + 1e-15);
    }

    #[test]
    fn independent_oracle_has_zero_pseudo_joint_mi(w in prop::collection::vec(0.05f64..1.0, 2..5), n in 2usize..4) {
        let total: f64 = w.iter().sum();
        let answers: Vec<String> = (0..w.len()).map(|i| format!("answer{i}")).collect();
        let entry = OracleEntry::new("q", answers.iter().cloned().zip(w.iter().map(|x| x / total)));
        let oracle = SyntheticOracle::single(entry, 0).unwrap();
        let joint = pseudo_joint_distribution(&oracle, &PromptFamily::new("q"), &answers, n).unwrap();
        prop_assert!(joint.mutual_information_exact().abs() <= 1e-12);
    }

    #[test]
    fn raising_threshold_only_adds_answers(scores in prop::collection::vec(-5.0f64..5.0, 1..30), l1 in -5.0f64..5.0, dl in 0.0f64..3.0) {
        for name in ScoreName::ALL {
            let lo = AbstentionPolicy::new(name, l1).unwrap();
            let hi = AbstentionPolicy::new(name, l1 + dl).unwrap();
            // uncertainty scores answer more as the threshold rises, confidence scores fewer
            let (strict, loose) = match name.direction() {
                Direction::Uncertainty => (&lo, &hi),
                Direction::Confidence => (&hi, &lo),
            };
            for &s in &scores {
                if strict.apply(s) == Decision::Answer {
                    prop_assert_eq!(loose.apply(s), Decision::Answer);
                }
            }
        }
    }
}
