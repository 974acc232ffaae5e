use num_bigint::BigUint;
use proptest::prelude::*;

use sparsecast::sparsity::{
    attended_budget, build_mask, count_paths, count_paths_u64, index_set, min_layers_full_coverage,
    reachability_report, reachable_after, MaskMatrix, PatternSpec, SparsityError,
};

/// LogSparse row straight from the definition, dropping non-positive cells.
fn log_sparse_row(l: usize) -> Vec<usize> {
    let mut row: Vec<usize> = (0..)
        .map(|m| 1usize << m)
        .take_while(|&p| p < l)
        .map(|p| l - p)
        .collect();
    row.push(l);
    row.sort_unstable();
    row
}

/// Walk counts by enumerating every intermediate sequence.
fn brute_paths(mask: &MaskMatrix, j: usize, l: usize, layers: usize) -> u64 {
    fn go(mask: &MaskMatrix, at: usize, target: usize, left: usize) -> u64 {
        if left == 0 {
            return u64::from(at == target);
        }
        (at..=mask.len())
            .filter(|&next| mask.is_allowed(next, at))
            .map(|next| go(mask, next, target, left - 1))
            .sum()
    }
    go(mask, j, l, layers)
}

fn factorial(n: u32) -> BigUint {
    (1..=n).fold(BigUint::from(1u32), |acc, k| acc * k)
}

fn any_spec(length: usize) -> impl Strategy<Value = PatternSpec> {
    let max_sub = length.max(2);
    prop_oneof![
        Just(PatternSpec::full()),
        Just(PatternSpec::log_sparse()),
        (1..=length.max(1)).prop_map(PatternSpec::local),
        (2..=max_sub).prop_map(PatternSpec::restart),
        (2..=max_sub, 1usize..8).prop_map(|(s, w)| PatternSpec::restart_local(s, w)),
    ]
    .prop_flat_map(|spec| (Just(spec), any::<bool>(), any::<bool>()))
    .prop_map(|(spec, densify, cross)| {
        let spec = if densify { spec } else { spec.without_densify() };
        if cross {
            spec
        } else {
            spec.isolated_subsequences()
        }
    })
}

#[test]
fn index_set_examples() {
    let ls = PatternSpec::log_sparse();
    assert_eq!(index_set(1, 8, &ls).unwrap(), vec![1]);
    assert_eq!(index_set(5, 8, &ls).unwrap(), vec![1, 3, 4, 5]);
    assert_eq!(index_set(8, 8, &ls).unwrap(), vec![4, 6, 7, 8]);
    assert!(index_set(0, 8, &ls).is_err());
    assert!(index_set(9, 8, &ls).is_err());
}

#[test]
fn build_mask_examples() {
    let full = build_mask(&PatternSpec::full(), 3).unwrap();
    assert_eq!((full.row(1), full.row(2), full.row(3)), (vec![1], vec![1, 2], vec![1, 2, 3]));
    let ls = build_mask(&PatternSpec::log_sparse().without_densify(), 4).unwrap();
    assert_eq!(ls.row(4), vec![2, 3, 4]);
    let rl = build_mask(&PatternSpec::restart_local(96, 7), 768).unwrap();
    assert!(attended_budget(&rl).row_max <= 112);
    assert!(build_mask(&PatternSpec::restart(10), 8).is_err());
}

#[test]
fn coverage_examples() {
    for l in [1, 5, 17] {
        assert_eq!(min_layers_full_coverage(&build_mask(&PatternSpec::full(), l).unwrap()), Some(1));
    }
    let ls = PatternSpec::log_sparse().without_densify();
    assert!(min_layers_full_coverage(&build_mask(&ls, 8).unwrap()).unwrap() <= 4);
    assert_eq!(min_layers_full_coverage(&build_mask(&ls, 2).unwrap()), Some(1));
}

#[test]
fn path_count_examples() {
    let ls = build_mask(&PatternSpec::log_sparse().without_densify(), 16).unwrap();
    assert_eq!(count_paths(&ls, 5, 5, 1).unwrap(), BigUint::from(1u32));
    assert_eq!(count_paths(&ls, 1, 2, 1).unwrap(), BigUint::from(1u32));
    for (j, l) in [(1usize, 16usize), (3, 12), (7, 8)] {
        let s = (l - j).count_ones();
        assert!(count_paths(&ls, j, l, 5).unwrap() >= factorial(s));
    }
}

#[test]
fn fixed_width_counting_reports_overflow() {
    let full = MaskMatrix::full_causal(64);
    assert!(matches!(count_paths_u64(&full, 1, 64, 40), Err(SparsityError::Overflow)));
    assert_eq!(BigUint::from(count_paths_u64(&full, 1, 64, 3).unwrap()), count_paths(&full, 1, 64, 3).unwrap());
}

#[test]
fn budget_examples_and_export() {
    let full = build_mask(&PatternSpec::full(), 4).unwrap();
    let b = attended_budget(&full);
    assert_eq!((b.nnz, b.dense_cells), (10, 16));
    let b = attended_budget(&build_mask(&PatternSpec::restart_local(96, 7), 768).unwrap());
    assert_eq!(b.equivalent_full_length, 293);
    let b = attended_budget(&build_mask(&PatternSpec::restart_local(72, 7), 576).unwrap());
    assert_eq!(b.equivalent_full_length, 254);
    let json: serde_json::Value = serde_json::from_str(&b.to_json()).unwrap();
    for key in ["nnz", "dense_cells", "row_max", "analytic_bound", "equivalent_full_length"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(build_mask(&PatternSpec::full(), 2).unwrap().to_dense_csv(), "1,0\n1,1\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_are_causal_with_diagonal(
        (length, spec) in (1usize..=512).prop_flat_map(|l| (Just(l), any_spec(l)))
    ) {
        prop_assume!(spec.validate(length).is_ok());
        let mask = build_mask(&spec, length).unwrap();
        for l in 1..=length {
            prop_assert!(mask.is_allowed(l, l));
            for j in l + 1..=length {
                prop_assert!(!mask.is_allowed(l, j));
            }
        }
    }

    #[test]
    fn index_sets_are_sorted_and_bounded(
        (length, spec, l) in (1usize..=200).prop_flat_map(|n| (Just(n), any_spec(n), 1..=n))
    ) {
        prop_assume!(spec.validate(length).is_ok());
        let row = index_set(l, length, &spec).unwrap();
        prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(row.contains(&l));
        prop_assert!(row.iter().all(|&j| (1..=l).contains(&j)));
    }

    #[test]
    fn log_sparse_rows_match_definition(l in 1usize..=2048) {
        let spec = PatternSpec::log_sparse().without_densify();
        prop_assert_eq!(index_set(l, 2048, &spec).unwrap(), log_sparse_row(l));
    }

    #[test]
    fn wide_local_window_is_full(length in 1usize..=128, extra in 0usize..8) {
        let local = build_mask(&PatternSpec::local(length + extra), length).unwrap();
        prop_assert_eq!(local, MaskMatrix::full_causal(length));
    }

    #[test]
    fn budgets_are_ordered(length in 1usize..=300, window in 1usize..=12) {
        let nnz = |spec: PatternSpec| attended_budget(&build_mask(&spec, length).unwrap()).nnz;
        let sparse = nnz(PatternSpec::log_sparse());
        let local = nnz(PatternSpec::local(window));
        let full = nnz(PatternSpec::full());
        prop_assert!(sparse <= local, "{sparse} > {local}");
        prop_assert!(local <= full);
    }

    #[test]
    fn budget_invariants(
        (length, spec) in (1usize..=400).prop_flat_map(|l| (Just(l), any_spec(l)))
    ) {
        prop_assume!(spec.validate(length).is_ok());
        let b = attended_budget(&build_mask(&spec, length).unwrap());
        prop_assert!(b.nnz <= b.analytic_bound && b.analytic_bound <= b.dense_cells);
        prop_assert_eq!(b.dense_cells, length * length);
        // nearest-integer root: within half a unit of the exact square root
        let e = b.equivalent_full_length as f64;
        prop_assert!((e - (b.analytic_bound as f64).sqrt()).abs() <= 0.5);
    }

    #[test]
    fn log_sparse_row_growth(l in 1usize..=4096) {
        let spec = PatternSpec::log_sparse().without_densify();
        let size = index_set(l, 4096, &spec).unwrap().len();
        prop_assert!(size <= l.ilog2() as usize + 2);
    }

    #[test]
    fn path_counts_match_enumeration(
        length in 2usize..=9,
        layers in 1usize..=4,
        pick in any::<(u8, u8)>(),
        densify in any::<bool>(),
    ) {
        let spec = if densify { PatternSpec::log_sparse() } else { PatternSpec::log_sparse().without_densify() };
        let mask = build_mask(&spec, length).unwrap();
        let a = pick.0 as usize % length + 1;
        let b = pick.1 as usize % length + 1;
        let (j, l) = (a.min(b), a.max(b));
        let expected = brute_paths(&mask, j, l, layers);
        prop_assert_eq!(count_paths(&mask, j, l, layers).unwrap(), BigUint::from(expected));
        prop_assert_eq!(count_paths_u64(&mask, j, l, layers).unwrap(), expected);
    }

    #[test]
    fn reachability_matches_walk_existence(length in 1usize..=12, layers in 1usize..=4) {
        let mask = build_mask(&PatternSpec::log_sparse().without_densify(), length).unwrap();
        let reach = reachable_after(&mask, layers).unwrap();
        let report = reachability_report(&mask, layers).unwrap();
        prop_assert_eq!(report.fully_covered, report.uncovered_pairs.is_empty());
        for l in 1..=length {
            for j in 1..=l {
                let walks = brute_paths(&mask, j, l, layers);
                prop_assert_eq!(reach.contains(l, j), walks > 0);
                prop_assert_eq!(report.uncovered_pairs.contains(&(j, l)), walks == 0);
            }
        }
    }
}
