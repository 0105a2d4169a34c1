use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Two-pass dense moments, the reference for the sparse accumulator.
fn dense_stats(values: &[f64]) -> GroupStats {
    let n = values.len();
    if n == 0 {
        return GroupStats::new(0, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n >= 2 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    GroupStats::new(n, mean, var)
}

fn columns_from_dense(n_cells: usize, n_genes: usize, dense: &[f64]) -> InMemoryColumns {
    let mut indptr = vec![0u64];
    let mut cell_indices = Vec::new();
    let mut values = Vec::new();
    for g in 0..n_genes {
        for c in 0..n_cells {
            let v = dense[c * n_genes + g];
            if v != 0.0 {
                cell_indices.push(c as u32);
                values.push(v);
            }
        }
        indptr.push(cell_indices.len() as u64);
    }
    InMemoryColumns {
        n_cells,
        gene_names: (0..n_genes).map(|g| format!("g{g}")).collect(),
        indptr,
        cell_indices,
        values,
    }
}

/// Student-t two-sided tail by Simpson quadrature of the unnormalized
/// density, normalized numerically.
fn quadrature_p(t: f64, df: f64) -> f64 {
    let density = |s: f64| (-(df + 1.0) / 2.0 * (s * s / df).ln_1p()).exp();
    let simpson = |lo: f64, hi: f64, n: usize| {
        let h = (hi - lo) / n as f64;
        let mut acc = density(lo) + density(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * density(lo + i as f64 * h);
        }
        acc * h / 3.0
    };
    // tail beyond |t| via s = |t| + u / (1 - u), u in [0, 1)
    let tail_integrand = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let s = t.abs() + u / (1.0 - u);
        density(s) / ((1.0 - u) * (1.0 - u))
    };
    let n = 400_000;
    let h = 1.0 / n as f64;
    let mut tail = tail_integrand(0.0) + tail_integrand(1.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        tail += w * tail_integrand(i as f64 * h);
    }
    tail *= h / 3.0;
    let inner = simpson(0.0, t.abs(), 200_000);
    tail / (inner + tail)
}

#[test]
fn group_stats_example() {
    // values 5 and 7 at cells 0 and 2 of 4; selected cells {0, 1}
    let col = ColumnView {
        cell_indices: &[0, 2],
        values: &[5.0, 7.0],
    };
    let mask = SelectionMask::new(vec![0, 1], 4).unwrap();
    let (sel, uns) = compute_group_stats(col, &mask);
    let d_sel = dense_stats(&[5.0, 0.0]);
    let d_uns = dense_stats(&[7.0, 0.0]);
    assert_eq!(sel.n, 2);
    assert_eq!(uns.n, 2);
    assert_relative_eq!(sel.mean, 2.5);
    assert_relative_eq!(sel.variance, 12.5);
    assert_relative_eq!(uns.mean, 3.5);
    assert_relative_eq!(uns.variance, 24.5);
    assert_relative_eq!(sel.variance, d_sel.variance, max_relative = 1e-15);
    assert_relative_eq!(uns.variance, d_uns.variance, max_relative = 1e-15);
}

#[test]
fn all_zero_column_and_full_mask() {
    let col = ColumnView {
        cell_indices: &[],
        values: &[],
    };
    let mask = SelectionMask::new(vec![1, 3], 5).unwrap();
    let (a, b) = compute_group_stats(col, &mask);
    assert_eq!((a.mean, a.variance, b.mean, b.variance), (0.0, 0.0, 0.0, 0.0));

    let col = ColumnView {
        cell_indices: &[0, 1],
        values: &[1.0, 2.0],
    };
    let (a, b) = compute_group_stats(col, &SelectionMask::all(3));
    assert_eq!(a.n, 3);
    assert_eq!(b.n, 0);
    assert!(!b.has_variance());
}

#[test]
fn welch_example() {
    let a = GroupStats::new(3, 2.0, 1.0);
    let b = GroupStats::new(3, 4.0, 4.0);
    let (t, df) = welch_t(&a, &b).unwrap();
    assert_relative_eq!(t, -2.0 / (5.0f64 / 3.0).sqrt(), max_relative = 1e-15);
    assert_relative_eq!(t, -1.549193, epsilon = 1e-6);
    assert_relative_eq!(df, 50.0 / 17.0, max_relative = 1e-15);
    assert_relative_eq!(df, 2.941176, epsilon = 1e-6);
}

#[test]
fn welch_identical_and_small_groups() {
    let a = GroupStats::new(5, 1.5, 0.7);
    assert_eq!(welch_t(&a, &a).unwrap().0, 0.0);
    let tiny = GroupStats::new(1, 1.0, 0.0);
    assert_eq!(welch_t(&tiny, &a), Err(StatsError::GroupTooSmall(1)));
    assert_eq!(welch_t(&a, &tiny), Err(StatsError::GroupTooSmall(1)));
}

#[test]
fn welch_zero_standard_error() {
    let a = GroupStats::new(4, 3.0, 0.0);
    let b = GroupStats::new(6, 1.0, 0.0);
    assert_eq!(welch_t(&a, &b).unwrap(), (f64::INFINITY, 8.0));
    assert_eq!(welch_t(&b, &a).unwrap(), (f64::NEG_INFINITY, 8.0));
    assert_eq!(welch_t(&a, &a).unwrap(), (0.0, 6.0));
    assert_eq!(t_two_sided_p(f64::INFINITY, 8.0).unwrap(), 0.0);
    assert_eq!(t_two_sided_p(f64::NEG_INFINITY, 8.0).unwrap(), 0.0);
}

#[test]
fn p_value_examples() {
    for df in [0.5, 1.0, 7.0, 1e6] {
        assert_eq!(t_two_sided_p(0.0, df).unwrap(), 1.0);
    }
    assert_relative_eq!(t_two_sided_p(1.0, 1.0).unwrap(), 0.5, max_relative = 1e-12);
    let p = t_two_sided_p(1.959964, 1e6).unwrap();
    let oracle = quadrature_p(1.959964, 1e6);
    assert!((oracle - 0.05).abs() < 1e-4, "oracle {oracle}");
    assert!((p - 0.05).abs() < 1e-4, "p {p}");
    assert!((p - oracle).abs() < 1e-8, "p {p} oracle {oracle}");
}

#[test]
fn p_value_matches_quadrature() {
    for &(t, df) in &[(0.3, 2.5), (2.0, 4.0), (-3.5, 12.0), (1.1, 60.0), (4.0, 97.3)] {
        let p = t_two_sided_p(t, df).unwrap();
        let q = quadrature_p(t, df);
        assert!((p - q).abs() < 1e-9, "t={t} df={df}: {p} vs {q}");
    }
}

#[test]
fn invalid_df() {
    assert!(matches!(t_two_sided_p(1.0, 0.0), Err(StatsError::InvalidDf(_))));
    assert!(matches!(t_two_sided_p(1.0, -3.0), Err(StatsError::InvalidDf(_))));
    assert!(matches!(t_two_sided_p(1.0, f64::NAN), Err(StatsError::InvalidDf(_))));
}

#[test]
fn continued_fraction_converges_across_range() {
    let dfs = [1.0, 2.0, 3.7, 10.0, 98.0, 1e3, 1e4, 1e5, 5e5, 1e6];
    for &df in &dfs {
        for i in 0..400 {
            let t = 1e-3 * 1.03f64.powi(i);
            let p = t_two_sided_p(t, df)
                .unwrap_or_else(|e| panic!("t={t} df={df}: {e}"));
            assert!((0.0..=1.0).contains(&p));
        }
    }
}

#[test]
fn p_value_matches_reference_distribution() {
    for &df in &[1.0, 2.0, 5.5, 30.0, 200.0, 5000.0] {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        for &t in &[0.01, 0.5, 1.0, 2.5, 5.0, 10.0] {
            let p = t_two_sided_p(t, df).unwrap();
            let r = 2.0 * dist.sf(t);
            assert_relative_eq!(p, r, max_relative = 1e-9);
        }
    }
}

#[test]
fn log_fold_change_examples() {
    let a = GroupStats::new(3, 2.0, 1.0);
    let b = GroupStats::new(3, 4.0, 1.0);
    assert_relative_eq!(log_fold_change(&a, &b), -1.0, epsilon = 1e-9);
    assert_eq!(log_fold_change(&a, &a), 0.0);
    let z = GroupStats::new(3, 0.0, 0.0);
    assert_eq!(log_fold_change(&z, &z), 0.0);
}

fn enriched_fixture() -> (InMemoryColumns, SelectionMask) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let (n_cells, n_genes) = (100, 20);
    let mut dense = vec![0.0; n_cells * n_genes];
    for c in 0..n_cells {
        for g in 0..n_genes {
            let noise: f64 = rng.gen_range(0.0..1.0);
            dense[c * n_genes + g] = if g == 7 {
                if c < 30 {
                    10.0 + noise
                } else {
                    1.0 + noise
                }
            } else if rng.gen_bool(0.3) {
                noise * 3.0
            } else {
                0.0
            };
        }
    }
    let mask = SelectionMask::new((0..30).collect(), n_cells).unwrap();
    (columns_from_dense(n_cells, n_genes, &dense), mask)
}

#[test]
fn enriched_gene_ranks_first() {
    let (cols, mask) = enriched_fixture();
    let table = differential_expression(&cols, &mask, "selection").unwrap();
    assert_eq!(table.records.len(), 10);
    assert_eq!(table.records[0].gene_index, 7);
    assert!(table.records[0].p_value < 1e-20);
    assert!(table.records[0].log_fold_change > 2.0);
    for w in table.records.windows(2) {
        assert_ne!(marker_order(&w[0], &w[1]), Ordering::Greater);
    }
}

#[test]
fn selection_too_small() {
    let (cols, _) = enriched_fixture();
    let one = SelectionMask::new(vec![3], 100).unwrap();
    assert_eq!(
        differential_expression(&cols, &one, "s"),
        Err(StatsError::SelectionTooSmall {
            selected: 1,
            unselected: 99
        })
    );
    let almost_all = SelectionMask::new((0..99).collect(), 100).unwrap();
    assert!(matches!(
        differential_expression(&cols, &almost_all, "s"),
        Err(StatsError::SelectionTooSmall { .. })
    ));
}

#[test]
fn identical_groups_order_by_gene_index() {
    // every cell has the same value per gene
    let (n_cells, n_genes) = (8, 14);
    let dense: Vec<f64> = (0..n_cells * n_genes).map(|i| (i % n_genes) as f64).collect();
    let cols = columns_from_dense(n_cells, n_genes, &dense);
    let mask = SelectionMask::new(vec![0, 2, 4], n_cells).unwrap();
    let table = differential_expression(&cols, &mask, "s").unwrap();
    assert!(table.records.iter().all(|r| r.p_value == 1.0 && r.t == 0.0));
    let idx: Vec<u32> = table.records.iter().map(|r| r.gene_index).collect();
    assert_eq!(idx, (0..10).collect::<Vec<u32>>());
}

#[test]
fn fewer_genes_than_table_length() {
    let dense = vec![1.0, 0.0, 2.0, 3.0, 0.0, 1.0, 4.0, 4.0];
    let cols = columns_from_dense(4, 2, &dense);
    let mask = SelectionMask::new(vec![0, 1], 4).unwrap();
    assert_eq!(differential_expression(&cols, &mask, "s").unwrap().records.len(), 2);
}

#[test]
fn precompute_matches_on_demand() {
    let (cols, _) = enriched_fixture();
    let codes: Vec<i64> = (0..100).map(|c| if c < 50 { 0 } else { 1 }).collect();
    let halves =
        AnnotationColumn::from_codes("half", vec!["left".into(), "right".into()], &codes).unwrap();
    let mut codes = vec![0i64; 100];
    codes[42] = 1;
    let lonely =
        AnnotationColumn::from_codes("lonely", vec!["many".into(), "one".into()], &codes).unwrap();
    let collection = precompute_markers(&cols, &[halves.clone(), lonely]).unwrap();
    assert_eq!(collection.annotations.len(), 2);
    for (k, label) in ["left", "right"].iter().enumerate() {
        let entry = collection.get("half", label).unwrap();
        let expected =
            differential_expression(&cols, &category_mask(&halves, k as u32), label).unwrap();
        assert_eq!(entry.cell_count, 50);
        assert_eq!(entry.outcome, CategoryOutcome::Computed { table: expected });
    }
    let one = collection.get("lonely", "one").unwrap();
    assert_eq!(
        one.outcome,
        CategoryOutcome::Skipped {
            reason: "group too small".into()
        }
    );
    assert!(matches!(
        collection.get("lonely", "many").unwrap().outcome,
        CategoryOutcome::Skipped { .. }
    ));
    assert!(precompute_markers(&cols, &[]).unwrap().annotations.is_empty());
    let tsv = collection.to_tsv();
    assert!(tsv.starts_with("annotation\tcategory\tgene\tt\tdf\tp_value\tlog2_fc\n"));
    assert_eq!(tsv.lines().count(), 1 + 20);
}

fn group_stats_strategy() -> impl Strategy<Value = GroupStats> {
    (2usize..60, -50.0f64..50.0, 0.0f64..30.0).prop_map(|(n, m, v)| GroupStats::new(n, m, v))
}

fn column_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (4usize..80).prop_flat_map(|n| {
        let value = prop_oneof![
            4 => Just(0.0),
            2 => 0.0f64..5.0,
            1 => 100.0f64..1e4,
        ];
        (
            proptest::collection::vec(value, n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn swapping_groups_is_antisymmetric(a in group_stats_strategy(), b in group_stats_strategy()) {
        let (t1, df1) = welch_t(&a, &b).unwrap();
        let (t2, df2) = welch_t(&b, &a).unwrap();
        prop_assert_eq!(t1, -t2);
        prop_assert_eq!(df1, df2);
        prop_assert_eq!(t_two_sided_p(t1, df1).unwrap(), t_two_sided_p(t2, df2).unwrap());
        let l1 = log_fold_change(&a, &b);
        let l2 = log_fold_change(&b, &a);
        if a.mean > 0.0 && b.mean > 0.0 {
            prop_assert!((l1 + l2).abs() <= 1e-12 * l1.abs().max(1.0));
        }
    }

    #[test]
    fn p_is_monotone_in_abs_t(df in 0.5f64..500.0, t1 in 0.0f64..40.0, t2 in 0.0f64..40.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(t_two_sided_p(lo, df).unwrap() >= t_two_sided_p(hi, df).unwrap());
        prop_assert!(t_two_sided_p(-lo, df).unwrap() >= t_two_sided_p(hi, df).unwrap());
    }

    #[test]
    fn sparse_moments_match_dense((values, member) in column_and_mask()) {
        let n = values.len();
        let selected: Vec<u32> = (0..n as u32).filter(|&i| member[i as usize]).collect();
        let mask = SelectionMask::new(selected, n).unwrap();
        let (idx, vals): (Vec<u32>, Vec<f64>) = values.iter().enumerate()
            .filter(|(_, v)| **v != 0.0).map(|(i, v)| (i as u32, *v)).unzip();
        let (sel, uns) = compute_group_stats(ColumnView { cell_indices: &idx, values: &vals }, &mask);
        let sel_vals: Vec<f64> = (0..n).filter(|&i| member[i]).map(|i| values[i]).collect();
        let uns_vals: Vec<f64> = (0..n).filter(|&i| !member[i]).map(|i| values[i]).collect();
        for (got, want) in [(sel, dense_stats(&sel_vals)), (uns, dense_stats(&uns_vals))] {
            prop_assert_eq!(got.n, want.n);
            prop_assert!((got.mean - want.mean).abs() <= 1e-12 * want.mean.abs().max(1e-300));
            prop_assert!((got.variance - want.variance).abs() <= 1e-12 * want.variance.abs().max(1e-300),
                "{} vs {}", got.variance, want.variance);
        }
    }

    #[test]
    fn statistics_are_scale_equivariant((values, member) in column_and_mask(), k in -6i32..6) {
        let n = values.len();
        let n_sel = member.iter().filter(|m| **m).count();
        prop_assume!(n_sel >= 2 && n - n_sel >= 2);
        let c = 2f64.powi(k);
        let mask = SelectionMask::new((0..n as u32).filter(|&i| member[i as usize]).collect(), n).unwrap();
        let run = |scale: f64| {
            let (idx, vals): (Vec<u32>, Vec<f64>) = values.iter().enumerate()
                .filter(|(_, v)| **v != 0.0).map(|(i, v)| (i as u32, *v * scale)).unzip();
            let (a, b) = compute_group_stats(ColumnView { cell_indices: &idx, values: &vals }, &mask);
            let (t, df) = welch_t(&a, &b).unwrap();
            (t, df, t_two_sided_p(t, df).unwrap())
        };
        let (t1, df1, p1) = run(1.0);
        let (t2, df2, p2) = run(c);
        prop_assert_eq!(t1, t2);
        prop_assert_eq!(df1, df2);
        prop_assert_eq!(p1, p2);
    }
}
