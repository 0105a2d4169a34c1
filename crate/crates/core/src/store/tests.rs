use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::format::SectionKind;
use super::*;
use crate::anndata::{AnnotationColumn, Embedding, RawDataset};
use crate::sparse::{csr_from_dense, DenseMatrix, ExpressionMatrix, Orientation, SparseMatrix};
use crate::stats::{self, precompute_markers, MarkerCollection, SelectionMask};

fn names(n: usize) -> Vec<String> {
    (0..n).map(|g| format!("G{g}")).collect()
}

fn random_dense(rng: &mut impl Rng, rows: usize, cols: usize, density: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            if rng.gen_bool(density) {
                rng.gen_range(0.01..50.0f64)
            } else {
                0.0
            }
        })
        .collect()
}

fn dataset_from_dense(rows: usize, cols: usize, dense: &[f64]) -> RawDataset {
    RawDataset::new(csr_from_dense(rows, cols, dense).into(), vec![], vec![], names(cols)).unwrap()
}

fn dense_column(dense: &[f64], cols: usize, g: usize) -> Vec<f64> {
    dense.iter().skip(g).step_by(cols).copied().collect()
}

fn build_and_open(raw: &RawDataset) -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.crvo");
    build_store(raw, &path).unwrap();
    let store = Store::open(&path).unwrap();
    (dir, store)
}

#[test]
fn transposes_small_example() {
    let raw = dataset_from_dense(2, 3, &[5., 0., 7., 0., 9., 0.]);
    let (_d, store) = build_and_open(&raw);
    let cols: Vec<_> = (0..3).map(|g| store.gene_column(g).unwrap()).collect();
    assert_eq!((cols[0].cell_indices.as_slice(), cols[0].values.as_slice()), (&[0u32][..], &[5.0][..]));
    assert_eq!((cols[1].cell_indices.as_slice(), cols[1].values.as_slice()), (&[1u32][..], &[9.0][..]));
    assert_eq!((cols[2].cell_indices.as_slice(), cols[2].values.as_slice()), (&[0u32][..], &[7.0][..]));
    assert_eq!(store.fetch_gene_column(2).unwrap(), (vec![7.0, 0.0], 7.0, 1));
    assert!(matches!(
        store.fetch_gene_column(3),
        Err(StoreError::IndexOutOfRange { index: 3, len: 3 })
    ));
}

#[test]
fn all_zero_matrix_has_empty_columns() {
    let raw = RawDataset::new(
        SparseMatrix::zeros(Orientation::RowMajor, 4, 3).into(),
        vec![],
        vec![],
        names(3),
    )
    .unwrap();
    let (_d, store) = build_and_open(&raw);
    for g in 0..3 {
        assert_eq!(store.fetch_gene_column(g).unwrap(), (vec![0.0; 4], 0.0, 0));
    }
}

#[test]
fn matches_dense_transpose_on_fixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dense = random_dense(&mut rng, 1000, 200, 0.05);
    let raw = dataset_from_dense(1000, 200, &dense);
    let (_d, store) = build_and_open(&raw);
    for g in 0..200 {
        let expected = dense_column(&dense, 200, g);
        let (got, max, nnz) = store.fetch_gene_column(g).unwrap();
        assert_eq!(got, expected, "gene {g}");
        assert_eq!(nnz, expected.iter().filter(|v| **v != 0.0).count());
        assert_eq!(max, expected.iter().copied().fold(0.0, f64::max));
    }
    assert_eq!(store.nnz() as usize, dense.iter().filter(|v| **v != 0.0).count());
}

#[test]
fn csc_csr_and_dense_inputs_build_identical_files() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, cols) = (37, 23);
    let dense = random_dense(&mut rng, rows, cols, 0.2);
    let csr = csr_from_dense(rows, cols, &dense);
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = dense[r * cols + c];
        }
    }
    let csc_parts = csr_from_dense(cols, rows, &t);
    let csc = SparseMatrix::from_parts(
        Orientation::ColumnMajor,
        rows,
        cols,
        csc_parts.indptr().to_vec(),
        csc_parts.indices().to_vec(),
        csc_parts.values().to_vec(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (i, m) in [
        ExpressionMatrix::from(csr),
        ExpressionMatrix::from(csc),
        ExpressionMatrix::from(DenseMatrix::new(rows, cols, dense.clone()).unwrap()),
    ]
    .into_iter()
    .enumerate()
    {
        let raw = RawDataset::new(m, vec![], vec![], names(cols)).unwrap();
        let p = dir.path().join(format!("{i}.crvo"));
        build_store(&raw, &p).unwrap();
        files.push(std::fs::read(p).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

#[test]
fn explicit_zeros_are_not_stored() {
    let m = SparseMatrix::from_parts(
        Orientation::RowMajor,
        2,
        2,
        vec![0, 2, 3],
        vec![0, 1, 1],
        vec![0.0, 4.0, 0.0],
    )
    .unwrap();
    let raw = RawDataset::new(m.into(), vec![], vec![], names(2)).unwrap();
    let (_d, store) = build_and_open(&raw);
    assert_eq!(store.nnz(), 1);
    assert_eq!(store.fetch_gene_column(1).unwrap(), (vec![4.0, 0.0], 4.0, 1));
}

fn rich_dataset() -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let dense = random_dense(&mut rng, n, 12, 0.3);
    let cluster = AnnotationColumn::from_codes(
        "cluster",
        vec!["B".into(), "T".into(), "NK".into()],
        &(0..n).map(|i| if i % 7 == 0 { -1 } else { (i % 3) as i64 }).collect::<Vec<_>>(),
    )
    .unwrap();
    let donor = AnnotationColumn::factorize(
        "donor",
        &(0..n).map(|i| format!("d{}", i % 4)).collect::<Vec<_>>(),
    );
    let umap = Embedding::new(
        "X_umap",
        2,
        (0..n * 2).map(|i| (i as f32).sin() * 1e3).collect(),
    )
    .unwrap();
    let tsne = Embedding::new(
        "X_tsne3",
        3,
        (0..n * 3).map(|i| (i as f32 * 0.37).cos() / 7.0).collect(),
    )
    .unwrap();
    let mut genes = names(12);
    genes[3] = "ACTB".into();
    genes[4] = "actg1".into();
    genes[5] = "TP53".into();
    RawDataset::new(
        csr_from_dense(n, 12, &dense).into(),
        vec![cluster, donor],
        vec![umap, tsne],
        genes,
    )
    .unwrap()
}

#[test]
fn round_trips_metadata_exactly() {
    let raw = rich_dataset();
    let (_d, store) = build_and_open(&raw);
    assert_eq!(store.gene_names(), raw.gene_names.as_slice());
    assert_eq!(store.annotations(), raw.annotations.as_slice());
    assert_eq!(store.embeddings(), raw.embeddings.as_slice());
    assert_eq!(store.default_embedding().unwrap().name, "X_tsne3");
    for g in 0..raw.gene_count() {
        let expected: Vec<f64> = (0..raw.cell_count)
            .map(|c| raw.matrix.get_row(c).unwrap()[g])
            .collect();
        assert_eq!(store.fetch_gene_column(g).unwrap().0, expected);
    }
    assert!(store.markers().is_none());
    assert!(!store.header().has_markers());
}

#[test]
fn planar_default_embedding_is_padded() {
    let mut raw = rich_dataset();
    raw.embeddings.truncate(1);
    let (_d, store) = build_and_open(&raw);
    assert_eq!(store.default_embedding().unwrap().name, "X_umap");
    let block = store.embedding_block("X_umap").unwrap();
    assert!(block.padded);
    assert_eq!(block.xyz.len(), raw.cell_count * 3);
    let src = &raw.embeddings[0].coords;
    for i in 0..raw.cell_count {
        assert_eq!(&block.xyz[i * 3..i * 3 + 3], &[src[2 * i], src[2 * i + 1], 0.0]);
    }
    assert!(store.embedding_block("missing").is_none());
}

#[test]
fn build_is_deterministic() {
    let raw = rich_dataset();
    let dir = tempfile::tempdir().unwrap();
    build_store(&raw, dir.path().join("a")).unwrap();
    build_store(&raw, dir.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a")).unwrap(),
        std::fs::read(dir.path().join("b")).unwrap()
    );
}

#[test]
fn lookup_rules() {
    let raw = RawDataset::new(
        SparseMatrix::zeros(Orientation::RowMajor, 1, 3).into(),
        vec![],
        vec![],
        vec!["ACTB".into(), "ACTG1".into(), "TP53".into()],
    )
    .unwrap();
    let (_d, store) = build_and_open(&raw);
    let names = |q: &str| -> Vec<String> { store.lookup_gene(q).into_iter().map(|x| x.1).collect() };
    assert_eq!(names("act"), ["ACTB", "ACTG1"]);
    assert_eq!(names("TP53"), ["TP53"]);
    assert_eq!(names("tp53"), ["TP53"]);
    assert!(names("zzz").is_empty());
    assert!(names("").is_empty());
    assert_eq!(store.lookup_gene("actg")[0], (1, "ACTG1".to_string()));
}

#[test]
fn lookup_puts_exact_match_first_and_caps() {
    let mut genes: Vec<String> = (0..30).map(|i| format!("CD{i}")).collect();
    genes.push("cd".into());
    let raw = RawDataset::new(
        SparseMatrix::zeros(Orientation::RowMajor, 1, genes.len()).into(),
        vec![],
        vec![],
        genes,
    )
    .unwrap();
    let (_d, store) = build_and_open(&raw);
    let hits = store.lookup_gene("CD");
    assert_eq!(hits.len(), MAX_LOOKUP_RESULTS);
    assert_eq!(hits[0].1, "cd");
    let rest: Vec<_> = hits[1..].iter().map(|h| h.1.to_lowercase()).collect();
    let mut sorted = rest.clone();
    sorted.sort();
    assert_eq!(rest, sorted);
    assert_eq!(store.resolve_gene("cd1"), Some(1));
    assert_eq!(store.resolve_gene("30"), Some(30));
}

#[test]
fn markers_round_trip_bitwise() {
    let raw = rich_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.crvo");
    build_store(&raw, &path).unwrap();
    let before = Store::open(&path).unwrap();
    let markers = precompute_markers(&before, before.annotations()).unwrap();
    let header = write_markers(&path, &markers).unwrap();
    assert!(header.has_markers());
    let after = Store::open(&path).unwrap();
    let read = after.markers().unwrap();
    assert_eq!(read, &markers);
    for (a, b) in read.annotations.iter().zip(&markers.annotations) {
        for (x, y) in a.categories.iter().zip(&b.categories) {
            if let (
                stats::CategoryOutcome::Computed { table: tx },
                stats::CategoryOutcome::Computed { table: ty },
            ) = (&x.outcome, &y.outcome)
            {
                for (rx, ry) in tx.records.iter().zip(&ty.records) {
                    assert_eq!(rx.p_value.to_bits(), ry.p_value.to_bits());
                    assert_eq!(rx.t.to_bits(), ry.t.to_bits());
                }
            }
        }
    }
    // the old mapping still reads the pre-marker file
    assert!(before.markers().is_none());
    assert_eq!(after.gene_names(), before.gene_names());

    let replaced = write_markers(&path, &MarkerCollection::default()).unwrap();
    assert_eq!(
        replaced
            .sections
            .iter()
            .filter(|s| s.kind == SectionKind::Markers)
            .count(),
        1
    );
    assert_eq!(Store::open(&path).unwrap().markers(), Some(&MarkerCollection::default()));
}

#[test]
fn store_drives_differential_expression() {
    let raw = rich_dataset();
    let (_d, store) = build_and_open(&raw);
    let mem = transpose_to_columns(&raw);
    let mask = SelectionMask::new((0..20).collect(), raw.cell_count).unwrap();
    assert_eq!(
        stats::differential_expression(&store, &mask, "sel").unwrap(),
        stats::differential_expression(&mem, &mask, "sel").unwrap()
    );
}

#[test]
fn corruption_is_detected_on_open() {
    let raw = rich_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.crvo");
    let header = build_store(&raw, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let values = header.section(SectionKind::ExpressionValues).unwrap();
    let mut bad = good.clone();
    bad[values.offset as usize + 3] ^= 0x10;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(Store::open(&path), Err(StoreError::CorruptSection(_))));

    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"HDF\x89");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(Store::open(&path), Err(StoreError::BadMagic)));

    std::fs::write(&path, &good[..good.len() / 2]).unwrap();
    assert!(matches!(Store::open(&path), Err(StoreError::CorruptSection(_))));

    assert!(matches!(
        Store::open(dir.path().join("missing")),
        Err(StoreError::IoFailure { .. })
    ));
}

#[test]
fn memory_budget_is_enforced() {
    let raw = rich_dataset();
    let dir = tempfile::tempdir().unwrap();
    let err = build_store_with(&raw, dir.path().join("x"), BuildOptions { memory_budget: 64 });
    assert!(matches!(err, Err(StoreError::OutOfMemoryBudget { budget: 64, .. })));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn build_into_missing_directory_fails_cleanly() {
    let raw = rich_dataset();
    let dir = tempfile::tempdir().unwrap();
    let err = build_store(&raw, dir.path().join("no/such/dir/x"));
    assert!(matches!(err, Err(StoreError::IoFailure { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fetch_equals_dense_column(
        rows in 1usize..200,
        cols in 1usize..200,
        density in prop::sample::select(vec![0.01, 0.1, 0.5]),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = random_dense(&mut rng, rows, cols, density);
        let raw = dataset_from_dense(rows, cols, &dense);
        let (_d, store) = build_and_open(&raw);
        let mut total = 0;
        for g in 0..cols {
            let (col, _, nnz) = store.fetch_gene_column(g).unwrap();
            prop_assert_eq!(col, dense_column(&dense, cols, g));
            total += nnz;
        }
        prop_assert_eq!(total, raw.matrix.count_nonzero());
    }
}
