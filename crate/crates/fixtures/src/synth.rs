//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Normal};

use crate::h5ad::{H5adFile, ObsColumn, SparseParts, XMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random CSR matrix where each entry is nonzero with probability
/// `density`. Positions are drawn by geometric skipping, so the cost is
/// proportional to the number of nonzeros. Values are log-normal.
pub fn random_csr(rng: &mut impl Rng, n_rows: usize, n_cols: usize, density: f64) -> SparseParts {
    assert!(density > 0.0 && density <= 1.0);
    let skip = Geometric::new(density).unwrap();
    let value = LogNormal::new(0.5, 1.0).unwrap();
    let expected = (n_rows as f64 * n_cols as f64 * density * 1.01) as usize + 16;
    let mut indptr = Vec::with_capacity(n_rows + 1);
    let mut indices = Vec::with_capacity(expected);
    let mut values = Vec::with_capacity(expected);
    indptr.push(0u64);
    for _ in 0..n_rows {
        let mut col = skip.sample(rng);
        while col < n_cols as u64 {
            indices.push(col as u32);
            values.push(value.sample(rng));
            col += 1 + skip.sample(rng);
        }
        indptr.push(indices.len() as u64);
    }
    SparseParts {
        n_rows,
        n_cols,
        indptr,
        indices,
        values,
    }
}

/// Row-major dense buffer with roughly `density` nonzeros, drawn from a mix
/// of small counts and wide log-normal values.
pub fn random_dense(rng: &mut impl Rng, n_rows: usize, n_cols: usize, density: f64) -> Vec<f64> {
    let wide = LogNormal::new(0.0, 1.5).unwrap();
    (0..n_rows * n_cols)
        .map(|_| {
            if !rng.gen_bool(density) {
                0.0
            } else if rng.gen_bool(0.5) {
                rng.gen_range(1..6) as f64
            } else {
                wide.sample(rng)
            }
        })
        .collect()
}

/// Clustered 3-D points.
pub fn point_cloud(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
    let centres: Vec<[f64; 3]> = (0..8)
        .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)])
        .collect();
    let spread = Normal::new(0.0, 3.0).unwrap();
    (0..n)
        .map(|_| {
            let c = centres[rng.gen_range(0..centres.len())];
            [
                c[0] + spread.sample(rng),
                c[1] + spread.sample(rng),
                c[2] + spread.sample(rng),
            ]
        })
        .collect()
}

/// 100 cells × 20 genes. The first 30 cells form a cluster in which gene 7
/// is around 10, against around 1 elsewhere; other genes are sparse noise.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedFixture {
    pub n_cells: usize,
    pub n_genes: usize,
    /// Row-major cells × genes.
    pub dense: Vec<f64>,
    pub gene_names: Vec<String>,
    pub enriched_cells: Vec<u32>,
    /// `group`: "enriched" for the first 30 cells, "rest" otherwise.
    pub group_codes: Vec<i8>,
    /// `half`: two categories of 50 cells each, interleaved.
    pub half_codes: Vec<i8>,
    /// 3-D coordinates; the enriched cluster sits around (10, 0, 0) and the
    /// rest around (-10, 0, 0), each within a radius of 3.
    pub embedding: Vec<f32>,
}

pub const ENRICHED_GENE: usize = 7;
pub const ENRICHED_CENTRE: [f64; 3] = [10.0, 0.0, 0.0];

impl EnrichedFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng(seed);
        let (n_cells, n_genes, n_enriched) = (100, 20, 30);
        let mut dense = vec![0.0; n_cells * n_genes];
        for c in 0..n_cells {
            for g in 0..n_genes {
                let noise: f64 = rng.gen_range(0.0..1.0);
                dense[c * n_genes + g] = if g == ENRICHED_GENE {
                    if c < n_enriched {
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
        let mut embedding = Vec::with_capacity(n_cells * 3);
        for c in 0..n_cells {
            let centre = if c < n_enriched { 10.0 } else { -10.0 };
            // uniform in a cube of half-width 1.5, so always within radius 3
            for base in [centre, 0.0, 0.0] {
                let jitter: f64 = rng.gen_range(-1.5..1.5);
                embedding.push((base + jitter) as f32);
            }
        }
        EnrichedFixture {
            n_cells,
            n_genes,
            dense,
            gene_names: (0..n_genes).map(|g| format!("GENE{g}")).collect(),
            enriched_cells: (0..n_enriched as u32).collect(),
            group_codes: (0..n_cells).map(|c| if c < n_enriched { 0 } else { 1 }).collect(),
            half_codes: (0..n_cells).map(|c| (c % 2) as i8).collect(),
            embedding,
        }
    }

    pub fn csr(&self) -> SparseParts {
        SparseParts::csr_from_dense(self.n_cells, self.n_genes, &self.dense)
    }

    pub fn h5ad(&self) -> H5adFile {
        H5adFile::new(XMatrix::Csr(self.csr()))
            .with_feature_names(self.gene_names.clone())
            .with_obs(
                "group",
                ObsColumn::Categorical {
                    categories: vec!["enriched".into(), "rest".into()],
                    codes: self.group_codes.clone(),
                },
            )
            .with_obs(
                "half",
                ObsColumn::Categorical {
                    categories: vec!["odd_out".into(), "even_out".into()],
                    codes: self.half_codes.clone(),
                },
            )
            .with_obsm("X_umap", 3, self.embedding.clone())
    }
}
