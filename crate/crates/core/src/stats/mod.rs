//! Welch t-test differential expression over gene-major columns.
//!
//! Group moments are accumulated in a single pass over the nonzeros of a
//! column; implicit zeros are folded in arithmetically.

mod beta;

pub use beta::{ln_beta, ln_gamma, regularized_incomplete_beta};

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anndata::AnnotationColumn;

/// Pseudocount added to both means before taking the fold-change ratio.
pub const LFC_PSEUDOCOUNT: f64 = 1e-9;
/// Length of a marker table.
pub const TOP_GENES: usize = 10;
/// Minimum group size for a t-test.
pub const MIN_GROUP_SIZE: usize = 2;

pub const SKIP_GROUP_TOO_SMALL: &str = "group too small";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("group of size {0} is too small for a t-test (need at least 2)")]
    GroupTooSmall(usize),
    #[error("invalid degrees of freedom {0}")]
    InvalidDf(f64),
    #[error("selection too small: {selected} selected, {unselected} unselected (need at least 2 each)")]
    SelectionTooSmall { selected: usize, unselected: usize },
    #[error("incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")]
    NoConvergence { x: f64, a: f64, b: f64 },
    #[error("cell index {index} out of range for {n_cells} cells")]
    CellOutOfRange { index: u32, n_cells: usize },
    #[error("expression source: {0}")]
    Source(String),
}

/// The set of selected cells; the complement is the unselected group.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionMask {
    selected: Vec<u32>,
    n_cells: usize,
}

impl SelectionMask {
    /// Sorts and de-duplicates `cells`; every index must be `< n_cells`.
    pub fn new(mut cells: Vec<u32>, n_cells: usize) -> Result<Self, StatsError> {
        cells.sort_unstable();
        cells.dedup();
        if let Some(&last) = cells.last() {
            if last as usize >= n_cells {
                return Err(StatsError::CellOutOfRange {
                    index: last,
                    n_cells,
                });
            }
        }
        Ok(SelectionMask {
            selected: cells,
            n_cells,
        })
    }

    pub fn empty(n_cells: usize) -> Self {
        SelectionMask {
            selected: Vec::new(),
            n_cells,
        }
    }

    pub fn all(n_cells: usize) -> Self {
        SelectionMask {
            selected: (0..n_cells as u32).collect(),
            n_cells,
        }
    }

    pub fn selected(&self) -> &[u32] {
        &self.selected
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn unselected_len(&self) -> usize {
        self.n_cells - self.selected.len()
    }

    pub fn contains(&self, cell: u32) -> bool {
        self.selected.binary_search(&cell).is_ok()
    }

    fn membership(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_cells];
        for &c in &self.selected {
            m[c as usize] = true;
        }
        m
    }
}

/// Sample moments of one group of cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased (n − 1) variance; only meaningful when `n >= 2`.
    pub variance: f64,
}

impl GroupStats {
    pub fn new(n: usize, mean: f64, variance: f64) -> Self {
        GroupStats { n, mean, variance }
    }

    pub fn has_variance(&self) -> bool {
        self.n >= MIN_GROUP_SIZE
    }
}

/// Sparse view of one gene across cells.
#[derive(Debug, Clone, Copy)]
pub struct ColumnView<'a> {
    pub cell_indices: &'a [u32],
    pub values: &'a [f64],
}

/// Neumaier-compensated sum.
#[derive(Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Running moments of the nonzero entries of one group.
#[derive(Default, Clone, Copy)]
struct Accumulator {
    sum: CompensatedSum,
    count: usize,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    fn push(&mut self, v: f64) {
        self.sum.add(v);
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    /// Folds in `n - count` implicit zeros.
    fn finish(&self, n: usize) -> GroupStats {
        if n == 0 {
            return GroupStats::new(0, 0.0, 0.0);
        }
        let mean = self.sum.value() / n as f64;
        let zeros = (n - self.count) as f64;
        let m2 = if self.count == 0 {
            0.0
        } else {
            self.m2 + self.mean * self.mean * self.count as f64 * zeros / n as f64
        };
        let variance = if n >= MIN_GROUP_SIZE {
            (m2 / (n - 1) as f64).max(0.0)
        } else {
            0.0
        };
        GroupStats::new(n, mean, variance)
    }
}

fn group_stats_with(
    column: ColumnView<'_>,
    membership: &[bool],
    n_selected: usize,
) -> (GroupStats, GroupStats) {
    let mut sel = Accumulator::default();
    let mut uns = Accumulator::default();
    for (&cell, &v) in column.cell_indices.iter().zip(column.values) {
        if v == 0.0 {
            continue;
        }
        if membership[cell as usize] {
            sel.push(v);
        } else {
            uns.push(v);
        }
    }
    let n_cells = membership.len();
    (sel.finish(n_selected), uns.finish(n_cells - n_selected))
}

/// Moments of the selected and unselected cells for one gene column.
pub fn compute_group_stats(column: ColumnView<'_>, mask: &SelectionMask) -> (GroupStats, GroupStats) {
    group_stats_with(column, &mask.membership(), mask.len())
}

/// Welch t statistic and Welch–Satterthwaite degrees of freedom.
///
/// A zero standard error yields `t = 0` for equal means and `±∞`
/// otherwise, with `df = na + nb − 2`.
pub fn welch_t(a: &GroupStats, b: &GroupStats) -> Result<(f64, f64), StatsError> {
    for g in [a, b] {
        if g.n < MIN_GROUP_SIZE {
            return Err(StatsError::GroupTooSmall(g.n));
        }
    }
    let (na, nb) = (a.n as f64, b.n as f64);
    let va = a.variance / na;
    let vb = b.variance / nb;
    let se2 = va + vb;
    let pooled_df = na + nb - 2.0;
    let diff = a.mean - b.mean;
    if se2 == 0.0 {
        let t = if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        };
        return Ok((t, pooled_df));
    }
    let t = diff / se2.sqrt();
    let denom = va * va / (na - 1.0) + vb * vb / (nb - 1.0);
    let df = if denom > 0.0 { se2 * se2 / denom } else { pooled_df };
    Ok((t, df))
}

/// Two-sided Student-t p-value, `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64, StatsError> {
    if !(df > 0.0 && df.is_finite()) {
        return Err(StatsError::InvalidDf(df));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let t2 = t * t;
    let x = df / (df + t2);
    let y = t2 / (df + t2);
    regularized_incomplete_beta(x, y, df / 2.0, 0.5)
}

/// Base-2 log ratio of group means with a small pseudocount.
pub fn log_fold_change(a: &GroupStats, b: &GroupStats) -> f64 {
    ((a.mean + LFC_PSEUDOCOUNT) / (b.mean + LFC_PSEUDOCOUNT)).log2()
}

/// One ranked gene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRecord {
    pub gene_index: u32,
    pub gene_name: String,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub log_fold_change: f64,
}

/// Total order used for marker tables: ascending p, then descending
/// |log fold change|, then ascending gene index.
pub fn marker_order(a: &MarkerRecord, b: &MarkerRecord) -> Ordering {
    a.p_value
        .total_cmp(&b.p_value)
        .then_with(|| {
            b.log_fold_change
                .abs()
                .total_cmp(&a.log_fold_change.abs())
        })
        .then_with(|| a.gene_index.cmp(&b.gene_index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerTable {
    pub group_label: String,
    pub records: Vec<MarkerRecord>,
}

/// Gene-major expression data that differential expression can scan.
pub trait ExpressionSource: Sync {
    fn n_cells(&self) -> usize;
    fn n_genes(&self) -> usize;
    fn gene_name(&self, gene: usize) -> &str;
    /// Calls `f` with the sparse column of `gene`.
    fn with_column<R>(
        &self,
        gene: usize,
        f: impl FnOnce(ColumnView<'_>) -> R,
    ) -> Result<R, StatsError>;
}

fn score_gene(
    sel: &GroupStats,
    uns: &GroupStats,
    gene: usize,
    name: &str,
) -> Result<MarkerRecord, StatsError> {
    let (t, df) = welch_t(sel, uns)?;
    let p_value = t_two_sided_p(t, df)?;
    Ok(MarkerRecord {
        gene_index: gene as u32,
        gene_name: name.to_string(),
        t,
        df,
        p_value,
        log_fold_change: log_fold_change(sel, uns),
    })
}

fn rank_top(mut records: Vec<MarkerRecord>) -> Vec<MarkerRecord> {
    if records.len() > TOP_GENES {
        records.select_nth_unstable_by(TOP_GENES - 1, marker_order);
        records.truncate(TOP_GENES);
    }
    records.sort_by(marker_order);
    records
}

/// Selected-vs-rest Welch test over every gene, returning the top genes.
pub fn differential_expression<S: ExpressionSource + ?Sized>(
    source: &S,
    mask: &SelectionMask,
    group_label: &str,
) -> Result<MarkerTable, StatsError> {
    if mask.n_cells() != source.n_cells() {
        return Err(StatsError::Source(format!(
            "mask covers {} cells, dataset has {}",
            mask.n_cells(),
            source.n_cells()
        )));
    }
    if mask.len() < MIN_GROUP_SIZE || mask.unselected_len() < MIN_GROUP_SIZE {
        return Err(StatsError::SelectionTooSmall {
            selected: mask.len(),
            unselected: mask.unselected_len(),
        });
    }
    let membership = mask.membership();
    let n_sel = mask.len();
    let records = (0..source.n_genes())
        .into_par_iter()
        .map(|g| {
            let (sel, uns) =
                source.with_column(g, |col| group_stats_with(col, &membership, n_sel))?;
            score_gene(&sel, &uns, g, source.gene_name(g))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MarkerTable {
        group_label: group_label.to_string(),
        records: rank_top(records),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CategoryOutcome {
    Computed { table: MarkerTable },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMarkers {
    pub category: String,
    pub cell_count: usize,
    pub outcome: CategoryOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMarkers {
    pub annotation: String,
    pub categories: Vec<CategoryMarkers>,
}

/// Precomputed one-vs-rest marker tables for every annotation category.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarkerCollection {
    pub annotations: Vec<AnnotationMarkers>,
}

impl MarkerCollection {
    pub fn get(&self, annotation: &str, category: &str) -> Option<&CategoryMarkers> {
        self.annotations
            .iter()
            .find(|a| a.annotation == annotation)?
            .categories
            .iter()
            .find(|c| c.category == category)
    }

    /// Rows of the TSV export: annotation, category, gene, t, df, p_value,
    /// log2_fc. Skipped categories contribute no rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("annotation\tcategory\tgene\tt\tdf\tp_value\tlog2_fc\n");
        for a in &self.annotations {
            for c in &a.categories {
                if let CategoryOutcome::Computed { table } = &c.outcome {
                    for r in &table.records {
                        out.push_str(&format!(
                            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                            a.annotation,
                            c.category,
                            r.gene_name,
                            r.t,
                            r.df,
                            r.p_value,
                            r.log_fold_change
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Mask selecting the cells of one category.
pub fn category_mask(annotation: &AnnotationColumn, category: u32) -> SelectionMask {
    SelectionMask {
        selected: annotation.members(category),
        n_cells: annotation.len(),
    }
}

/// Runs one-vs-rest differential expression for every category of every
/// annotation. Categories with fewer than two cells on either side are
/// recorded as skipped.
pub fn precompute_markers<S: ExpressionSource + ?Sized>(
    source: &S,
    annotations: &[AnnotationColumn],
) -> Result<MarkerCollection, StatsError> {
    let mut out = MarkerCollection::default();
    for ann in annotations {
        let mut categories = Vec::with_capacity(ann.categories.len());
        for (k, label) in ann.categories.iter().enumerate() {
            let mask = category_mask(ann, k as u32);
            let outcome = match differential_expression(source, &mask, label) {
                Ok(table) => CategoryOutcome::Computed { table },
                Err(StatsError::SelectionTooSmall { .. }) => CategoryOutcome::Skipped {
                    reason: SKIP_GROUP_TOO_SMALL.to_string(),
                },
                Err(e) => return Err(e),
            };
            categories.push(CategoryMarkers {
                category: label.clone(),
                cell_count: mask.len(),
                outcome,
            });
        }
        out.annotations.push(AnnotationMarkers {
            annotation: ann.name.clone(),
            categories,
        });
    }
    Ok(out)
}

/// Column-major in-memory expression data, mostly for tests and small
/// datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryColumns {
    pub n_cells: usize,
    pub gene_names: Vec<String>,
    pub indptr: Vec<u64>,
    pub cell_indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl ExpressionSource for InMemoryColumns {
    fn n_cells(&self) -> usize {
        self.n_cells
    }

    fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    fn gene_name(&self, gene: usize) -> &str {
        &self.gene_names[gene]
    }

    fn with_column<R>(
        &self,
        gene: usize,
        f: impl FnOnce(ColumnView<'_>) -> R,
    ) -> Result<R, StatsError> {
        if gene >= self.gene_names.len() {
            return Err(StatsError::Source(format!("gene {gene} out of range")));
        }
        let lo = self.indptr[gene] as usize;
        let hi = self.indptr[gene + 1] as usize;
        Ok(f(ColumnView {
            cell_indices: &self.cell_indices[lo..hi],
            values: &self.values[lo..hi],
        }))
    }
}

#[cfg(test)]
mod tests;
