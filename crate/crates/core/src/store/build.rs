use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::format::{
    SectionEntry, SectionKind, StoreHeader, Writer, FLAG_MARKERS, FORMAT_VERSION,
};
use super::reader::Store;
use super::StoreError;
use crate::anndata::{AnnotationColumn, Embedding, RawDataset};
use crate::sparse::{ExpressionMatrix, Orientation};
use crate::stats::{CategoryOutcome, InMemoryColumns, MarkerCollection};

/// Bytes of transpose workspace per stored nonzero: a u32 cell index and an
/// f64 value.
const BYTES_PER_NONZERO: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Upper bound on the estimated in-memory transpose workspace.
    pub memory_budget: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            memory_budget: 8 << 30,
        }
    }
}

impl BuildOptions {
    pub fn estimate(raw: &RawDataset) -> u64 {
        let nnz = match &raw.matrix {
            ExpressionMatrix::Sparse(m) => m.nnz() as u64,
            // a dense matrix is scanned twice; its nonzero count is not known up front
            ExpressionMatrix::Dense(_) => raw.matrix.count_nonzero() as u64,
        };
        nnz * BYTES_PER_NONZERO + (raw.gene_count() as u64 + 1) * 16
    }
}

pub fn build_store(raw: &RawDataset, dest: impl AsRef<Path>) -> Result<StoreHeader, StoreError> {
    build_store_with(raw, dest, BuildOptions::default())
}

pub fn build_store_with(
    raw: &RawDataset,
    dest: impl AsRef<Path>,
    options: BuildOptions,
) -> Result<StoreHeader, StoreError> {
    let needed = BuildOptions::estimate(raw);
    if needed > options.memory_budget {
        return Err(StoreError::OutOfMemoryBudget {
            needed,
            budget: options.memory_budget,
        });
    }
    if raw.cell_count > u32::MAX as usize {
        return Err(StoreError::TooManyCells(raw.cell_count));
    }
    let columns = transpose_to_columns(raw);
    let sections = [
        (SectionKind::GeneNames, encode_gene_names(&raw.gene_names)),
        (SectionKind::GeneIndex, encode_gene_index(&columns)),
        (SectionKind::ExpressionCells, u32_bytes(&columns.cell_indices)),
        (SectionKind::ExpressionValues, f64_bytes(&columns.values)),
        (SectionKind::Annotations, encode_annotations(&raw.annotations)),
        (SectionKind::Embeddings, encode_embeddings(&raw.embeddings)),
    ];
    drop(columns);
    write_file(
        dest.as_ref(),
        raw.cell_count as u64,
        raw.gene_count() as u64,
        0,
        sections.iter().map(|(k, b)| (*k, b.as_slice())),
    )
}

/// Converts the expression matrix to gene-major columns with cell indices
/// sorted within each gene. Explicitly stored zeros are dropped.
pub fn transpose_to_columns(raw: &RawDataset) -> InMemoryColumns {
    let n_cells = raw.cell_count;
    let n_genes = raw.gene_count();
    let (indptr, cell_indices, values) = match &raw.matrix {
        ExpressionMatrix::Sparse(m) if m.orientation() == Orientation::ColumnMajor => {
            let mut indptr = Vec::with_capacity(n_genes + 1);
            let mut cells = Vec::with_capacity(m.nnz());
            let mut vals = Vec::with_capacity(m.nnz());
            indptr.push(0u64);
            for g in 0..n_genes {
                let (idx, v) = m.major_slice(g).expect("validated on construction");
                for (&c, &x) in idx.iter().zip(v) {
                    if x != 0.0 {
                        cells.push(c);
                        vals.push(x);
                    }
                }
                indptr.push(cells.len() as u64);
            }
            (indptr, cells, vals)
        }
        ExpressionMatrix::Sparse(m) => {
            counting_sort(n_genes, |emit| {
                for cell in 0..n_cells {
                    let (idx, v) = m.major_slice(cell).expect("validated on construction");
                    for (&g, &x) in idx.iter().zip(v) {
                        emit(cell as u32, g as usize, x);
                    }
                }
            })
        }
        ExpressionMatrix::Dense(m) => counting_sort(n_genes, |emit| {
            for cell in 0..n_cells {
                let row = m.row(cell).expect("validated on construction");
                for (g, &x) in row.iter().enumerate() {
                    emit(cell as u32, g, x);
                }
            }
        }),
    };
    InMemoryColumns {
        n_cells,
        gene_names: raw.gene_names.clone(),
        indptr,
        cell_indices,
        values,
    }
}

/// Two sweeps of `scan` over the cell-major entries: count per gene, then
/// scatter. Cells are visited in increasing order so every column comes out
/// sorted.
fn counting_sort(
    n_genes: usize,
    scan: impl Fn(&mut dyn FnMut(u32, usize, f64)),
) -> (Vec<u64>, Vec<u32>, Vec<f64>) {
    let mut counts = vec![0u64; n_genes + 1];
    scan(&mut |_, g, x| {
        if x != 0.0 {
            counts[g + 1] += 1;
        }
    });
    for g in 0..n_genes {
        counts[g + 1] += counts[g];
    }
    let indptr = counts;
    let nnz = indptr[n_genes] as usize;
    let mut cursor: Vec<u64> = indptr[..n_genes].to_vec();
    let mut cells = vec![0u32; nnz];
    let mut vals = vec![0f64; nnz];
    scan(&mut |c, g, x| {
        if x != 0.0 {
            let at = cursor[g] as usize;
            cells[at] = c;
            vals[at] = x;
            cursor[g] += 1;
        }
    });
    (indptr, cells, vals)
}

fn u32_bytes(v: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Gene names in file order, followed by the permutation that sorts them by
/// lowercase name (ties broken by original name, then index).
fn encode_gene_names(names: &[String]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(names.len() as u32);
    for n in names {
        w.str(n);
    }
    let lower: Vec<String> = names.iter().map(|n| n.to_lowercase()).collect();
    let mut order: Vec<u32> = (0..names.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (a as usize, b as usize);
        lower[a]
            .cmp(&lower[b])
            .then_with(|| names[a].cmp(&names[b]))
            .then(a.cmp(&b))
    });
    for i in order {
        w.u32(i);
    }
    w.buf
}

/// `n_genes + 1` u64 column offsets, then one f64 max per gene.
fn encode_gene_index(cols: &InMemoryColumns) -> Vec<u8> {
    let mut w = Writer::default();
    for &p in &cols.indptr {
        w.u64(p);
    }
    for g in 0..cols.gene_names.len() {
        let lo = cols.indptr[g] as usize;
        let hi = cols.indptr[g + 1] as usize;
        let col = &cols.values[lo..hi];
        let max = if col.is_empty() {
            0.0
        } else {
            col.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        w.f64(max);
    }
    w.buf
}

fn encode_annotations(annotations: &[AnnotationColumn]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(annotations.len() as u32);
    for a in annotations {
        w.str(&a.name);
        w.u32(a.categories.len() as u32);
        for c in &a.categories {
            w.str(c);
        }
        w.i32(a.missing_category.map_or(-1, |m| m as i32));
        w.u64(a.codes.len() as u64);
        for &c in &a.codes {
            w.u32(c);
        }
    }
    w.buf
}

/// Index of the embedding served by default: the first 3-D one, else the
/// first one at all.
pub(crate) fn default_embedding(embeddings: &[Embedding]) -> Option<usize> {
    embeddings
        .iter()
        .position(|e| e.dims == 3)
        .or(if embeddings.is_empty() { None } else { Some(0) })
}

fn encode_embeddings(embeddings: &[Embedding]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(embeddings.len() as u32);
    let default = default_embedding(embeddings);
    w.u32(default.map_or(u32::MAX, |d| d as u32));
    w.u32(default.map_or(0, |d| (embeddings[d].dims == 2) as u32));
    for e in embeddings {
        w.str(&e.name);
        w.u32(e.dims as u32);
        w.u64(e.n_points() as u64);
        for &x in &e.coords {
            w.f32(x);
        }
    }
    w.buf
}

pub(crate) fn encode_markers(markers: &MarkerCollection) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(markers.annotations.len() as u32);
    for a in &markers.annotations {
        w.str(&a.annotation);
        w.u32(a.categories.len() as u32);
        for c in &a.categories {
            w.str(&c.category);
            w.u64(c.cell_count as u64);
            match &c.outcome {
                CategoryOutcome::Computed { table } => {
                    w.u8(0);
                    w.str(&table.group_label);
                    w.u32(table.records.len() as u32);
                    for r in &table.records {
                        w.u32(r.gene_index);
                        w.str(&r.gene_name);
                        w.f64(r.t);
                        w.f64(r.df);
                        w.f64(r.p_value);
                        w.f64(r.log_fold_change);
                    }
                }
                CategoryOutcome::Skipped { reason } => {
                    w.u8(1);
                    w.str(reason);
                }
            }
        }
    }
    w.buf
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path(dest: &Path) -> PathBuf {
    let mut name = dest
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    dest.with_file_name(name)
}

/// Writes header, table and sections to a sibling temporary file, then
/// renames it over `dest`.
fn write_file<'a>(
    dest: &Path,
    n_cells: u64,
    n_genes: u64,
    flags: u32,
    sections: impl Iterator<Item = (SectionKind, &'a [u8])> + Clone,
) -> Result<StoreHeader, StoreError> {
    let count = sections.clone().count();
    let table_end = StoreHeader::encoded_len(count) as u64;
    let mut entries = Vec::with_capacity(count);
    let mut offset = table_end.next_multiple_of(8);
    for (kind, bytes) in sections.clone() {
        entries.push(SectionEntry {
            kind,
            crc32: crc32fast::hash(bytes),
            offset,
            length: bytes.len() as u64,
        });
        offset = (offset + bytes.len() as u64).next_multiple_of(8);
    }
    let header = StoreHeader {
        format_version: FORMAT_VERSION,
        flags,
        n_cells,
        n_genes,
        sections: entries,
    };

    let tmp = temp_path(dest);
    let result = (|| -> std::io::Result<()> {
        let file = File::create(&tmp)?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(&header.encode())?;
        let mut pos = table_end;
        for ((_, bytes), entry) in sections.zip(&header.sections) {
            write_padding(&mut out, entry.offset - pos)?;
            out.write_all(bytes)?;
            pos = entry.offset + entry.length;
        }
        write_padding(&mut out, pos.next_multiple_of(8) - pos)?;
        let file = out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(StoreError::io(&tmp, e));
    }
    fs::rename(&tmp, dest).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        StoreError::io(dest, e)
    })?;
    Ok(header)
}

fn write_padding(out: &mut impl Write, n: u64) -> std::io::Result<()> {
    out.write_all(&[0u8; 8][..n as usize])
}

/// Rewrites the store at `path` with the given marker tables, replacing any
/// existing marker section. Readers holding the old file keep their view.
pub fn write_markers(path: impl AsRef<Path>, markers: &MarkerCollection) -> Result<StoreHeader, StoreError> {
    let path = path.as_ref();
    let store = Store::open(path)?;
    let header = store.header().clone();
    let encoded = encode_markers(markers);
    let mut sections: Vec<(SectionKind, &[u8])> = header
        .sections
        .iter()
        .filter(|s| s.kind != SectionKind::Markers)
        .map(|s| (s.kind, store.section_bytes(s)))
        .collect();
    sections.push((SectionKind::Markers, &encoded));
    let written = write_file(
        path,
        header.n_cells,
        header.n_genes,
        header.flags | FLAG_MARKERS,
        sections.into_iter(),
    )?;
    Ok(written)
}
