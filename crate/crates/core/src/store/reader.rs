use std::fs::File;
use std::path::{Path, PathBuf};

use memmap2::Mmap;

use super::format::{decode_f64s, decode_u32s, Reader, SectionEntry, SectionKind, StoreHeader};
use super::StoreError;
use crate::anndata::{AnnotationColumn, Embedding};
use crate::stats::{
    AnnotationMarkers, CategoryMarkers, CategoryOutcome, ColumnView, ExpressionSource,
    MarkerCollection, MarkerRecord, MarkerTable, StatsError,
};

pub const MAX_LOOKUP_RESULTS: usize = 20;

/// One gene's sparse column as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneColumn {
    pub gene_index: usize,
    pub cell_indices: Vec<u32>,
    pub values: Vec<f64>,
    pub max_value: f64,
}

impl GeneColumn {
    pub fn nonzero_count(&self) -> usize {
        self.cell_indices.len()
    }

    pub fn to_dense(&self, n_cells: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_cells];
        for (&c, &v) in self.cell_indices.iter().zip(&self.values) {
            out[c as usize] = v;
        }
        out
    }
}

/// Embedding coordinates as served to the viewer: always three per point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub name: String,
    pub native_dims: usize,
    /// True when a zero z coordinate was appended.
    pub padded: bool,
    pub xyz: Vec<f32>,
}

/// A read-only, memory-mapped store. Small sections are decoded on open;
/// expression columns are read from the mapping on demand.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    map: Mmap,
    header: StoreHeader,
    gene_names: Vec<String>,
    lowercase_names: Vec<String>,
    sorted_genes: Vec<u32>,
    indptr: Vec<u64>,
    max_values: Vec<f64>,
    cells: SectionEntry,
    values: SectionEntry,
    annotations: Vec<AnnotationColumn>,
    embeddings: Vec<Embedding>,
    default_embedding: Option<usize>,
    markers: Option<MarkerCollection>,
}

fn required(header: &StoreHeader, kind: SectionKind) -> Result<SectionEntry, StoreError> {
    header
        .section(kind)
        .copied()
        .ok_or_else(|| StoreError::CorruptSection(format!("missing {kind:?} section")))
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| StoreError::io(&path, e))?;
        // SAFETY: stores are never modified in place; updates replace the
        // file by rename, which leaves this mapping on the old inode.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| StoreError::io(&path, e))?;
        let header = StoreHeader::decode(&map)?;
        for s in &header.sections {
            let bytes = &map[s.offset as usize..(s.offset + s.length) as usize];
            if crc32fast::hash(bytes) != s.crc32 {
                return Err(StoreError::CorruptSection(format!(
                    "{:?} section checksum mismatch",
                    s.kind
                )));
            }
        }
        if header.n_cells > u32::MAX as u64 {
            return Err(StoreError::CorruptSection("cell count exceeds u32".into()));
        }
        let n_cells = header.n_cells as usize;
        let n_genes = header.n_genes as usize;

        let names_entry = required(&header, SectionKind::GeneNames)?;
        let (gene_names, sorted_genes) = decode_gene_names(slice(&map, &names_entry), n_genes)?;
        let lowercase_names = gene_names.iter().map(|n| n.to_lowercase()).collect();

        let index_entry = required(&header, SectionKind::GeneIndex)?;
        let (indptr, max_values) = decode_gene_index(slice(&map, &index_entry), n_genes)?;
        let cells = required(&header, SectionKind::ExpressionCells)?;
        let values = required(&header, SectionKind::ExpressionValues)?;
        let nnz = *indptr.last().unwrap();
        if cells.length != nnz * 4 || values.length != nnz * 8 {
            return Err(StoreError::CorruptSection(format!(
                "expression sections do not hold {nnz} entries"
            )));
        }
        validate_columns(&indptr, slice(&map, &cells), n_cells)?;

        let ann_entry = required(&header, SectionKind::Annotations)?;
        let annotations = decode_annotations(slice(&map, &ann_entry), n_cells)?;
        let emb_entry = required(&header, SectionKind::Embeddings)?;
        let (embeddings, default_embedding) =
            decode_embeddings(slice(&map, &emb_entry), n_cells)?;

        let markers = match header.section(SectionKind::Markers) {
            Some(m) if header.has_markers() => Some(decode_markers(slice(&map, m))?),
            Some(_) => {
                return Err(StoreError::CorruptSection(
                    "marker section present but not flagged".into(),
                ))
            }
            None if header.has_markers() => {
                return Err(StoreError::CorruptSection("flagged marker section missing".into()))
            }
            None => None,
        };

        Ok(Store {
            path,
            map,
            header,
            gene_names,
            lowercase_names,
            sorted_genes,
            indptr,
            max_values,
            cells,
            values,
            annotations,
            embeddings,
            default_embedding,
            markers,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn n_cells(&self) -> usize {
        self.header.n_cells as usize
    }

    pub fn n_genes(&self) -> usize {
        self.header.n_genes as usize
    }

    pub fn nnz(&self) -> u64 {
        *self.indptr.last().unwrap()
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn annotations(&self) -> &[AnnotationColumn] {
        &self.annotations
    }

    pub fn annotation(&self, name: &str) -> Option<&AnnotationColumn> {
        self.annotations.iter().find(|a| a.name == name)
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn default_embedding(&self) -> Option<&Embedding> {
        self.default_embedding.map(|i| &self.embeddings[i])
    }

    pub fn embedding_block(&self, name: &str) -> Option<EmbeddingBlock> {
        let e = self.embeddings.iter().find(|e| e.name == name)?;
        let xyz = if e.dims == 3 {
            e.coords.clone()
        } else {
            e.coords
                .chunks_exact(2)
                .flat_map(|p| [p[0], p[1], 0.0])
                .collect()
        };
        Some(EmbeddingBlock {
            name: e.name.clone(),
            native_dims: e.dims,
            padded: e.dims == 2,
            xyz,
        })
    }

    pub fn markers(&self) -> Option<&MarkerCollection> {
        self.markers.as_ref()
    }

    pub(crate) fn section_bytes(&self, entry: &SectionEntry) -> &[u8] {
        slice(&self.map, entry)
    }

    fn column_range(&self, gene: usize) -> Result<(usize, usize), StoreError> {
        if gene >= self.n_genes() {
            return Err(StoreError::IndexOutOfRange {
                index: gene,
                len: self.n_genes(),
            });
        }
        Ok((self.indptr[gene] as usize, self.indptr[gene + 1] as usize))
    }

    pub fn gene_column(&self, gene: usize) -> Result<GeneColumn, StoreError> {
        let (lo, hi) = self.column_range(gene)?;
        let cells = slice(&self.map, &self.cells);
        let values = slice(&self.map, &self.values);
        Ok(GeneColumn {
            gene_index: gene,
            cell_indices: decode_u32s(&cells[lo * 4..hi * 4]),
            values: decode_f64s(&values[lo * 8..hi * 8]),
            max_value: self.max_values[gene],
        })
    }

    /// Dense expression of one gene across all cells, with its maximum and
    /// nonzero count.
    pub fn fetch_gene_column(&self, gene: usize) -> Result<(Vec<f64>, f64, usize), StoreError> {
        let (lo, hi) = self.column_range(gene)?;
        let cells = &slice(&self.map, &self.cells)[lo * 4..hi * 4];
        let values = &slice(&self.map, &self.values)[lo * 8..hi * 8];
        let mut dense = vec![0.0; self.n_cells()];
        for (c, v) in cells.chunks_exact(4).zip(values.chunks_exact(8)) {
            let c = u32::from_le_bytes(c.try_into().unwrap()) as usize;
            dense[c] = f64::from_le_bytes(v.try_into().unwrap());
        }
        Ok((dense, self.max_values[gene], hi - lo))
    }

    /// Case-insensitive gene search: the exact match (if any) followed by
    /// prefix matches in lexicographic order, at most [`MAX_LOOKUP_RESULTS`].
    pub fn lookup_gene(&self, query: &str) -> Vec<(usize, String)> {
        let q = query.trim().to_lowercase();
        if q.is_empty() {
            return Vec::new();
        }
        let start = self
            .sorted_genes
            .partition_point(|&i| self.lowercase_names[i as usize].as_str() < q.as_str());
        self.sorted_genes[start..]
            .iter()
            .map(|&i| i as usize)
            .take_while(|&i| self.lowercase_names[i].starts_with(&q))
            .take(MAX_LOOKUP_RESULTS)
            .map(|i| (i, self.gene_names[i].clone()))
            .collect()
    }

    /// Resolves a gene given either its exact name, a unique case-insensitive
    /// name, or a decimal index.
    pub fn resolve_gene(&self, query: &str) -> Option<usize> {
        if let Some(i) = self.gene_names.iter().position(|n| n == query) {
            return Some(i);
        }
        let hits = self.lookup_gene(query);
        let lower = query.trim().to_lowercase();
        let exact: Vec<_> = hits
            .iter()
            .filter(|(i, _)| self.lowercase_names[*i] == lower)
            .collect();
        if let [(i, _)] = exact.as_slice() {
            return Some(*i);
        }
        query.parse::<usize>().ok().filter(|&i| i < self.n_genes())
    }
}

impl ExpressionSource for Store {
    fn n_cells(&self) -> usize {
        Store::n_cells(self)
    }

    fn n_genes(&self) -> usize {
        Store::n_genes(self)
    }

    fn gene_name(&self, gene: usize) -> &str {
        &self.gene_names[gene]
    }

    fn with_column<R>(
        &self,
        gene: usize,
        f: impl FnOnce(ColumnView<'_>) -> R,
    ) -> Result<R, StatsError> {
        let col = self
            .gene_column(gene)
            .map_err(|e| StatsError::Source(e.to_string()))?;
        Ok(f(ColumnView {
            cell_indices: &col.cell_indices,
            values: &col.values,
        }))
    }
}

fn slice<'a>(map: &'a [u8], entry: &SectionEntry) -> &'a [u8] {
    &map[entry.offset as usize..(entry.offset + entry.length) as usize]
}

fn decode_gene_names(bytes: &[u8], n_genes: usize) -> Result<(Vec<String>, Vec<u32>), StoreError> {
    let mut r = Reader::new(bytes);
    if r.u32()? as usize != n_genes {
        return Err(StoreError::CorruptSection("gene name count mismatch".into()));
    }
    let names = (0..n_genes).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
    let order = decode_u32s(r.take(n_genes * 4)?);
    let mut seen = vec![false; n_genes];
    for &i in &order {
        match seen.get_mut(i as usize) {
            Some(s) if !*s => *s = true,
            _ => return Err(StoreError::CorruptSection("gene order is not a permutation".into())),
        }
    }
    if !r.is_empty() {
        return Err(StoreError::CorruptSection("trailing bytes in gene names".into()));
    }
    Ok((names, order))
}

fn decode_gene_index(bytes: &[u8], n_genes: usize) -> Result<(Vec<u64>, Vec<f64>), StoreError> {
    if bytes.len() != (n_genes + 1) * 8 + n_genes * 8 {
        return Err(StoreError::CorruptSection("gene index has wrong length".into()));
    }
    let (ptr, max) = bytes.split_at((n_genes + 1) * 8);
    let indptr: Vec<u64> = ptr
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if indptr[0] != 0 || indptr.windows(2).any(|w| w[0] > w[1]) {
        return Err(StoreError::CorruptSection("gene offsets not monotone".into()));
    }
    Ok((indptr, decode_f64s(max)))
}

fn validate_columns(indptr: &[u64], cells: &[u8], n_cells: usize) -> Result<(), StoreError> {
    for (g, w) in indptr.windows(2).enumerate() {
        let col = &cells[w[0] as usize * 4..w[1] as usize * 4];
        let mut prev: Option<u32> = None;
        for c in col.chunks_exact(4) {
            let c = u32::from_le_bytes(c.try_into().unwrap());
            if c as usize >= n_cells || prev.is_some_and(|p| p >= c) {
                return Err(StoreError::CorruptSection(format!(
                    "gene {g}: cell indices not strictly increasing below {n_cells}"
                )));
            }
            prev = Some(c);
        }
    }
    Ok(())
}

fn decode_annotations(bytes: &[u8], n_cells: usize) -> Result<Vec<AnnotationColumn>, StoreError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.str()?;
        let n_cat = r.u32()?;
        let categories = (0..n_cat).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
        let missing = r.i32()?;
        let missing_category = match missing {
            -1 => None,
            m if m >= 0 && (m as u32) < n_cat => Some(m as u32),
            _ => return Err(StoreError::CorruptSection(format!("annotation {name}: bad missing code"))),
        };
        let n = r.u64()? as usize;
        if n != n_cells {
            return Err(StoreError::CorruptSection(format!("annotation {name}: {n} codes")));
        }
        let codes = decode_u32s(r.take(n * 4)?);
        if codes.iter().any(|&c| c >= n_cat) {
            return Err(StoreError::CorruptSection(format!("annotation {name}: code out of range")));
        }
        out.push(AnnotationColumn {
            name,
            categories,
            codes,
            missing_category,
        });
    }
    Ok(out)
}

fn decode_embeddings(bytes: &[u8], n_cells: usize) -> Result<(Vec<Embedding>, Option<usize>), StoreError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let default = r.u32()?;
    let _padded = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let dims = r.u32()? as usize;
        let n = r.u64()? as usize;
        if n != n_cells || !(2..=3).contains(&dims) {
            return Err(StoreError::CorruptSection(format!("embedding {name}: bad shape")));
        }
        let coords: Vec<f32> = r
            .take(n * dims * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let e = Embedding::new(&name, dims, coords)
            .map_err(|e| StoreError::CorruptSection(e.to_string()))?;
        out.push(e);
    }
    let default = match default {
        u32::MAX => None,
        d if (d as usize) < count => Some(d as usize),
        _ => return Err(StoreError::CorruptSection("default embedding out of range".into())),
    };
    Ok((out, default))
}

fn decode_markers(bytes: &[u8]) -> Result<MarkerCollection, StoreError> {
    let mut r = Reader::new(bytes);
    let n_ann = r.u32()?;
    let mut annotations = Vec::new();
    for _ in 0..n_ann {
        let annotation = r.str()?;
        let n_cat = r.u32()?;
        let mut categories = Vec::new();
        for _ in 0..n_cat {
            let category = r.str()?;
            let cell_count = r.u64()? as usize;
            let outcome = match r.u8()? {
                0 => {
                    let group_label = r.str()?;
                    let n = r.u32()?;
                    let mut records = Vec::new();
                    for _ in 0..n {
                        records.push(MarkerRecord {
                            gene_index: r.u32()?,
                            gene_name: r.str()?,
                            t: r.f64()?,
                            df: r.f64()?,
                            p_value: r.f64()?,
                            log_fold_change: r.f64()?,
                        });
                    }
                    CategoryOutcome::Computed {
                        table: MarkerTable {
                            group_label,
                            records,
                        },
                    }
                }
                1 => CategoryOutcome::Skipped { reason: r.str()? },
                t => return Err(StoreError::CorruptSection(format!("marker outcome tag {t}"))),
            };
            categories.push(CategoryMarkers {
                category,
                cell_count,
                outcome,
            });
        }
        annotations.push(AnnotationMarkers {
            annotation,
            categories,
        });
    }
    Ok(MarkerCollection { annotations })
}
