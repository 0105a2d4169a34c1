//! Reader for AnnData `h5ad` files.
//!
//! Supports the group-based encodings written by anndata (encoding versions
//! 0.1.0 and 0.2.0) plus the older `h5sparse_*` / legacy categorical
//! attributes. Expression data stays sparse; a CSC `X` keeps its
//! column-major arrays and is transposed later by the store builder.

use std::collections::HashMap;
use std::path::Path;

use hdf5::types::{TypeDescriptor, VarLenAscii, VarLenUnicode};
use hdf5::{Dataset, Group, LocationType};
use thiserror::Error;

use crate::sparse::{DenseMatrix, ExpressionMatrix, Orientation, SparseError, SparseMatrix};

#[derive(Debug, Error)]
pub enum AnnDataError {
    #[error("cannot read {path}: {reason}")]
    FileNotReadable { path: String, reason: String },
    #[error("not an AnnData file: {0}")]
    NotAnnData(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid embedding {name}: {reason}")]
    InvalidEmbedding { name: String, reason: String },
    #[error("hdf5 error while reading {context}: {message}")]
    Hdf5 { context: String, message: String },
}

pub type Result<T> = std::result::Result<T, AnnDataError>;

fn h5<T>(context: &str, r: hdf5::Result<T>) -> Result<T> {
    r.map_err(|e| AnnDataError::Hdf5 {
        context: context.to_string(),
        message: e.to_string(),
    })
}

const SUPPORTED_VERSIONS: [&str; 2] = ["0.1.0", "0.2.0"];

/// Label given to cells whose categorical code is missing (-1).
pub const MISSING_CATEGORY: &str = "NA";

/// A categorical per-cell annotation.
///
/// Codes are always valid indices into `categories`: missing values are
/// mapped onto an extra trailing category at parse time.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationColumn {
    pub name: String,
    pub categories: Vec<String>,
    pub codes: Vec<u32>,
    /// Index of the category synthesized for missing codes, if any.
    pub missing_category: Option<u32>,
}

impl AnnotationColumn {
    /// Builds a column from raw codes where `-1` marks a missing value.
    pub fn from_codes(name: &str, categories: Vec<String>, raw_codes: &[i64]) -> Result<Self> {
        let mut seen = HashMap::with_capacity(categories.len());
        for (i, c) in categories.iter().enumerate() {
            if seen.insert(c.as_str(), i).is_some() {
                return Err(AnnDataError::UnsupportedEncoding(format!(
                    "column {name}: duplicate category {c:?}"
                )));
            }
        }
        let n_cat = categories.len() as i64;
        let mut has_missing = false;
        for &c in raw_codes {
            if c == -1 {
                has_missing = true;
            } else if c < -1 || c >= n_cat {
                return Err(AnnDataError::UnsupportedEncoding(format!(
                    "column {name}: code {c} invalid for {n_cat} categories"
                )));
            }
        }
        let missing_label = has_missing.then(|| {
            let mut label = MISSING_CATEGORY.to_string();
            let mut k = 1;
            while seen.contains_key(label.as_str()) {
                label = format!("{MISSING_CATEGORY}#{k}");
                k += 1;
            }
            label
        });
        let mut categories = categories;
        let missing_category = missing_label.map(|label| {
            categories.push(label);
            n_cat as u32
        });
        let codes = raw_codes
            .iter()
            .map(|&c| if c == -1 { n_cat as u32 } else { c as u32 })
            .collect();
        Ok(AnnotationColumn {
            name: name.to_string(),
            categories,
            codes,
            missing_category,
        })
    }

    /// Factorizes plain strings: categories are the unique values in order
    /// of first appearance.
    pub fn factorize(name: &str, values: &[String]) -> Self {
        let mut index: HashMap<&str, u32> = HashMap::new();
        let mut categories = Vec::new();
        let codes = values
            .iter()
            .map(|v| {
                *index.entry(v.as_str()).or_insert_with(|| {
                    categories.push(v.clone());
                    (categories.len() - 1) as u32
                })
            })
            .collect();
        AnnotationColumn {
            name: name.to_string(),
            categories,
            codes,
            missing_category: None,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Sorted cell indices belonging to `category`.
    pub fn members(&self, category: u32) -> Vec<u32> {
        self.codes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == category)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

/// Reduced-dimension coordinates, row-major `n_cells × dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub name: String,
    pub dims: usize,
    pub coords: Vec<f32>,
}

impl Embedding {
    pub fn new(name: &str, dims: usize, coords: Vec<f32>) -> Result<Self> {
        let invalid = |reason: String| AnnDataError::InvalidEmbedding {
            name: name.to_string(),
            reason,
        };
        if dims != 2 && dims != 3 {
            return Err(invalid(format!("{dims} dimensions, expected 2 or 3")));
        }
        if !coords.len().is_multiple_of(dims) {
            return Err(invalid(format!(
                "{} values is not a multiple of {dims}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite coordinate in row {}", pos / dims)));
        }
        Ok(Embedding {
            name: name.to_string(),
            dims,
            coords,
        })
    }

    pub fn n_points(&self) -> usize {
        self.coords.len() / self.dims
    }

    /// Coordinates of every point as 3-D, padding z with zero.
    pub fn xyz(&self) -> Vec<[f64; 3]> {
        self.coords
            .chunks_exact(self.dims)
            .map(|c| {
                let z = if self.dims == 3 { c[2] as f64 } else { 0.0 };
                [c[0] as f64, c[1] as f64, z]
            })
            .collect()
    }
}

/// A validated in-memory view of one h5ad file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub matrix: ExpressionMatrix,
    pub annotations: Vec<AnnotationColumn>,
    pub embeddings: Vec<Embedding>,
    pub gene_names: Vec<String>,
    pub cell_count: usize,
}

impl RawDataset {
    /// Assembles a dataset, checking cross-field dimensions and applying the
    /// duplicate gene-name policy.
    pub fn new(
        matrix: ExpressionMatrix,
        annotations: Vec<AnnotationColumn>,
        embeddings: Vec<Embedding>,
        gene_names: Vec<String>,
    ) -> Result<Self> {
        let cell_count = matrix.n_rows();
        if matrix.n_cols() != gene_names.len() {
            return Err(AnnDataError::DimensionMismatch(format!(
                "X has {} columns but var has {} entries",
                matrix.n_cols(),
                gene_names.len()
            )));
        }
        for a in &annotations {
            if a.len() != cell_count {
                return Err(AnnDataError::DimensionMismatch(format!(
                    "obs column {} has {} entries, X has {} rows",
                    a.name,
                    a.len(),
                    cell_count
                )));
            }
        }
        for e in &embeddings {
            if e.n_points() != cell_count {
                return Err(AnnDataError::DimensionMismatch(format!(
                    "obsm {} has {} rows, X has {} rows",
                    e.name,
                    e.n_points(),
                    cell_count
                )));
            }
        }
        Ok(RawDataset {
            matrix,
            annotations,
            embeddings,
            gene_names: dedup_gene_names(gene_names),
            cell_count,
        })
    }

    pub fn gene_count(&self) -> usize {
        self.gene_names.len()
    }
}

/// Disambiguates repeated names: the k-th repeat (k >= 1) of `X` becomes
/// `X#k`. The first occurrence keeps its name.
pub fn dedup_gene_names(names: Vec<String>) -> Vec<String> {
    let mut taken: std::collections::HashSet<String> = names.iter().cloned().collect();
    if taken.len() == names.len() {
        return names;
    }
    let mut first_seen = std::collections::HashSet::new();
    let mut repeats: HashMap<String, usize> = HashMap::new();
    names
        .into_iter()
        .map(|name| {
            if first_seen.insert(name.clone()) {
                return name;
            }
            let k = repeats.entry(name.clone()).or_insert(0);
            loop {
                *k += 1;
                let candidate = format!("{name}#{k}");
                if taken.insert(candidate.clone()) {
                    return candidate;
                }
            }
        })
        .collect()
}

/// Opens an h5ad file and parses it into a [`RawDataset`].
pub fn open_and_parse(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let not_readable = |reason: String| AnnDataError::FileNotReadable {
        path: path.display().to_string(),
        reason,
    };
    std::fs::File::open(path).map_err(|e| not_readable(e.to_string()))?;
    let file = hdf5::File::open(path).map_err(|e| not_readable(e.to_string()))?;

    if !file.link_exists("X") {
        return Err(AnnDataError::NotAnnData("missing X".into()));
    }
    if !file.link_exists("obs") {
        return Err(AnnDataError::NotAnnData("missing obs".into()));
    }

    let matrix = read_x(&file)?;
    let n_cells = matrix.n_rows();

    let obs = match h5("obs", file.loc_type_by_name("obs"))? {
        LocationType::Group => h5("obs", file.group("obs"))?,
        _ => {
            return Err(AnnDataError::UnsupportedEncoding(
                "obs is not a group (pre-0.7 compound dataframe)".into(),
            ))
        }
    };
    check_dataframe_length(&obs, "obs", n_cells)?;
    let annotations = read_obs_annotations(&obs, n_cells)?;

    let gene_names = if file.link_exists("var") {
        let var = h5("var", file.group("var"))?;
        read_gene_names(&var, matrix.n_cols())?
    } else {
        (0..matrix.n_cols()).map(|i| format!("gene{i}")).collect()
    };

    let embeddings = if file.link_exists("obsm") {
        read_embeddings(&h5("obsm", file.group("obsm"))?, n_cells)?
    } else {
        Vec::new()
    };

    RawDataset::new(matrix, annotations, embeddings, gene_names)
}

fn read_str_attr(loc: &hdf5::Location, name: &str) -> Result<Option<String>> {
    if !h5(name, loc.attr_names())?.iter().any(|a| a == name) {
        return Ok(None);
    }
    let attr = h5(name, loc.attr(name))?;
    let desc = h5(name, attr.dtype().and_then(|t| t.to_descriptor()))?;
    let value = match desc {
        TypeDescriptor::VarLenUnicode => {
            h5(name, attr.read_scalar::<VarLenUnicode>())?.as_str().to_string()
        }
        TypeDescriptor::VarLenAscii => {
            h5(name, attr.read_scalar::<VarLenAscii>())?.as_str().to_string()
        }
        _ => return Ok(None),
    };
    Ok(Some(value))
}

fn check_version(loc: &hdf5::Location, what: &str) -> Result<()> {
    if let Some(v) = read_str_attr(loc, "encoding-version")? {
        if !SUPPORTED_VERSIONS.contains(&v.as_str()) {
            return Err(AnnDataError::UnsupportedEncoding(format!(
                "{what}: encoding-version {v}"
            )));
        }
    }
    Ok(())
}

fn read_string_array(ds: &Dataset, what: &str) -> Result<Vec<String>> {
    let desc = h5(what, ds.dtype().and_then(|t| t.to_descriptor()))?;
    match desc {
        TypeDescriptor::VarLenUnicode => Ok(h5(what, ds.read_raw::<VarLenUnicode>())?
            .into_iter()
            .map(|s| s.as_str().to_string())
            .collect()),
        TypeDescriptor::VarLenAscii => Ok(h5(what, ds.read_raw::<VarLenAscii>())?
            .into_iter()
            .map(|s| s.as_str().to_string())
            .collect()),
        other => Err(AnnDataError::UnsupportedEncoding(format!(
            "{what}: string data stored as {other:?}"
        ))),
    }
}

fn read_i64(ds: &Dataset, what: &str) -> Result<Vec<i64>> {
    h5(what, ds.read_raw::<i64>())
}

fn read_f64(ds: &Dataset, what: &str) -> Result<Vec<f64>> {
    h5(what, ds.read_raw::<f64>())
}

fn to_u64(v: Vec<i64>, what: &str) -> Result<Vec<u64>> {
    v.into_iter()
        .map(|x| {
            u64::try_from(x)
                .map_err(|_| AnnDataError::UnsupportedEncoding(format!("{what}: negative entry {x}")))
        })
        .collect()
}

fn to_u32(v: Vec<i64>, what: &str) -> Result<Vec<u32>> {
    v.into_iter()
        .map(|x| {
            u32::try_from(x).map_err(|_| {
                AnnDataError::UnsupportedEncoding(format!("{what}: index {x} out of range"))
            })
        })
        .collect()
}

fn sparse_err(e: SparseError) -> AnnDataError {
    AnnDataError::UnsupportedEncoding(format!("X: {e}"))
}

fn read_x(file: &hdf5::File) -> Result<ExpressionMatrix> {
    match h5("X", file.loc_type_by_name("X"))? {
        LocationType::Group => {
            let g = h5("X", file.group("X"))?;
            check_version(&g, "X")?;
            let encoding = read_str_attr(&g, "encoding-type")?;
            let legacy = read_str_attr(&g, "h5sparse_format")?;
            let orientation = match (encoding.as_deref(), legacy.as_deref()) {
                (Some("csr_matrix"), _) | (None, Some("csr")) => Orientation::RowMajor,
                (Some("csc_matrix"), _) | (None, Some("csc")) => Orientation::ColumnMajor,
                (e, l) => {
                    return Err(AnnDataError::UnsupportedEncoding(format!(
                        "X group with encoding-type {e:?} / h5sparse_format {l:?}"
                    )))
                }
            };
            let shape_attr = if encoding.is_some() {
                "shape"
            } else {
                "h5sparse_shape"
            };
            let shape = h5("X shape", g.attr(shape_attr).and_then(|a| a.read_raw::<i64>()))?;
            if shape.len() != 2 || shape.iter().any(|&s| s < 0) {
                return Err(AnnDataError::UnsupportedEncoding(format!(
                    "X shape {shape:?}"
                )));
            }
            for name in ["data", "indices", "indptr"] {
                if !g.link_exists(name) {
                    return Err(AnnDataError::UnsupportedEncoding(format!("X missing {name}")));
                }
            }
            let data = read_f64(&h5("X/data", g.dataset("data"))?, "X/data")?;
            let indices = to_u32(read_i64(&h5("X/indices", g.dataset("indices"))?, "X/indices")?, "X/indices")?;
            let indptr = to_u64(read_i64(&h5("X/indptr", g.dataset("indptr"))?, "X/indptr")?, "X/indptr")?;
            let m = SparseMatrix::from_parts(
                orientation,
                shape[0] as usize,
                shape[1] as usize,
                indptr,
                indices,
                data,
            )
            .map_err(sparse_err)?;
            Ok(m.into())
        }
        LocationType::Dataset => {
            let ds = h5("X", file.dataset("X"))?;
            check_version(&ds, "X")?;
            let shape = ds.shape();
            if shape.len() != 2 {
                return Err(AnnDataError::UnsupportedEncoding(format!(
                    "dense X with {} dimensions",
                    shape.len()
                )));
            }
            let values = read_f64(&ds, "X")?;
            let m = DenseMatrix::new(shape[0], shape[1], values).map_err(sparse_err)?;
            Ok(m.into())
        }
        other => Err(AnnDataError::UnsupportedEncoding(format!("X is a {other:?}"))),
    }
}

fn index_name(df: &Group) -> Result<String> {
    Ok(read_str_attr(df, "_index")?.unwrap_or_else(|| "_index".to_string()))
}

fn check_dataframe_length(df: &Group, what: &str, expected: usize) -> Result<()> {
    let idx = index_name(df)?;
    if df.link_exists(&idx) {
        let n = h5(what, df.dataset(&idx))?.size();
        if n != expected {
            return Err(AnnDataError::DimensionMismatch(format!(
                "{what} has {n} rows, X has {expected}"
            )));
        }
    }
    Ok(())
}

/// How an obs/var column is stored.
enum ColumnKind {
    Categorical,
    LegacyCategorical,
    Strings,
    Other,
}

fn classify(df: &Group, name: &str) -> Result<ColumnKind> {
    match h5(name, df.loc_type_by_name(name))? {
        LocationType::Group => {
            let g = h5(name, df.group(name))?;
            match read_str_attr(&g, "encoding-type")?.as_deref() {
                Some("categorical") => Ok(ColumnKind::Categorical),
                _ if g.link_exists("categories") && g.link_exists("codes") => {
                    Ok(ColumnKind::Categorical)
                }
                _ => Ok(ColumnKind::Other),
            }
        }
        LocationType::Dataset => {
            let ds = h5(name, df.dataset(name))?;
            if h5(name, ds.attr_names())?.iter().any(|a| a == "categories") {
                return Ok(ColumnKind::LegacyCategorical);
            }
            let desc = h5(name, ds.dtype().and_then(|t| t.to_descriptor()))?;
            Ok(match desc {
                TypeDescriptor::VarLenUnicode
                | TypeDescriptor::VarLenAscii
                | TypeDescriptor::FixedAscii(_)
                | TypeDescriptor::FixedUnicode(_) => ColumnKind::Strings,
                _ => ColumnKind::Other,
            })
        }
        _ => Ok(ColumnKind::Other),
    }
}

/// Parses one obs column stored as a modern categorical group, a legacy
/// integer dataset with a `categories` attribute (categories resolved from
/// the sibling `__categories` group), or a plain string array.
pub fn parse_categorical(df: &Group, name: &str) -> Result<AnnotationColumn> {
    match classify(df, name)? {
        ColumnKind::Categorical => {
            let g = h5(name, df.group(name))?;
            check_version(&g, name)?;
            let cats_ds = h5(name, g.dataset("categories"))?;
            let categories = read_string_array(&cats_ds, name)?;
            let codes = read_i64(&h5(name, g.dataset("codes"))?, name)?;
            AnnotationColumn::from_codes(name, categories, &codes)
        }
        ColumnKind::LegacyCategorical => {
            let path = format!("__categories/{name}");
            if !df.link_exists("__categories") || !df.link_exists(&path) {
                return Err(AnnDataError::UnsupportedEncoding(format!(
                    "{name}: legacy categorical without {path}"
                )));
            }
            let categories = read_string_array(&h5(name, df.dataset(&path))?, name)?;
            let codes = read_i64(&h5(name, df.dataset(name))?, name)?;
            AnnotationColumn::from_codes(name, categories, &codes)
        }
        ColumnKind::Strings => {
            let ds = h5(name, df.dataset(name))?;
            let values = read_string_array(&ds, name)?;
            Ok(AnnotationColumn::factorize(name, &values))
        }
        ColumnKind::Other => Err(AnnDataError::UnsupportedEncoding(format!(
            "{name}: not a categorical or string column"
        ))),
    }
}

fn column_order(df: &Group) -> Result<Vec<String>> {
    let idx = index_name(df)?;
    let names = h5("dataframe", df.member_names())?;
    let order = if h5("dataframe", df.attr_names())?.iter().any(|a| a == "column-order") {
        let attr = h5("column-order", df.attr("column-order"))?;
        let desc = h5("column-order", attr.dtype().and_then(|t| t.to_descriptor()))?;
        match desc {
            TypeDescriptor::VarLenUnicode => h5("column-order", attr.read_raw::<VarLenUnicode>())?
                .into_iter()
                .map(|s| s.as_str().to_string())
                .collect(),
            TypeDescriptor::VarLenAscii => h5("column-order", attr.read_raw::<VarLenAscii>())?
                .into_iter()
                .map(|s| s.as_str().to_string())
                .collect(),
            // anndata writes an empty float array when there are no columns
            _ => Vec::new(),
        }
    } else {
        names
            .iter()
            .filter(|n| **n != idx && n.as_str() != "__categories")
            .cloned()
            .collect()
    };
    Ok(order.into_iter().filter(|n| names.contains(n)).collect())
}

fn read_obs_annotations(obs: &Group, n_cells: usize) -> Result<Vec<AnnotationColumn>> {
    let mut out = Vec::new();
    for name in column_order(obs)? {
        if matches!(classify(obs, &name)?, ColumnKind::Other) {
            continue;
        }
        let col = parse_categorical(obs, &name)?;
        if col.len() != n_cells {
            return Err(AnnDataError::DimensionMismatch(format!(
                "obs column {name} has {} entries, X has {n_cells} rows",
                col.len()
            )));
        }
        out.push(col);
    }
    Ok(out)
}

/// Gene symbols: CellxGene's `feature_name` column when present, the var
/// index otherwise.
fn read_gene_names(var: &Group, n_genes: usize) -> Result<Vec<String>> {
    if var.link_exists("feature_name") && !matches!(classify(var, "feature_name")?, ColumnKind::Other) {
        let col = parse_categorical(var, "feature_name")?;
        if col.len() == n_genes {
            return Ok(col
                .codes
                .iter()
                .map(|&c| col.categories[c as usize].clone())
                .collect());
        }
    }
    let idx = index_name(var)?;
    if !var.link_exists(&idx) {
        return Ok((0..n_genes).map(|i| format!("gene{i}")).collect());
    }
    let names = read_string_array(&h5("var index", var.dataset(&idx))?, "var index")?;
    if names.len() != n_genes {
        return Err(AnnDataError::DimensionMismatch(format!(
            "var has {} entries, X has {n_genes} columns",
            names.len()
        )));
    }
    Ok(names)
}

fn read_embeddings(obsm: &Group, n_cells: usize) -> Result<Vec<Embedding>> {
    let mut out = Vec::new();
    for name in h5("obsm", obsm.member_names())? {
        if h5(&name, obsm.loc_type_by_name(&name))? != LocationType::Dataset {
            continue;
        }
        let ds = h5(&name, obsm.dataset(&name))?;
        let shape = ds.shape();
        if shape.len() != 2 || !(2..=3).contains(&shape[1]) {
            continue;
        }
        if shape[0] != n_cells {
            return Err(AnnDataError::DimensionMismatch(format!(
                "obsm {name} has {} rows, obs has {n_cells}",
                shape[0]
            )));
        }
        let desc = h5(&name, ds.dtype().and_then(|t| t.to_descriptor()))?;
        if !matches!(
            desc,
            TypeDescriptor::Float(_) | TypeDescriptor::Integer(_) | TypeDescriptor::Unsigned(_)
        ) {
            continue;
        }
        let coords = h5(&name, ds.read_raw::<f32>())?;
        out.push(Embedding::new(&name, shape[1], coords)?);
    }
    Ok(out)
}
