//! Minimal h5ad writer following the anndata on-disk layout (encoding
//! version 0.1.0 for X, 0.2.0 for dataframes).

use std::path::Path;
use std::str::FromStr;

use hdf5::types::VarLenUnicode;
use hdf5::{Group, H5Type, Location};

/// Compressed sparse parts. `indptr` runs over rows for CSR and over
/// columns for CSC.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseParts {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<u64>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseParts {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row-major dense copy. Only meaningful for CSR parts.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for r in 0..self.n_rows {
            for k in self.indptr[r] as usize..self.indptr[r + 1] as usize {
                out[r * self.n_cols + self.indices[k] as usize] += self.values[k];
            }
        }
        out
    }

    /// CSR parts of a row-major dense buffer.
    pub fn csr_from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Self {
        let mut indptr = vec![0u64];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..n_rows {
            for c in 0..n_cols {
                let v = dense[r * n_cols + c];
                if v != 0.0 {
                    indices.push(c as u32);
                    values.push(v);
                }
            }
            indptr.push(values.len() as u64);
        }
        SparseParts {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    /// CSC parts of a row-major dense buffer.
    pub fn csc_from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Self {
        let mut t = vec![0.0; dense.len()];
        for r in 0..n_rows {
            for c in 0..n_cols {
                t[c * n_rows + r] = dense[r * n_cols + c];
            }
        }
        let mut p = Self::csr_from_dense(n_cols, n_rows, &t);
        p.n_rows = n_rows;
        p.n_cols = n_cols;
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum XMatrix {
    Csr(SparseParts),
    Csc(SparseParts),
    Dense {
        n_rows: usize,
        n_cols: usize,
        values: Vec<f64>,
    },
}

impl XMatrix {
    pub fn n_rows(&self) -> usize {
        match self {
            XMatrix::Csr(p) | XMatrix::Csc(p) => p.n_rows,
            XMatrix::Dense { n_rows, .. } => *n_rows,
        }
    }

    pub fn n_cols(&self) -> usize {
        match self {
            XMatrix::Csr(p) | XMatrix::Csc(p) => p.n_cols,
            XMatrix::Dense { n_cols, .. } => *n_cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObsColumn {
    Categorical {
        categories: Vec<String>,
        codes: Vec<i8>,
    },
    /// Pre-0.7 layout: integer codes with a `categories` attribute and the
    /// labels in `__categories/<name>`.
    LegacyCategorical {
        categories: Vec<String>,
        codes: Vec<i8>,
    },
    Strings(Vec<String>),
    Numeric(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsmEntry {
    pub name: String,
    pub dims: usize,
    pub coords: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct H5adFile {
    /// `None` writes a file without `X`.
    pub x: Option<XMatrix>,
    pub obs_names: Vec<String>,
    pub obs: Vec<(String, ObsColumn)>,
    pub var_names: Vec<String>,
    /// Written as the `feature_name` var column when present.
    pub feature_names: Option<Vec<String>>,
    pub obsm: Vec<ObsmEntry>,
}

impl H5adFile {
    pub fn new(x: XMatrix) -> Self {
        let obs_names = (0..x.n_rows()).map(|i| format!("cell{i}")).collect();
        let var_names = (0..x.n_cols()).map(|i| format!("ENSG{i:011}")).collect();
        H5adFile {
            x: Some(x),
            obs_names,
            obs: Vec::new(),
            var_names,
            feature_names: None,
            obsm: Vec::new(),
        }
    }

    pub fn with_obs(mut self, name: &str, col: ObsColumn) -> Self {
        self.obs.push((name.to_string(), col));
        self
    }

    pub fn with_obsm(mut self, name: &str, dims: usize, coords: Vec<f32>) -> Self {
        self.obsm.push(ObsmEntry {
            name: name.to_string(),
            dims,
            coords,
        });
        self
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = Some(names);
        self
    }

    pub fn write(&self, path: impl AsRef<Path>) -> hdf5::Result<()> {
        let file = hdf5::File::create(path)?;
        str_attr(&file, "encoding-type", "anndata")?;
        str_attr(&file, "encoding-version", "0.1.0")?;
        if let Some(x) = &self.x {
            write_x(&file, x)?;
        }
        let obs = file.create_group("obs")?;
        write_dataframe(&obs, &self.obs_names, &self.obs)?;
        let var = file.create_group("var")?;
        let var_cols = match &self.feature_names {
            Some(f) => vec![("feature_name".to_string(), ObsColumn::Strings(f.clone()))],
            None => Vec::new(),
        };
        write_dataframe(&var, &self.var_names, &var_cols)?;
        let obsm = file.create_group("obsm")?;
        str_attr(&obsm, "encoding-type", "dict")?;
        str_attr(&obsm, "encoding-version", "0.1.0")?;
        for e in &self.obsm {
            let n = e.coords.len() / e.dims;
            obsm.new_dataset::<f32>()
                .shape((n, e.dims))
                .create(e.name.as_str())?
                .write_raw(&e.coords)?;
        }
        Ok(())
    }
}

fn vlu(s: &str) -> VarLenUnicode {
    VarLenUnicode::from_str(s).expect("no interior NUL")
}

fn str_attr(loc: &Location, name: &str, value: &str) -> hdf5::Result<()> {
    loc.new_attr::<VarLenUnicode>()
        .shape(())
        .create(name)?
        .write_scalar(&vlu(value))
}

fn str_array_attr(loc: &Location, name: &str, values: &[String]) -> hdf5::Result<()> {
    let v: Vec<VarLenUnicode> = values.iter().map(|s| vlu(s)).collect();
    loc.new_attr::<VarLenUnicode>()
        .shape(v.len())
        .create(name)?
        .write_raw(&v)
}

fn dataset<T: H5Type>(g: &Group, name: &str, data: &[T]) -> hdf5::Result<hdf5::Dataset> {
    let ds = g.new_dataset::<T>().shape(data.len()).create(name)?;
    ds.write_raw(data)?;
    Ok(ds)
}

fn strings(g: &Group, name: &str, values: &[String]) -> hdf5::Result<hdf5::Dataset> {
    let v: Vec<VarLenUnicode> = values.iter().map(|s| vlu(s)).collect();
    dataset(g, name, &v)
}

fn write_x(file: &hdf5::File, x: &XMatrix) -> hdf5::Result<()> {
    match x {
        XMatrix::Csr(p) | XMatrix::Csc(p) => {
            let g = file.create_group("X")?;
            let kind = if matches!(x, XMatrix::Csr(_)) {
                "csr_matrix"
            } else {
                "csc_matrix"
            };
            str_attr(&g, "encoding-type", kind)?;
            str_attr(&g, "encoding-version", "0.1.0")?;
            g.new_attr::<i64>()
                .shape(2)
                .create("shape")?
                .write_raw(&[p.n_rows as i64, p.n_cols as i64])?;
            let data: Vec<f32> = p.values.iter().map(|&v| v as f32).collect();
            if data.iter().zip(&p.values).all(|(a, b)| *a as f64 == *b) {
                dataset(&g, "data", &data)?;
            } else {
                dataset(&g, "data", &p.values)?;
            }
            let indices: Vec<i32> = p.indices.iter().map(|&i| i as i32).collect();
            dataset(&g, "indices", &indices)?;
            let indptr: Vec<i64> = p.indptr.iter().map(|&i| i as i64).collect();
            dataset(&g, "indptr", &indptr)?;
        }
        XMatrix::Dense {
            n_rows,
            n_cols,
            values,
        } => {
            let ds = file
                .new_dataset::<f64>()
                .shape((*n_rows, *n_cols))
                .create("X")?;
            ds.write_raw(values)?;
            str_attr(&ds, "encoding-type", "array")?;
            str_attr(&ds, "encoding-version", "0.2.0")?;
        }
    }
    Ok(())
}

fn write_dataframe(g: &Group, index: &[String], cols: &[(String, ObsColumn)]) -> hdf5::Result<()> {
    str_attr(g, "encoding-type", "dataframe")?;
    str_attr(g, "encoding-version", "0.2.0")?;
    str_attr(g, "_index", "_index")?;
    let names: Vec<String> = cols.iter().map(|(n, _)| n.clone()).collect();
    if names.is_empty() {
        // anndata stores an empty float array here
        g.new_attr::<f64>().shape(0).create("column-order")?;
    } else {
        str_array_attr(g, "column-order", &names)?;
    }
    let idx = strings(g, "_index", index)?;
    str_attr(&idx, "encoding-type", "string-array")?;
    str_attr(&idx, "encoding-version", "0.2.0")?;
    for (name, col) in cols {
        match col {
            ObsColumn::Categorical { categories, codes } => {
                let c = g.create_group(name)?;
                str_attr(&c, "encoding-type", "categorical")?;
                str_attr(&c, "encoding-version", "0.2.0")?;
                c.new_attr::<bool>().shape(()).create("ordered")?.write_scalar(&false)?;
                strings(&c, "categories", categories)?;
                dataset(&c, "codes", codes)?;
            }
            ObsColumn::LegacyCategorical { categories, codes } => {
                let cats = match g.group("__categories") {
                    Ok(c) => c,
                    Err(_) => g.create_group("__categories")?,
                };
                strings(&cats, name, categories)?;
                let ds = dataset(g, name, codes)?;
                // real files hold an object reference; only its presence is read
                ds.new_attr::<i32>().shape(()).create("categories")?.write_scalar(&0)?;
            }
            ObsColumn::Strings(values) => {
                let ds = strings(g, name, values)?;
                str_attr(&ds, "encoding-type", "string-array")?;
                str_attr(&ds, "encoding-version", "0.2.0")?;
            }
            ObsColumn::Numeric(values) => {
                let ds = dataset(g, name, values)?;
                str_attr(&ds, "encoding-type", "array")?;
                str_attr(&ds, "encoding-version", "0.2.0")?;
            }
        }
    }
    Ok(())
}
