//! Geometric cell selection on embedding coordinates.
//!
//! Sphere queries go through a uniform grid sized for roughly eight points
//! per bucket. Lasso queries project every point through a view transform
//! and run an even-odd test in normalized device coordinates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anndata::AnnotationColumn;
use crate::stats::{CompensatedSum, SelectionMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("point {0} has a non-finite coordinate")]
    NonFiniteCoordinate(usize),
    #[error("radius must be positive and finite, got {0}")]
    NonPositiveRadius(f64),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("annotation covers {annotation} cells, point set has {points}")]
    LengthMismatch { annotation: usize, points: usize },
}

/// Target mean bucket occupancy.
const POINTS_PER_BUCKET: f64 = 8.0;

/// Static uniform-grid index over a 3-D point cloud.
///
/// Points are bucketed by counting sort, so `order[starts[b]..starts[b+1]]`
/// lists the points of bucket `b` in ascending index order.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<[f64; 3]>,
    min: [f64; 3],
    max: [f64; 3],
    cell_size: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl PointIndex {
    pub fn build(points: Vec<[f64; 3]>) -> Result<Self, SpatialError> {
        if points.is_empty() {
            return Err(SpatialError::EmptyPointSet);
        }
        if let Some(i) = points
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(SpatialError::NonFiniteCoordinate(i));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let mut cell_size = grid_cell_size(&min, &max, points.len());
        let bucket_cap = 4 * points.len() + 64;
        let dims = loop {
            let mut dims = [1usize; 3];
            for k in 0..3 {
                dims[k] = ((max[k] - min[k]) / cell_size).floor() as usize + 1;
            }
            if dims.iter().product::<usize>() <= bucket_cap {
                break dims;
            }
            cell_size *= 1.5;
        };
        let n_buckets = dims[0] * dims[1] * dims[2];

        let mut index = PointIndex {
            points,
            min,
            max,
            cell_size,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let bucket_of: Vec<usize> = index
            .points
            .iter()
            .map(|p| index.bucket_id(index.bucket_coords(p)))
            .collect();
        let mut starts = vec![0u32; n_buckets + 1];
        for &b in &bucket_of {
            starts[b + 1] += 1;
        }
        for b in 0..n_buckets {
            starts[b + 1] += starts[b];
        }
        let mut fill = starts.clone();
        let mut order = vec![0u32; index.points.len()];
        for (i, &b) in bucket_of.iter().enumerate() {
            order[fill[b] as usize] = i as u32;
            fill[b] += 1;
        }
        index.starts = starts;
        index.order = order;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn bucket_count(&self) -> usize {
        self.starts.len() - 1
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        (self.min, self.max)
    }

    fn axis_bucket(&self, k: usize, v: f64) -> isize {
        ((v - self.min[k]) / self.cell_size).floor() as isize
    }

    fn bucket_coords(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            c[k] = self.axis_bucket(k, p[k]).clamp(0, self.dims[k] as isize - 1) as usize;
        }
        c
    }

    fn bucket_id(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Cells within the closed ball of `radius` around `center`, ascending.
    pub fn sphere_select(&self, center: [f64; 3], radius: f64) -> Result<Vec<u32>, SpatialError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(SpatialError::NonPositiveRadius(radius));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(SpatialError::NonFiniteCoordinate(0));
        }
        let r2 = radius * radius;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for k in 0..3 {
            // one bucket of slack absorbs rounding in the bucket arithmetic
            let a = self.axis_bucket(k, center[k] - radius) - 1;
            let b = self.axis_bucket(k, center[k] + radius) + 1;
            let top = self.dims[k] as isize - 1;
            if b < 0 || a > top {
                return Ok(Vec::new());
            }
            lo[k] = a.max(0) as usize;
            hi[k] = b.min(top) as usize;
        }
        let mut out = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let b = self.bucket_id([x, y, z]);
                    let span = self.starts[b] as usize..self.starts[b + 1] as usize;
                    for &i in &self.order[span] {
                        if squared_distance(&self.points[i as usize], &center) <= r2 {
                            out.push(i);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Edge length giving ~8 points per bucket over the non-degenerate axes.
/// A fully coincident cloud gets edge length 1.
fn grid_cell_size(min: &[f64; 3], max: &[f64; 3], n: usize) -> f64 {
    let extents: Vec<f64> = (0..3)
        .map(|k| max[k] - min[k])
        .filter(|e| *e > 0.0)
        .collect();
    if extents.is_empty() {
        return 1.0;
    }
    let d = extents.len() as f64;
    let measure: f64 = extents.iter().product();
    let h = (POINTS_PER_BUCKET * measure / n as f64).powf(1.0 / d);
    let widest = extents.iter().cloned().fold(0.0, f64::max);
    if h.is_finite() && h > 0.0 {
        // never fewer than one bucket per axis or more than ~n buckets per axis
        h.min(widest).max(widest / n as f64)
    } else {
        widest
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Builds a [`PointIndex`].
pub fn build_index(points: Vec<[f64; 3]>) -> Result<PointIndex, SpatialError> {
    PointIndex::build(points)
}

/// Closed-ball query through the grid.
pub fn sphere_select(
    index: &PointIndex,
    center: [f64; 3],
    radius: f64,
) -> Result<Vec<u32>, SpatialError> {
    index.sphere_select(center, radius)
}

/// Row-major 4×4 matrix applied to column vectors: `clip = M · [x, y, z, 1]`.
pub type Mat4 = [[f64; 4]; 4];

pub const IDENTITY: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Screen-space lasso: polygon vertices in normalized device coordinates
/// plus the projection·view transform that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPolygon {
    pub vertices: Vec<[f64; 2]>,
    pub view_transform: Mat4,
}

impl LassoPolygon {
    pub fn validate(&self) -> Result<(), SpatialError> {
        if self.vertices.len() < 3 {
            return Err(SpatialError::DegeneratePolygon(format!(
                "{} vertices",
                self.vertices.len()
            )));
        }
        if self
            .vertices
            .iter()
            .flatten()
            .chain(self.view_transform.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(SpatialError::DegeneratePolygon("non-finite value".into()));
        }
        if signed_area(&self.vertices) == 0.0 {
            return Err(SpatialError::DegeneratePolygon("zero area".into()));
        }
        Ok(())
    }
}

fn signed_area(v: &[[f64; 2]]) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        let a = v[i];
        let b = v[(i + 1) % v.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

/// Projects a point to normalized device coordinates. Returns `None` when
/// the point is behind the camera (w <= 0) or outside the depth range.
pub fn project(m: &Mat4, p: &[f64; 3]) -> Option<[f64; 2]> {
    let mut clip = [0.0; 4];
    for (r, out) in clip.iter_mut().enumerate() {
        *out = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
    }
    let w = clip[3];
    if w <= 0.0 {
        return None;
    }
    let z = clip[2] / w;
    if !(-1.0..=1.0).contains(&z) {
        return None;
    }
    Some([clip[0] / w, clip[1] / w])
}

/// Even-odd crossing test.
pub fn point_in_polygon(pt: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > pt[1]) != (b[1] > pt[1]) {
            let x = a[0] + (pt[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if pt[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Cells whose projection falls inside the lasso, ascending.
pub fn lasso_select(points: &[[f64; 3]], lasso: &LassoPolygon) -> Result<Vec<u32>, SpatialError> {
    lasso.validate()?;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in &lasso.vertices {
        for k in 0..2 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    Ok(points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let s = project(&lasso.view_transform, p)?;
            let in_box = (lo[0]..=hi[0]).contains(&s[0]) && (lo[1]..=hi[1]).contains(&s[1]);
            (in_box && point_in_polygon(s, &lasso.vertices)).then_some(i as u32)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub label: String,
    pub position: [f64; 3],
    pub count: usize,
}

/// Mean position of each non-empty category.
pub fn category_centroids(
    points: &[[f64; 3]],
    annotation: &AnnotationColumn,
) -> Result<Vec<Centroid>, SpatialError> {
    if annotation.len() != points.len() {
        return Err(SpatialError::LengthMismatch {
            annotation: annotation.len(),
            points: points.len(),
        });
    }
    let k = annotation.categories.len();
    let mut sums = vec![[CompensatedSum::default(); 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(&annotation.codes) {
        let c = c as usize;
        counts[c] += 1;
        for d in 0..3 {
            sums[c][d].add(p[d]);
        }
    }
    Ok((0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| Centroid {
            label: annotation.categories[c].clone(),
            position: sums[c].map(|s| s.value() / counts[c] as f64),
            count: counts[c],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Add,
    Replace,
    Reset,
}

/// Merges newly picked cells into the current selection.
pub fn combine_selection(
    current: &SelectionMask,
    addition: &[u32],
    mode: CombineMode,
) -> Result<SelectionMask, crate::stats::StatsError> {
    let n = current.n_cells();
    match mode {
        CombineMode::Reset => Ok(SelectionMask::empty(n)),
        CombineMode::Replace => SelectionMask::new(addition.to_vec(), n),
        CombineMode::Add => {
            let mut cells = current.selected().to_vec();
            cells.extend_from_slice(addition);
            SelectionMask::new(cells, n)
        }
    }
}
