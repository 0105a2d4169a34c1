//! Per-client selection and view state.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use cellvista_core::presentation::ViewState;
use cellvista_core::spatial::{combine_selection, lasso_select, CombineMode, LassoPolygon, Mat4, PointIndex};
use cellvista_core::stats::SelectionMask;
use cellvista_core::store::Store;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// An opened store plus lazily built spatial indexes, one per embedding.
#[derive(Debug)]
pub struct Dataset {
    pub id: String,
    pub store: Store,
    indexes: Mutex<HashMap<String, Arc<PointIndex>>>,
}

impl Dataset {
    pub fn new(id: &str, store: Store) -> Self {
        Dataset {
            id: id.to_string(),
            store,
            indexes: Mutex::new(HashMap::new()),
        }
    }

    pub fn point_index(&self, embedding: &str) -> Result<Arc<PointIndex>, ApiError> {
        if let Some(ix) = self.indexes.lock().unwrap().get(embedding) {
            return Ok(ix.clone());
        }
        let block = self
            .store
            .embedding_block(embedding)
            .ok_or_else(|| ApiError::not_found(format!("no embedding named {embedding}")))?;
        let points = block
            .xyz
            .chunks_exact(3)
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect();
        let ix = Arc::new(PointIndex::build(points)?);
        self.indexes
            .lock()
            .unwrap()
            .insert(embedding.to_string(), ix.clone());
        Ok(ix)
    }
}

/// Cells picked by one selection gesture. Sphere centers are in embedding
/// coordinates; lasso vertices are in normalized device coordinates of the
/// given view transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Cells { cells: Vec<u32> },
    Sphere { center: [f64; 3], radius: f64 },
    Lasso { vertices: Vec<[f64; 2]>, view_transform: Mat4 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub mode: CombineMode,
    #[serde(default)]
    pub geometry: Option<Geometry>,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub session_id: String,
    pub dataset: Arc<Dataset>,
    pub embedding: String,
    pub selection: SelectionMask,
    pub view: ViewState,
}

/// JSON view of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub dataset_id: String,
    pub embedding: String,
    pub selection_size: usize,
    pub view: ViewState,
}

impl SessionState {
    pub fn new(session_id: String, dataset: Arc<Dataset>, embedding: String) -> Self {
        let n = dataset.store.n_cells();
        let view = ViewState::new(dataset.store.annotations().len());
        SessionState {
            session_id,
            dataset,
            embedding,
            selection: SelectionMask::empty(n),
            view,
        }
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            session_id: self.session_id.clone(),
            dataset_id: self.dataset.id.clone(),
            embedding: self.embedding.clone(),
            selection_size: self.selection.len(),
            view: self.view.clone(),
        }
    }

    /// Resolves the geometry and merges it into the selection.
    pub fn apply(&mut self, spec: &SelectionSpec) -> Result<(), ApiError> {
        let picked = match (&spec.geometry, spec.mode) {
            (_, CombineMode::Reset) => Vec::new(),
            (None, mode) => {
                return Err(ApiError::bad_request(format!(
                    "{mode:?} selection needs a geometry"
                )))
            }
            (Some(g), _) => self.resolve(g)?,
        };
        self.selection = combine_selection(&self.selection, &picked, spec.mode)?;
        Ok(())
    }

    fn resolve(&self, g: &Geometry) -> Result<Vec<u32>, ApiError> {
        match g {
            Geometry::Cells { cells } => {
                let n = self.dataset.store.n_cells();
                if let Some(&bad) = cells.iter().find(|&&c| c as usize >= n) {
                    return Err(ApiError::bad_request(format!(
                        "cell {bad} out of range for {n} cells"
                    )));
                }
                Ok(cells.clone())
            }
            Geometry::Sphere { center, radius } => {
                let ix = self.dataset.point_index(&self.embedding)?;
                Ok(ix.sphere_select(*center, *radius)?)
            }
            Geometry::Lasso {
                vertices,
                view_transform,
            } => {
                let ix = self.dataset.point_index(&self.embedding)?;
                let lasso = LassoPolygon {
                    vertices: vertices.clone(),
                    view_transform: *view_transform,
                };
                Ok(lasso_select(ix.points(), &lasso)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json() {
        let s: SelectionSpec = serde_json::from_str(
            r#"{"mode": "add", "geometry": {"kind": "sphere", "center": [1, 2, 3], "radius": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(s.mode, CombineMode::Add);
        assert_eq!(
            s.geometry,
            Some(Geometry::Sphere {
                center: [1.0, 2.0, 3.0],
                radius: 0.5
            })
        );
        let r: SelectionSpec = serde_json::from_str(r#"{"mode": "reset"}"#).unwrap();
        assert_eq!(r.geometry, None);
        assert!(serde_json::from_str::<SelectionSpec>(r#"{"mode": "merge"}"#).is_err());
    }
}
