pub mod anndata;
pub mod sparse;
pub mod stats;
pub mod spatial;
pub mod presentation;
pub mod store;
