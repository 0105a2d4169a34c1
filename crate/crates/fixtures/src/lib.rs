//! Test data for the cellvista crates: an h5ad writer and seeded synthetic
//! datasets. Types here are plain vectors so any crate can consume them.

pub mod h5ad;
pub mod synth;

pub use h5ad::{H5adFile, ObsColumn, ObsmEntry, SparseParts, XMatrix};
pub use synth::{EnrichedFixture, ENRICHED_CENTRE, ENRICHED_GENE};
