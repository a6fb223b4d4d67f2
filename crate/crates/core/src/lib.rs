//! Unsupervised annotation of general phenotypic-abnormality categories in
//! clinical notes.
//!
//! Notes and ontology term texts are encoded into a latent vector that is a
//! weighted sum of one component per category. The weights are trained
//! through reconstruction and ontology supervision only, and a note is
//! annotated with every category whose weight clears a calibrated
//! percentile threshold.

pub mod annotate;
pub mod corpus;
pub mod ontology;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod silver;
pub mod training;
