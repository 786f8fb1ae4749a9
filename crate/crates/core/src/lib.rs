//! Weak-supervision toolkit for chest CT: rule-based multi-label extraction
//! from radiology reports, subject-level splitting, disease co-occurrence
//! trees, task derivation, bootstrap AUC evaluation stratified by
//! co-occurrence pattern, a synthetic shortcut-classifier simulator and CT
//! volume preprocessing.

pub mod cli;
pub mod cohort;
pub mod disease;
pub mod error;
pub mod metrics;
pub mod rba;
pub mod rng;
pub mod simcls;
pub mod volprep;

pub use disease::{Disease, DiseaseSet};
pub use error::{Error, Result};
