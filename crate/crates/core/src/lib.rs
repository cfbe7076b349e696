//! Concept-vector labelling of free-text chest X-ray reports, clinically
//! grounded concept perturbations, adversarial report synthesis and the
//! robustness metrics computed over external model predictions.

pub mod corpus;
pub mod extraction;
pub mod labelling;
pub mod lexicon;
pub mod metrics;
pub mod perturbation;
pub mod records;
pub mod rng;
pub mod synthesis;
pub mod textproc;
pub mod vector;

pub use extraction::ConceptMatcher;
pub use lexicon::{load_lexicon, ConceptLexicon};
pub use vector::ConceptVector;
