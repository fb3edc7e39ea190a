//! Expert-routing analysis: per-language activation signatures, Pearson
//! correlation between languages, and average-linkage clustering exported as
//! Newick trees.

mod cluster;
mod correlation;
mod newick;
mod signature;

pub use cluster::{cluster, Dendrogram, Merge, TIE_TOLERANCE};
pub use correlation::{correlation_matrix, pearson, CorrelationMatrix};
pub use newick::NewickNode;
pub use signature::{collect_signature, sample_documents, SpecializationMatrix};

/// Documents per language in a signature run.
pub const DEFAULT_DOCUMENTS: usize = 100;
