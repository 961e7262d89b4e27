//! Class taxonomy, class-to-class affinities and the two-layer ontology that
//! orders classes for task assignment.

mod affinity;
mod spectral;
mod tree;

pub use affinity::{
    build_semantic_matrix, class_kernel_matrix, gaussian_kernel, self_affinity_cap, semantic_affinity,
    semantic_affinity_with, visual_affinity_from_classes, AffinityKind, AffinityMatrix, KernelConfig,
};
pub use spectral::{
    build_ontology_with_max_category, build_two_layer_ontology, kmeans, spectral_partition, Category, TwoLayerOntology,
};
pub use tree::{TaxonomyNode, TaxonomyTree};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::scalar::Scalar;

/// Visual affinity between the classes of a dataset, computed on its
/// training split.
pub fn visual_affinity_matrix<F: Scalar>(dataset: &Dataset<F>, kernel: &KernelConfig) -> Result<AffinityMatrix<F>> {
    let classes = dataset.train_by_class();
    visual_affinity_from_classes(&classes, kernel)
}
