//! Procedural editing operations and paired-data synthesis.

mod dataset;
mod ops;
mod procedural;
mod recipe;

pub use dataset::{
    assign_splits, dataset_hash, load_dataset, manifest_lines, mix_seed, read_manifest, split_of,
    synthesize_dataset, synthesize_family_pairs, write_dataset, BaseSource, ImagePair,
    ManifestEntry, Split, MANIFEST,
};
pub use ops::{apply_primitive, hue_matrix, hue_tint, OpKind, ParamSpec, PrimitiveOp};
pub use procedural::procedural_image;
pub use recipe::{
    apply_recipe, derive_caption, derive_tags, is_tag, n_families, sample_recipe, EditRecipe,
    FAMILY_NAMES, TAG_VOCAB,
};
