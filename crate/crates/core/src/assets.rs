//! Files bundled with the crate: taxonomy, verbalizer, prompt frames and the
//! synthetic ValueEval-format fixture corpus.

use std::path::PathBuf;

pub const TAXONOMY_TOML: &str = include_str!("../assets/taxonomy.toml");
pub const VERBALIZER_TOML: &str = include_str!("../assets/verbalizer.toml");
pub const TEMPLATES_TOML: &str = include_str!("../assets/templates.toml");

/// Directory holding the bundled assets in the source tree.
pub fn asset_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
}

/// Arguments TSV of the 200-row fixture corpus.
pub fn fixture_arguments() -> PathBuf {
    asset_dir().join("fixture").join("arguments.tsv")
}

/// Labels TSV of the 200-row fixture corpus.
pub fn fixture_labels() -> PathBuf {
    asset_dir().join("fixture").join("labels.tsv")
}
