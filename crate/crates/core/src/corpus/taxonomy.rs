use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of value categories in the ValueEval label set.
pub const NUM_CATEGORIES: usize = 20;

use crate::assets::TAXONOMY_TOML as BUILTIN;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueCategory {
    pub name: String,
    pub description: String,
    pub synonyms: Vec<String>,
}

/// The ordered value categories. Column `i` of every label file is category `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueTaxonomy {
    #[serde(rename = "category")]
    categories: Vec<ValueCategory>,
}

impl ValueTaxonomy {
    /// The taxonomy shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN).expect("bundled taxonomy is valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let taxonomy: ValueTaxonomy = toml::from_str(text)?;
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn new(categories: Vec<ValueCategory>) -> Result<Self> {
        let taxonomy = ValueTaxonomy { categories };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    fn validate(&self) -> Result<()> {
        if self.categories.len() != NUM_CATEGORIES {
            return Err(Error::Config {
                field: "category".into(),
                message: format!("expected {NUM_CATEGORIES} categories, found {}", self.categories.len()),
            });
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.name.trim().is_empty() {
                return Err(Error::Config {
                    field: format!("category[{i}].name"),
                    message: "empty category name".into(),
                });
            }
            if c.synonyms.is_empty() {
                return Err(Error::Config {
                    field: format!("category[{i}].synonyms"),
                    message: format!("category `{}` has no synonyms", c.name),
                });
            }
            if self.categories[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Config {
                    field: format!("category[{i}].name"),
                    message: format!("duplicate category `{}`", c.name),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[ValueCategory] {
        &self.categories
    }

    pub fn get(&self, index: usize) -> Option<&ValueCategory> {
        self.categories.get(index)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// Content hash identifying this taxonomy; used to detect checkpoint/config mismatches.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for c in &self.categories {
            hasher.update(c.name.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..8])
    }
}
