use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::check_categories;

/// Ordered category names; the position of a name is its class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRegistry {
    dataset_id: String,
    names: Vec<String>,
}

const ISAID: [&str; 15] = [
    "ship",
    "storage tank",
    "baseball diamond",
    "tennis court",
    "basketball court",
    "ground track field",
    "bridge",
    "large vehicle",
    "small vehicle",
    "helicopter",
    "swimming pool",
    "roundabout",
    "soccer ball field",
    "plane",
    "harbor",
];

const DLRSD: [&str; 17] = [
    "airplane",
    "bare soil",
    "buildings",
    "cars",
    "chaparral",
    "court",
    "dock",
    "field",
    "grass",
    "mobile home",
    "pavement",
    "sand",
    "sea",
    "ship",
    "tanks",
    "trees",
    "water",
];

const ISPRS: [&str; 6] = [
    "impervious surfaces",
    "Building",
    "Low vegetation",
    "Tree",
    "Car",
    "background",
];

impl CategoryRegistry {
    pub fn new(dataset_id: impl Into<String>, names: Vec<String>) -> Result<Self> {
        check_categories(&names).map_err(|e| Error::config(e.to_string()))?;
        Ok(Self {
            dataset_id: dataset_id.into(),
            names,
        })
    }

    /// Category lists of the public benchmarks, by lower-case id:
    /// `isaid`, `dlrsd`, `potsdam`, `vaihingen`.
    pub fn builtin(dataset_id: &str) -> Option<Self> {
        let names: &[&str] = match dataset_id.to_ascii_lowercase().as_str() {
            "isaid" => &ISAID,
            "dlrsd" => &DLRSD,
            "potsdam" | "vaihingen" => &ISPRS,
            _ => return None,
        };
        Some(Self {
            dataset_id: dataset_id.to_ascii_lowercase(),
            names: names.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}
