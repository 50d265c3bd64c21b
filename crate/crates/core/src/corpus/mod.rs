//! ValueEval corpus model: arguments, label matrices, the value taxonomy and
//! the auxiliary datasets derived from them.

mod sampling;
mod taxonomy;
mod tsv;

use std::collections::HashSet;
use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sampling::{sample_few_shot, sample_fraction, FewShotSample, Shortfall};
pub use taxonomy::{ValueCategory, ValueTaxonomy, NUM_CATEGORIES};
pub use tsv::{join, load_arguments, load_dataset, load_labels, write_arguments, write_labels, JoinReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Supporting,
    Against,
}

impl Stance {
    /// Maps both the raw upstream wording and the mapped single word.
    pub fn parse(raw: &str) -> Option<Stance> {
        match raw.trim() {
            "in favor of" | "supporting" => Some(Stance::Supporting),
            "against" => Some(Stance::Against),
            _ => None,
        }
    }

    pub fn as_word(self) -> &'static str {
        match self {
            Stance::Supporting => "supporting",
            Stance::Against => "against",
        }
    }

    /// The wording used in upstream ValueEval files.
    pub fn as_raw(self) -> &'static str {
        match self {
            Stance::Supporting => "in favor of",
            Stance::Against => "against",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_word())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Argument {
    pub id: String,
    pub conclusion: String,
    pub stance: Stance,
    pub premise: String,
}

/// Binary B×C matrix of value labels with the argument id of each row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    row_ids: Vec<String>,
    rows: Vec<Vec<u8>>,
    num_labels: usize,
}

impl LabelMatrix {
    pub fn new(row_ids: Vec<String>, rows: Vec<Vec<u8>>, num_labels: usize) -> Result<Self> {
        if row_ids.len() != rows.len() {
            return Err(Error::contract(format!(
                "{} row ids for {} label rows",
                row_ids.len(),
                rows.len()
            )));
        }
        for (id, row) in row_ids.iter().zip(&rows) {
            if row.len() != num_labels {
                return Err(Error::value(
                    Some(id),
                    format!("expected {num_labels} labels, found {}", row.len()),
                ));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::value(Some(id), "label entries must be 0 or 1"));
            }
        }
        Ok(LabelMatrix {
            row_ids,
            rows,
            num_labels,
        })
    }

    /// Builds a matrix with synthetic ids `r0`, `r1`, ... for tests and fixtures.
    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let num_labels = rows.first().map_or(0, Vec::len);
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        Self::new(ids, rows, num_labels)
    }

    pub fn zeros(row_ids: Vec<String>, num_labels: usize) -> Self {
        let rows = vec![vec![0; num_labels]; row_ids.len()];
        LabelMatrix {
            row_ids,
            rows,
            num_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.rows[i]
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.rows[row][col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.rows[row][col] = u8::from(value);
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> LabelMatrix {
        LabelMatrix {
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            num_labels: self.num_labels,
        }
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = self.rows.iter().flatten().map(|&v| f32::from(v)).collect();
        Ok(Tensor::from_vec(flat, (self.rows.len(), self.num_labels), device)?.to_dtype(dtype)?)
    }

    /// Number of positive rows per label column.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels];
        for row in &self.rows {
            for (c, &v) in counts.iter_mut().zip(row) {
                *c += usize::from(v);
            }
        }
        counts
    }
}

/// Arguments aligned one-to-one with their gold label rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    arguments: Vec<Argument>,
    labels: LabelMatrix,
}

impl Dataset {
    pub fn new(arguments: Vec<Argument>, labels: LabelMatrix) -> Result<Self> {
        if arguments.len() != labels.len() {
            return Err(Error::Integrity(format!(
                "{} arguments but {} label rows",
                arguments.len(),
                labels.len()
            )));
        }
        for (a, id) in arguments.iter().zip(labels.row_ids()) {
            if &a.id != id {
                return Err(Error::Integrity(format!(
                    "argument `{}` aligned with label row `{id}`",
                    a.id
                )));
            }
        }
        let mut seen = HashSet::new();
        for a in &arguments {
            if a.id.is_empty() {
                return Err(Error::value(None, "empty argument id"));
            }
            if !seen.insert(a.id.as_str()) {
                return Err(Error::value(Some(&a.id), "duplicate argument id"));
            }
        }
        Ok(Dataset { arguments, labels })
    }

    pub fn len(&self) -> usize {
        self.arguments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arguments.is_empty()
    }

    pub fn arguments(&self) -> &[Argument] {
        &self.arguments
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.arguments.iter().map(|a| a.id.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Argument, &[u8])> {
        self.arguments.iter().zip(self.labels.rows().iter().map(Vec::as_slice))
    }

    /// Sub-dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            arguments: indices.iter().map(|&i| self.arguments[i].clone()).collect(),
            labels: self.labels.select(indices),
        }
    }
}

/// How the three argument fields are turned into one model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "lowercase")]
pub enum InputStyle {
    Concat { separator: String },
    Described,
}

/// Separator placed between fields by the `concat` style unless configured otherwise.
pub const DEFAULT_SEPARATOR: &str = " </s> ";

impl Default for InputStyle {
    fn default() -> Self {
        InputStyle::Concat {
            separator: DEFAULT_SEPARATOR.to_owned(),
        }
    }
}

pub fn render_input(argument: &Argument, style: &InputStyle) -> String {
    match style {
        InputStyle::Concat { separator } => format!(
            "{}{separator}{}{separator}{}",
            argument.premise,
            argument.conclusion,
            argument.stance.as_word()
        ),
        InputStyle::Described => format!(
            "The premise \u{2018}{}\u{2019} is {} the conclusion \u{2018}{}\u{2019}.",
            argument.premise,
            argument.stance.as_word(),
            argument.conclusion
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entail,
    Contradict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// One premise/conclusion pair per argument; supporting stances entail.
pub fn build_nli(arguments: &[Argument]) -> Vec<NliPair> {
    arguments
        .iter()
        .map(|a| NliPair {
            premise: a.premise.clone(),
            hypothesis: a.conclusion.clone(),
            label: match a.stance {
                Stance::Supporting => NliLabel::Entail,
                Stance::Against => NliLabel::Contradict,
            },
        })
        .collect()
}
