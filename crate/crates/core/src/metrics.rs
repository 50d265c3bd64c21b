//! Per-label confusion counts, F1, macro F1, accuracy and run-file scoring.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_labels, write_labels, LabelMatrix, ValueTaxonomy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    #[serde(flatten)]
    pub counts: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub run_file: Option<PathBuf>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub per_label: Vec<LabelScore>,
    pub macro_f1: f64,
    pub num_examples: usize,
    #[serde(default)]
    pub provenance: Provenance,
}

impl RunResult {
    /// Macro F1 to three decimals.
    pub fn summary(&self) -> String {
        format!("{:.3}", self.macro_f1)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

pub fn confusion_counts(pred: &LabelMatrix, gold: &LabelMatrix) -> Result<Vec<Confusion>> {
    if pred.len() != gold.len() || pred.num_labels() != gold.num_labels() {
        return Err(Error::contract(format!(
            "prediction shape {}x{} vs gold {}x{}",
            pred.len(),
            pred.num_labels(),
            gold.len(),
            gold.num_labels()
        )));
    }
    if pred.row_ids() != gold.row_ids() {
        return Err(Error::contract("prediction and gold row ids differ"));
    }
    let mut counts = vec![Confusion::default(); gold.num_labels()];
    for (p, g) in pred.rows().iter().zip(gold.rows()) {
        for ((c, &pv), &gv) in counts.iter_mut().zip(p).zip(g) {
            match (pv, gv) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// Unweighted mean of per-label F1 over every label, zero-support ones included.
pub fn macro_f1(counts: &[Confusion]) -> RunResult {
    let per_label: Vec<LabelScore> = counts
        .iter()
        .map(|c| LabelScore {
            counts: *c,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        })
        .collect();
    let macro_f1 = if per_label.is_empty() {
        0.0
    } else {
        per_label.iter().map(|s| s.f1).sum::<f64>() / per_label.len() as f64
    };
    let num_examples = counts.first().map_or(0, |c| (c.tp + c.fp + c.fn_ + c.tn) as usize);
    RunResult {
        per_label,
        macro_f1,
        num_examples,
        provenance: Provenance::default(),
    }
}

/// Convenience for `macro_f1(confusion_counts(pred, gold))`.
pub fn score(pred: &LabelMatrix, gold: &LabelMatrix) -> Result<RunResult> {
    Ok(macro_f1(&confusion_counts(pred, gold)?))
}

pub fn accuracy(pred: &[u8], gold: &[u8]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "accuracy over {} predictions and {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::contract("accuracy over zero examples"));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Writes predictions in the submission format: `Argument ID` plus one binary column per category.
pub fn write_run_file(pred: &LabelMatrix, path: impl AsRef<Path>, taxonomy: &ValueTaxonomy) -> Result<()> {
    write_labels(path, pred, taxonomy)
}

/// Scores a run file against a gold labels file, aligning rows by argument id.
pub fn score_run(
    pred_path: impl AsRef<Path>,
    gold_path: impl AsRef<Path>,
    taxonomy: &ValueTaxonomy,
) -> Result<RunResult> {
    let pred_path = pred_path.as_ref();
    let pred = load_labels(pred_path, taxonomy)?;
    let gold = load_labels(gold_path, taxonomy)?;
    if pred.len() != gold.len() {
        return Err(Error::Integrity(format!(
            "run file has {} rows, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    let position: HashMap<&str, usize> = pred
        .row_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let order = gold
        .row_ids()
        .iter()
        .map(|id| {
            position
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Integrity(format!("run file lacks argument `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let aligned = pred.select(&order);
    Ok(score(&aligned, &gold)?.with_provenance(Provenance {
        run_file: Some(pred_path.to_owned()),
        config_hash: None,
    }))
}
