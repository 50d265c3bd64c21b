//! Training objectives: multi-label binary cross-entropy and the
//! label-overlap-weighted contrastive loss over a mini-batch.
//!
//! Both losses operate on candle tensors so they take part in autograd; the
//! dtype follows the input (f32 for training, f64 for gradient checks).

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::LabelMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Divisor applied to similarities inside the contrastive softmax.
    pub temperature: f64,
    /// Guards the weight normaliser against all-zero label rows.
    pub epsilon: f64,
    /// Mixing coefficient: `(1 - w) * bce + w * cl`.
    pub cl_weight: f64,
    /// Drop the `j = i` term from both contrastive sums.
    pub exclude_self: bool,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.05,
            epsilon: 1e-8,
            cl_weight: 0.1,
            exclude_self: true,
            similarity: Similarity::Cosine,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("loss.{field}"),
                message: message.into(),
            })
        };
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature", "must be positive");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.cl_weight) {
            return bad("cl_weight", "must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Mean over the batch of the summed per-label sigmoid cross-entropy.
///
/// Uses `max(x, 0) - x*y + log(1 + exp(-|x|))`, which never forms `sigmoid(x)`
/// and stays finite for saturated logits. `targets` may hold soft labels.
pub fn bce_multilabel(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() || logits.rank() != 2 {
        return Err(Error::contract(format!(
            "bce shapes disagree: logits {:?}, targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    let batch = logits.dim(0)?;
    if batch == 0 {
        return Err(Error::contract("bce on an empty batch"));
    }
    let targets = targets.to_dtype(logits.dtype())?;
    let softplus_neg_abs = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_entry = ((logits.relu()? - (logits * &targets)?)? + softplus_neg_abs)?;
    Ok((per_entry.sum_all()? / batch as f64)?)
}

/// Label-overlap weights `w_ij = <y_i, y_j> / (sum_k <y_i, y_k> + eps)`.
///
/// With `exclude_self` the `k = i` term leaves the normaliser and `w_ii = 0`.
/// All-zero label rows produce all-zero weight rows.
pub fn cl_weights(labels: &LabelMatrix, epsilon: f64, exclude_self: bool) -> Vec<Vec<f64>> {
    let rows = labels.rows();
    let b = rows.len();
    let dot = |a: &[u8], c: &[u8]| -> f64 { a.iter().zip(c).map(|(x, y)| f64::from(x * y)).sum() };
    let mut weights = vec![vec![0.0; b]; b];
    for i in 0..b {
        let overlaps: Vec<f64> = (0..b)
            .map(|j| {
                if exclude_self && i == j {
                    0.0
                } else {
                    dot(&rows[i], &rows[j])
                }
            })
            .collect();
        let norm: f64 = overlaps.iter().sum::<f64>() + epsilon;
        for (w, o) in weights[i].iter_mut().zip(&overlaps) {
            *w = o / norm;
        }
    }
    weights
}

/// Result of [`cl_loss`]: the scalar loss and how many anchors contributed.
#[derive(Debug, Clone)]
pub struct ClLoss {
    pub loss: Tensor,
    pub active_anchors: usize,
}

impl ClLoss {
    /// True when no anchor in the batch shares a label with any other row.
    pub fn no_positives(&self) -> bool {
        self.active_anchors == 0
    }
}

/// Pairwise similarity matrix under the configured similarity.
pub fn similarity_matrix(embeddings: &Tensor, similarity: Similarity) -> Result<Tensor> {
    let x = match similarity {
        Similarity::Dot => embeddings.clone(),
        Similarity::Cosine => {
            let norm = (embeddings.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
            embeddings.broadcast_div(&norm)?
        }
    };
    Ok(x.matmul(&x.t()?)?)
}

/// Weighted contrastive loss averaged over anchors whose weight row is nonzero.
///
/// For anchor `i`: `-log( sum_j w_ij e^{s_ij/t} / sum_j e^{s_ij/t} )`, both sums
/// over the same index set. The softmax is shifted by the per-row maximum.
pub fn cl_loss(embeddings: &Tensor, labels: &LabelMatrix, config: &LossConfig) -> Result<ClLoss> {
    let (b, _d) = embeddings.dims2()?;
    if b < 2 {
        return Err(Error::contract(format!("contrastive loss needs B >= 2, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::contract(format!(
            "{b} embeddings but {} label rows",
            labels.len()
        )));
    }
    let dtype = embeddings.dtype();
    let device = embeddings.device();

    let weights = cl_weights(labels, config.epsilon, config.exclude_self);
    let active: Vec<bool> = weights.iter().map(|r| r.iter().any(|&w| w > 0.0)).collect();
    let active_anchors = active.iter().filter(|&&a| a).count();
    if active_anchors == 0 {
        return Ok(ClLoss {
            loss: Tensor::zeros((), dtype, device)?,
            active_anchors,
        });
    }

    let included = |i: usize, j: usize| !(config.exclude_self && i == j);
    let scaled = (similarity_matrix(embeddings, config.similarity)? / config.temperature)?;

    let values = scaled.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let shift: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|&(j, _)| included(i, j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift = Tensor::from_vec(shift, (b, 1), device)?.to_dtype(dtype)?;
    let exp = scaled.broadcast_sub(&shift)?.exp()?;

    let mask: Vec<f64> = (0..b)
        .flat_map(|i| (0..b).map(move |j| if included(i, j) { 1.0 } else { 0.0 }))
        .collect();
    let mask = Tensor::from_vec(mask, (b, b), device)?.to_dtype(dtype)?;
    let weight = Tensor::from_vec(weights.concat(), (b, b), device)?.to_dtype(dtype)?;
    // Inactive rows get a dummy numerator of 1 so log stays finite; they are dropped below.
    let pad: Vec<f64> = active.iter().map(|&a| if a { 0.0 } else { 1.0 }).collect();
    let pad = Tensor::from_vec(pad, b, device)?.to_dtype(dtype)?;

    let denominator = (&exp * &mask)?.sum(1)?;
    let numerator = ((&exp * &weight)?.sum(1)? + pad)?;
    let per_anchor = (denominator.log()? - numerator.log()?)?;

    let keep: Vec<u32> = (0..b as u32).filter(|&i| active[i as usize]).collect();
    let keep = Tensor::new(keep.as_slice(), device)?;
    let loss = per_anchor.index_select(&keep, 0)?.mean_all()?;
    Ok(ClLoss { loss, active_anchors })
}

/// `(1 - w) * bce + w * cl`.
pub fn combined_loss(bce: f64, cl: f64, cl_weight: f64) -> f64 {
    (1.0 - cl_weight) * bce + cl_weight * cl
}

/// Tensor form of [`combined_loss`] used inside the training graph.
pub fn combine_tensors(bce: &Tensor, cl: &Tensor, cl_weight: f64) -> Result<Tensor> {
    Ok((bce.affine(1.0 - cl_weight, 0.0)? + cl.affine(cl_weight, 0.0)?)?)
}
