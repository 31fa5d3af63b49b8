//! Frozen-embedding evaluation over a loaded cohort: class and biomarker
//! probes, cross-modal retrieval and survival probing.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::cohort::LoadedSample;
use crate::error::{Error, Result};
use crate::omics::ModalityId;
use crate::probes::{cross_validate_cox, cross_validate_logistic, retrieval_recall_at_k, ProbeRecord};
use crate::siglip::{bank_b, bank_w};
use crate::tensor::Tensor;
use crate::train::CohortEmbeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query: ModalityId,
    pub gallery: ModalityId,
    pub k: usize,
    pub n: usize,
    pub recall: f64,
    /// `k / n`, the expected recall of a random ranking.
    pub chance: f64,
}

/// Maps modality-`from` embeddings into the space the loss shares with
/// modality `to`: `x W_{from,to}^T + b_{from,to}`, unit-normalized.
pub fn pair_space(bank: &ParamSet<f32>, rows: &[Vec<f64>], from: ModalityId, to: ModalityId) -> Result<Tensor<f64>> {
    let w = bank.get(&bank_w(from, to))?;
    let b = bank.get(&bank_b(from, to))?;
    let (d, c) = (w.rows(), w.cols());
    let mut out = Vec::with_capacity(rows.len() * d);
    for x in rows {
        if x.len() != c {
            return Err(Error::dim("pair_space", format!("embedding width {} vs projection {c}", x.len())));
        }
        let y: Vec<f64> = (0..d)
            .map(|r| w.row(r).iter().zip(x).map(|(&a, &v)| a as f64 * v).sum::<f64>() + b.data()[r] as f64)
            .collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Normalization { row: out.len() / d.max(1) });
        }
        out.extend(y.iter().map(|v| v / norm));
    }
    Tensor::matrix(rows.len(), d, out)
}

/// Recall@k from modality `query` into modality `gallery` over the samples
/// in `idx` that carry both, scored in the pair's shared space.
pub fn cross_modal_retrieval(
    bank: &ParamSet<f32>,
    emb: &CohortEmbeddings,
    idx: &[usize],
    query: ModalityId,
    gallery: ModalityId,
    k: usize,
) -> Result<Option<RetrievalRecord>> {
    let both: Vec<usize> = idx
        .iter()
        .copied()
        .filter(|&i| emb.by_modality[&query][i].is_some() && emb.by_modality[&gallery][i].is_some())
        .collect();
    if both.len() < 2 {
        return Ok(None);
    }
    let (_, q) = emb.rows(query, &both);
    let (_, g) = emb.rows(gallery, &both);
    let k = k.min(both.len());
    Ok(Some(RetrievalRecord {
        query,
        gallery,
        k,
        n: both.len(),
        recall: retrieval_recall_at_k(
            &pair_space(bank, &q, query, gallery)?,
            &pair_space(bank, &g, gallery, query)?,
            k,
        )?,
        chance: k as f64 / both.len() as f64,
    }))
}

/// Retrieval in both directions for every ordered modality pair.
pub fn retrieval_matrix(
    bank: &ParamSet<f32>,
    emb: &CohortEmbeddings,
    idx: &[usize],
    k: usize,
) -> Result<Vec<RetrievalRecord>> {
    let mut out = Vec::new();
    for q in ModalityId::ALL {
        for g in ModalityId::ALL {
            if q != g {
                out.extend(cross_modal_retrieval(bank, emb, idx, q, g, k)?);
            }
        }
    }
    Ok(out)
}

fn modality_design(emb: &CohortEmbeddings, m: ModalityId, n: usize) -> Result<(Vec<usize>, Tensor<f64>)> {
    let all: Vec<usize> = (0..n).collect();
    let (idx, rows) = emb.rows(m, &all);
    if idx.is_empty() {
        return Err(Error::Evaluation(format!("no sample carries {m}")));
    }
    Ok((idx, Tensor::from_rows(&rows)?))
}

/// Cross-validated logistic probes for the class label and the biomarker,
/// using the embeddings of modality `m`.
pub fn label_probes(
    emb: &CohortEmbeddings,
    samples: &[LoadedSample],
    m: ModalityId,
    folds: usize,
    lambda: f64,
    seed: u64,
) -> Result<Vec<ProbeRecord>> {
    let (idx, x) = modality_design(emb, m, samples.len())?;
    let class: Vec<usize> = idx.iter().map(|&i| samples[i].class_label).collect();
    let marker: Vec<usize> = idx.iter().map(|&i| samples[i].biomarker as usize).collect();
    let mut out = cross_validate_logistic("class", &x, &class, folds, lambda, seed)?;
    out.extend(cross_validate_logistic("biomarker", &x, &marker, folds, lambda, seed)?);
    Ok(out)
}

/// Cross-validated Cox probe on the embeddings of modality `m`.
pub fn survival_probe(
    emb: &CohortEmbeddings,
    samples: &[LoadedSample],
    m: ModalityId,
    folds: usize,
    ridge: f64,
    seed: u64,
) -> Result<Vec<ProbeRecord>> {
    let (idx, x) = modality_design(emb, m, samples.len())?;
    let times: Vec<f64> = idx.iter().map(|&i| samples[i].survival.time).collect();
    let events: Vec<bool> = idx.iter().map(|&i| samples[i].survival.event).collect();
    cross_validate_cox("survival", &x, &times, &events, folds, ridge, seed)
}
