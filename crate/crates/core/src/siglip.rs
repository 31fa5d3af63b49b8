//! Multimodal sigmoid pairwise alignment loss.
//!
//! For every unordered modality pair `i < j`, each sample's modality-`i`
//! feature is projected into modality `j`'s space (and vice versa) by a
//! dedicated affine map followed by L2 normalization. The calibrated logit
//! between sample `n` (modality `i`) and sample `k` (modality `j`) is
//! `exp(s_ij) * <h_{n,i->j}, h_{k,j->i}> + beta_ij`, and every entry of the
//! resulting `N x N` matrix is an independent binary problem: positive iff
//! `n == k` and both modalities are present for that sample.
//!
//! Entries touching a missing modality are excluded outright, so placeholder
//! rows never reach the arithmetic. Within a pair, positives and negatives
//! are averaged separately and the two means weighted equally. The total is
//! the mean over pairs that have at least one positive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::omics::{ModalityId, NUM_MODALITIES};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// Availability row per sample, indexed by [`ModalityId::code`].
pub type AvailabilityRow = [bool; NUM_MODALITIES];

/// Encoder outputs of one batch.
#[derive(Clone, Debug)]
pub struct MultimodalBatch<T> {
    /// `[N x C]` per modality; rows of unavailable samples are placeholders.
    pub features: BTreeMap<ModalityId, Tensor<T>>,
    pub available: Vec<AvailabilityRow>,
}

impl<T: Real> MultimodalBatch<T> {
    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }
}

pub fn bank_w(i: ModalityId, j: ModalityId) -> String {
    format!("bank_w_{i}_{j}")
}

pub fn bank_b(i: ModalityId, j: ModalityId) -> String {
    format!("bank_b_{i}_{j}")
}

/// Log-scale of the unordered pair; callers pass `i < j`.
pub fn bank_logscale(i: ModalityId, j: ModalityId) -> String {
    format!("bank_logscale_{i}_{j}")
}

pub fn bank_bias(i: ModalityId, j: ModalityId) -> String {
    format!("bank_bias_{i}_{j}")
}

/// All unordered pairs `i < j` among `modalities`, in code order.
pub fn unordered_pairs(modalities: &[ModalityId]) -> Vec<(ModalityId, ModalityId)> {
    let mut ms = modalities.to_vec();
    ms.sort();
    ms.dedup();
    let mut out = Vec::new();
    for a in 0..ms.len() {
        for b in a + 1..ms.len() {
            out.push((ms[a], ms[b]));
        }
    }
    out
}

/// Projection bank for all five modalities: 20 ordered projections and 10
/// calibrations, with `alpha = 10`, `beta = -10` at start.
pub fn init_bank(dim: usize, rng: &mut Stream) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    let std = 1.0 / (dim as f64).sqrt();
    for i in ModalityId::ALL {
        for j in ModalityId::ALL {
            if i == j {
                continue;
            }
            p.insert(bank_w(i, j), normal_tensor(rng, &[dim, dim], std));
            p.insert(bank_b(i, j), Tensor::zeros(&[dim]));
        }
    }
    for (i, j) in unordered_pairs(&ModalityId::ALL) {
        p.insert(bank_logscale(i, j), Tensor::scalar(10f32.ln()));
        p.insert(bank_bias(i, j), Tensor::scalar(-10.0));
    }
    p
}

/// `l2_normalize(x W_ij^T + b_ij)` row-wise.
pub fn project_pair<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    bank: &'a ParamSet<T>,
    x: Var,
    i: ModalityId,
    j: ModalityId,
) -> Result<Var> {
    let w = tape.param(bank, &bank_w(i, j))?;
    let b = tape.param(bank, &bank_b(i, j))?;
    let y = tape.matmul_nt(x, w)?;
    let y = tape.add_row(y, b)?;
    tape.l2_normalize(y)
}

/// `exp(log_scale) * h_ij h_ji^T + bias` over every (row, row) pair.
pub fn pair_logits<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    h_ij: Var,
    h_ji: Var,
    log_scale: Var,
    bias: Var,
) -> Result<Var> {
    if tape.value(h_ij).cols() != tape.value(h_ji).cols() {
        return Err(Error::dim("pair_logits", "embedding widths differ"));
    }
    let alpha = tape.exp(log_scale)?;
    let sim = tape.matmul_nt(h_ij, h_ji)?;
    let scaled = tape.scale_by(sim, alpha)?;
    tape.shift(scaled, bias)
}

/// Binary targets and validity over the full `N x N` grid for pair `(i, j)`.
pub fn pair_targets(available: &[AvailabilityRow], i: ModalityId, j: ModalityId) -> (Vec<u8>, Vec<bool>) {
    let n = available.len();
    let (ci, cj) = (i.code(), j.code());
    let mut targets = vec![0u8; n * n];
    let mut valid = vec![false; n * n];
    for a in 0..n {
        for b in 0..n {
            let v = available[a][ci] && available[b][cj];
            valid[a * n + b] = v;
            targets[a * n + b] = u8::from(a == b && v);
        }
    }
    (targets, valid)
}

/// Diagnostics for one unordered pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairLoss {
    pub first: ModalityId,
    pub second: ModalityId,
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
    /// `None` when the pair had no valid positive and was skipped.
    pub pair_loss: Option<f64>,
    /// `[N x N]`, zero at invalid entries.
    #[serde(skip)]
    pub logits: Option<Tensor<f64>>,
    #[serde(skip)]
    pub targets: Vec<u8>,
    #[serde(skip)]
    pub validity: Vec<bool>,
}

impl PairLoss {
    pub fn label(&self) -> String {
        format!("{}-{}", self.first, self.second)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairLossReport {
    pub pairs: Vec<PairLoss>,
    pub total: f64,
}

impl PairLossReport {
    pub fn included(&self) -> impl Iterator<Item = &PairLoss> {
        self.pairs.iter().filter(|p| p.pair_loss.is_some())
    }
}

/// Records the loss on `tape` and returns its handle with the report.
///
/// `features` maps each modality in the batch to an `[N x C]` value.
pub fn siglip_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    bank: &'a ParamSet<T>,
    features: &BTreeMap<ModalityId, Var>,
    available: &[AvailabilityRow],
) -> Result<(Var, PairLossReport)> {
    let n = available.len();
    for (&m, &v) in features {
        if tape.value(v).rows() != n {
            return Err(Error::dim("siglip_loss", format!("{m} has {} rows for {n} samples", tape.value(v).rows())));
        }
    }
    let modalities: Vec<ModalityId> = features.keys().copied().collect();
    let mut pair_vars = Vec::new();
    let mut pairs = Vec::new();
    for (i, j) in unordered_pairs(&modalities) {
        let (targets, validity) = pair_targets(available, i, j);
        let rows_i: Vec<usize> = (0..n).filter(|&s| available[s][i.code()]).collect();
        let rows_j: Vec<usize> = (0..n).filter(|&s| available[s][j.code()]).collect();
        let n_pos = (0..n).filter(|&s| available[s][i.code()] && available[s][j.code()]).count();
        let n_neg = rows_i.len() * rows_j.len() - n_pos;
        let mut entry = PairLoss {
            first: i,
            second: j,
            n_pos,
            n_neg,
            pos_mean: None,
            neg_mean: None,
            pair_loss: None,
            logits: None,
            targets,
            validity,
        };
        if n_pos == 0 {
            pairs.push(entry);
            continue;
        }
        let xi = select_rows(tape, features[&i], &rows_i, n)?;
        let xj = select_rows(tape, features[&j], &rows_j, n)?;
        let h_ij = project_pair(tape, bank, xi, i, j)?;
        let h_ji = project_pair(tape, bank, xj, j, i)?;
        let s = tape.param(bank, &bank_logscale(i, j))?;
        let beta = tape.param(bank, &bank_bias(i, j))?;
        let logits = pair_logits(tape, h_ij, h_ji, s, beta)?;

        let (w_pos, w_neg) =
            if n_neg == 0 { (1.0 / n_pos as f64, 0.0) } else { (0.5 / n_pos as f64, 0.5 / n_neg as f64) };
        let cells = rows_i.len() * rows_j.len();
        let mut t = Vec::with_capacity(cells);
        let mut w = Vec::with_capacity(cells);
        for &a in &rows_i {
            for &b in &rows_j {
                let pos = a == b;
                t.push(if pos { T::one() } else { T::zero() });
                w.push(T::lit(if pos { w_pos } else { w_neg }));
            }
        }
        let lv = tape.value(logits).clone();
        let mut full = Tensor::<f64>::zeros(&[n, n]);
        let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
        for (ai, &a) in rows_i.iter().enumerate() {
            for (bi, &b) in rows_j.iter().enumerate() {
                let l = lv.at(ai, bi);
                full.data_mut()[a * n + b] = l.to_f64_lossless();
                let target = if a == b { T::one() } else { T::zero() };
                let e = crate::autodiff::bce_with_logits(l, target)?.to_f64_lossless();
                if a == b {
                    pos_sum += e;
                } else {
                    neg_sum += e;
                }
            }
        }
        let pair_var = tape.bce_sum(logits, t, w)?;
        entry.pos_mean = Some(pos_sum / n_pos as f64);
        entry.neg_mean = (n_neg > 0).then(|| neg_sum / n_neg as f64);
        entry.pair_loss = Some(tape.value(pair_var).data()[0].to_f64_lossless());
        entry.logits = Some(full);
        pair_vars.push(pair_var);
        pairs.push(entry);
    }
    if pair_vars.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let stacked = tape.concat_rows(&pair_vars)?;
    let total = tape.mean(stacked)?;
    let report = PairLossReport { pairs, total: tape.value(total).data()[0].to_f64_lossless() };
    Ok((total, report))
}

fn select_rows<T: Real>(tape: &mut Tape<'_, T>, x: Var, rows: &[usize], n: usize) -> Result<Var> {
    if rows.len() == n {
        Ok(x)
    } else {
        tape.gather_rows(x, rows)
    }
}

/// Value-only evaluation of the loss on a batch.
pub fn multimodal_siglip_loss<T: Real>(batch: &MultimodalBatch<T>, bank: &ParamSet<T>) -> Result<PairLossReport> {
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (&m, t) in &batch.features {
        vars.insert(m, tape.constant(t.clone())?);
    }
    let (_, report) = siglip_loss(&mut tape, bank, &vars, &batch.available)?;
    Ok(report)
}
