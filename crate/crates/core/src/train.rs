//! Training: batch assembly, joint forward/backward through every encoder and
//! the pairwise loss, AdamW updates, checkpoints and per-step metrics.
//!
//! Each slide runs on its own tape, as does each omics encoder. The loss tape
//! sees their outputs as leaves; its feature gradients are then pushed back
//! through the per-sample tapes with [`Tape::backward_from`]. Per-sample work
//! may run on several threads, but gradients are always reduced in sample
//! order, so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape};
use crate::cohort::LoadedSample;
use crate::container::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::frope::{aggregate_slides, init_aggregator_params, mean_pool_patches, AggregatorConfig, SlideInput};
use crate::omics::{encode_modality, init_encoder_params, EncoderConfig, ModalityId, RnaStub, NUM_MODALITIES};
use crate::rng::{streams, Stream};
use crate::siglip::{init_bank, siglip_loss, AvailabilityRow};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: usize,
    /// `None` trains on every training sample each step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only the final state.
    pub checkpoint_every: usize,
    /// Trailing cohort samples kept out of training for evaluation.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            steps: 200,
            batch_size: None,
            seed: 42,
            checkpoint_every: 100,
            holdout: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("eps must be > 0; weight decay and clip must be >= 0".into()));
        }
        if matches!(self.batch_size, Some(b) if b < 2) {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Adam first and second moments, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        let mut m = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self { m: m.clone(), v: m }
    }
}

/// Whether decoupled weight decay applies: matrices only, excluding the
/// learned CLS and register tokens.
pub fn decays(name: &str, tensor: &Tensor<impl Real>) -> bool {
    tensor.ndim() == 2 && !name.ends_with("_cls") && !name.ends_with("_registers")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Norm of the raw gradient, before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// One AdamW update at 1-based `step`. Gradients absent from `grads` count as
/// zero. A non-finite gradient leaves parameters and moments untouched.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    moments: &mut Moments<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<UpdateStats> {
    if step == 0 {
        return Err(Error::Contract("optimizer steps are 1-based".into()));
    }
    let mut sq = 0.0f64;
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim("adamw_step", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        for &x in g.data() {
            let x = x.to_f64_lossless();
            sq += x * x;
        }
    }
    if !sq.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let grad_norm = sq.sqrt();
    let clip_scale = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip { cfg.grad_clip / grad_norm } else { 1.0 };
    let [b1, b2] = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let (m, v) = (
            moments.m.get_mut(&name).ok_or_else(|| Error::Contract(format!("no first moment for `{name}`")))?,
            moments.v.get_mut(&name).ok_or_else(|| Error::Contract(format!("no second moment for `{name}`")))?,
        );
        let p = params.get_mut(&name).expect("name taken from params");
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::dim("adamw_step", format!("{name}: moment shapes differ from the parameter")));
        }
        let wd = if decays(&name, p) { cfg.weight_decay } else { 0.0 };
        let g = grads.get(&name);
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].to_f64_lossless()) * clip_scale;
            let mi = b1 * md[i].to_f64_lossless() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].to_f64_lossless() + (1.0 - b2) * gi * gi;
            let theta = pd[i].to_f64_lossless();
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + wd * theta;
            md[i] = T::lit(mi);
            vd[i] = T::lit(vi);
            pd[i] = T::lit(theta - cfg.lr * update);
        }
    }
    Ok(UpdateStats { grad_norm, clip_scale })
}

/// Everything trained, plus the frozen RNA stub.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub aggregator: AggregatorConfig,
    pub encoder: EncoderConfig,
    /// Aggregator (`agg_*`), encoder (`enc_*`) and bank (`bank_*`) tensors.
    pub params: ParamSet<f32>,
    pub rna_stub: RnaStub,
    pub moments: Moments<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl ModelState {
    pub fn init(aggregator: &AggregatorConfig, encoder: &EncoderConfig, raw_rna_dim: usize, seed: u64) -> Result<Self> {
        let aggregator = aggregator.resolved()?;
        encoder.validate()?;
        if aggregator.output_dim != encoder.output_dim {
            return Err(Error::Config(format!(
                "aggregator output {} differs from encoder output {}",
                aggregator.output_dim, encoder.output_dim
            )));
        }
        let mut rng = Stream::new(seed, streams::MODEL_INIT);
        let mut params = init_aggregator_params(&aggregator, &mut rng)?;
        for m in ModalityId::OMICS {
            params.extend(init_encoder_params(encoder, m, &mut rng)?);
        }
        params.extend(init_bank(encoder.output_dim, &mut rng));
        let rna_stub = RnaStub::new(seed, raw_rna_dim, encoder.rna_dim);
        Ok(Self {
            moments: Moments::zeros_like(&params),
            aggregator,
            encoder: encoder.clone(),
            params,
            rna_stub,
            step: 0,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim
    }
}

/// A training-ready sample: slide, encoder inputs (RNA already passed
/// through the frozen stub) and availability.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub slide: Option<SlideInput<f32>>,
    pub omics: BTreeMap<ModalityId, Tensor<f32>>,
    pub available: AvailabilityRow,
}

pub fn prepare_samples(state: &ModelState, samples: &[LoadedSample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let mut omics = BTreeMap::new();
            for (&m, x) in &s.omics {
                let x = if m == ModalityId::Rna { state.rna_stub.embed(x)? } else { x.clone() };
                omics.insert(m, x);
            }
            Ok(PreparedSample { slide: s.slide.clone(), omics, available: s.available })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total_loss: f64,
    pub pair_losses: BTreeMap<String, f64>,
    /// Absent on the closing forward-only record.
    pub grad_norm: Option<f64>,
    pub wall_ms: f64,
    pub skipped: bool,
}

struct StepResult {
    total: f64,
    pair_losses: BTreeMap<String, f64>,
    grads: Option<BTreeMap<String, Tensor<f32>>>,
}

fn add_into(acc: &mut BTreeMap<String, Tensor<f32>>, grads: BTreeMap<String, Tensor<f32>>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Loss (and optionally parameter gradients) over the samples `batch`.
fn forward_backward(
    state: &ModelState,
    data: &[PreparedSample],
    batch: &[usize],
    with_grads: bool,
) -> Result<StepResult> {
    let params = &state.params;
    let c = state.embedding_dim();
    let n = batch.len();
    let available: Vec<AvailabilityRow> = batch.iter().map(|&i| data[i].available).collect();

    let slide_rows: Vec<usize> = (0..n).filter(|&r| data[batch[r]].slide.is_some()).collect();
    let slide_tapes = slide_rows
        .par_iter()
        .map(|&r| {
            let slide = data[batch[r]].slide.as_ref().expect("filtered on presence");
            let mut tape = Tape::new();
            let out = aggregate_slides(&mut tape, params, &state.aggregator, std::slice::from_ref(slide))?;
            Ok((tape, out.embedding))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut enc_tapes = Vec::new();
    for m in ModalityId::OMICS {
        let rows: Vec<usize> = (0..n).filter(|&r| available[r][m.code()]).collect();
        if rows.is_empty() {
            continue;
        }
        let mut stacked = Vec::with_capacity(rows.len() * state.encoder.input_dim(m)?);
        for &r in &rows {
            let x = data[batch[r]]
                .omics
                .get(&m)
                .ok_or_else(|| Error::Contract(format!("sample marked with {m} but has no {m} tensor")))?;
            stacked.extend_from_slice(x.data());
        }
        let mut tape = Tape::new();
        let width = stacked.len() / rows.len();
        let x = tape.constant(Tensor::matrix(rows.len(), width, stacked)?)?;
        let out = encode_modality(&mut tape, params, &state.encoder, m, x)?;
        enc_tapes.push((m, rows, tape, out));
    }

    // Unavailable rows stay zero; the loss never reads them.
    let mut loss_tape = Tape::new();
    let mut leaves = BTreeMap::new();
    if !slide_rows.is_empty() {
        let mut full = Tensor::zeros(&[n, c]);
        for (k, &r) in slide_rows.iter().enumerate() {
            let (tape, e) = &slide_tapes[k];
            full.row_mut(r).copy_from_slice(tape.value(*e).data());
        }
        leaves.insert(ModalityId::Wsi, loss_tape.leaf(full)?);
    }
    for (m, rows, tape, out) in &enc_tapes {
        let mut full = Tensor::zeros(&[n, c]);
        let v = tape.value(*out);
        for (k, &r) in rows.iter().enumerate() {
            full.row_mut(r).copy_from_slice(v.row(k));
        }
        leaves.insert(*m, loss_tape.leaf(full)?);
    }
    let (loss, report) = siglip_loss(&mut loss_tape, params, &leaves, &available)?;
    let pair_losses = report.pairs.iter().filter_map(|p| p.pair_loss.map(|l| (p.label(), l))).collect();
    if !with_grads {
        return Ok(StepResult { total: report.total, pair_losses, grads: None });
    }

    let loss_grads = loss_tape.backward(loss)?;
    let mut acc = loss_grads.params(&loss_tape);
    let feature_grad = |m: ModalityId| loss_grads.get(leaves[&m]);

    if !slide_rows.is_empty() {
        let g = feature_grad(ModalityId::Wsi);
        let per_slide = slide_rows
            .par_iter()
            .zip(slide_tapes.par_iter())
            .map(|(&r, (tape, e))| {
                let seed = Tensor::matrix(1, c, g.row(r).to_vec())?;
                Ok(tape.backward_from(*e, seed)?.params(tape))
            })
            .collect::<Result<Vec<_>>>()?;
        for grads in per_slide {
            add_into(&mut acc, grads);
        }
    }
    for (m, rows, tape, out) in &enc_tapes {
        let seed = feature_grad(*m).gather_rows(rows);
        add_into(&mut acc, tape.backward_from(*out, seed)?.params(tape));
    }
    Ok(StepResult { total: report.total, pair_losses, grads: Some(acc) })
}

/// Indices seen by the update at 0-based `step`.
pub fn batch_indices(n_train: usize, cfg: &TrainConfig, step: u64) -> Vec<usize> {
    match cfg.batch_size {
        Some(b) if b < n_train => {
            let mut rng = Stream::new(cfg.seed, streams::BATCHES ^ (step << 44));
            let mut idx: Vec<usize> = (0..n_train).collect();
            rng.shuffle(&mut idx);
            let mut picked = idx[..b].to_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n_train).collect(),
    }
}

/// Total loss and per-pair losses on the given samples, forward only.
pub fn evaluate_loss(
    state: &ModelState,
    data: &[PreparedSample],
    batch: &[usize],
) -> Result<(f64, BTreeMap<String, f64>)> {
    let r = forward_backward(state, data, batch, false)?;
    Ok((r.total, r.pair_losses))
}

/// Where a training run writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Appended one JSON line per step.
    pub metrics: Option<PathBuf>,
    /// Parent directory for `step_XXXXXX` checkpoints.
    pub checkpoints: Option<PathBuf>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}")
}

/// Trains `state` on the first `data.len() - cfg.holdout` samples until
/// `cfg.steps` updates are complete, then records a closing forward-only
/// loss. A resumed state continues from its own step counter.
pub fn train_loop(
    state: &mut ModelState,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    outputs: &RunOutputs,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let n_train = data.len().saturating_sub(cfg.holdout);
    if n_train < 2 {
        return Err(Error::Config(format!(
            "{} samples with {} held out leaves fewer than two for training",
            data.len(),
            cfg.holdout
        )));
    }
    let mut log = Vec::new();
    let emit = |m: &StepMetrics, log: &mut Vec<StepMetrics>| -> Result<()> {
        if let Some(path) = &outputs.metrics {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(m).map_err(|e| Error::Json { path: path.clone(), source: e })?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        log.push(m.clone());
        Ok(())
    };
    while (state.step as usize) < cfg.steps {
        let started = Instant::now();
        let step = state.step;
        let batch = batch_indices(n_train, cfg, step);
        let r = forward_backward(state, data, &batch, true)?;
        let grads = r.grads.expect("requested gradients");
        let (grad_norm, skipped) = match adamw_step(&mut state.params, &grads, &mut state.moments, cfg, step + 1) {
            Ok(stats) => (Some(stats.grad_norm), false),
            Err(Error::NonFinite(_)) => (None, true),
            Err(e) => return Err(e),
        };
        state.step += 1;
        emit(
            &StepMetrics {
                step,
                total_loss: r.total,
                pair_losses: r.pair_losses,
                grad_norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                skipped,
            },
            &mut log,
        )?;
        if let Some(dir) = &outputs.checkpoints {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every as u64) {
                save_checkpoint(&dir.join(checkpoint_name(state.step)), state, cfg)?;
            }
        }
    }
    let started = Instant::now();
    let (total, pair_losses) = evaluate_loss(state, data, &batch_indices(n_train, cfg, state.step))?;
    emit(
        &StepMetrics {
            step: state.step,
            total_loss: total,
            pair_losses,
            grad_norm: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            skipped: false,
        },
        &mut log,
    )?;
    if let Some(dir) = &outputs.checkpoints {
        save_checkpoint(&dir.join(checkpoint_name(state.step)), state, cfg)?;
    }
    Ok(log)
}

/// Per-sample embeddings, `None` where the modality is unavailable.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortEmbeddings {
    pub by_modality: BTreeMap<ModalityId, Vec<Option<Vec<f32>>>>,
}

impl CohortEmbeddings {
    /// Rows (as f64) of the samples in `idx` that have modality `m`, with
    /// the sample indices kept.
    pub fn rows(&self, m: ModalityId, idx: &[usize]) -> (Vec<usize>, Vec<Vec<f64>>) {
        let col = &self.by_modality[&m];
        idx.iter().filter_map(|&i| col[i].as_ref().map(|v| (i, v.iter().map(|&x| x as f64).collect()))).unzip()
    }
}

/// Embeds every sample with the current model. With `mean_pool_slides`, the
/// slide column holds mean-pooled patch features instead.
pub fn embed_samples(state: &ModelState, data: &[PreparedSample], mean_pool_slides: bool) -> Result<CohortEmbeddings> {
    let mut by_modality = BTreeMap::new();
    let slides = data
        .par_iter()
        .map(|s| match &s.slide {
            None => Ok(None),
            Some(slide) if mean_pool_slides => Ok(Some(mean_pool_patches(&slide.patch_features)?.into_data())),
            Some(slide) => {
                Ok(Some(crate::frope::aggregate_slide(slide, &state.params, &state.aggregator)?.into_data()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    by_modality.insert(ModalityId::Wsi, slides);
    for m in ModalityId::OMICS {
        let col = data
            .iter()
            .map(|s| match s.omics.get(&m) {
                None => Ok(None),
                Some(x) => Ok(Some(crate::omics::encode(&state.params, &state.encoder, m, x)?.into_data())),
            })
            .collect::<Result<Vec<_>>>()?;
        by_modality.insert(m, col);
    }
    debug_assert_eq!(by_modality.len(), NUM_MODALITIES);
    Ok(CohortEmbeddings { by_modality })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    step: u64,
    aggregator: AggregatorConfig,
    encoder: EncoderConfig,
    train: TrainConfig,
    params: Vec<String>,
}

fn param_file(kind: &str, name: &str) -> String {
    format!("{kind}/{name}.paln")
}

/// Writes parameters, moments, the frozen stub and `meta.json` under `dir`.
pub fn save_checkpoint(dir: &Path, state: &ModelState, cfg: &TrainConfig) -> Result<()> {
    for (name, t) in state.params.iter() {
        write_tensor(&dir.join(param_file("params", name)), t)?;
        write_tensor(&dir.join(param_file("adam_m", name)), state.moments.m.get(name)?)?;
        write_tensor(&dir.join(param_file("adam_v", name)), state.moments.v.get(name)?)?;
    }
    write_tensor(&dir.join("frozen/rna_stub.paln"), &state.rna_stub.weight)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        step: state.step,
        aggregator: state.aggregator.clone(),
        encoder: state.encoder.clone(),
        train: cfg.clone(),
        params: state.params.names().cloned().collect(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Restores a state written by [`save_checkpoint`], with the training config
/// it was saved under.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, TrainConfig)> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { path: dir.join("meta.json"), version: meta.format_version as u8 });
    }
    let mut params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for name in &meta.params {
        params.insert(name.clone(), read_tensor(&dir.join(param_file("params", name)))?);
        m.insert(name.clone(), read_tensor(&dir.join(param_file("adam_m", name)))?);
        v.insert(name.clone(), read_tensor(&dir.join(param_file("adam_v", name)))?);
    }
    let rna_stub = RnaStub { weight: read_tensor(&dir.join("frozen/rna_stub.paln"))? };
    Ok((
        ModelState {
            aggregator: meta.aggregator.resolved()?,
            encoder: meta.encoder,
            params,
            rna_stub,
            moments: Moments { m, v },
            step: meta.step,
        },
        meta.train,
    ))
}
