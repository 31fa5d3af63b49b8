//! Self-test suites behind the `selftest` subcommand: brute-force oracle
//! comparisons, finite-difference gradient checks and structural properties
//! of the aggregator and the loss.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{grad_check_finite_diff, ParamSet, Tape};
use crate::cohort::{grow_fragments_with_sizes, label_fragments};
use crate::error::Result;
use crate::frope::{
    aggregate_slide, aggregate_slides, init_aggregator_params, AggregatorConfig, BlockKind, SlideInput, TokenLayout,
};
use crate::omics::{encode_modality, init_encoder_params, EncoderConfig, ModalityId};
use crate::probes::{concordance_index, cox_log_likelihood, fit_cox_ph, macro_auroc_ovr};
use crate::rng::Stream;
use crate::siglip::{
    bank_b, bank_bias, bank_logscale, bank_w, init_bank, multimodal_siglip_loss, siglip_loss, AvailabilityRow,
    MultimodalBatch,
};
use crate::tensor::{Real, Tensor};

pub const GRAD_CHECK_H: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult { name: name.to_string(), passed, detail, millis: t.elapsed().as_secs_f64() * 1e3 }
}

/// Aggregator parameters with the zero-initialized projections filled in
/// and gains jittered, so every path carries signal.
pub fn perturbed_aggregator_params(cfg: &AggregatorConfig, seed: u64) -> Result<ParamSet<f32>> {
    let mut rng = Stream::new(seed, 0x5eed);
    let mut p = init_aggregator_params(cfg, &mut rng)?;
    for (name, t) in p.iter_mut() {
        let amp = if name.ends_with("_wo") || name.ends_with("_w_down") {
            0.3
        } else if name.ends_with("_norm") {
            0.1
        } else {
            continue;
        };
        for v in t.data_mut() {
            *v += (amp * rng.normal()) as f32;
        }
    }
    Ok(p)
}

/// Encoder parameters with non-zero residual down-projections.
pub fn perturbed_encoder_params(cfg: &EncoderConfig, m: ModalityId, seed: u64) -> Result<ParamSet<f32>> {
    let mut rng = Stream::new(seed, 0x5eed);
    let mut p = init_encoder_params(cfg, m, &mut rng)?;
    for (name, t) in p.iter_mut() {
        if name.ends_with("_w_down") || name.ends_with("_norm") {
            for v in t.data_mut() {
                *v += (0.2 * rng.normal()) as f32;
            }
        }
    }
    Ok(p)
}

/// A slide whose fragments are grown on a small grid, separated from each
/// other, with random features.
pub fn random_slide(rng: &mut Stream, fragments: usize, patch_dim: usize, max_size: usize) -> Result<SlideInput<f32>> {
    let sizes: Vec<usize> = (0..fragments).map(|_| rng.range_inclusive(1, max_size)).collect();
    let side = 4 * (max_size as f64 * fragments as f64).sqrt().ceil() as usize + 4;
    let layout = grow_fragments_with_sizes(side, side, &sizes, rng)?;
    let labels = label_fragments(&layout.grid)?;
    let (mut coords, mut ids) = (Vec::new(), Vec::new());
    for r in 0..side {
        for c in 0..side {
            if let Some(f) = labels.labels[r * side + c] {
                coords.push([c as f64 * 256.0, r as f64 * 256.0]);
                ids.push(f);
            }
        }
    }
    let p = ids.len();
    let feats: Vec<f32> = rng.normal_vec(p * patch_dim, 1.0).into_iter().map(|v| v as f32).collect();
    Ok(SlideInput {
        patch_features: Tensor::matrix(p, patch_dim, feats)?,
        pixel_coords: coords,
        patch_size_px: 256,
        fragment_ids: ids,
    })
}

/// Direct enumeration of the pairwise sigmoid loss over every
/// `(sample, modality, sample, modality)` quadruple.
pub fn brute_force_siglip(batch: &MultimodalBatch<f64>, bank: &ParamSet<f64>) -> Result<Option<f64>> {
    let n = batch.len();
    let mods: Vec<ModalityId> = batch.features.keys().copied().collect();
    let project = |x: &[f64], i: ModalityId, j: ModalityId| -> Result<Vec<f64>> {
        let w = bank.get(&bank_w(i, j))?;
        let b = bank.get(&bank_b(i, j))?;
        let d = w.rows();
        let y: Vec<f64> = (0..d).map(|a| b.data()[a] + (0..x.len()).map(|c| w.at(a, c) * x[c]).sum::<f64>()).collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(y.iter().map(|v| v / norm).collect())
    };
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    let mut pair_losses = Vec::new();
    for (a, &i) in mods.iter().enumerate() {
        for &j in &mods[a + 1..] {
            let scale = bank.get(&bank_logscale(i, j))?.data()[0].exp();
            let bias = bank.get(&bank_bias(i, j))?.data()[0];
            let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
            for s in 0..n {
                if !batch.available[s][i.code()] {
                    continue;
                }
                let hi = project(batch.features[&i].row(s), i, j)?;
                for k in 0..n {
                    if !batch.available[k][j.code()] {
                        continue;
                    }
                    let hj = project(batch.features[&j].row(k), j, i)?;
                    let z = scale * hi.iter().zip(&hj).map(|(p, q)| p * q).sum::<f64>() + bias;
                    if s == k {
                        pos += softplus(-z);
                        np += 1;
                    } else {
                        neg += softplus(z);
                        nn += 1;
                    }
                }
            }
            if np == 0 {
                continue;
            }
            pair_losses.push(if nn == 0 { pos / np as f64 } else { 0.5 * pos / np as f64 + 0.5 * neg / nn as f64 });
        }
    }
    Ok((!pair_losses.is_empty()).then(|| pair_losses.iter().sum::<f64>() / pair_losses.len() as f64))
}

/// Random batch with `n` samples over the modalities `mods`, each sample
/// holding at least one of them.
pub fn random_batch(rng: &mut Stream, n: usize, mods: &[ModalityId], c: usize) -> MultimodalBatch<f64> {
    let mut available = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row: AvailabilityRow = [false; 5];
        while !mods.iter().any(|m| row[m.code()]) {
            for m in mods {
                row[m.code()] = rng.bernoulli(0.7);
            }
        }
        available.push(row);
    }
    let features =
        mods.iter().map(|&m| (m, Tensor::matrix(n, c, rng.normal_vec(n * c, 1.0)).expect("sized"))).collect();
    MultimodalBatch { features, available }
}

fn random_bank(rng: &mut Stream, c: usize) -> ParamSet<f64> {
    let mut bank = init_bank(c, rng).cast::<f64>();
    for (name, t) in bank.iter_mut() {
        if name.starts_with("bank_logscale") || name.starts_with("bank_bias") || name.starts_with("bank_b_") {
            for v in t.data_mut() {
                *v += 0.5 * rng.normal();
            }
        }
    }
    bank
}

pub fn loss_oracle_suite(instances: usize, seed: u64) -> SuiteResult {
    timed("loss-oracle", || {
        let mut rng = Stream::new(seed, 11);
        let (mut worst, mut compared, mut empty) = (0.0f64, 0usize, 0usize);
        while compared < instances {
            let n = rng.range_inclusive(1, 5);
            let m = rng.range_inclusive(2, 4);
            let c = rng.range_inclusive(1, 3);
            let mut mods = ModalityId::ALL.to_vec();
            rng.shuffle(&mut mods);
            mods.truncate(m);
            let batch = random_batch(&mut rng, n, &mods, c);
            let bank = random_bank(&mut rng, c);
            match (brute_force_siglip(&batch, &bank)?, multimodal_siglip_loss(&batch, &bank)) {
                (Some(expected), Ok(report)) => {
                    worst = worst.max((expected - report.total).abs());
                    compared += 1;
                }
                (None, Err(crate::Error::EmptyLoss)) => empty += 1,
                (e, r) => {
                    return Ok((false, format!("oracle {e:?} disagrees with implementation {:?}", r.map(|r| r.total))))
                }
            }
        }
        Ok((worst < 1e-10, format!("{compared} instances ({empty} without positives), max |diff| {worst:.3e}")))
    })
}

pub fn gradient_suite(seed: u64) -> SuiteResult {
    timed("gradient-checks", || {
        let mut rng = Stream::new(seed, 12);
        let mut lines = Vec::new();
        let mut ok = true;
        let mut record = |label: &str, err: f64| {
            ok &= err < GRAD_CHECK_TOL;
            lines.push(format!("{label} {err:.2e}"));
        };

        // Loss with respect to bank and features.
        let mods = [ModalityId::Wsi, ModalityId::Rna, ModalityId::Cnv];
        let batch = random_batch(&mut rng, 4, &mods, 3);
        let mut params = random_bank(&mut rng, 3);
        for (m, t) in &batch.features {
            params.insert(format!("feat_{m}"), t.clone());
        }
        let available = batch.available.clone();
        let report = grad_check_finite_diff(
            |tape, p| {
                let feats: BTreeMap<ModalityId, _> =
                    mods.iter().map(|&m| Ok((m, tape.param(p, &format!("feat_{m}"))?))).collect::<Result<_>>()?;
                Ok(siglip_loss(tape, p, &feats, &available)?.0)
            },
            &params,
            GRAD_CHECK_H,
        )?;
        record("loss", report.max_rel_error);

        // Each omics encoder.
        let enc = EncoderConfig {
            rna_dim: 5,
            snp_dim: 4,
            cnv_dim: 3,
            meth_dim: 6,
            hidden_dim: 4,
            blocks: 2,
            output_dim: 3,
            ffn_mult: 2,
        };
        for m in ModalityId::OMICS {
            let p = perturbed_encoder_params(&enc, m, seed)?.cast::<f64>();
            let width = enc.input_dim(m)?;
            let x = Tensor::matrix(3, width, rng.normal_vec(3 * width, 1.0))?;
            let r = Tensor::matrix(3, 3, rng.normal_vec(9, 1.0))?;
            let report = grad_check_finite_diff(
                |tape, p| {
                    let xv = tape.constant(x.clone())?;
                    let y = encode_modality(tape, p, &enc, m, xv)?;
                    let rv = tape.constant(r.clone())?;
                    let prod = tape.mul(y, rv)?;
                    tape.sum(prod)
                },
                &p,
                GRAD_CHECK_H,
            )?;
            record(&format!("encoder-{m}"), report.max_rel_error);
        }

        // Depth-2 aggregator on a six-patch, two-fragment slide.
        let agg = AggregatorConfig {
            patch_dim: 3,
            depth: 2,
            heads: 2,
            model_dim: 8,
            registers: 1,
            rope_base: 100.0,
            output_dim: 3,
            ffn_mult: 2,
            block_schedule: Vec::new(),
        }
        .resolved()?;
        let p = perturbed_aggregator_params(&agg, seed)?.cast::<f64>();
        let frags = [0usize, 0, 0, 1, 1, 1];
        let slide = SlideInput {
            patch_features: Tensor::matrix(6, 3, rng.normal_vec(18, 1.0))?,
            pixel_coords: (0..6)
                .map(|i| [256.0 * (i % 3) as f64 + 2048.0 * frags[i] as f64, 256.0 * (i / 3) as f64])
                .collect(),
            patch_size_px: 256,
            fragment_ids: frags.to_vec(),
        };
        let r = Tensor::matrix(1, 3, rng.normal_vec(3, 1.0))?;
        let report = grad_check_finite_diff(
            |tape, p| {
                let out = aggregate_slides(tape, p, &agg, std::slice::from_ref(&slide))?;
                let rv = tape.constant(r.clone())?;
                let prod = tape.mul(out.embedding, rv)?;
                tape.sum(prod)
            },
            &p,
            GRAD_CHECK_H,
        )?;
        record("aggregator", report.max_rel_error);
        Ok((ok, lines.join(", ")))
    })
}

fn pairwise_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

pub fn metric_oracle_suite(instances: usize, seed: u64) -> SuiteResult {
    timed("metric-oracles", || {
        let mut rng = Stream::new(seed, 13);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = rng.range_inclusive(2, 50);
            let classes = rng.range_inclusive(2, 4);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
            // Coarse scores so ties occur.
            let scores: Vec<f64> = (0..n * classes).map(|_| rng.below(6) as f64 / 5.0).collect();
            let st = Tensor::matrix(n, classes, scores.clone())?;
            let per: Vec<f64> = (0..classes)
                .filter_map(|k| {
                    let col: Vec<f64> = (0..n).map(|i| scores[i * classes + k]).collect();
                    let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
                    pairwise_auroc(&col, &pos)
                })
                .collect();
            if !per.is_empty() {
                let expected = per.iter().sum::<f64>() / per.len() as f64;
                worst = worst.max((macro_auroc_ovr(&st, &labels)?.macro_auroc - expected).abs());
            }

            let times: Vec<f64> = (0..n).map(|_| 1.0 + rng.below(10) as f64).collect();
            let events: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
            let risk: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
            let (mut conc, mut comp) = (0.0, 0usize);
            for i in 0..n {
                for j in 0..n {
                    if events[i] && times[i] < times[j] {
                        comp += 1;
                        conc += if risk[i] > risk[j] {
                            1.0
                        } else if risk[i] == risk[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            if comp > 0 {
                worst = worst.max((concordance_index(&times, &events, &risk)? - conc / comp as f64).abs());
            }
        }

        let x = Tensor::matrix(4, 1, vec![1.0, 1.0, 0.0, 0.0])?;
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        let fit = fit_cox_ph(&x, &times, &events, crate::probes::DEFAULT_COX_RIDGE)?;
        let ll = |b: f64| cox_log_likelihood(&x, &times, &events, &[b], crate::probes::DEFAULT_COX_RIDGE);
        let mut best = (0.0, f64::NEG_INFINITY);
        for step in 0..=40_000 {
            let b = step as f64 * 1e-3;
            let v = ll(b)?;
            if v > best.1 {
                best = (b, v);
            }
        }
        let cox_gap = (fit.beta[0] - best.0).abs();
        Ok((
            worst < 1e-12 && cox_gap < 1e-3 && fit.beta[0] > 0.0,
            format!("{instances} instances, max |diff| {worst:.3e}; cox beta {:.4} vs grid {:.4}", fit.beta[0], best.0),
        ))
    })
}

pub fn fragment_isolation_suite(slides: usize, seed: u64) -> SuiteResult {
    timed("fragment-isolation", || {
        let cfg = AggregatorConfig::default().resolved()?;
        let params = perturbed_aggregator_params(&cfg, seed)?;
        let mut rng = Stream::new(seed, 14);
        let mut checked = 0usize;
        for _ in 0..slides {
            let k = rng.range_inclusive(2, 4);
            let slide = random_slide(&mut rng, k, cfg.patch_dim, 12)?;
            let layout = TokenLayout::for_slide(&slide, cfg.registers, slide.num_patches())?;
            let mut tape = Tape::new();
            let out = aggregate_slides(&mut tape, &params, &cfg, std::slice::from_ref(&slide))?;
            for rec in out.attention.iter().filter(|r| r.kind == BlockKind::Rope) {
                for h in 0..rec.heads {
                    let probs = rec.probs(&tape, h);
                    for (qi, &qt) in rec.query_tokens.iter().enumerate() {
                        for kt in 0..layout.len() {
                            if layout.token_fragment[qt] != layout.token_fragment[kt] {
                                if probs.at(qi, kt) != 0.0 {
                                    return Ok((false, format!("weight {} across fragments", probs.at(qi, kt))));
                                }
                                checked += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok((checked > 0, format!("{slides} slides, {checked} cross-fragment weights all exactly 0")))
    })
}

fn rel_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).to_f64_lossless().max(0.0) / a.norm().to_f64_lossless().max(1e-30)
}

pub fn geometry_suite(trials: usize, seed: u64) -> SuiteResult {
    timed("geometry-invariance", || {
        let cfg = AggregatorConfig::default().resolved()?;
        let params = perturbed_aggregator_params(&cfg, seed)?;
        let mut rng = Stream::new(seed, 15);
        let (mut worst_shift, mut worst_perm) = (0.0f64, 0.0f64);
        for _ in 0..trials {
            let k = rng.range_inclusive(1, 3);
            let slide = random_slide(&mut rng, k, cfg.patch_dim, 15)?;
            let base = aggregate_slide(&slide, &params, &cfg)?;

            let offsets: Vec<[f64; 2]> =
                (0..k).map(|_| [256.0 * rng.below(100) as f64, 256.0 * rng.below(100) as f64]).collect();
            let mut moved = slide.clone();
            for (c, &f) in moved.pixel_coords.iter_mut().zip(&slide.fragment_ids) {
                c[0] += offsets[f][0];
                c[1] += offsets[f][1];
            }
            let shifted = aggregate_slide(&moved, &params, &cfg)?;
            worst_shift = worst_shift.max(rel_diff(&base, &shifted));

            let mut order: Vec<usize> = (0..slide.num_patches()).collect();
            rng.shuffle(&mut order);
            let permuted = SlideInput {
                patch_features: slide.patch_features.gather_rows(&order),
                pixel_coords: order.iter().map(|&i| slide.pixel_coords[i]).collect(),
                patch_size_px: slide.patch_size_px,
                fragment_ids: order.iter().map(|&i| slide.fragment_ids[i]).collect(),
            };
            let out = aggregate_slide(&permuted, &params, &cfg)?;
            worst_perm = worst_perm.max(base.max_abs_diff(&out) as f64);
        }
        Ok((
            worst_shift < 1e-4 && worst_perm < 1e-5,
            format!("{trials} trials; translation rel {worst_shift:.2e}, permutation abs {worst_perm:.2e}"),
        ))
    })
}

pub fn opacity_suite(trials: usize, seed: u64) -> SuiteResult {
    timed("missing-modality-opacity", || {
        let mut rng = Stream::new(seed, 16);
        for t in 0..trials {
            let c = rng.range_inclusive(1, 4);
            let n = rng.range_inclusive(2, 6);
            let batch = random_batch(&mut rng, n, &ModalityId::ALL, c);
            let bank = random_bank(&mut rng, c);
            let base = match multimodal_siglip_loss(&batch, &bank) {
                Ok(r) => r.total,
                Err(crate::Error::EmptyLoss) => continue,
                Err(e) => return Err(e),
            };
            let mut noisy = batch.clone();
            for (m, feats) in noisy.features.iter_mut() {
                for s in 0..n {
                    if !batch.available[s][m.code()] {
                        let scale = 10f64.powi(rng.range_inclusive(0, 6) as i32);
                        for v in feats.row_mut(s) {
                            *v = rng.normal() * scale;
                        }
                    }
                }
            }
            let again = multimodal_siglip_loss(&noisy, &bank)?.total;
            if again.to_bits() != base.to_bits() {
                return Ok((false, format!("trial {t}: {base} became {again}")));
            }
        }
        Ok((true, format!("{trials} trials bitwise unchanged")))
    })
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        loss_oracle_suite(100, seed),
        gradient_suite(seed),
        metric_oracle_suite(200, seed),
        fragment_isolation_suite(50, seed),
        geometry_suite(50, seed),
        opacity_suite(100, seed),
    ]
}
