//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so criteria execute one after another
//! and the timings are honest. Expected values come from oracles written
//! here, independently of the library code paths they check.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mmalign::cohort::{generate_cohort, load_cohort, CohortConfig, LoadedSample};
use mmalign::eval::cross_modal_retrieval;
use mmalign::frope::{aggregate_slide, aggregate_slides, AggregatorConfig, BlockKind, SlideInput, TokenLayout};
use mmalign::omics::{encode_modality, EncoderConfig, ModalityId};
use mmalign::probes::{
    concordance_index, cox_log_likelihood, cross_validate_logistic, fit_cox_ph, macro_auroc_ovr, mean_value,
};
use mmalign::rng::Stream;
use mmalign::siglip::{
    bank_b, bank_w, init_bank, multimodal_siglip_loss, siglip_loss, AvailabilityRow, MultimodalBatch,
};
use mmalign::train::{
    embed_samples, prepare_samples, train_loop, CohortEmbeddings, ModelState, RunOutputs, TrainConfig,
};
use mmalign::verify::{perturbed_aggregator_params, perturbed_encoder_params, random_slide};
use mmalign::{ParamSet, Tape, Tensor, Var};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

// ---------------------------------------------------------------- oracles

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn affine_unit(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let y: Vec<f64> =
        (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b.data()[r]).collect();
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    y.into_iter().map(|v| v / n).collect()
}

/// Sums the per-entry losses over every `(n, i, k, j)` with `i < j`.
fn enumerate_loss(
    features: &BTreeMap<ModalityId, Tensor<f64>>,
    avail: &[AvailabilityRow],
    bank: &ParamSet<f64>,
) -> Option<f64> {
    let n = avail.len();
    let mods: Vec<ModalityId> = features.keys().copied().collect();
    let mut per_pair = Vec::new();
    for &i in &mods {
        for &j in &mods {
            if i.code() >= j.code() {
                continue;
            }
            let w_ij = bank.get(&format!("bank_w_{i}_{j}")).unwrap();
            let b_ij = bank.get(&format!("bank_b_{i}_{j}")).unwrap();
            let w_ji = bank.get(&format!("bank_w_{j}_{i}")).unwrap();
            let b_ji = bank.get(&format!("bank_b_{j}_{i}")).unwrap();
            let alpha = bank.get(&format!("bank_logscale_{i}_{j}")).unwrap().data()[0].exp();
            let beta = bank.get(&format!("bank_bias_{i}_{j}")).unwrap().data()[0];
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for a in 0..n {
                for k in 0..n {
                    if !(avail[a][i.code()] && avail[k][j.code()]) {
                        continue;
                    }
                    let u = affine_unit(w_ij, b_ij, features[&i].row(a));
                    let v = affine_unit(w_ji, b_ji, features[&j].row(k));
                    let z = alpha * u.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>() + beta;
                    if a == k {
                        pos.push(softplus(-z));
                    } else {
                        neg.push(softplus(z));
                    }
                }
            }
            if pos.is_empty() {
                continue;
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            per_pair.push(if neg.is_empty() { mean(&pos) } else { (mean(&pos) + mean(&neg)) / 2.0 });
        }
    }
    (!per_pair.is_empty()).then(|| per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

fn random_bank(rng: &mut Stream, c: usize) -> ParamSet<f64> {
    let mut bank = init_bank(c, rng).cast::<f64>();
    for (name, t) in bank.iter_mut() {
        if !name.starts_with("bank_w_") {
            for v in t.data_mut() {
                *v += 0.7 * rng.normal();
            }
        }
    }
    bank
}

fn random_features(
    rng: &mut Stream,
    n: usize,
    mods: &[ModalityId],
    c: usize,
) -> (BTreeMap<ModalityId, Tensor<f64>>, Vec<AvailabilityRow>) {
    let mut avail = vec![[false; 5]; n];
    for row in avail.iter_mut() {
        for &m in mods {
            row[m.code()] = rng.bernoulli(0.75);
        }
    }
    let feats = mods.iter().map(|&m| (m, Tensor::matrix(n, c, rng.normal_vec(n * c, 1.5)).unwrap())).collect();
    (feats, avail)
}

/// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates, with central differences taken here.
fn finite_difference_error<F>(params: &ParamSet<f64>, h: f64, f: F) -> f64
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &'p ParamSet<f64>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new();
        let out = f(&mut tape, params);
        tape.backward(out).unwrap().params(&tape)
    };
    let value = |p: &ParamSet<f64>| {
        let mut tape = Tape::new();
        let out = f(&mut tape, p);
        tape.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (name, t) in params.iter() {
        for idx in 0..t.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[idx]);
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}

fn tie_aware_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (s, &p) in scores.iter().zip(positive) {
        if !p {
            continue;
        }
        for (t, &q) in scores.iter().zip(positive) {
            if q {
                continue;
            }
            pairs += 1.0;
            if s > t {
                wins += 1.0;
            } else if s == t {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn harrell(times: &[f64], events: &[bool], risk: &[f64]) -> Option<f64> {
    let mut good = 0.0;
    let mut total = 0.0;
    for i in 0..times.len() {
        for j in 0..times.len() {
            if events[i] && times[i] < times[j] {
                total += 1.0;
                good += if risk[i] > risk[j] {
                    1.0
                } else if risk[i] == risk[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (total > 0.0).then(|| good / total)
}

fn recall_at_1(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let g: Vec<Vec<f64>> = gallery.iter().map(unit).collect();
    let mut hits = 0;
    for (qi, q) in query.iter().enumerate() {
        let q = unit(q);
        let sims: Vec<f64> = g.iter().map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
        let mut best = 0;
        for (gi, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = gi;
            }
        }
        hits += usize::from(best == qi);
    }
    hits as f64 / query.len() as f64
}

// ---------------------------------------------------------------- criteria

fn loss_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = Stream::new(2024, 1);
    let mut worst = 0.0f64;
    let mut compared = 0;
    while compared < 120 {
        let n = 1 + rng.below(5);
        let m = 2 + rng.below(3);
        let c = 1 + rng.below(3);
        let mut mods = ModalityId::ALL.to_vec();
        rng.shuffle(&mut mods);
        mods.truncate(m);
        let (features, available) = random_features(&mut rng, n, &mods, c);
        let bank = random_bank(&mut rng, c);
        let expected = enumerate_loss(&features, &available, &bank);
        let got = multimodal_siglip_loss(&MultimodalBatch { features, available }, &bank);
        match (expected, got) {
            (Some(e), Ok(r)) => {
                worst = worst.max((e - r.total).abs());
                compared += 1;
            }
            (None, Err(mmalign::Error::EmptyLoss)) => {}
            (e, r) => return outcome(false, format!("oracle {e:?} vs {:?}", r.map(|r| r.total))),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(worst <= 1e-10 && secs < 10.0, format!("{compared} instances, max |diff| {worst:.2e}, {secs:.2} s"))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let h = 1e-5;
    let mut rng = Stream::new(7, 2);
    let mut parts = Vec::new();

    let mods = [ModalityId::Wsi, ModalityId::Snp, ModalityId::Meth];
    let (features, available) = random_features(&mut rng, 4, &mods, 3);
    let mut params = random_bank(&mut rng, 3);
    for (m, t) in &features {
        params.insert(format!("x_{m}"), t.clone());
    }
    let err = finite_difference_error(&params, h, |tape, p| {
        let vars = mods.iter().map(|&m| (m, tape.param(p, &format!("x_{m}")).unwrap())).collect();
        siglip_loss(tape, p, &vars, &available).unwrap().0
    });
    parts.push(("loss", err));

    let enc = EncoderConfig {
        rna_dim: 6,
        snp_dim: 5,
        cnv_dim: 4,
        meth_dim: 7,
        hidden_dim: 5,
        blocks: 2,
        output_dim: 3,
        ffn_mult: 2,
    };
    for m in ModalityId::OMICS {
        let p = perturbed_encoder_params(&enc, m, 3).unwrap().cast::<f64>();
        let width = enc.input_dim(m).unwrap();
        let x = Tensor::matrix(2, width, rng.normal_vec(2 * width, 1.0)).unwrap();
        let r = Tensor::matrix(2, 3, rng.normal_vec(6, 1.0)).unwrap();
        let err = finite_difference_error(&p, h, |tape, p| {
            let xv = tape.constant(x.clone()).unwrap();
            let y = encode_modality(tape, p, &enc, m, xv).unwrap();
            let rv = tape.constant(r.clone()).unwrap();
            let z = tape.mul(y, rv).unwrap();
            tape.sum(z).unwrap()
        });
        parts.push((m.name(), err));
    }

    let agg = AggregatorConfig {
        patch_dim: 4,
        depth: 2,
        heads: 2,
        model_dim: 8,
        registers: 2,
        rope_base: 50.0,
        output_dim: 3,
        ffn_mult: 2,
        block_schedule: Vec::new(),
    };
    let p = perturbed_aggregator_params(&agg, 5).unwrap().cast::<f64>();
    let frag = vec![0, 1, 0, 1, 1, 0];
    let slide = SlideInput {
        patch_features: Tensor::matrix(6, 4, rng.normal_vec(24, 1.0)).unwrap(),
        pixel_coords: vec![[0.0, 0.0], [5120.0, 0.0], [256.0, 0.0], [5120.0, 256.0], [5376.0, 256.0], [0.0, 256.0]],
        patch_size_px: 256,
        fragment_ids: frag,
    };
    let r = Tensor::matrix(1, 3, rng.normal_vec(3, 1.0)).unwrap();
    let err = finite_difference_error(&p, h, |tape, p| {
        let out = aggregate_slides(tape, p, &agg, std::slice::from_ref(&slide)).unwrap();
        let rv = tape.constant(r.clone()).unwrap();
        let z = tape.mul(out.embedding, rv).unwrap();
        tape.sum(z).unwrap()
    });
    parts.push(("aggregator", err));

    let secs = started.elapsed().as_secs_f64();
    let worst = parts.iter().map(|p| p.1).fold(0.0, f64::max);
    let listing: Vec<String> = parts.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(worst < 1e-4 && secs < 60.0, format!("{}; {secs:.1} s", listing.join(", ")))
}

fn fragment_isolation() -> Outcome {
    let cfg = AggregatorConfig::default().resolved().unwrap();
    let params = perturbed_aggregator_params(&cfg, 11).unwrap();
    let mut rng = Stream::new(11, 3);
    let mut cross = 0usize;
    let mut nonzero = 0usize;
    for _ in 0..50 {
        let fragments = 2 + rng.below(3);
        let slide = random_slide(&mut rng, fragments, cfg.patch_dim, 10).unwrap();
        let layout = TokenLayout::for_slide(&slide, cfg.registers, slide.num_patches()).unwrap();
        let mut tape = Tape::new();
        let out = aggregate_slides(&mut tape, &params, &cfg, std::slice::from_ref(&slide)).unwrap();
        for rec in out.attention.iter().filter(|r| r.kind == BlockKind::Rope) {
            for head in 0..rec.heads {
                let probs = rec.probs(&tape, head);
                for (row, &q) in rec.query_tokens.iter().enumerate() {
                    for k in 0..layout.len() {
                        if layout.token_fragment[q] != layout.token_fragment[k] {
                            cross += 1;
                            nonzero += usize::from(probs.at(row, k) != 0.0);
                        }
                    }
                }
            }
        }
    }
    outcome(cross > 0 && nonzero == 0, format!("50 slides, {cross} cross-fragment weights, {nonzero} non-zero"))
}

fn geometry_invariance() -> Outcome {
    let cfg = AggregatorConfig::default().resolved().unwrap();
    let params = perturbed_aggregator_params(&cfg, 13).unwrap();
    let mut rng = Stream::new(13, 4);
    let mut shift = 0.0f64;
    let mut perm = 0.0f64;
    for _ in 0..50 {
        let k = 1 + rng.below(3);
        let slide = random_slide(&mut rng, k, cfg.patch_dim, 14).unwrap();
        let base = aggregate_slide(&slide, &params, &cfg).unwrap();
        let norm = base.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();

        let mut moved = slide.clone();
        let offsets: Vec<(f64, f64)> =
            (0..k).map(|_| (256.0 * rng.below(200) as f64, 256.0 * rng.below(200) as f64)).collect();
        for (xy, &f) in moved.pixel_coords.iter_mut().zip(&slide.fragment_ids) {
            xy[0] += offsets[f].0;
            xy[1] += offsets[f].1;
        }
        let after = aggregate_slide(&moved, &params, &cfg).unwrap();
        let diff = base.data().iter().zip(after.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        shift = shift.max(diff / norm);

        let mut order: Vec<usize> = (0..slide.num_patches()).collect();
        rng.shuffle(&mut order);
        let shuffled = SlideInput {
            patch_features: slide.patch_features.gather_rows(&order),
            pixel_coords: order.iter().map(|&i| slide.pixel_coords[i]).collect(),
            patch_size_px: 256,
            fragment_ids: order.iter().map(|&i| slide.fragment_ids[i]).collect(),
        };
        let after = aggregate_slide(&shuffled, &params, &cfg).unwrap();
        for (a, b) in base.data().iter().zip(after.data()) {
            perm = perm.max((a - b).abs() as f64);
        }
    }
    outcome(
        shift < 1e-4 && perm < 1e-5,
        format!("50 trials each; translation {shift:.2e} relative, permutation {perm:.2e} absolute"),
    )
}

fn missing_modality_opacity() -> Outcome {
    let mut rng = Stream::new(17, 5);
    let mut trials = 0;
    while trials < 100 {
        let n = 2 + rng.below(5);
        let c = 1 + rng.below(4);
        let (features, available) = random_features(&mut rng, n, &ModalityId::ALL, c);
        let bank = random_bank(&mut rng, c);
        let batch = MultimodalBatch { features, available };
        let Ok(before) = multimodal_siglip_loss(&batch, &bank) else { continue };
        let mut poked = batch.clone();
        for (m, t) in poked.features.iter_mut() {
            for s in 0..n {
                if !batch.available[s][m.code()] {
                    let magnitude = 10f64.powi(rng.below(9) as i32 - 2);
                    for v in t.row_mut(s) {
                        *v = magnitude * rng.normal();
                    }
                }
            }
        }
        let after = multimodal_siglip_loss(&poked, &bank).unwrap();
        if before.total.to_bits() != after.total.to_bits() {
            return outcome(false, format!("trial {trials}: {} -> {}", before.total, after.total));
        }
        trials += 1;
    }
    outcome(true, "100 trials, loss bitwise unchanged")
}

struct AlignmentRun {
    samples: Vec<LoadedSample>,
    first_loss: f64,
    last_loss: f64,
    train_secs: f64,
    trained: CohortEmbeddings,
    untrained: CohortEmbeddings,
    params: ParamSet<f32>,
}

fn alignment_run(dir: &Path) -> AlignmentRun {
    let cohort = CohortConfig::default();
    generate_cohort(&cohort, dir).unwrap();
    let (_, samples) = load_cohort(dir).unwrap();
    let cfg = TrainConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let mut state =
            ModelState::init(&AggregatorConfig::default(), &EncoderConfig::default(), cohort.rna_genes, 42).unwrap();
        let data = prepare_samples(&state, &samples).unwrap();
        let untrained = embed_samples(&state, &data, false).unwrap();
        let started = Instant::now();
        let log = train_loop(&mut state, &data, &cfg, &RunOutputs::default()).unwrap();
        let train_secs = started.elapsed().as_secs_f64();
        let trained = embed_samples(&state, &data, false).unwrap();
        AlignmentRun {
            first_loss: log.first().unwrap().total_loss,
            last_loss: log.last().unwrap().total_loss,
            train_secs,
            trained,
            untrained,
            samples,
            params: state.params.clone(),
        }
    })
}

fn projected(params: &ParamSet<f64>, rows: &[Vec<f64>], from: ModalityId, to: ModalityId) -> Vec<Vec<f64>> {
    let w = params.get(&bank_w(from, to)).unwrap();
    let b = params.get(&bank_b(from, to)).unwrap();
    rows.iter().map(|x| affine_unit(w, b, x)).collect()
}

fn alignment_proxy(run: &AlignmentRun) -> Outcome {
    let n = run.samples.len();
    let held: Vec<usize> = (n - 64..n).collect();
    let both: Vec<usize> = held
        .iter()
        .copied()
        .filter(|&i| {
            run.samples[i].available[ModalityId::Wsi.code()] && run.samples[i].available[ModalityId::Rna.code()]
        })
        .collect();
    let (wsi_id, rna_id) = (ModalityId::Wsi, ModalityId::Rna);
    let (_, wsi) = run.trained.rows(wsi_id, &both);
    let (_, rna) = run.trained.rows(rna_id, &both);
    let bank = run.params.cast::<f64>();
    let wsi_to_rna = projected(&bank, &wsi, wsi_id, rna_id);
    let rna_to_wsi = projected(&bank, &rna, rna_id, wsi_id);
    let forward = recall_at_1(&wsi_to_rna, &rna_to_wsi);
    let backward = recall_at_1(&rna_to_wsi, &wsi_to_rna);
    let lib = cross_modal_retrieval(&run.params, &run.trained, &held, wsi_id, rna_id, 1).unwrap().unwrap();
    let chance = 1.0 / both.len() as f64;
    let ratio = run.last_loss / run.first_loss;
    outcome(
        ratio <= 0.5 && forward >= 0.156 && backward >= 0.156 && run.train_secs < 300.0 && lib.recall == forward,
        format!(
            "loss {:.4} -> {:.4} ({:.1}%), recall@1 WSI->RNA {forward:.3} RNA->WSI {backward:.3} over {} held-out pairs ({:.1}x / {:.1}x chance), train {:.0} s",
            run.first_loss,
            run.last_loss,
            100.0 * ratio,
            both.len(),
            forward / chance,
            backward / chance,
            run.train_secs
        ),
    )
}

fn class_probe(emb: &CohortEmbeddings, samples: &[LoadedSample]) -> f64 {
    let all: Vec<usize> = (0..samples.len()).collect();
    let (idx, rows) = emb.rows(ModalityId::Wsi, &all);
    let labels: Vec<usize> = idx.iter().map(|&i| samples[i].class_label).collect();
    let records = cross_validate_logistic("class", &Tensor::from_rows(&rows).unwrap(), &labels, 5, 1e-3, 42).unwrap();
    mean_value(&records)
}

fn probe_ceiling(run: &AlignmentRun) -> Outcome {
    let after = class_probe(&run.trained, &run.samples);
    let before = class_probe(&run.untrained, &run.samples);
    outcome(after >= 0.90 && before <= 0.65, format!("5-fold macro AUROC trained {after:.4}, untrained {before:.4}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = Stream::new(19, 6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = 2 + rng.below(49);
        let classes = 2 + rng.below(3);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let scores: Vec<f64> = (0..n * classes).map(|_| (rng.below(8) as f64) * 0.125).collect();
        let mut per_class = Vec::new();
        for k in 0..classes {
            let col: Vec<f64> = (0..n).map(|i| scores[i * classes + k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            per_class.extend(tie_aware_auroc(&col, &pos));
        }
        if !per_class.is_empty() {
            let expected = per_class.iter().sum::<f64>() / per_class.len() as f64;
            let got = macro_auroc_ovr(&Tensor::matrix(n, classes, scores).unwrap(), &labels).unwrap();
            worst = worst.max((got.macro_auroc - expected).abs());
        }
        let times: Vec<f64> = (0..n).map(|_| rng.below(12) as f64 + 0.5).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        let risk: Vec<f64> = (0..n).map(|_| rng.below(6) as f64).collect();
        if let Some(expected) = harrell(&times, &events, &risk) {
            worst = worst.max((concordance_index(&times, &events, &risk).unwrap() - expected).abs());
        }
    }
    let x = Tensor::matrix(4, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let (times, events) = ([1.0, 2.0, 3.0, 4.0], [true; 4]);
    let fit = fit_cox_ph(&x, &times, &events, 1e-6).unwrap();
    // Coarse-to-fine grid search on the penalized partial likelihood.
    let (mut lo, mut hi, mut best) = (-5.0f64, 50.0f64, 0.0f64);
    for _ in 0..6 {
        let step = (hi - lo) / 1000.0;
        let mut best_ll = f64::NEG_INFINITY;
        for s in 0..=1000 {
            let b = lo + s as f64 * step;
            let ll = cox_log_likelihood(&x, &times, &events, &[b], 1e-6).unwrap();
            if ll > best_ll {
                best_ll = ll;
                best = b;
            }
        }
        lo = best - 2.0 * step;
        hi = best + 2.0 * step;
    }
    let gap = (fit.beta[0] - best).abs();
    outcome(
        worst <= 1e-12 && gap < 1e-3 && fit.beta[0] > 0.0,
        format!("200 instances, max |diff| {worst:.1e}; Cox beta {:.5} vs grid {best:.5}", fit.beta[0]),
    )
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(tmp: &Path) -> Outcome {
    let config = tmp.join("det.json");
    let cohort = tmp.join("det-cohort");
    fs::write(
        &config,
        format!(
            r#"{{
  "seed": 5,
  "cohort": {{"n_samples": 20, "grid_height": 24, "grid_width": 24, "fragment_size_min": 4, "fragment_size_max": 12}},
  "train": {{"steps": 6, "checkpoint_every": 3, "holdout": 4}},
  "paths": {{"cohort": "{}"}}
}}"#,
            cohort.display()
        ),
    )
    .unwrap();
    let cli = |args: &[&str]| {
        let mut argv = vec!["mmalign", "--config", config.to_str().unwrap(), "--threads", "1"];
        argv.extend_from_slice(args);
        mmalign::cli::run(argv)
    };
    let mut problems = Vec::new();

    let copy = tmp.join("det-cohort-2");
    if cli(&["synth"]) != 0 || cli(&["synth", "--out", copy.to_str().unwrap()]) != 0 {
        return outcome(false, "synth failed");
    }
    let (a, b) = (tree_bytes(&cohort), tree_bytes(&copy));
    if a != b {
        problems.push("synth outputs differ");
    }

    let runs: Vec<_> = ["run-a", "run-b"].iter().map(|r| tmp.join(r)).collect();
    for r in &runs {
        if cli(&["train", "--out", r.to_str().unwrap()]) != 0 {
            return outcome(false, "train failed");
        }
    }
    let ckpt = |r: &Path| tree_bytes(&r.join("checkpoints"));
    if ckpt(&runs[0]) != ckpt(&runs[1]) {
        problems.push("training checkpoints differ");
    }

    let resumed = tmp.join("run-resumed");
    let mid = runs[0].join("checkpoints/step_000003");
    if cli(&["train", "--out", resumed.to_str().unwrap(), "--checkpoint", mid.to_str().unwrap()]) != 0 {
        return outcome(false, "resume failed");
    }
    let last = |r: &Path| tree_bytes(&r.join("checkpoints/step_000006"));
    if last(&resumed) != last(&runs[0]) {
        problems.push("resumed checkpoint differs");
    }
    let losses = |r: &Path| -> Vec<(u64, u64)> {
        fs::read_to_string(r.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (v["step"].as_u64().unwrap(), v["total_loss"].as_f64().unwrap().to_bits())
            })
            .collect()
    };
    let full = losses(&runs[0]);
    if losses(&runs[1]) != full || losses(&resumed)[..] != full[3..] {
        problems.push("loss traces differ");
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} cohort files, {} checkpoint files identical; resume from step 3 bitwise equal",
                a.len(),
                ckpt(&runs[0]).len()
            )
        } else {
            problems.join(", ")
        },
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let mut failures = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.passed);
    };
    report("loss-oracle equivalence", loss_oracle());
    report("gradient correctness", gradient_correctness());
    report("fragment isolation", fragment_isolation());
    report("geometry invariances", geometry_invariance());
    report("missing-modality opacity", missing_modality_opacity());
    let run = alignment_run(&tmp.path().join("cohort-42"));
    report("synthetic alignment proxy", alignment_proxy(&run));
    report("probe quality ceiling", probe_ceiling(&run));
    report("metric oracles", metric_oracles());
    report("determinism", determinism(tmp.path()));
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
