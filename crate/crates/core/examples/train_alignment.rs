//! End-to-end alignment on the default synthetic cohort.
//!
//! Trains with full-batch steps on all but the last 64 samples, then
//! reports held-out WSI/RNA retrieval and a class probe on slide embeddings
//! before and after training.
//!
//! Usage: `cargo run --release --example train_alignment [steps]`

use std::time::Instant;

use mmalign::cohort::{generate_cohort, load_cohort, CohortConfig};
use mmalign::eval::{cross_modal_retrieval, label_probes};
use mmalign::frope::AggregatorConfig;
use mmalign::omics::{EncoderConfig, ModalityId};
use mmalign::probes::{mean_value, DEFAULT_LOGISTIC_LAMBDA};
use mmalign::train::{embed_samples, prepare_samples, train_loop, ModelState, RunOutputs, TrainConfig};

fn main() -> mmalign::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let dir = std::env::temp_dir().join("mmalign-train-example");
    let cohort = CohortConfig::default();
    generate_cohort(&cohort, &dir)?;
    let (_, samples) = load_cohort(&dir)?;

    let mut state =
        ModelState::init(&AggregatorConfig::default(), &EncoderConfig::default(), cohort.rna_genes, cohort.seed)?;
    let data = prepare_samples(&state, &samples)?;
    let before = embed_samples(&state, &data, false)?;

    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    let started = Instant::now();
    let log = train_loop(&mut state, &data, &cfg, &RunOutputs::default())?;
    let every = (log.len() / 8).max(1);
    for m in log.iter().step_by(every) {
        println!("step {:>4}  loss {:.5}", m.step, m.total_loss);
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("loss {:.4} -> {:.4} in {:.1} s", first.total_loss, last.total_loss, started.elapsed().as_secs_f64());
    }

    let after = embed_samples(&state, &data, false)?;
    let held: Vec<usize> = (samples.len() - cfg.holdout..samples.len()).collect();
    for (q, g) in [(ModalityId::Wsi, ModalityId::Rna), (ModalityId::Rna, ModalityId::Wsi)] {
        if let Some(r) = cross_modal_retrieval(&state.params, &after, &held, q, g, 1)? {
            println!("held-out {q}->{g} recall@1 {:.3} over {} pairs (chance {:.3})", r.recall, r.n, r.chance);
        }
    }

    for (name, emb) in [("untrained", &before), ("trained", &after)] {
        let records = label_probes(emb, &samples, ModalityId::Wsi, 5, DEFAULT_LOGISTIC_LAMBDA, cohort.seed)?;
        let class: Vec<_> = records.iter().filter(|r| r.task == "class").cloned().collect();
        let marker: Vec<_> = records.iter().filter(|r| r.task == "biomarker").cloned().collect();
        println!(
            "{name:<9} slide probe: class AUROC {:.3}, biomarker AUROC {:.3}",
            mean_value(&class),
            mean_value(&marker)
        );
    }
    Ok(())
}
