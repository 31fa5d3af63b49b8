//! Frozen-embedding evaluation on hand-made embeddings.
//!
//! Builds clustered embeddings with a known class structure and a hazard
//! that depends on one direction, then runs the logistic probe, the Cox
//! probe and cross-modal retrieval on them.

use mmalign::probes::{
    concordance_index, cross_validate_cox, cross_validate_logistic, fit_cox_ph, fit_logistic_probe, macro_auroc_ovr,
    mean_value, retrieval_recall_at_k,
};
use mmalign::rng::Stream;
use mmalign::{Result, Tensor};

fn main() -> Result<()> {
    let mut rng = Stream::new(3, 0);
    let (n, dim, classes) = (160, 8, 3);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| rng.normal_vec(dim, 1.2)).collect();

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let x: Vec<f64> = centers[c].iter().zip(rng.normal_vec(dim, 1.0)).map(|(m, e)| m + e).collect();
        let rate = (0.8 * x[0]).exp();
        times.push(-rng.uniform_open().ln() / rate);
        events.push(rng.bernoulli(0.8));
        rows.push(x);
        labels.push(c);
    }
    let x = Tensor::from_rows(&rows)?;

    let probe = fit_logistic_probe(&x, &labels, 1e-2)?;
    let scores = probe.predict_proba(&x, classes)?;
    let auroc = macro_auroc_ovr(&scores, &labels)?;
    println!(
        "logistic probe: {} iterations, converged {}, in-sample macro AUROC {:.4}",
        probe.iterations, probe.converged, auroc.macro_auroc
    );
    let folds = cross_validate_logistic("class", &x, &labels, 5, 1e-2, 7)?;
    for r in &folds {
        println!("  fold {} {} {:.4} ({} train / {} test)", r.fold, r.metric, r.value, r.n_train, r.n_test);
    }
    println!("  5-fold mean {:.4}", mean_value(&folds));

    let cox = fit_cox_ph(&x, &times, &events, 1e-3)?;
    let risk: Vec<f64> = rows.iter().map(|r| r.iter().zip(&cox.beta).map(|(a, b)| a * b).sum()).collect();
    println!(
        "cox fit: beta[0] {:.3} (true 0.8), log-likelihood {:.3}, in-sample C-index {:.4}",
        cox.beta[0],
        cox.log_lik,
        concordance_index(&times, &events, &risk)?
    );
    let cv = cross_validate_cox("survival", &x, &times, &events, 5, 1e-3, 7)?;
    println!("  5-fold mean C-index {:.4}", mean_value(&cv));

    let paired: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + 0.3 * rng.normal()).collect()).collect();
    let noisy = Tensor::from_rows(&paired)?;
    for k in [1, 5, 10] {
        println!("retrieval recall@{k:<2} {:.4}", retrieval_recall_at_k(&x, &noisy, k)?);
    }
    Ok(())
}
