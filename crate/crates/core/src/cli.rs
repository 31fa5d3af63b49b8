//! The `mmalign` command line.
//!
//! Every subcommand resolves the JSON config (defaults filled, seed
//! applied), writes it to its output directory and only then starts work.
//! Human summaries go to stdout and machine-readable results to JSONL files.
//!
//! Exit codes: 0 on success, 1 on a contract or numerical failure (including
//! a failing self-test), 2 on an I/O or format failure, 64 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cohort::{generate_cohort, load_cohort, CohortManifest, LoadedSample};
use crate::config::RunConfig;
use crate::container::write_tensor;
use crate::error::{Error, Result};
use crate::eval::{label_probes, retrieval_matrix, survival_probe};
use crate::probes::mean_value;
use crate::tensor::Tensor;
use crate::train::{
    embed_samples, load_checkpoint, prepare_samples, train_loop, CohortEmbeddings, ModelState, RunOutputs,
};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONTRACT: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "mmalign", version, about = "Multimodal slide and omics alignment toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (cohort directory for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Checkpoint directory: resume point for `train`, model for evaluation.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Use mean-pooled patch features as the slide embedding.
    #[arg(long)]
    mean_pool: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic cohort.
    Synth,
    /// Train (or resume) the alignment model.
    Train,
    /// Write per-sample embeddings as tensor containers.
    Embed(EmbedArgs),
    /// Cross-validated logistic probes with macro one-vs-rest AUROC.
    Probe(EmbedArgs),
    /// Held-out cross-modal retrieval recall@k.
    Retrieval(EmbedArgs),
    /// Cross-validated Cox probe with concordance index.
    Survival(EmbedArgs),
    /// Run the oracle and gradient-check suites.
    Selftest,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.common.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::Config(format!("cannot build thread pool: {e}"))),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CONTRACT,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_CONTRACT
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        None => RunConfig::default(),
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
    };
    base.resolved(common.seed)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = Vec::new();
    for r in records {
        serde_json::to_writer(&mut text, r).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        text.push(b'\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let out = match (&cli.command, &cli.common.out) {
        (_, Some(dir)) => dir.clone(),
        (Command::Synth, None) => cfg.paths.cohort.clone(),
        (_, None) => cfg.paths.run.clone(),
    };
    let echoed = cfg.echo(&out)?;
    println!("effective config: {}", echoed.display());
    match &cli.command {
        Command::Synth => synth(&cfg, &out),
        Command::Train => train(&cfg, &out, cli.common.checkpoint.as_deref()),
        Command::Embed(a) => embed(&cfg, &out, cli.common.checkpoint.as_deref(), a.mean_pool),
        Command::Probe(a) => probe(&cfg, &out, cli.common.checkpoint.as_deref(), a.mean_pool),
        Command::Retrieval(a) => retrieval(&cfg, &out, cli.common.checkpoint.as_deref(), a.mean_pool),
        Command::Survival(a) => survival(&cfg, &out, cli.common.checkpoint.as_deref(), a.mean_pool),
        Command::Selftest => selftest(&cfg, &out),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let manifest = generate_cohort(&cfg.cohort, out)?;
    let wsi = manifest.samples.iter().filter(|s| s.slide.is_some()).count();
    println!("wrote {} samples ({wsi} with slides) to {}", manifest.samples.len(), out.display());
    Ok(true)
}

/// The model named by `--checkpoint`, or a fresh initialization.
fn model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ModelState> {
    match checkpoint {
        Some(dir) => Ok(load_checkpoint(dir)?.0),
        None => ModelState::init(&cfg.model.aggregator, &cfg.model.encoder, cfg.cohort.rna_genes, cfg.seed),
    }
}

fn train(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<bool> {
    let (_, samples) = load_cohort(&cfg.paths.cohort)?;
    let mut state = model(cfg, checkpoint)?;
    let data = prepare_samples(&state, &samples)?;
    let metrics = out.join("metrics.jsonl");
    if checkpoint.is_none() && metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let outputs = RunOutputs { metrics: Some(metrics.clone()), checkpoints: Some(out.join("checkpoints")) };
    let log = train_loop(&mut state, &data, &cfg.train, &outputs)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained to step {}: loss {:.5} -> {:.5} (metrics in {})",
            state.step,
            first.total_loss,
            last.total_loss,
            metrics.display()
        );
    }
    Ok(true)
}

fn embeddings(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    mean_pool: bool,
) -> Result<(CohortManifest, Vec<LoadedSample>, CohortEmbeddings, ModelState)> {
    let (manifest, samples) = load_cohort(&cfg.paths.cohort)?;
    let state = model(cfg, checkpoint)?;
    let data = prepare_samples(&state, &samples)?;
    let emb = embed_samples(&state, &data, mean_pool)?;
    let source = match checkpoint {
        Some(dir) => format!("checkpoint {}", dir.display()),
        None => "untrained model".to_string(),
    };
    println!(
        "embedded {} samples with the {source}{}",
        samples.len(),
        if mean_pool { " (mean-pooled slides)" } else { "" }
    );
    Ok((manifest, samples, emb, state))
}

fn embed(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, mean_pool: bool) -> Result<bool> {
    let (manifest, _, emb, _) = embeddings(cfg, checkpoint, mean_pool)?;
    let dir = out.join("embeddings");
    let mut written = 0usize;
    for (m, col) in &emb.by_modality {
        for (entry, row) in manifest.samples.iter().zip(col) {
            if let Some(v) = row {
                let t = Tensor::matrix(1, v.len(), v.clone())?;
                write_tensor(&dir.join(&entry.id).join(format!("{m}.paln")), &t)?;
                written += 1;
            }
        }
    }
    println!("wrote {written} embeddings under {}", dir.display());
    Ok(true)
}

fn probe(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, mean_pool: bool) -> Result<bool> {
    let (_, samples, emb, _) = embeddings(cfg, checkpoint, mean_pool)?;
    let e = &cfg.eval;
    let records = label_probes(&emb, &samples, e.probe_modality, e.folds, e.lambda, cfg.seed)?;
    write_jsonl(&out.join("probe.jsonl"), &records)?;
    for task in ["class", "biomarker"] {
        let rs: Vec<_> = records.iter().filter(|r| r.task == task).cloned().collect();
        println!("{task}: macro AUROC {:.4} over {} folds", mean_value(&rs), rs.len());
    }
    Ok(true)
}

fn retrieval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, mean_pool: bool) -> Result<bool> {
    let (_, samples, emb, state) = embeddings(cfg, checkpoint, mean_pool)?;
    let n = samples.len();
    let start = n.saturating_sub(cfg.train.holdout);
    let idx: Vec<usize> = (start..n).collect();
    let records = retrieval_matrix(&state.params, &emb, &idx, cfg.eval.recall_k)?;
    write_jsonl(&out.join("retrieval.jsonl"), &records)?;
    for r in &records {
        println!("{} -> {}: recall@{} {:.4} over {} (chance {:.4})", r.query, r.gallery, r.k, r.recall, r.n, r.chance);
    }
    Ok(true)
}

fn survival(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, mean_pool: bool) -> Result<bool> {
    let (_, samples, emb, _) = embeddings(cfg, checkpoint, mean_pool)?;
    let e = &cfg.eval;
    let records = survival_probe(&emb, &samples, e.probe_modality, e.folds, e.cox_ridge, cfg.seed)?;
    write_jsonl(&out.join("survival.jsonl"), &records)?;
    println!("survival: C-index {:.4} over {} folds", mean_value(&records), records.len());
    Ok(true)
}

fn selftest(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let results = verify::run_all(cfg.seed);
    write_jsonl(&out.join("selftest.jsonl"), &results)?;
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(stdout, "{verdict} {} ({:.0} ms): {}", r.name, r.millis, r.detail);
    }
    Ok(results.iter().all(|r| r.passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_map_to_64() {
        assert_eq!(run(["mmalign", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mmalign", "synth", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["mmalign"]), EXIT_USAGE);
        assert_eq!(run(["mmalign", "--help"]), EXIT_OK);
    }

    #[test]
    fn bad_config_is_a_contract_error_and_missing_cohort_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"unknown": 1}"#).unwrap();
        let out = dir.path().join("o");
        let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
        assert_eq!(run(["mmalign", "synth", "--config", c, "--out", o]), EXIT_CONTRACT);

        fs::write(&cfg, format!(r#"{{"paths": {{"cohort": "{}"}}}}"#, dir.path().join("none").display())).unwrap();
        assert_eq!(run(["mmalign", "probe", "--config", c, "--out", o]), EXIT_IO);
        assert!(out.join(crate::config::EFFECTIVE_CONFIG_FILE).exists());
    }
}
