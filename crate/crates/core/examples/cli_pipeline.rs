//! Drives the command-line interface in-process on a toy-sized config:
//! synthesize, train, then run every evaluation command on the checkpoint.
//!
//! The same commands are available from the `mmalign` binary, for example
//! `mmalign --config run.json train --out run`.

use std::fs;

use mmalign::cli::run;
use mmalign::train::checkpoint_name;

fn main() -> std::io::Result<()> {
    let root = std::env::temp_dir().join("mmalign-cli-example");
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    fs::create_dir_all(&root)?;
    let config = root.join("run.json");
    fs::write(
        &config,
        format!(
            r#"{{
  "seed": 9,
  "cohort": {{"n_samples": 40, "grid_height": 32, "grid_width": 32, "fragment_size_min": 6, "fragment_size_max": 16}},
  "train": {{"steps": 10, "checkpoint_every": 5, "holdout": 10, "lr": 1e-3}},
  "eval": {{"folds": 3}},
  "paths": {{"cohort": "{}", "run": "{}"}}
}}"#,
            root.join("cohort").display(),
            root.join("run").display()
        ),
    )?;

    let checkpoint = root.join("run").join("checkpoints").join(checkpoint_name(10));
    let ckpt = checkpoint.to_str().expect("utf-8 path");
    let steps: [&[&str]; 6] = [
        &["synth"],
        &["train"],
        &["embed", "--checkpoint", ckpt],
        &["probe", "--checkpoint", ckpt],
        &["retrieval", "--checkpoint", ckpt],
        &["survival", "--checkpoint", ckpt, "--mean-pool"],
    ];
    for args in steps {
        let mut argv = vec!["mmalign", "--config", config.to_str().expect("utf-8 path"), "--threads", "1"];
        argv.extend_from_slice(args);
        let code = run(argv);
        println!("$ mmalign {} -> exit {code}", args.join(" "));
        if code != 0 {
            std::process::exit(code);
        }
    }

    for file in ["metrics.jsonl", "probe.jsonl", "retrieval.jsonl", "survival.jsonl"] {
        let text = fs::read_to_string(root.join("run").join(file))?;
        println!("{file}: {} lines, first: {}", text.lines().count(), text.lines().next().unwrap_or(""));
    }
    Ok(())
}
