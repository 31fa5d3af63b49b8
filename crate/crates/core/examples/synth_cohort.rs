//! Writes a small synthetic cohort to a directory and reads it back.
//!
//! Usage: `cargo run --example synth_cohort [out_dir] [n_samples]`

use std::path::PathBuf;

use mmalign::cohort::{generate_cohort, load_cohort, CohortConfig};
use mmalign::container::read_tensor;
use mmalign::omics::ModalityId;
use mmalign::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("mmalign-synth-example"), PathBuf::from);
    let n_samples = args.next().and_then(|s| s.parse().ok()).unwrap_or(24);

    let cfg = CohortConfig { n_samples, ..CohortConfig::default() };
    let manifest = generate_cohort(&cfg, &out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());

    let mut per_class = vec![0usize; cfg.n_classes];
    let mut per_modality = [0usize; 5];
    let mut events = 0;
    for s in &manifest.samples {
        per_class[s.class_label] += 1;
        for m in &s.available {
            per_modality[m.code()] += 1;
        }
        events += usize::from(s.survival.event);
    }
    println!("class counts {per_class:?}, {events} observed events");
    for m in ModalityId::ALL {
        println!("  {:<4} available in {:>3} samples", m.name(), per_modality[m.code()]);
    }

    let first = &manifest.samples[0];
    println!("sample {} files:", first.id);
    for (m, file) in &first.files {
        let t = read_tensor::<f32>(&out.join(file))?;
        println!("  {:<4} {file} shape {:?}", m.name(), t.shape());
    }
    if let Some(slide) = &first.slide {
        println!("  slide: {} patches in {} fragments", slide.n_patches, slide.n_fragments);
    }

    let (_, samples) = load_cohort(&out)?;
    let with_slide = samples.iter().filter(|s| s.slide.is_some()).count();
    println!("reloaded {} samples, {with_slide} with a slide", samples.len());
    Ok(())
}
