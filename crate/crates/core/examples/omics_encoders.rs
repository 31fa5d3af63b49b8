//! Encodes RNA, SNP, CNV and methylation profiles into the shared width.
//!
//! Raw RNA first goes through the frozen stub; the other modalities feed
//! their encoders directly. Each row is encoded independently, which the
//! last block demonstrates by encoding one row alone and inside a batch.

use mmalign::omics::{encode, EncoderConfig, ModalityId, RnaStub};
use mmalign::rng::Stream;
use mmalign::verify::perturbed_encoder_params;
use mmalign::{Result, Tensor};

fn main() -> Result<()> {
    let cfg = EncoderConfig::default();
    let raw_genes = 2000;
    let stub = RnaStub::new(42, raw_genes, cfg.rna_dim);
    let mut rng = Stream::new(5, 0);
    let n = 6;

    for m in [ModalityId::Rna, ModalityId::Snp, ModalityId::Cnv, ModalityId::Meth] {
        let params = perturbed_encoder_params(&cfg, m, 9)?;
        let x = if m == ModalityId::Rna {
            let raw = Tensor::matrix(
                n,
                raw_genes,
                rng.normal_vec(n * raw_genes, 1.0).into_iter().map(|v| v as f32).collect(),
            )?;
            stub.embed(&raw)?
        } else {
            let width = cfg.input_dim(m)?;
            Tensor::matrix(n, width, rng.normal_vec(n * width, 1.0).into_iter().map(|v| v as f32).collect())?
        };
        let out = encode(&params, &cfg, m, &x)?;
        let trainable: usize = params.iter().map(|(_, t)| t.len()).sum();
        println!(
            "{:<4} input {:>4} -> output [{} x {}], {trainable} trainable values, first row norm {:.4}",
            m.name(),
            x.cols(),
            out.rows(),
            out.cols(),
            Tensor::vector(out.row(0).to_vec()).norm()
        );

        let alone = encode(&params, &cfg, m, &x.gather_rows(&[3]))?;
        let diff = alone.row(0).iter().zip(out.row(3)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        println!("     row 3 encoded alone differs from its batch row by {diff:.1e}");
    }
    Ok(())
}
