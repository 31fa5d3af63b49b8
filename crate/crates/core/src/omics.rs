//! Modality identifiers and the per-modality omics encoders.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_swiglu, linear, normal_tensor, swiglu_residual};
use crate::rng::{streams, Stream};
use crate::tensor::{Real, Tensor};

/// Biological data layer. Codes `0..4` are stable across files and masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Wsi,
    Rna,
    Snp,
    Cnv,
    Meth,
}

pub const NUM_MODALITIES: usize = 5;

impl ModalityId {
    pub const ALL: [ModalityId; NUM_MODALITIES] =
        [ModalityId::Wsi, ModalityId::Rna, ModalityId::Snp, ModalityId::Cnv, ModalityId::Meth];

    pub const OMICS: [ModalityId; 4] = [ModalityId::Rna, ModalityId::Snp, ModalityId::Cnv, ModalityId::Meth];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Wsi => "wsi",
            ModalityId::Rna => "rna",
            ModalityId::Snp => "snp",
            ModalityId::Cnv => "cnv",
            ModalityId::Meth => "meth",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub rna_dim: usize,
    pub snp_dim: usize,
    pub cnv_dim: usize,
    pub meth_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub output_dim: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            rna_dim: 512,
            snp_dim: 128,
            cnv_dim: 128,
            meth_dim: 256,
            hidden_dim: 64,
            blocks: 2,
            output_dim: 32,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    /// Encoder input width; for RNA this is the frozen stub's output width.
    pub fn input_dim(&self, m: ModalityId) -> Result<usize> {
        match m {
            ModalityId::Rna => Ok(self.rna_dim),
            ModalityId::Snp => Ok(self.snp_dim),
            ModalityId::Cnv => Ok(self.cnv_dim),
            ModalityId::Meth => Ok(self.meth_dim),
            ModalityId::Wsi => Err(Error::Contract("WSI has no omics encoder".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims =
            [self.rna_dim, self.snp_dim, self.cnv_dim, self.meth_dim, self.hidden_dim, self.output_dim, self.ffn_mult];
        if dims.contains(&0) {
            return Err(Error::Config("encoder dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Frozen seeded linear map standing in for a pretrained RNA model.
///
/// Never part of a trainable parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct RnaStub {
    /// `[raw genes x rna_dim]`.
    pub weight: Tensor<f32>,
}

impl RnaStub {
    pub fn new(seed: u64, raw_dim: usize, out_dim: usize) -> Self {
        let mut rng = Stream::new(seed, streams::RNA_STUB);
        let std = 1.0 / (raw_dim as f64).sqrt();
        Self { weight: normal_tensor(&mut rng, &[raw_dim, out_dim], std) }
    }

    pub fn embed<T: Real>(&self, raw_rna: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.weight.cast::<T>();
        if raw_rna.cols() != w.rows() {
            return Err(Error::dim("rna_stub", format!("raw width {} vs stub input {}", raw_rna.cols(), w.rows())));
        }
        let x = Tensor::matrix(raw_rna.rows(), raw_rna.cols(), raw_rna.data().to_vec())?;
        x.matmul(&w)
    }
}

/// Convenience wrapper for [`RnaStub::embed`].
pub fn rna_stub_embed<T: Real>(stub: &RnaStub, raw_rna: &Tensor<T>) -> Result<Tensor<T>> {
    stub.embed(raw_rna)
}

pub fn enc_name(m: ModalityId, tensor: &str) -> String {
    format!("enc_{}_{tensor}", m.name())
}

/// Parameters for one encoder; residual down-projections start at zero.
pub fn init_encoder_params(cfg: &EncoderConfig, m: ModalityId, rng: &mut Stream) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let input = cfg.input_dim(m)?;
    let h = cfg.hidden_dim;
    let mut p = ParamSet::new();
    p.insert(enc_name(m, "in_w"), normal_tensor(rng, &[input, h], 1.0 / (input as f64).sqrt()));
    p.insert(enc_name(m, "in_b"), Tensor::zeros(&[h]));
    for b in 0..cfg.blocks {
        init_swiglu(&mut p, rng, &enc_name(m, &format!("blk{b}")), h, h * cfg.ffn_mult);
    }
    p.insert(enc_name(m, "final_norm"), Tensor::full(&[h], 1.0));
    p.insert(enc_name(m, "out_w"), normal_tensor(rng, &[h, cfg.output_dim], 1.0 / (h as f64).sqrt()));
    p.insert(enc_name(m, "out_b"), Tensor::zeros(&[cfg.output_dim]));
    Ok(p)
}

/// Encodes `[N x input_dim]` rows into `[N x output_dim]`; rows are independent.
pub fn encode_modality<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &EncoderConfig,
    m: ModalityId,
    x: Var,
) -> Result<Var> {
    let input = cfg.input_dim(m)?;
    if tape.value(x).cols() != input {
        return Err(Error::dim("encode_modality", format!("{m} input width {} vs {input}", tape.value(x).cols())));
    }
    let mut h = linear(tape, params, x, &enc_name(m, "in_w"), Some(&enc_name(m, "in_b")))?;
    for b in 0..cfg.blocks {
        h = swiglu_residual(tape, params, &enc_name(m, &format!("blk{b}")), h)?;
    }
    let gain = tape.param(params, &enc_name(m, "final_norm"))?;
    let n = tape.rms_norm(h, gain)?;
    linear(tape, params, n, &enc_name(m, "out_w"), Some(&enc_name(m, "out_b")))
}

/// Forward-only encoding.
pub fn encode<T: Real>(params: &ParamSet<T>, cfg: &EncoderConfig, m: ModalityId, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let out = encode_modality(&mut tape, params, cfg, m, xv)?;
    Ok(tape.value(out).clone())
}
