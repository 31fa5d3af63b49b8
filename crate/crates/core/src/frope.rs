//! Fragment-aware rotary slide aggregator.
//!
//! A slide is a bag of patch embeddings with pixel coordinates and a tissue
//! fragment index per patch. Tokens are laid out as `[CLS, registers..., patches...]`.
//! Blocks alternate between two kinds:
//!
//! * RoPE blocks rotate queries/keys by their 2-D patch position (axial split:
//!   the first half of each head's rotation pairs follows `x`, the second half
//!   `y`) and only let tokens attend within their own fragment. CLS and the
//!   registers form one extra fragment and sit at the origin.
//! * NoPE blocks see no positions and attend across every valid token.
//!
//! The slide embedding is the final CLS state after an RMS norm and a linear
//! head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_swiglu, linear, normal_tensor, swiglu};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Rope,
    Nope,
}

/// Alternating schedule starting with a RoPE block.
pub fn alternating_schedule(depth: usize) -> Vec<BlockKind> {
    (0..depth).map(|i| if i % 2 == 0 { BlockKind::Rope } else { BlockKind::Nope }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub patch_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub registers: usize,
    pub rope_base: f64,
    pub output_dim: usize,
    pub ffn_mult: usize,
    /// Empty means "alternate, starting with RoPE".
    pub block_schedule: Vec<BlockKind>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            patch_dim: 48,
            depth: 4,
            heads: 4,
            model_dim: 64,
            registers: 4,
            rope_base: 10000.0,
            output_dim: 32,
            ffn_mult: 4,
            block_schedule: alternating_schedule(4),
        }
    }
}

impl AggregatorConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    /// Fills an empty schedule and checks every invariant.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.block_schedule.is_empty() {
            cfg.block_schedule = alternating_schedule(cfg.depth);
        }
        if cfg.heads == 0 || cfg.model_dim == 0 || !cfg.model_dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                cfg.model_dim, cfg.heads
            )));
        }
        if !cfg.head_dim().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "per-head dim {} must be divisible by 4 for axial rotary pairs",
                cfg.head_dim()
            )));
        }
        if cfg.block_schedule.len() != cfg.depth {
            return Err(Error::Config(format!(
                "block schedule has {} entries for depth {}",
                cfg.block_schedule.len(),
                cfg.depth
            )));
        }
        if cfg.patch_dim == 0 || cfg.output_dim == 0 || cfg.ffn_mult == 0 {
            return Err(Error::Config("aggregator dims must be >= 1".into()));
        }
        if !(cfg.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(cfg)
    }
}

/// One slide: frozen patch embeddings plus their placement.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideInput<T> {
    pub patch_features: Tensor<T>,
    pub pixel_coords: Vec<[f64; 2]>,
    pub patch_size_px: u32,
    pub fragment_ids: Vec<usize>,
}

impl<T: Real> SlideInput<T> {
    pub fn num_patches(&self) -> usize {
        self.fragment_ids.len()
    }

    pub fn num_fragments(&self) -> usize {
        self.fragment_ids.iter().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self, patch_dim: usize) -> Result<()> {
        let p = self.fragment_ids.len();
        if p == 0 || self.patch_features.is_empty() {
            return Err(Error::EmptyInput("slide has no patches"));
        }
        if self.patch_features.rows() != p || self.pixel_coords.len() != p {
            return Err(Error::dim(
                "slide",
                format!(
                    "{} feature rows, {} coords, {} fragment ids",
                    self.patch_features.rows(),
                    self.pixel_coords.len(),
                    p
                ),
            ));
        }
        if self.patch_features.cols() != patch_dim {
            return Err(Error::dim(
                "slide",
                format!("patch dim {} vs configured {patch_dim}", self.patch_features.cols()),
            ));
        }
        let k = self.num_fragments();
        let mut seen = vec![false; k];
        for &f in &self.fragment_ids {
            seen[f] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract("fragment ids must be contiguous from 0".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> SlideInput<U> {
        SlideInput {
            patch_features: self.patch_features.cast(),
            pixel_coords: self.pixel_coords.clone(),
            patch_size_px: self.patch_size_px,
            fragment_ids: self.fragment_ids.clone(),
        }
    }
}

/// Pixel positions to continuous patch-grid positions.
pub fn pixel_to_patch_coords(pixel_coords: &[[f64; 2]], patch_size_px: u32) -> Result<Vec<[f64; 2]>> {
    if patch_size_px == 0 {
        return Err(Error::Contract("patch size must be positive".into()));
    }
    let s = patch_size_px as f64;
    Ok(pixel_coords.iter().map(|&[x, y]| [x / s, y / s]).collect())
}

/// Per-token fragment, validity and position for one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    /// CLS plus registers.
    pub n_special: usize,
    pub token_fragment: Vec<usize>,
    pub valid_mask: Vec<bool>,
    pub positions: Vec<[f64; 2]>,
}

impl TokenLayout {
    /// Layout for `input` padded with invalid tokens up to `pad_to` patches.
    pub fn for_slide<T: Real>(input: &SlideInput<T>, registers: usize, pad_to: usize) -> Result<Self> {
        let p = input.num_patches();
        if pad_to < p {
            return Err(Error::dim("layout", format!("pad_to {pad_to} < {p} patches")));
        }
        let special = 1 + registers;
        let group = input.num_fragments();
        let coords = pixel_to_patch_coords(&input.pixel_coords, input.patch_size_px)?;
        let total = special + pad_to;
        let mut token_fragment = Vec::with_capacity(total);
        let mut valid_mask = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        for _ in 0..special {
            token_fragment.push(group);
            valid_mask.push(true);
            positions.push([0.0, 0.0]);
        }
        for (&f, &xy) in input.fragment_ids.iter().zip(&coords) {
            token_fragment.push(f);
            valid_mask.push(true);
            positions.push(xy);
        }
        for _ in p..pad_to {
            token_fragment.push(group + 1);
            valid_mask.push(false);
            positions.push([0.0, 0.0]);
        }
        Ok(Self { n_special: special, token_fragment, valid_mask, positions })
    }

    pub fn len(&self) -> usize {
        self.token_fragment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_fragment.is_empty()
    }
}

/// `mask[p][q] = same fragment && valid[p] && valid[q]`, row-major `T x T`.
pub fn build_fragment_mask(layout: &TokenLayout) -> Vec<bool> {
    let t = layout.len();
    let mut mask = vec![false; t * t];
    for p in 0..t {
        for q in 0..t {
            mask[p * t + q] =
                layout.token_fragment[p] == layout.token_fragment[q] && layout.valid_mask[p] && layout.valid_mask[q];
        }
    }
    mask
}

/// Validity-only mask used by NoPE blocks.
pub fn build_padding_mask(layout: &TokenLayout) -> Vec<bool> {
    let t = layout.len();
    let mut mask = vec![false; t * t];
    for p in 0..t {
        for q in 0..t {
            mask[p * t + q] = layout.valid_mask[p] && layout.valid_mask[q];
        }
    }
    mask
}

fn axis_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    let per_axis = head_dim / 4;
    let half = (head_dim / 2) as f64;
    (0..per_axis).map(|j| base.powf(-2.0 * j as f64 / half)).collect()
}

/// Angle of every rotation pair of one head for each position.
fn rope_angles(positions: &[[f64; 2]], head_dim: usize, base: f64) -> Vec<f64> {
    let freqs = axis_frequencies(head_dim, base);
    let mut angles = Vec::with_capacity(positions.len() * head_dim / 2);
    for &[x, y] in positions {
        angles.extend(freqs.iter().map(|w| x * w));
        angles.extend(freqs.iter().map(|w| y * w));
    }
    angles
}

fn rope_tables<T: Real>(positions: &[[f64; 2]], head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let angles = rope_angles(positions, head_dim, base);
    (angles.iter().map(|a| T::lit(a.cos())).collect(), angles.iter().map(|a| T::lit(a.sin())).collect())
}

/// Repeats each row's per-head table once per head.
fn tile_heads<T: Copy>(table: &[T], per_head: usize, heads: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(table.len() * heads);
    for row in table.chunks_exact(per_head.max(1)) {
        for _ in 0..heads {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Rotates one head vector by its 2-D position.
pub fn rope_rotate<T: Real>(vec: &Tensor<T>, pos: [f64; 2], base: f64) -> Result<Tensor<T>> {
    let d = vec.len();
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("head dim {d} is not divisible by 4")));
    }
    let (cos, sin) = rope_tables::<T>(&[pos], d, base);
    let mut out = vec.clone();
    for (p, pair) in out.data_mut().chunks_exact_mut(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos[p] - b * sin[p];
        pair[1] = a * sin[p] + b * cos[p];
    }
    Ok(out)
}

pub fn mean_pool_patches<T: Real>(patch_features: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, d) = (patch_features.rows(), patch_features.cols());
    if p == 0 {
        return Err(Error::EmptyInput("mean pooling over zero patches"));
    }
    let mut acc = vec![T::zero(); d];
    for r in 0..p {
        for (a, &x) in acc.iter_mut().zip(patch_features.row(r)) {
            *a = *a + x;
        }
    }
    let n = T::lit(p as f64);
    Ok(Tensor::vector(acc.into_iter().map(|a| a / n).collect()))
}

/// Padded layouts, masks and rotary tables for a batch of slides.
pub struct BatchLayout<T> {
    pub slides: Vec<TokenLayout>,
    pub tokens_per_slide: usize,
    pub patches_per_slide: usize,
    fragment_masks: Vec<Vec<bool>>,
    padding_masks: Vec<Vec<bool>>,
    cos: Vec<Vec<T>>,
    sin: Vec<Vec<T>>,
    padded: bool,
}

impl<T: Real> BatchLayout<T> {
    pub fn new<U: Real>(inputs: &[SlideInput<U>], cfg: &AggregatorConfig) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("no slides"));
        }
        let p_max = inputs.iter().map(SlideInput::num_patches).max().unwrap_or(0);
        let slides =
            inputs.iter().map(|s| TokenLayout::for_slide(s, cfg.registers, p_max)).collect::<Result<Vec<_>>>()?;
        let hd = cfg.head_dim();
        let (cos, sin) = slides
            .iter()
            .map(|l| {
                let (c, s) = rope_tables::<T>(&l.positions, hd, cfg.rope_base);
                (tile_heads(&c, hd / 2, cfg.heads), tile_heads(&s, hd / 2, cfg.heads))
            })
            .unzip();
        Ok(Self {
            fragment_masks: slides.iter().map(build_fragment_mask).collect(),
            padding_masks: slides.iter().map(build_padding_mask).collect(),
            padded: slides.iter().any(|l| l.valid_mask.iter().any(|v| !v)),
            tokens_per_slide: 1 + cfg.registers + p_max,
            patches_per_slide: p_max,
            slides,
            cos,
            sin,
        })
    }

    fn num_slides(&self) -> usize {
        self.slides.len()
    }

    /// Row index of each slide's CLS token in the stacked token matrix.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.num_slides()).map(|s| s * self.tokens_per_slide).collect()
    }

    fn validity_column(&self, rows_per_slide: usize, width: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.num_slides() * rows_per_slide * width);
        for l in &self.slides {
            for r in 0..rows_per_slide {
                let v = if l.valid_mask[r] { T::one() } else { T::zero() };
                data.extend(std::iter::repeat_n(v, width));
            }
        }
        Tensor::matrix(self.num_slides() * rows_per_slide, width, data).expect("sized")
    }
}

/// One attention call (all heads) of one slide in one block.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub kind: BlockKind,
    pub slide: usize,
    pub heads: usize,
    /// Token index of each query row.
    pub query_tokens: Vec<usize>,
    /// Attention output on the tape; weights via [`AttentionRecord::probs`].
    pub output: Var,
}

impl AttentionRecord {
    /// Post-softmax weights `[queries x tokens]` of `head`.
    pub fn probs<T: Real>(&self, tape: &Tape<'_, T>, head: usize) -> Tensor<T> {
        tape.attention_probs(self.output, head).expect("record points at an attention output")
    }
}

pub struct AggregateOutput {
    /// `[slides x output_dim]`.
    pub embedding: Var,
    pub attention: Vec<AttentionRecord>,
}

fn pname(name: &str) -> String {
    format!("agg_{name}")
}

fn bname(block: usize, name: &str) -> String {
    format!("agg_blk{block}_{name}")
}

/// Fresh aggregator parameters. Residual output projections start at zero.
pub fn init_aggregator_params(cfg: &AggregatorConfig, rng: &mut Stream) -> Result<ParamSet<f32>> {
    let cfg = cfg.resolved()?;
    let d = cfg.model_dim;
    let mut p = ParamSet::new();
    p.insert(pname("in_w"), normal_tensor(rng, &[cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt()));
    p.insert(pname("in_b"), Tensor::zeros(&[d]));
    p.insert(pname("cls"), normal_tensor(rng, &[1, d], 0.02));
    if cfg.registers > 0 {
        p.insert(pname("registers"), normal_tensor(rng, &[cfg.registers, d], 0.02));
    }
    let std = 1.0 / (d as f64).sqrt();
    for b in 0..cfg.depth {
        p.insert(bname(b, "attn_norm"), Tensor::full(&[d], 1.0));
        for w in ["wq", "wk", "wv"] {
            p.insert(bname(b, w), normal_tensor(rng, &[d, d], std));
        }
        p.insert(bname(b, "wo"), Tensor::zeros(&[d, d]));
        init_swiglu(&mut p, rng, &bname(b, "ffn"), d, d * cfg.ffn_mult);
    }
    p.insert(pname("final_norm"), Tensor::full(&[d], 1.0));
    p.insert(pname("head_w"), normal_tensor(rng, &[d, cfg.output_dim], std));
    p.insert(pname("head_b"), Tensor::zeros(&[cfg.output_dim]));
    Ok(p)
}

/// One pre-norm attention + SwiGLU block over the stacked tokens `x`.
///
/// With `cls_only`, only the CLS rows are updated and returned (`[slides x d]`);
/// every token still serves as a key/value.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &AggregatorConfig,
    block: usize,
    kind: BlockKind,
    x: Var,
    layout: &BatchLayout<T>,
    cls_only: bool,
    trace: &mut Vec<AttentionRecord>,
) -> Result<Var> {
    let t = layout.tokens_per_slide;
    let n_slides = layout.num_slides();
    let scale = T::lit(1.0 / (cfg.head_dim() as f64).sqrt());

    let gain = tape.param(params, &bname(block, "attn_norm"))?;
    let u = tape.rms_norm(x, gain)?;
    let cls_rows = layout.cls_rows();
    let uq = if cls_only { tape.gather_rows(u, &cls_rows)? } else { u };
    let q = linear(tape, params, uq, &bname(block, "wq"), None)?;
    let k = linear(tape, params, u, &bname(block, "wk"), None)?;
    let v = linear(tape, params, u, &bname(block, "wv"), None)?;
    let tq = if cls_only { 1 } else { t };

    let dh = cfg.model_dim / 2;
    let mut per_slide = Vec::with_capacity(n_slides);
    for s in 0..n_slides {
        let (mut qs, mut ks, vs) = if n_slides == 1 {
            (q, k, v)
        } else {
            (tape.slice_rows(q, s * tq, tq)?, tape.slice_rows(k, s * t, t)?, tape.slice_rows(v, s * t, t)?)
        };
        let full_mask = match kind {
            BlockKind::Rope => &layout.fragment_masks[s],
            BlockKind::Nope => &layout.padding_masks[s],
        };
        let mask = &full_mask[..tq * t];
        let active = &layout.slides[s].valid_mask[..tq];
        if kind == BlockKind::Rope {
            let (cos, sin) = (&layout.cos[s], &layout.sin[s]);
            qs = tape.rotary(qs, cos[..tq * dh].to_vec(), sin[..tq * dh].to_vec())?;
            ks = tape.rotary(ks, cos.clone(), sin.clone())?;
        }
        let out = tape.multi_head_attention(qs, ks, vs, cfg.heads, scale, mask, Some(active))?;
        trace.push(AttentionRecord {
            block,
            kind,
            slide: s,
            heads: cfg.heads,
            query_tokens: (0..tq).collect(),
            output: out,
        });
        per_slide.push(out);
    }
    let o = if n_slides == 1 { per_slide[0] } else { tape.concat_rows(&per_slide)? };
    let mut a = linear(tape, params, o, &bname(block, "wo"), None)?;
    let validity = if layout.padded { Some(tape.constant(layout.validity_column(tq, cfg.model_dim))?) } else { None };
    if let Some(m) = validity {
        a = tape.mul(a, m)?;
    }
    let xq = if cls_only { tape.gather_rows(x, &cls_rows)? } else { x };
    let h = tape.add(xq, a)?;

    let ffn_gain = tape.param(params, &bname(block, "ffn_norm"))?;
    let n = tape.rms_norm(h, ffn_gain)?;
    let mut f = swiglu(tape, params, &bname(block, "ffn"), n)?;
    if let Some(m) = validity {
        f = tape.mul(f, m)?;
    }
    tape.add(h, f)
}

/// Embeds a batch of slides. Slides are padded to the longest one; padded
/// tokens never influence valid ones.
pub fn aggregate_slides<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &AggregatorConfig,
    inputs: &[SlideInput<T>],
) -> Result<AggregateOutput> {
    let cfg = cfg.resolved()?;
    for s in inputs {
        s.validate(cfg.patch_dim)?;
    }
    let layout = BatchLayout::<T>::new(inputs, &cfg)?;
    let p_max = layout.patches_per_slide;

    let mut stacked = Vec::with_capacity(inputs.len() * p_max * cfg.patch_dim);
    for s in inputs {
        stacked.extend_from_slice(s.patch_features.data());
        stacked.resize(stacked.len() + (p_max - s.num_patches()) * cfg.patch_dim, T::zero());
    }
    let feats = tape.constant(Tensor::matrix(inputs.len() * p_max, cfg.patch_dim, stacked)?)?;
    let proj = linear(tape, params, feats, &pname("in_w"), Some(&pname("in_b")))?;

    let cls = tape.param(params, &pname("cls"))?;
    let regs = if cfg.registers > 0 { Some(tape.param(params, &pname("registers"))?) } else { None };
    let mut parts = Vec::with_capacity(inputs.len() * 3);
    for s in 0..inputs.len() {
        parts.push(cls);
        parts.extend(regs);
        parts.push(if inputs.len() == 1 { proj } else { tape.slice_rows(proj, s * p_max, p_max)? });
    }
    let mut x = tape.concat_rows(&parts)?;
    if layout.padded {
        let m = tape.constant(layout.validity_column(layout.tokens_per_slide, cfg.model_dim))?;
        x = tape.mul(x, m)?;
    }

    let mut trace = Vec::new();
    let depth = cfg.block_schedule.len();
    for (b, &kind) in cfg.block_schedule.iter().enumerate() {
        x = attention_block(tape, params, &cfg, b, kind, x, &layout, b + 1 == depth, &mut trace)?;
    }
    let cls_state = if depth == 0 { tape.gather_rows(x, &layout.cls_rows())? } else { x };
    let gain = tape.param(params, &pname("final_norm"))?;
    let normed = tape.rms_norm(cls_state, gain)?;
    let embedding = linear(tape, params, normed, &pname("head_w"), Some(&pname("head_b")))?;
    Ok(AggregateOutput { embedding, attention: trace })
}

/// Slide embedding `[output_dim]` of one slide, forward only.
pub fn aggregate_slide<T: Real>(
    input: &SlideInput<T>,
    params: &ParamSet<T>,
    cfg: &AggregatorConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let out = aggregate_slides(&mut tape, params, cfg, std::slice::from_ref(input))?;
    let e = tape.value(out.embedding).clone();
    let n = e.len();
    e.reshape(vec![n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_finite_diff;

    fn tiny_cfg(depth: usize) -> AggregatorConfig {
        AggregatorConfig {
            patch_dim: 3,
            depth,
            heads: 2,
            model_dim: 8,
            registers: 1,
            rope_base: 100.0,
            output_dim: 4,
            ffn_mult: 2,
            block_schedule: Vec::new(),
        }
    }

    /// Random init with the zero-initialised projections made non-zero, so
    /// every path carries signal.
    fn live_params(cfg: &AggregatorConfig, seed: u64) -> ParamSet<f64> {
        let mut rng = Stream::new(seed, 0);
        let mut p = init_aggregator_params(cfg, &mut rng).unwrap().cast::<f64>();
        for (name, t) in p.iter_mut() {
            if name.ends_with("_wo") || name.ends_with("_w_down") || name.ends_with("_norm") {
                for v in t.data_mut() {
                    *v += 0.3 * rng.normal();
                }
            }
        }
        p
    }

    fn slide(seed: u64, frags: &[usize], patch_dim: usize) -> SlideInput<f64> {
        let mut rng = Stream::new(seed, 9);
        let p = frags.len();
        SlideInput {
            patch_features: Tensor::matrix(p, patch_dim, rng.normal_vec(p * patch_dim, 1.0)).unwrap(),
            pixel_coords: (0..p)
                .map(|i| [256.0 * (i % 3) as f64 + 256.0 * 7.0 * frags[i] as f64, 256.0 * (i / 3) as f64])
                .collect(),
            patch_size_px: 256,
            fragment_ids: frags.to_vec(),
        }
    }

    #[test]
    fn pixel_coordinates_are_divided_by_patch_size() {
        let c = pixel_to_patch_coords(&[[512.0, 1024.0], [0.0, 0.0]], 256).unwrap();
        assert_eq!(c, vec![[2.0, 4.0], [0.0, 0.0]]);
        assert_eq!(pixel_to_patch_coords(&[[100.0, 300.0]], 200).unwrap(), vec![[0.5, 1.5]]);
        assert!(matches!(pixel_to_patch_coords(&[[1.0, 1.0]], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn rope_examples() {
        let v = Tensor::vector(vec![0.3f64, -1.0, 2.0, 0.7, 0.1, 0.0, -0.4, 1.1]);
        assert_eq!(rope_rotate(&v, [0.0, 0.0], 10000.0).unwrap(), v);
        let e = Tensor::vector(vec![1.0f64, 0.0, 1.0, 0.0]);
        let half_pi = std::f64::consts::FRAC_PI_2;
        let r = rope_rotate(&e, [half_pi, half_pi], 10000.0).unwrap();
        assert!(r.max_abs_diff(&Tensor::vector(vec![0.0, 1.0, 0.0, 1.0])) < 1e-6);
        assert!(matches!(rope_rotate(&Tensor::vector(vec![1.0f64; 6]), [1.0, 1.0], 10.0), Err(Error::Config(_))));
    }

    #[test]
    fn rope_depends_on_relative_offset_only() {
        let mut rng = Stream::new(5, 0);
        for _ in 0..20 {
            let q = Tensor::vector(rng.normal_vec(8, 1.0));
            let k = Tensor::vector(rng.normal_vec(8, 1.0));
            let (a, b) = (rng.normal() * 10.0, rng.normal() * 10.0);
            let dot = |x: &Tensor<f64>, y: &Tensor<f64>| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&rope_rotate(&q, [a, 0.0], 10000.0).unwrap(), &rope_rotate(&k, [b, 0.0], 10000.0).unwrap());
            let rhs = dot(&rope_rotate(&q, [a - b, 0.0], 10000.0).unwrap(), &k);
            assert!((lhs - rhs).abs() < 1e-6);
            let r = rope_rotate(&q, [a, b], 10000.0).unwrap();
            assert!((r.norm() - q.norm()).abs() < 1e-6);
        }
    }

    #[test]
    fn fragment_mask_examples() {
        // CLS + 1 register, patches in fragments [A, A, B].
        let s = slide(1, &[0, 0, 1], 3);
        let layout = TokenLayout::for_slide(&s, 1, 3).unwrap();
        let m = build_fragment_mask(&layout);
        let allowed: Vec<(usize, usize)> =
            (0..5).flat_map(|p| (0..5).map(move |q| (p, q))).filter(|&(p, q)| m[p * 5 + q]).collect();
        assert_eq!(allowed, vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3), (4, 4)]);

        let single = slide(2, &[0, 0, 0], 3);
        let layout = TokenLayout::for_slide(&single, 1, 3).unwrap();
        let m = build_fragment_mask(&layout);
        for p in 0..5 {
            for q in 0..5 {
                assert_eq!(m[p * 5 + q], (p < 2) == (q < 2));
            }
        }

        let layout = TokenLayout::for_slide(&single, 1, 4).unwrap();
        let m = build_fragment_mask(&layout);
        for i in 0..6 {
            assert!(!m[5 * 6 + i] && !m[i * 6 + 5]);
        }
    }

    #[test]
    fn zero_update_block_is_identity() {
        let cfg = tiny_cfg(1).resolved().unwrap();
        let mut rng = Stream::new(3, 0);
        let params = init_aggregator_params(&cfg, &mut rng).unwrap().cast::<f64>();
        let s = slide(3, &[0, 1, 1], 3);
        let layout = BatchLayout::<f64>::new(std::slice::from_ref(&s), &cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(5, 8, rng.normal_vec(40, 1.0)).unwrap()).unwrap();
        for kind in [BlockKind::Rope, BlockKind::Nope] {
            let y = attention_block(&mut tape, &params, &cfg, 0, kind, x, &layout, false, &mut Vec::new()).unwrap();
            assert_eq!(tape.value(y), tape.value(x));
        }
    }

    #[test]
    fn cls_only_block_matches_full_block_rows() {
        let cfg = tiny_cfg(1).resolved().unwrap();
        let params = live_params(&cfg, 6);
        let slides = [slide(3, &[0, 1, 1], 3), slide(5, &[0, 0, 1, 2], 3)];
        let layout = BatchLayout::<f64>::new(&slides, &cfg).unwrap();
        let t = layout.tokens_per_slide;
        let mut rng = Stream::new(8, 0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2 * t, 8, rng.normal_vec(2 * t * 8, 1.0)).unwrap()).unwrap();
        for kind in [BlockKind::Rope, BlockKind::Nope] {
            let full = attention_block(&mut tape, &params, &cfg, 0, kind, x, &layout, false, &mut Vec::new()).unwrap();
            let cls = attention_block(&mut tape, &params, &cfg, 0, kind, x, &layout, true, &mut Vec::new()).unwrap();
            let expected = tape.value(full).gather_rows(&layout.cls_rows());
            assert!(tape.value(cls).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn nope_block_ignores_coordinates() {
        let cfg = tiny_cfg(1).resolved().unwrap();
        let params = live_params(&cfg, 4);
        let s = slide(4, &[0, 0, 1, 1], 3);
        let mut shifted = s.clone();
        for c in &mut shifted.pixel_coords {
            c[0] += 999.0;
            c[1] -= 123.0;
        }
        let run = |input: &SlideInput<f64>| {
            let layout = BatchLayout::<f64>::new(std::slice::from_ref(input), &cfg).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(6, 8, Stream::new(8, 0).normal_vec(48, 1.0)).unwrap()).unwrap();
            let y = attention_block(&mut tape, &params, &cfg, 0, BlockKind::Nope, x, &layout, false, &mut Vec::new())
                .unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(&s), run(&shifted));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rope_block_never_attends_across_fragments() {
        let cfg = tiny_cfg(2).resolved().unwrap();
        let params = live_params(&cfg, 6);
        let s = slide(6, &[0, 1, 0, 2, 1, 2, 0], 3);
        let mut tape = Tape::new();
        let out = aggregate_slides(&mut tape, &params, &cfg, std::slice::from_ref(&s)).unwrap();
        let layout = TokenLayout::for_slide(&s, cfg.registers, 7).unwrap();
        let t = layout.len();
        let mut checked = 0;
        for rec in out.attention.iter().filter(|r| r.kind == BlockKind::Rope) {
            for h in 0..rec.heads {
                let probs = rec.probs(&tape, h);
                for (qi, &p) in rec.query_tokens.iter().enumerate() {
                    for q in 0..t {
                        if layout.token_fragment[p] != layout.token_fragment[q] {
                            assert_eq!(probs.at(qi, q), 0.0);
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn depth_zero_ignores_patches() {
        let cfg = tiny_cfg(0);
        let params = live_params(&cfg, 7);
        let a = aggregate_slide(&slide(1, &[0, 0], 3), &params, &cfg).unwrap();
        let b = aggregate_slide(&slide(2, &[0, 1, 1, 0], 3), &params, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4]);
    }

    #[test]
    fn batched_matches_unbatched() {
        let cfg = tiny_cfg(3);
        let params = live_params(&cfg, 8);
        let slides = vec![slide(1, &[0, 0, 1], 3), slide(2, &[0, 1, 1, 2, 2, 0], 3), slide(3, &[0], 3)];
        let mut tape = Tape::new();
        let out = aggregate_slides(&mut tape, &params, &cfg, &slides).unwrap();
        let batched = tape.value(out.embedding).clone();
        for (i, s) in slides.iter().enumerate() {
            let single = aggregate_slide(s, &params, &cfg).unwrap();
            for j in 0..4 {
                assert!((batched.at(i, j) - single.data()[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_and_malformed_slides_are_rejected() {
        let cfg = tiny_cfg(1);
        let params = live_params(&cfg, 9);
        let empty = SlideInput::<f64> {
            patch_features: Tensor::zeros(&[0, 3]),
            pixel_coords: vec![],
            patch_size_px: 256,
            fragment_ids: vec![],
        };
        assert!(matches!(aggregate_slide(&empty, &params, &cfg), Err(Error::EmptyInput(_))));
        let mut gap = slide(1, &[0, 2], 3);
        assert!(matches!(aggregate_slide(&gap, &params, &cfg), Err(Error::Contract(_))));
        gap.fragment_ids = vec![0];
        assert!(matches!(aggregate_slide(&gap, &params, &cfg), Err(Error::Dimension { .. })));
        let bad = AggregatorConfig { model_dim: 12, heads: 2, ..tiny_cfg(1) };
        assert!(matches!(bad.resolved(), Err(Error::Config(_))));
    }

    #[test]
    fn mean_pool_examples() {
        let x = Tensor::matrix(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean_pool_patches(&x).unwrap().data(), &[2.0, 3.0]);
        let one = Tensor::matrix(1, 3, vec![0.5f64, -1.0, 2.0]).unwrap();
        assert_eq!(mean_pool_patches(&one).unwrap().data(), one.data());
        assert!(mean_pool_patches(&Tensor::<f64>::zeros(&[0, 3])).is_err());
        let mut rng = Stream::new(11, 0);
        let big = Tensor::matrix(100, 5, rng.normal_vec(500, 1.0)).unwrap();
        let pooled = mean_pool_patches(&big).unwrap();
        for j in 0..5 {
            let mut acc = 0.0;
            for r in 0..100 {
                acc += big.at(r, j);
            }
            assert!((pooled.data()[j] - acc / 100.0).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregator_gradients_match_finite_differences() {
        let cfg = tiny_cfg(2);
        let params = live_params(&cfg, 12);
        let s = slide(12, &[0, 0, 1, 1, 1, 0], 3);
        let w: Vec<f64> = Stream::new(13, 0).normal_vec(4, 1.0);
        let report = grad_check_finite_diff(
            |tape, p| {
                let out = aggregate_slides(tape, p, &cfg, std::slice::from_ref(&s))?;
                let wv = tape.constant(Tensor::matrix(1, 4, w.clone())?)?;
                let prod = tape.mul(out.embedding, wv)?;
                tape.sum(prod)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
