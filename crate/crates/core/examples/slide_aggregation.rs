//! Grows a tissue layout with several fragments, labels the pieces by
//! connected components and aggregates the patches into one slide embedding.
//!
//! The output also shows the two geometric properties of the aggregator:
//! moving a whole fragment across the slide and shuffling patch order both
//! leave the embedding where it was.

use mmalign::cohort::{grow_fragments_with_sizes, label_fragments};
use mmalign::frope::{aggregate_slide, mean_pool_patches, AggregatorConfig, SlideInput, TokenLayout};
use mmalign::rng::Stream;
use mmalign::verify::perturbed_aggregator_params;
use mmalign::{Result, Tensor};

const SIDE: usize = 40;

fn slide_from_grid(rng: &mut Stream, patch_dim: usize) -> Result<SlideInput<f32>> {
    let layout = grow_fragments_with_sizes(SIDE, SIDE, &[30, 18, 9], rng)?;
    let labels = label_fragments(&layout.grid)?;
    println!("grew {} fragments, labeler found {}", layout.fragments.len(), labels.count);
    for r in (0..SIDE).step_by(2) {
        let line: String =
            (0..SIDE).map(|c| labels.labels[r * SIDE + c].map_or('.', |f| (b'A' + f as u8) as char)).collect();
        if line.chars().any(|ch| ch != '.') {
            println!("  {line}");
        }
    }
    let (mut coords, mut ids) = (Vec::new(), Vec::new());
    for (i, label) in labels.labels.iter().enumerate() {
        if let Some(f) = label {
            coords.push([(i % SIDE) as f64 * 256.0, (i / SIDE) as f64 * 256.0]);
            ids.push(*f);
        }
    }
    let p = ids.len();
    let feats = rng.normal_vec(p * patch_dim, 1.0).into_iter().map(|v| v as f32).collect();
    Ok(SlideInput {
        patch_features: Tensor::matrix(p, patch_dim, feats)?,
        pixel_coords: coords,
        patch_size_px: 256,
        fragment_ids: ids,
    })
}

fn relative_change(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.max_abs_diff(b) / a.norm()
}

fn main() -> Result<()> {
    let cfg = AggregatorConfig::default().resolved()?;
    let params = perturbed_aggregator_params(&cfg, 3)?;
    let mut rng = Stream::new(11, 0);
    let slide = slide_from_grid(&mut rng, cfg.patch_dim)?;

    let layout = TokenLayout::for_slide(&slide, cfg.registers, slide.num_patches())?;
    println!(
        "{} patches, {} special tokens, {} tokens in total, schedule {:?}",
        slide.num_patches(),
        layout.n_special,
        layout.len(),
        cfg.block_schedule
    );

    let emb = aggregate_slide(&slide, &params, &cfg)?;
    println!("slide embedding [{} x {}], norm {:.4}", emb.rows(), emb.cols(), emb.norm());
    let pooled = mean_pool_patches(&slide.patch_features)?;
    println!("mean-pool baseline width {}", pooled.cols());

    let mut moved = slide.clone();
    for (xy, &f) in moved.pixel_coords.iter_mut().zip(&slide.fragment_ids) {
        if f == 1 {
            xy[0] += 256.0 * 17.0;
            xy[1] -= 256.0 * 5.0;
        }
    }
    let after_move = aggregate_slide(&moved, &params, &cfg)?;
    println!("fragment B translated: relative change {:.2e}", relative_change(&emb, &after_move));

    let mut order: Vec<usize> = (0..slide.num_patches()).collect();
    rng.shuffle(&mut order);
    let shuffled = SlideInput {
        patch_features: slide.patch_features.gather_rows(&order),
        pixel_coords: order.iter().map(|&i| slide.pixel_coords[i]).collect(),
        patch_size_px: slide.patch_size_px,
        fragment_ids: order.iter().map(|&i| slide.fragment_ids[i]).collect(),
    };
    let after_shuffle = aggregate_slide(&shuffled, &params, &cfg)?;
    println!("patches shuffled: max abs change {:.2e}", emb.max_abs_diff(&after_shuffle));
    Ok(())
}
