//! Deterministic synthetic multimodal cohorts.
//!
//! Every sample draws a class `o`, a latent `z = mu_o + noise * eps`, a
//! multi-fragment slide, omics vectors, a biomarker bit and a censored
//! survival time, all as fixed functions of `z`. Global quantities (class
//! means, mixing matrices, texture) come from one seeded stream; each sample
//! draws from its own stream, so generation order never matters.
//!
//! On disk:
//!
//! ```text
//! <out>/manifest.json
//! <out>/cohort/<sample_id>/<modality>.paln
//! <out>/cohort/<sample_id>/coords.paln      [P x 2] pixel positions
//! <out>/cohort/<sample_id>/fragments.paln   [P] fragment ids
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::frope::SlideInput;
use crate::omics::{ModalityId, NUM_MODALITIES};
use crate::rng::{streams, Stream};
use crate::siglip::AvailabilityRow;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const TEXTURE_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Availability {
    pub wsi: f64,
    pub rna: f64,
    pub snp: f64,
    pub cnv: f64,
    pub meth: f64,
}

impl Default for Availability {
    fn default() -> Self {
        Self { wsi: 0.95, rna: 0.6, snp: 0.6, cnv: 0.6, meth: 0.6 }
    }
}

impl Availability {
    pub fn get(&self, m: ModalityId) -> f64 {
        match m {
            ModalityId::Wsi => self.wsi,
            ModalityId::Rna => self.rna,
            ModalityId::Snp => self.snp,
            ModalityId::Cnv => self.cnv,
            ModalityId::Meth => self.meth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub fragments_min: usize,
    pub fragments_max: usize,
    pub fragment_size_min: usize,
    pub fragment_size_max: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub patch_size_px: u32,
    pub patch_dim: usize,
    /// Raw gene count fed to the frozen RNA stub.
    pub rna_genes: usize,
    pub snp_dim: usize,
    pub cnv_dim: usize,
    pub meth_dim: usize,
    pub availability: Availability,
    pub noise: f64,
    /// Amplitude of the smooth coordinate texture added to patch features.
    pub texture_scale: f64,
    pub survival_gamma: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            n_classes: 4,
            latent_dim: 16,
            seed: 42,
            fragments_min: 1,
            fragments_max: 3,
            fragment_size_min: 20,
            fragment_size_max: 60,
            grid_height: 64,
            grid_width: 64,
            patch_size_px: 256,
            patch_dim: 48,
            rna_genes: 512,
            snp_dim: 128,
            cnv_dim: 128,
            meth_dim: 256,
            availability: Availability::default(),
            noise: 0.1,
            texture_scale: 0.5,
            survival_gamma: 0.5,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_classes == 0 || self.latent_dim == 0 || self.patch_dim == 0 {
            return bad("class count, latent dim and patch dim must be >= 1");
        }
        if self.fragments_min == 0 || self.fragments_min > self.fragments_max {
            return bad("fragment count range is empty");
        }
        if self.fragment_size_min == 0 || self.fragment_size_min > self.fragment_size_max {
            return bad("fragment size range is empty");
        }
        if self.grid_height == 0 || self.grid_width == 0 || self.patch_size_px == 0 {
            return bad("grid extent and patch size must be positive");
        }
        if [self.rna_genes, self.snp_dim, self.cnv_dim, self.meth_dim].contains(&0) {
            return bad("omics dims must be >= 1");
        }
        for m in ModalityId::ALL {
            let p = self.availability.get(m);
            if !(0.0..=1.0).contains(&p) {
                return bad("availability probabilities must lie in [0, 1]");
            }
        }
        let mut top = [0.0f64; NUM_MODALITIES];
        for m in ModalityId::ALL {
            top[m.code()] = self.availability.get(m);
        }
        top.sort_by(|a, b| b.total_cmp(a));
        if top[1] <= 0.0 {
            return bad("at least two modalities need positive availability");
        }
        if self.noise < 0.0 || self.texture_scale < 0.0 {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }

    pub fn modality_dim(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::Wsi => self.patch_dim,
            ModalityId::Rna => self.rna_genes,
            ModalityId::Snp => self.snp_dim,
            ModalityId::Cnv => self.cnv_dim,
            ModalityId::Meth => self.meth_dim,
        }
    }
}

/// Boolean tissue occupancy, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![false; height * width] }
    }

    pub fn from_cells(height: usize, width: usize, occupied: &[(usize, usize)]) -> Self {
        let mut g = Self::empty(height, width);
        for &(r, c) in occupied {
            g.cells[r * width + c] = true;
        }
        g
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c]
    }

    fn neighbors(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
        let (h, w) = (self.height, self.width);
        [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)].into_iter().filter_map(move |(dr, dc)| {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
        })
    }
}

/// Connected-component labels of an occupancy grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FragmentLabels {
    /// Row-major; `None` for empty cells.
    pub labels: Vec<Option<usize>>,
    pub count: usize,
}

/// 4-connected components, numbered in row-major first-visit order.
pub fn label_fragments(grid: &OccupancyGrid) -> Result<FragmentLabels> {
    if !grid.cells.iter().any(|&c| c) {
        return Err(Error::EmptyInput("occupancy grid has no tissue"));
    }
    let w = grid.width;
    let mut labels = vec![None; grid.cells.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..grid.cells.len() {
        if !grid.cells[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(count);
        queue.push_back((start / w, start % w));
        while let Some((r, c)) = queue.pop_front() {
            for (nr, nc) in grid.neighbors(r, c) {
                let idx = nr * w + nc;
                if grid.cells[idx] && labels[idx].is_none() {
                    labels[idx] = Some(count);
                    queue.push_back((nr, nc));
                }
            }
        }
        count += 1;
    }
    Ok(FragmentLabels { labels, count })
}

/// Grown tissue: the grid and each fragment's cells in growth order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FragmentLayout {
    pub grid: OccupancyGrid,
    pub fragments: Vec<Vec<(usize, usize)>>,
}

/// Grows a random number of mutually non-adjacent fragments by randomized
/// frontier expansion.
pub fn grow_fragments(cfg: &CohortConfig, rng: &mut Stream) -> Result<FragmentLayout> {
    let k = rng.range_inclusive(cfg.fragments_min, cfg.fragments_max);
    let sizes: Vec<usize> = (0..k).map(|_| rng.range_inclusive(cfg.fragment_size_min, cfg.fragment_size_max)).collect();
    grow_fragments_with_sizes(cfg.grid_height, cfg.grid_width, &sizes, rng)
}

pub fn grow_fragments_with_sizes(
    height: usize,
    width: usize,
    sizes: &[usize],
    rng: &mut Stream,
) -> Result<FragmentLayout> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        if let Some(layout) = try_grow(height, width, sizes, rng) {
            return Ok(layout);
        }
    }
    Err(Error::Capacity(format!(
        "could not place fragments of sizes {sizes:?} on a {height}x{width} grid in {MAX_PLACEMENT_ATTEMPTS} attempts"
    )))
}

fn try_grow(height: usize, width: usize, sizes: &[usize], rng: &mut Stream) -> Option<FragmentLayout> {
    let mut grid = OccupancyGrid::empty(height, width);
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    let mut fragments = Vec::with_capacity(sizes.len());
    // A cell may join fragment `k` if it is empty and touches no other fragment.
    let allowed = |owner: &[Option<usize>], grid: &OccupancyGrid, r: usize, c: usize, k: usize| {
        owner[r * width + c].is_none()
            && grid.neighbors(r, c).all(|(nr, nc)| owner[nr * width + nc].is_none_or(|o| o == k))
    };
    for (k, &size) in sizes.iter().enumerate() {
        let candidates: Vec<(usize, usize)> = (0..height * width)
            .map(|i| (i / width, i % width))
            .filter(|&(r, c)| allowed(&owner, &grid, r, c, k))
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let seed = candidates[rng.below(candidates.len())];
        let mut cells = vec![seed];
        owner[seed.0 * width + seed.1] = Some(k);
        grid.cells[seed.0 * width + seed.1] = true;
        let mut in_frontier = vec![false; height * width];
        let mut frontier = Vec::new();
        let push_frontier = |frontier: &mut Vec<(usize, usize)>,
                             in_frontier: &mut Vec<bool>,
                             grid: &OccupancyGrid,
                             r: usize,
                             c: usize| {
            for (nr, nc) in grid.neighbors(r, c) {
                let i = nr * width + nc;
                if !in_frontier[i] && !grid.cells[i] {
                    in_frontier[i] = true;
                    frontier.push((nr, nc));
                }
            }
        };
        push_frontier(&mut frontier, &mut in_frontier, &grid, seed.0, seed.1);
        while cells.len() < size {
            let mut picked = None;
            while !frontier.is_empty() {
                let (r, c) = frontier.swap_remove(rng.below(frontier.len()));
                if allowed(&owner, &grid, r, c, k) {
                    picked = Some((r, c));
                    break;
                }
            }
            let (r, c) = picked?;
            owner[r * width + c] = Some(k);
            grid.cells[r * width + c] = true;
            cells.push((r, c));
            push_frontier(&mut frontier, &mut in_frontier, &grid, r, c);
        }
        fragments.push(cells);
    }
    Some(FragmentLayout { grid, fragments })
}

/// Fixed quantities shared by all samples of a cohort.
struct CohortModel {
    class_means: Vec<Vec<f64>>,
    wsi_mix: Vec<Vec<f64>>,
    texture_mix: Vec<Vec<f64>>,
    texture_freq: Vec<[f64; 3]>,
    omics_mix: BTreeMap<ModalityId, Vec<Vec<f64>>>,
    biomarker_w: Vec<f64>,
}

fn gaussian_matrix(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| rng.normal_vec(cols, std)).collect()
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

impl CohortModel {
    fn new(cfg: &CohortConfig) -> Self {
        let mut rng = Stream::new(cfg.seed, streams::COHORT_GLOBAL);
        let dz = cfg.latent_dim;
        let zs = 1.0 / (dz as f64).sqrt();
        let class_means = gaussian_matrix(&mut rng, cfg.n_classes, dz, 1.0);
        let wsi_mix = gaussian_matrix(&mut rng, cfg.patch_dim, dz, zs);
        let texture_mix = gaussian_matrix(&mut rng, cfg.patch_dim, TEXTURE_RANK, 1.0 / (TEXTURE_RANK as f64).sqrt());
        let texture_freq = (0..TEXTURE_RANK)
            .map(|_| [(rng.uniform() - 0.5) * 0.6, (rng.uniform() - 0.5) * 0.6, rng.uniform() * std::f64::consts::TAU])
            .collect();
        let mut omics_mix = BTreeMap::new();
        for m in ModalityId::OMICS {
            omics_mix.insert(m, gaussian_matrix(&mut rng, cfg.modality_dim(m), dz, zs));
        }
        let biomarker_w = rng.normal_vec(dz, 1.0);
        Self { class_means, wsi_mix, texture_mix, texture_freq, omics_mix, biomarker_w }
    }

    fn texture(&self, row: f64, col: f64) -> Vec<f64> {
        let t: Vec<f64> = self.texture_freq.iter().map(|&[fx, fy, ph]| (fx * col + fy * row + ph).sin()).collect();
        matvec(&self.texture_mix, &t)
    }
}

/// Class and latent of sample `index`, as drawn by the generator.
pub fn sample_latent(cfg: &CohortConfig, index: usize) -> (usize, Vec<f64>) {
    let model = CohortModel::new(cfg);
    let mut rng = sample_stream(cfg, index);
    draw_latent(cfg, &model, &mut rng)
}

fn sample_stream(cfg: &CohortConfig, index: usize) -> Stream {
    Stream::new(cfg.seed, streams::COHORT_SAMPLE_BASE + index as u64)
}

fn draw_latent(cfg: &CohortConfig, model: &CohortModel, rng: &mut Stream) -> (usize, Vec<f64>) {
    let class = rng.below(cfg.n_classes);
    let z = model.class_means[class].iter().map(|&mu| mu + cfg.noise * rng.normal()).collect();
    (class, z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Survival {
    pub time: f64,
    pub event: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideFiles {
    pub coords: String,
    pub fragments: String,
    pub patch_size_px: u32,
    pub n_patches: usize,
    pub n_fragments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub class_label: usize,
    pub biomarker: u8,
    pub survival: Survival,
    pub available: Vec<ModalityId>,
    pub files: BTreeMap<ModalityId, String>,
    pub slide: Option<SlideFiles>,
}

impl SampleEntry {
    pub fn availability_row(&self) -> AvailabilityRow {
        let mut row = [false; NUM_MODALITIES];
        for m in &self.available {
            row[m.code()] = true;
        }
        row
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub format_version: u32,
    pub config: CohortConfig,
    pub samples: Vec<SampleEntry>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Contract(format!("unsupported manifest version {}", self.format_version)));
        }
        for s in &self.samples {
            if s.available.len() < 2 {
                return Err(Error::Contract(format!("sample {} lists fewer than two modalities", s.id)));
            }
            for m in &s.available {
                if !s.files.contains_key(m) {
                    return Err(Error::Contract(format!("sample {} has no file for {m}", s.id)));
                }
            }
            if s.available.contains(&ModalityId::Wsi) != s.slide.is_some() {
                return Err(Error::Contract(format!("sample {} slide metadata disagrees with availability", s.id)));
            }
            if !(s.survival.time > 0.0) {
                return Err(Error::Contract(format!("sample {} has non-positive survival time", s.id)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Writes a cohort under `out` and returns its manifest.
pub fn generate_cohort(cfg: &CohortConfig, out: &Path) -> Result<CohortManifest> {
    cfg.validate()?;
    let model = CohortModel::new(cfg);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for index in 0..cfg.n_samples {
        samples.push(generate_sample(cfg, &model, index, out)?);
    }
    let manifest = CohortManifest { format_version: MANIFEST_VERSION, config: cfg.clone(), samples };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn generate_sample(cfg: &CohortConfig, model: &CohortModel, index: usize, out: &Path) -> Result<SampleEntry> {
    let mut rng = sample_stream(cfg, index);
    let id = sample_id(index);
    let (class_label, z) = draw_latent(cfg, model, &mut rng);

    let available: Vec<ModalityId> = loop {
        let draw: Vec<ModalityId> =
            ModalityId::ALL.into_iter().filter(|&m| rng.bernoulli(cfg.availability.get(m))).collect();
        if draw.len() >= 2 {
            break draw;
        }
    };

    let rel = |name: &str| format!("cohort/{id}/{name}.paln");
    let mut files = BTreeMap::new();
    let mut slide = None;
    if available.contains(&ModalityId::Wsi) {
        let layout = grow_fragments(cfg, &mut rng)?;
        let labels = label_fragments(&layout.grid)?;
        let signal = matvec(&model.wsi_mix, &z);
        let (mut feats, mut coords, mut frags) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..cfg.grid_height {
            for c in 0..cfg.grid_width {
                let Some(frag) = labels.labels[r * cfg.grid_width + c] else { continue };
                let tex = model.texture(r as f64, c as f64);
                for d in 0..cfg.patch_dim {
                    let v = signal[d] + cfg.texture_scale * tex[d] + cfg.noise * rng.normal();
                    feats.push(v as f32);
                }
                coords.push((c * cfg.patch_size_px as usize) as f32);
                coords.push((r * cfg.patch_size_px as usize) as f32);
                frags.push(frag as f32);
            }
        }
        let p = frags.len();
        write_tensor(&out.join(rel("wsi")), &Tensor::matrix(p, cfg.patch_dim, feats)?)?;
        write_tensor(&out.join(rel("coords")), &Tensor::matrix(p, 2, coords)?)?;
        write_tensor(&out.join(rel("fragments")), &Tensor::vector(frags))?;
        files.insert(ModalityId::Wsi, rel("wsi"));
        slide = Some(SlideFiles {
            coords: rel("coords"),
            fragments: rel("fragments"),
            patch_size_px: cfg.patch_size_px,
            n_patches: p,
            n_fragments: labels.count,
        });
    }
    for m in ModalityId::OMICS {
        if !available.contains(&m) {
            continue;
        }
        let x: Vec<f32> = matvec(&model.omics_mix[&m], &z)
            .into_iter()
            .map(|v| (v.tanh() + cfg.noise * rng.normal()) as f32)
            .collect();
        write_tensor(&out.join(rel(m.name())), &Tensor::vector(x))?;
        files.insert(m, rel(m.name()));
    }

    let biomarker = u8::from(model.biomarker_w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() > 0.0);
    let rate = (z[0] * cfg.survival_gamma).exp();
    let event_time = -rng.uniform_open().ln() / rate;
    let median = std::f64::consts::LN_2 / rate;
    let censor_time = rng.uniform_open() * 2.0 * median;
    let survival = Survival { time: event_time.min(censor_time), event: event_time <= censor_time };
    Ok(SampleEntry { id, class_label, biomarker, survival, available, files, slide })
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CohortManifest = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
    manifest.validate()?;
    Ok(manifest)
}

/// One sample materialized in memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub class_label: usize,
    pub biomarker: u8,
    pub survival: Survival,
    pub available: AvailabilityRow,
    pub slide: Option<SlideInput<f32>>,
    /// Raw omics vectors as `[1 x dim]` rows.
    pub omics: BTreeMap<ModalityId, Tensor<f32>>,
}

pub fn load_sample(dir: &Path, manifest: &CohortManifest, id: &str) -> Result<LoadedSample> {
    let entry = manifest
        .samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Contract(format!("unknown sample `{id}`")))?;
    let path = |rel: &str| -> PathBuf { dir.join(rel) };
    let slide = match &entry.slide {
        Some(sf) => {
            let feats: Tensor<f32> = read_tensor(&path(&entry.files[&ModalityId::Wsi]))?;
            let coords: Tensor<f32> = read_tensor(&path(&sf.coords))?;
            let frags: Tensor<f32> = read_tensor(&path(&sf.fragments))?;
            if coords.rows() != feats.rows() || frags.len() != feats.rows() || coords.cols() != 2 {
                return Err(Error::Contract(format!("sample {id}: slide tensors disagree in length")));
            }
            Some(SlideInput {
                pixel_coords: (0..coords.rows()).map(|r| [coords.at(r, 0) as f64, coords.at(r, 1) as f64]).collect(),
                fragment_ids: frags.data().iter().map(|&f| f as usize).collect(),
                patch_features: feats,
                patch_size_px: sf.patch_size_px,
            })
        }
        None => None,
    };
    let mut omics = BTreeMap::new();
    for m in ModalityId::OMICS {
        if let Some(rel) = entry.files.get(&m) {
            let v: Tensor<f32> = read_tensor(&path(rel))?;
            let n = v.len();
            omics.insert(m, v.reshape(vec![1, n])?);
        }
    }
    Ok(LoadedSample {
        id: entry.id.clone(),
        class_label: entry.class_label,
        biomarker: entry.biomarker,
        survival: entry.survival,
        available: entry.availability_row(),
        slide,
        omics,
    })
}

/// Loads every sample in manifest order.
pub fn load_cohort(dir: &Path) -> Result<(CohortManifest, Vec<LoadedSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest.samples.iter().map(|s| load_sample(dir, &manifest, &s.id)).collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
