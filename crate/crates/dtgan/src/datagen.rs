//! Procedural ground-truth dataset (value-noise backgrounds, polyline
//! scratches, soft blobs) plus folder ingestion and the balancing sampler.

use crate::domain::{DomainSchema, ImageTensor, LabeledSample, ProductSchema};
use crate::error::{DtganError, Result};
use crate::rng::{rng_from, tag};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DtganError::Dataset(format!("unknown split folder {other:?}"))),
        }
    }
}

/// Background texture recipe for one product.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextureParams {
    /// Mid gray level in [0,1].
    pub base: f64,
    /// Value-noise octave count.
    pub octaves: u32,
    /// 0 = isotropic, 1 = horizontal grain, 2 = vertical grain.
    pub grain_axis: u8,
    pub grain_strength: f64,
    /// Per-channel tint factors.
    pub tint: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScratchParams {
    pub count: (usize, usize),
    /// Polyline length range, as a fraction of the image side.
    pub length_frac: (f64, f64),
    /// Stroke width range, fraction of the image side.
    pub width_frac: (f64, f64),
    /// Darkening strength range, subset of [0,1]: the covered background is
    /// scaled by (1 - alpha * strength), so every defect keeps local contrast.
    pub intensity: (f64, f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpotParams {
    pub count: (usize, usize),
    /// Blob radius range, fraction of the image side.
    pub radius_frac: (f64, f64),
    /// Darkening strength range, subset of [0,1].
    pub intensity: (f64, f64),
}

/// Full recipe for one procedural dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProceduralSpec {
    pub image_size: usize,
    pub seed: u64,
    pub textures: Vec<TextureParams>,
    pub scratch: ScratchParams,
    pub spot: SpotParams,
    /// counts[product][domain] — domains ordered Normal, Scratches, Spots.
    pub counts: Vec<[usize; 3]>,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        ProceduralSpec {
            image_size: 32,
            seed: 7,
            textures: default_textures(3),
            scratch: ScratchParams {
                count: (1, 3),
                length_frac: (0.12, 0.35),
                width_frac: (0.025, 0.05),
                intensity: (0.35, 0.90),
            },
            spot: SpotParams {
                count: (2, 5),
                radius_frac: (0.055, 0.10),
                intensity: (0.30, 0.85),
            },
            counts: vec![[400, 60, 20]; 3],
            train_frac: 0.70,
            val_frac: 0.15,
        }
    }
}

/// Built-in texture table: distinct base level, octaves, grain per product.
pub fn default_textures(n: usize) -> Vec<TextureParams> {
    let presets = [
        TextureParams {
            base: 0.62,
            octaves: 4,
            grain_axis: 1,
            grain_strength: 0.35,
            tint: [1.0, 0.97, 0.92],
        },
        TextureParams {
            base: 0.45,
            octaves: 3,
            grain_axis: 2,
            grain_strength: 0.45,
            tint: [0.93, 1.0, 0.95],
        },
        TextureParams {
            base: 0.55,
            octaves: 5,
            grain_axis: 0,
            grain_strength: 0.0,
            tint: [0.94, 0.95, 1.0],
        },
        TextureParams {
            base: 0.70,
            octaves: 2,
            grain_axis: 1,
            grain_strength: 0.2,
            tint: [1.0, 1.0, 0.9],
        },
    ];
    (0..n).map(|i| presets[i % presets.len()].clone()).collect()
}

impl ProceduralSpec {
    pub fn n_products(&self) -> usize {
        self.counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(DtganError::Config("image_size must be >= 8".into()));
        }
        if self.counts.is_empty() {
            return Err(DtganError::Config("counts: need at least one product".into()));
        }
        if self.textures.len() < self.counts.len() {
            return Err(DtganError::Config(format!(
                "textures: {} products configured but only {} textures",
                self.counts.len(),
                self.textures.len()
            )));
        }
        let s = self.image_size as f64;
        if self.scratch.length_frac.1 * s > s {
            return Err(DtganError::Config("scratch.length_frac exceeds the image".into()));
        }
        if self.spot.radius_frac.1 * s > s / 2.0 {
            return Err(DtganError::Config("spot.radius_frac exceeds half the image".into()));
        }
        for (name, (lo, hi)) in [
            ("scratch.intensity", self.scratch.intensity),
            ("spot.intensity", self.spot.intensity),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(DtganError::Config(format!("{name} must be an increasing range inside [0,1]")));
            }
        }
        if !(0.0..1.0).contains(&self.train_frac)
            || !(0.0..1.0).contains(&self.val_frac)
            || self.train_frac + self.val_frac >= 1.0
        {
            return Err(DtganError::Config("split fractions must leave room for a test split".into()));
        }
        Ok(())
    }

    /// Parse the flat `key = value` format (same syntax as the main config).
    pub fn parse(text: &str) -> Result<ProceduralSpec> {
        let mut spec = ProceduralSpec::default();
        let mut n_products = spec.counts.len();
        let mut counts = [400usize, 60, 20];
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(DtganError::Config(format!(
                    "line {}: expected `key = value`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(DtganError::Config(format!("duplicate key {key:?}")));
            }
            let as_usize = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| DtganError::Config(format!("key {key}: expected integer")))
            };
            let as_u64 = || -> Result<u64> {
                value
                    .parse()
                    .map_err(|_| DtganError::Config(format!("key {key}: expected integer")))
            };
            let as_f64 = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| DtganError::Config(format!("key {key}: expected number")))
            };
            match key {
                "image_size" => spec.image_size = as_usize()?,
                "seed" => spec.seed = as_u64()?,
                "n_products" => n_products = as_usize()?,
                "count_normal" => counts[0] = as_usize()?,
                "count_scratches" => counts[1] = as_usize()?,
                "count_spots" => counts[2] = as_usize()?,
                "train_frac" => spec.train_frac = as_f64()?,
                "val_frac" => spec.val_frac = as_f64()?,
                other => {
                    return Err(DtganError::Config(format!("unknown key {other:?}")));
                }
            }
        }
        if n_products == 0 {
            return Err(DtganError::Config("n_products must be >= 1".into()));
        }
        spec.counts = vec![counts; n_products];
        spec.textures = default_textures(n_products);
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

/// Seeded value-noise lattice, bilinear interpolation, one octave.
fn value_noise_octave(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let cells = cells.max(2);
    let lattice = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random::<f64>());
    let mut out = Array2::zeros((size, size));
    let scale = cells as f64 / size as f64;
    for i in 0..size {
        for j in 0..size {
            let y = i as f64 * scale;
            let x = j as f64 * scale;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            // smoothstep weights
            let wy = fy * fy * (3.0 - 2.0 * fy);
            let wx = fx * fx * (3.0 - 2.0 * fx);
            let v00 = lattice[[y0, x0]];
            let v01 = lattice[[y0, x0 + 1]];
            let v10 = lattice[[y0 + 1, x0]];
            let v11 = lattice[[y0 + 1, x0 + 1]];
            out[[i, j]] = v00 * (1.0 - wy) * (1.0 - wx)
                + v01 * (1.0 - wy) * wx
                + v10 * wy * (1.0 - wx)
                + v11 * wy * wx;
        }
    }
    out
}

/// Multi-octave background in gray [0,1] with optional directional grain.
fn render_background(size: usize, tex: &TextureParams, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut acc: Array2<f64> = Array2::zeros((size, size));
    let mut amp = 0.5;
    let mut total_amp = 0.0;
    for o in 0..tex.octaves {
        let cells = (2usize << o).min(size / 2);
        let layer = value_noise_octave(size, cells, rng);
        acc.zip_mut_with(&layer, |a, &l| *a += amp * (l - 0.5));
        total_amp += amp;
        amp *= 0.5;
    }
    if total_amp > 0.0 {
        acc.mapv_inplace(|v| v / total_amp * 0.5);
    }
    if tex.grain_strength > 0.0 && tex.grain_axis != 0 {
        let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let freq = rng.random_range(2.0..5.0) * std::f64::consts::TAU / size as f64;
        for i in 0..size {
            for j in 0..size {
                let coord = if tex.grain_axis == 1 { i as f64 } else { j as f64 };
                acc[[i, j]] += tex.grain_strength * 0.1 * (coord * freq + phase).sin();
            }
        }
    }
    acc.mapv(|v| (tex.base + v * 0.5).clamp(0.05, 0.95))
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Distance-based anti-aliased coverage map for a set of segments.
fn polyline_alpha(size: usize, segments: &[(f64, f64, f64, f64)], half_width: f64) -> Array2<f64> {
    let mut alpha = Array2::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
            let mut best = f64::INFINITY;
            for &(ay, ax, by, bx) in segments {
                best = best.min(dist_to_segment(px, py, ax, ay, bx, by));
                if best <= 0.0 {
                    break;
                }
            }
            let a = (half_width + 0.5 - best).clamp(0.0, 1.0);
            if a > 0.0 {
                alpha[[i, j]] = a;
            }
        }
    }
    alpha
}

struct DefectLayer {
    alpha: Array2<f64>,
    level: f64,
}

fn draw_scratches(size: usize, p: &ScratchParams, rng: &mut ChaCha8Rng) -> Vec<DefectLayer> {
    let s = size as f64;
    let count = rng.random_range(p.count.0..=p.count.1);
    let mut layers = Vec::new();
    for _ in 0..count {
        let total_len = rng.random_range(p.length_frac.0..p.length_frac.1) * s;
        let width = rng.random_range(p.width_frac.0..p.width_frac.1) * s;
        let level = rng.random_range(p.intensity.0..p.intensity.1);
        let margin = (total_len * 0.5 + width + 1.0).min(s / 2.0 - 1.0);
        let mut y = rng.random_range(margin..s - margin);
        let mut x = rng.random_range(margin..s - margin);
        let mut theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let n_segs = rng.random_range(2..=3);
        let seg_len = total_len / n_segs as f64;
        let mut segments = Vec::new();
        for _ in 0..n_segs {
            let ny = (y + seg_len * theta.sin()).clamp(1.0, s - 1.0);
            let nx = (x + seg_len * theta.cos()).clamp(1.0, s - 1.0);
            segments.push((y, x, ny, nx));
            y = ny;
            x = nx;
            theta += rng.random_range(-0.5..0.5);
        }
        layers.push(DefectLayer {
            alpha: polyline_alpha(size, &segments, width / 2.0),
            level,
        });
    }
    layers
}

fn draw_spots(size: usize, p: &SpotParams, rng: &mut ChaCha8Rng) -> Vec<DefectLayer> {
    let s = size as f64;
    let count = rng.random_range(p.count.0..=p.count.1);
    let mut layers = Vec::new();
    for _ in 0..count {
        let r = rng.random_range(p.radius_frac.0..p.radius_frac.1) * s;
        let level = rng.random_range(p.intensity.0..p.intensity.1);
        let cy = rng.random_range(r + 1.0..s - r - 1.0);
        let cx = rng.random_range(r + 1.0..s - r - 1.0);
        let mut alpha = Array2::zeros((size, size));
        for i in 0..size {
            for j in 0..size {
                let d = (((i as f64 + 0.5) - cy).powi(2) + ((j as f64 + 0.5) - cx).powi(2)).sqrt();
                if d < r {
                    alpha[[i, j]] = 1.0 - (d / r) * (d / r);
                }
            }
        }
        layers.push(DefectLayer { alpha, level });
    }
    layers
}

/// Coverage bounds enforced by redrawing from the foreground stream.
const MIN_COVERAGE: f64 = 0.003;
const MAX_COVERAGE: f64 = 0.06;
const MAX_SPOT_COVERAGE: f64 = 0.10;

fn coverage(mask: &Array2<u8>) -> f64 {
    mask.iter().filter(|&&m| m != 0).count() as f64 / mask.len() as f64
}

/// Render one sample. The foreground stream depends only on
/// (seed, domain, index), so identical defect geometry lands on every
/// product; the background stream also mixes the product id.
pub fn render_sample(
    spec: &ProceduralSpec,
    product: usize,
    domain: usize,
    index: u64,
) -> LabeledSample {
    let size = spec.image_size;
    let mut bg_rng = rng_from(spec.seed, &[tag::DATA_BG, product as u64, domain as u64, index]);
    let gray_bg = render_background(size, &spec.textures[product], &mut bg_rng);

    let mut fg_rng = rng_from(spec.seed, &[tag::DATA_FG, domain as u64, index]);
    let layers: Vec<DefectLayer> = match domain {
        0 => Vec::new(),
        1 => loop {
            let l = draw_scratches(size, &spec.scratch, &mut fg_rng);
            let mask = layers_mask(size, &l);
            let c = coverage(&mask);
            if (MIN_COVERAGE..=MAX_COVERAGE).contains(&c) {
                break l;
            }
        },
        2 => loop {
            let l = draw_spots(size, &spec.spot, &mut fg_rng);
            let mask = layers_mask(size, &l);
            let c = coverage(&mask);
            if (MIN_COVERAGE..=MAX_SPOT_COVERAGE).contains(&c) {
                break l;
            }
        },
        other => panic!("domain {other} out of range"),
    };

    let mask = layers_mask(size, &layers);
    let mut gray = gray_bg;
    for layer in &layers {
        ndarray::Zip::from(&mut gray).and(&layer.alpha).for_each(|g, &a| {
            if a > 0.0 {
                *g *= 1.0 - a * layer.level;
            }
        });
    }

    let tint = spec.textures[product].tint;
    let data = Array3::from_shape_fn((3, size, size), |(c, i, j)| {
        (2.0 * (gray[[i, j]] * tint[c]).clamp(0.0, 1.0) - 1.0).clamp(-1.0, 1.0)
    });
    LabeledSample {
        image: ImageTensor::new(data).expect("procedural image in range"),
        domain,
        product,
        defect_mask: Some(mask),
    }
}

fn layers_mask(size: usize, layers: &[DefectLayer]) -> Array2<u8> {
    let mut mask = Array2::zeros((size, size));
    for layer in layers {
        ndarray::Zip::from(&mut mask).and(&layer.alpha).for_each(|m, &a| {
            if a > 0.0 {
                *m = 1u8;
            }
        });
    }
    mask
}

/// Pure background render of a sample (for mask-faithfulness checks).
pub fn render_background_only(spec: &ProceduralSpec, product: usize, domain: usize, index: u64) -> ImageTensor {
    let size = spec.image_size;
    let mut bg_rng = rng_from(spec.seed, &[tag::DATA_BG, product as u64, domain as u64, index]);
    let gray = render_background(size, &spec.textures[product], &mut bg_rng);
    let tint = spec.textures[product].tint;
    let data = Array3::from_shape_fn((3, size, size), |(c, i, j)| {
        (2.0 * (gray[[i, j]] * tint[c]).clamp(0.0, 1.0) - 1.0).clamp(-1.0, 1.0)
    });
    ImageTensor::new(data).expect("background in range")
}

/// Deterministically generate the whole dataset, in (product, domain, index)
/// order, with split assignment by index share.
pub fn generate_procedural(spec: &ProceduralSpec) -> Result<Vec<(LabeledSample, Split)>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (product, counts) in spec.counts.iter().enumerate() {
        for (domain, &count) in counts.iter().enumerate() {
            let n_train = (count as f64 * spec.train_frac).round() as usize;
            let n_val = (count as f64 * spec.val_frac).round() as usize;
            for index in 0..count {
                let split = if index < n_train {
                    Split::Train
                } else if index < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                out.push((render_sample(spec, product, domain, index as u64), split));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// folder layout + manifest
// ---------------------------------------------------------------------------

/// One dataset file with its parsed labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub product: usize,
    pub domain: usize,
    pub split: Split,
    /// sha256 of the file bytes.
    pub content_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub image_size: usize,
    pub products: Vec<String>,
    pub domains: Vec<String>,
    pub entries: Vec<FileEntry>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &FileEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn load_image(&self, entry: &FileEntry) -> Result<ImageTensor> {
        load_png(&entry.path, self.image_size)
    }

    pub fn load_sample(&self, entry: &FileEntry) -> Result<LabeledSample> {
        Ok(LabeledSample {
            image: self.load_image(entry)?,
            domain: entry.domain,
            product: entry.product,
            defect_mask: None,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Map [-1,1] to 8-bit, rounding half away from zero.
pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

pub fn image_to_rgb8(img: &ImageTensor) -> Vec<u8> {
    let d = img.data();
    let (h, w) = (d.shape()[1], d.shape()[2]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                buf.push(to_u8(d[[c, i, j]]));
            }
        }
    }
    buf
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let size = img.size() as u32;
    let buf = image_to_rgb8(img);
    let rgb = image::RgbImage::from_raw(size, size, buf)
        .ok_or_else(|| DtganError::Dataset("png buffer size mismatch".into()))?;
    rgb.save(path)
        .map_err(|e| DtganError::Dataset(format!("write {}: {e}", path.display())))
}

pub fn load_png(path: &Path, expected_size: usize) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| DtganError::Dataset(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    if img.width() as usize != expected_size || img.height() as usize != expected_size {
        return Err(DtganError::Dataset(format!(
            "{} is {}x{}, expected {expected_size}x{expected_size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let size = expected_size;
    let data = Array3::from_shape_fn((3, size, size), |(c, i, j)| {
        let px = img.get_pixel(j as u32, i as u32);
        px.0[c] as f64 / 255.0 * 2.0 - 1.0
    });
    ImageTensor::new(data)
}

pub fn save_mask_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let buf: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| DtganError::Dataset("mask buffer size mismatch".into()))?;
    gray.save(path)
        .map_err(|e| DtganError::Dataset(format!("write {}: {e}", path.display())))
}

/// Write a generated dataset as `root/<product>/<domain>/<split>/*.png`
/// with masks alongside, and return its manifest.
pub fn write_dataset(
    spec: &ProceduralSpec,
    samples: &[(LabeledSample, Split)],
    root: &Path,
) -> Result<DatasetManifest> {
    let products = ProductSchema::lettered(spec.n_products())?;
    let domains = DomainSchema::canonical(3)?;
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    let mut counters: BTreeMap<(usize, usize, &str), usize> = BTreeMap::new();

    for p in products.products() {
        for d in domains.domains() {
            for split in SPLITS {
                let dir = root.join(&p.name).join(&d.name).join(split);
                std::fs::create_dir_all(&dir)
                    .map_err(|e| DtganError::io(dir.display().to_string(), e))?;
            }
        }
    }
    for (sample, split) in samples {
        let idx = counters
            .entry((sample.product, sample.domain, split.as_str()))
            .or_insert(0);
        let name = format!("{:05}.png", *idx);
        *idx += 1;
        let dir = root
            .join(products.name(sample.product))
            .join(domains.name(sample.domain))
            .join(split.as_str());
        let path = dir.join(&name);
        save_png(&sample.image, &path)?;
        if let Some(mask) = &sample.defect_mask {
            save_mask_png(mask, &dir.join(format!("{:05}.mask.png", *idx - 1)))?;
        }
        let bytes = std::fs::read(&path).map_err(|e| DtganError::io(path.display().to_string(), e))?;
        entries.push(FileEntry {
            path,
            product: sample.product,
            domain: sample.domain,
            split: *split,
            content_hash: sha256_hex(&bytes),
        });
    }
    for p in products.products() {
        for d in domains.domains() {
            let any = entries
                .iter()
                .any(|e| e.product == p.id && e.domain == d.id);
            if !any {
                warnings.push(format!("empty class folder {}/{}", p.name, d.name));
            }
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        image_size: spec.image_size,
        products: products.products().iter().map(|p| p.name.clone()).collect(),
        domains: domains.domains().iter().map(|d| d.name.clone()).collect(),
        entries,
        warnings,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DtganError::Dataset(format!("manifest serialize: {e}")))?;
    let mpath = root.join("manifest.json");
    std::fs::write(&mpath, json).map_err(|e| DtganError::io(mpath.display().to_string(), e))?;
    Ok(manifest)
}

/// Scan `root/<product>/<domain>/<split>/*.png` into a manifest. Unknown
/// domain or split folder names and undecodable files are errors; empty
/// class folders become warnings; split overlap (by content) is an error.
pub fn ingest_folder(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(DtganError::Dataset(format!("{} is not a directory", root.display())));
    }
    let domains = DomainSchema::canonical(3)?;
    let mut product_names: Vec<String> = Vec::new();
    for entry in sorted_dir(root)? {
        if entry.is_dir() {
            product_names.push(
                entry
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    if product_names.is_empty() {
        return Err(DtganError::Dataset(format!("no product folders under {}", root.display())));
    }
    let products = ProductSchema::new(product_names)?;

    let mut entries: Vec<FileEntry> = Vec::new();
    let mut warnings = Vec::new();
    let mut image_size: Option<usize> = None;
    let mut hash_to_split: BTreeMap<String, (Split, PathBuf)> = BTreeMap::new();

    for p in products.products() {
        let pdir = root.join(&p.name);
        for ddir in sorted_dir(&pdir)? {
            if !ddir.is_dir() {
                continue;
            }
            let dname = ddir.file_name().unwrap().to_string_lossy().into_owned();
            let domain = domains
                .parse(&dname)
                .map_err(|_| DtganError::UnknownDomain(dname.clone()))?;
            for sdir in sorted_dir(&ddir)? {
                if !sdir.is_dir() {
                    continue;
                }
                let sname = sdir.file_name().unwrap().to_string_lossy().into_owned();
                let split = Split::parse(&sname)?;
                let mut any = false;
                for file in sorted_dir(&sdir)? {
                    let fname = file.file_name().unwrap().to_string_lossy().into_owned();
                    if !fname.ends_with(".png") || fname.ends_with(".mask.png") {
                        continue;
                    }
                    any = true;
                    let bytes = std::fs::read(&file)
                        .map_err(|e| DtganError::io(file.display().to_string(), e))?;
                    let hash = sha256_hex(&bytes);
                    let decoded = image::load_from_memory(&bytes).map_err(|e| {
                        DtganError::Dataset(format!("cannot decode {}: {e}", file.display()))
                    })?;
                    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
                    match image_size {
                        None => image_size = Some(w),
                        Some(s) if s == w && s == h => {}
                        Some(s) => {
                            return Err(DtganError::Dataset(format!(
                                "{} is {}x{}, dataset uses {}x{}",
                                file.display(),
                                w,
                                h,
                                s,
                                s
                            )));
                        }
                    }
                    if let Some((other_split, other_path)) = hash_to_split.get(&hash) {
                        if *other_split != split {
                            return Err(DtganError::Dataset(format!(
                                "split overlap: {} and {} share content across splits",
                                other_path.display(),
                                file.display()
                            )));
                        }
                    } else {
                        hash_to_split.insert(hash.clone(), (split, file.clone()));
                    }
                    entries.push(FileEntry {
                        path: file,
                        product: p.id,
                        domain,
                        split,
                        content_hash: hash,
                    });
                }
                if !any {
                    warnings.push(format!("empty class folder {}/{}/{}", p.name, dname, sname));
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(DtganError::Dataset("dataset holds no png files".into()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        image_size: image_size.unwrap(),
        products: products.products().iter().map(|p| p.name.clone()).collect(),
        domains: domains.domains().iter().map(|d| d.name.clone()).collect(),
        entries,
        warnings,
    })
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DtganError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------------------
// sampling + classical augmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// Draw (product, domain) cells uniformly, then uniformly inside.
    Oversample,
    /// Draw uniformly over all files.
    Natural,
}

/// Infinite index stream over the train split of a manifest.
pub struct BalancedSampler {
    cells: Vec<Vec<usize>>,
    all: Vec<usize>,
    mode: SamplerMode,
}

impl BalancedSampler {
    pub fn new(manifest: &DatasetManifest, mode: SamplerMode) -> Result<Self> {
        Self::over_indices(
            manifest,
            manifest
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.split == Split::Train)
                .map(|(i, _)| i)
                .collect(),
            mode,
        )
    }

    /// Sampler over an explicit entry-index subset (used by few-shot runs).
    pub fn over_indices(
        manifest: &DatasetManifest,
        indices: Vec<usize>,
        mode: SamplerMode,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(DtganError::Dataset("sampler: no train files".into()));
        }
        let mut cells_map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for &i in &indices {
            let e = &manifest.entries[i];
            cells_map.entry((e.product, e.domain)).or_default().push(i);
        }
        if mode == SamplerMode::Oversample {
            for p in 0..manifest.n_products() {
                for d in 0..manifest.n_domains() {
                    if !cells_map.contains_key(&(p, d)) {
                        return Err(DtganError::Dataset(format!(
                            "oversample: empty cell (product {p}, domain {d})"
                        )));
                    }
                }
            }
        }
        Ok(BalancedSampler {
            cells: cells_map.into_values().collect(),
            all: indices,
            mode,
        })
    }

    pub fn next<R: Rng>(&self, rng: &mut R) -> usize {
        match self.mode {
            SamplerMode::Oversample => {
                let cell = &self.cells[rng.random_range(0..self.cells.len())];
                cell[rng.random_range(0..cell.len())]
            }
            SamplerMode::Natural => self.all[rng.random_range(0..self.all.len())],
        }
    }
}

/// Few-shot filter: cap the defective train samples of `product` at
/// `cap` per defect domain, keeping the first entries in manifest order.
/// Normal samples and other products pass through untouched.
pub fn few_shot_subset(
    manifest: &DatasetManifest,
    train_indices: &[usize],
    product: usize,
    cap: usize,
) -> Vec<usize> {
    let mut kept = Vec::with_capacity(train_indices.len());
    let mut per_domain: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in train_indices {
        let e = &manifest.entries[i];
        if e.product == product && e.domain != 0 {
            let c = per_domain.entry(e.domain).or_insert(0);
            if *c >= cap {
                continue;
            }
            *c += 1;
        }
        kept.push(i);
    }
    kept
}

/// Knobs for [`traditional_augment`]; the defaults match the usual
/// flip + jitter recipe.
#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_p: 0.5,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

/// Horizontal flip + brightness/contrast jitter, clamped back to [-1,1].
pub fn traditional_augment<R: Rng>(x: &ImageTensor, rng: &mut R, p: &AugmentParams) -> ImageTensor {
    let mut d = x.data().clone();
    if p.flip_p > 0.0 && rng.random::<f64>() < p.flip_p {
        d = flip_horizontal(&d);
    }
    if p.brightness > 0.0 || p.contrast > 0.0 {
        let db = if p.brightness > 0.0 {
            rng.random_range(-p.brightness..p.brightness) * 2.0
        } else {
            0.0
        };
        let kc = if p.contrast > 0.0 {
            1.0 + rng.random_range(-p.contrast..p.contrast)
        } else {
            1.0
        };
        let mean = d.sum() / d.len() as f64;
        d.mapv_inplace(|v| ((v - mean) * kc + mean + db).clamp(-1.0, 1.0));
    }
    ImageTensor::new(d).expect("augment keeps range")
}

pub fn flip_horizontal(d: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| d[[ci, i, w - 1 - j]])
}

pub fn flip_vertical(d: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| d[[ci, h - 1 - i, j]])
}
