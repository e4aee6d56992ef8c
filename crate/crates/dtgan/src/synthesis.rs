//! Inference-time defect synthesis over an immutable (EMA) snapshot:
//! latent-guided, reference-guided, defect removal, style sweeps, and the
//! dataset-augmentation recipes with provenance records.

use crate::domain::{sample_latent, ImageTensor, LabeledSample, LatentCode};
use crate::error::{DtganError, Result};
use crate::networks::{self, Networks};
use crate::params::ParamSet;
use crate::rng::{rng_from, tag};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// Frozen inference bundle: network structure + (EMA) parameters.
pub struct Snapshot {
    pub nets: Networks,
    pub params: ParamSet,
}

impl Snapshot {
    pub fn new(nets: Networks, params: ParamSet) -> Self {
        Snapshot { nets, params }
    }

    pub fn n_domains(&self) -> usize {
        self.nets.cfg.n_domains
    }
}

/// How one synthetic image traces back to its inputs.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Guidance {
    Latent { z_seed: u64 },
    Reference { defect_ref: String, style_ref: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub output: String,
    pub source: String,
    pub target_domain: String,
    pub product: String,
    pub guidance: Guidance,
    pub seed: u64,
}

/// One latent-guided output per z: (code, style) = mapping(z), then decode
/// against the source background. Noise streams derive from `seed` and the
/// item index, so identical requests give identical images.
pub fn synth_latent(
    snap: &Snapshot,
    source: &ImageTensor,
    target: usize,
    zs: &[LatentCode],
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    if target >= snap.n_domains() {
        return Err(DtganError::UnknownDomain(format!("domain id {target}")));
    }
    let mut out = Vec::with_capacity(zs.len());
    for (i, z) in zs.iter().enumerate() {
        let mut noise_rng = rng_from(seed, &[tag::SYNTH, i as u64]);
        let pair = networks::mapping_forward(&snap.nets, &snap.params, z, target, &mut noise_rng)?;
        let (img, _) = networks::generate(&snap.nets, &snap.params, source, &pair.code, &pair.style)?;
        out.push(img);
    }
    Ok(out)
}

/// Reference-guided transfer: defect code from one reference, style from
/// another (they may be the same image). Target Normal zeroes the code, so
/// the output is a defect removal regardless of the references.
pub fn synth_reference(
    snap: &Snapshot,
    source: &ImageTensor,
    target: usize,
    defect_ref: &ImageTensor,
    style_ref: &ImageTensor,
) -> Result<ImageTensor> {
    if target >= snap.n_domains() {
        return Err(DtganError::UnknownDomain(format!("domain id {target}")));
    }
    let code = networks::encoder_forward(&snap.nets, &snap.params, defect_ref, target)?.code;
    let style = networks::encoder_forward(&snap.nets, &snap.params, style_ref, target)?.style;
    let (img, _) = networks::generate(&snap.nets, &snap.params, source, &code, &style)?;
    Ok(img)
}

/// Fixed defect code from a reference, style varied over mapping-network
/// draws: one output image per style seed.
pub fn style_sweep(
    snap: &Snapshot,
    source: &ImageTensor,
    defect_ref: &ImageTensor,
    target: usize,
    style_seeds: &[u64],
) -> Result<Vec<ImageTensor>> {
    if style_seeds.is_empty() {
        return Err(DtganError::Config("style sweep needs at least one seed".into()));
    }
    if target >= snap.n_domains() {
        return Err(DtganError::UnknownDomain(format!("domain id {target}")));
    }
    let code = networks::encoder_forward(&snap.nets, &snap.params, defect_ref, target)?.code;
    let mut out = Vec::with_capacity(style_seeds.len());
    for &s in style_seeds {
        let mut rng = rng_from(s, &[tag::SYNTH, 99]);
        let z = sample_latent(&mut rng, snap.nets.cfg.latent_dim)?;
        let pair = networks::mapping_forward(&snap.nets, &snap.params, &z, target, &mut rng)?;
        let (img, _) = networks::generate(&snap.nets, &snap.params, source, &code, &pair.style)?;
        out.push(img);
    }
    Ok(out)
}

/// Reference-pool policy for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidancePolicy {
    /// Defect references from the source's own product.
    VSame,
    /// Defect references from any other product.
    VOthers,
    /// Defect references from all products, product drawn uniformly first.
    VAbc,
}

impl GuidancePolicy {
    pub fn parse(s: &str) -> Result<GuidancePolicy> {
        match s.to_ascii_lowercase().as_str() {
            "v-same" | "vsame" => Ok(GuidancePolicy::VSame),
            "v-others" | "vothers" => Ok(GuidancePolicy::VOthers),
            "v-abc" | "vabc" => Ok(GuidancePolicy::VAbc),
            other => Err(DtganError::Config(format!("unknown policy {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GuidancePolicy::VSame => "v-same",
            GuidancePolicy::VOthers => "v-others",
            GuidancePolicy::VAbc => "v-abc",
        }
    }
}

/// Defect reference pool: images of defective domains with their product
/// and a stable id for provenance.
pub struct RefEntry {
    pub image: ImageTensor,
    pub product: usize,
    pub id: String,
}

pub struct RefPools {
    /// per domain id, all defective references
    by_domain: BTreeMap<usize, Vec<RefEntry>>,
    n_products: usize,
}

impl RefPools {
    pub fn new(n_products: usize) -> Self {
        RefPools {
            by_domain: BTreeMap::new(),
            n_products,
        }
    }

    pub fn push(&mut self, domain: usize, entry: RefEntry) {
        self.by_domain.entry(domain).or_default().push(entry);
    }

    /// Draw a reference for (target domain, source product) under a policy.
    /// v-ABC draws the product uniformly first so every product contributes
    /// evenly regardless of pool imbalance.
    pub fn draw<R: Rng>(
        &self,
        domain: usize,
        source_product: usize,
        policy: GuidancePolicy,
        rng: &mut R,
    ) -> Result<&RefEntry> {
        let pool = self
            .by_domain
            .get(&domain)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| {
                DtganError::Dataset(format!("empty reference pool for domain {domain}"))
            })?;
        let filtered: Vec<&RefEntry> = match policy {
            GuidancePolicy::VSame => pool.iter().filter(|e| e.product == source_product).collect(),
            GuidancePolicy::VOthers => {
                pool.iter().filter(|e| e.product != source_product).collect()
            }
            GuidancePolicy::VAbc => {
                let mut with: Vec<usize> = (0..self.n_products)
                    .filter(|p| pool.iter().any(|e| e.product == *p))
                    .collect();
                if with.is_empty() {
                    return Err(DtganError::Dataset(format!(
                        "empty reference pool for domain {domain}"
                    )));
                }
                let p = with.remove(rng.random_range(0..with.len()));
                pool.iter().filter(|e| e.product == p).collect()
            }
        };
        if filtered.is_empty() {
            return Err(DtganError::Dataset(format!(
                "empty reference pool for domain {domain} under policy {}",
                policy.as_str()
            )));
        }
        Ok(filtered[rng.random_range(0..filtered.len())])
    }
}

/// How many synthetic samples to make per target domain.
#[derive(Clone, Debug)]
pub struct AugmentRecipe {
    pub counts: BTreeMap<usize, usize>,
    pub policy: GuidancePolicy,
}

pub struct AugmentedSample {
    pub sample: LabeledSample,
    pub provenance: Provenance,
}

/// Build synthetic defective samples from normal sources: each output keeps
/// the source's product label and takes the requested defect domain, with a
/// full provenance record. Deterministic under `seed`.
pub fn augment_dataset(
    snap: &Snapshot,
    normals: &[(ImageTensor, usize, String)], // (image, product, id)
    recipe: &AugmentRecipe,
    refs: &RefPools,
    seed: u64,
    domain_names: &[String],
    product_names: &[String],
) -> Result<Vec<AugmentedSample>> {
    if normals.is_empty() {
        return Err(DtganError::Dataset("augment: no normal source images".into()));
    }
    let mut out = Vec::new();
    let mut counter = 0u64;
    for (&domain, &count) in &recipe.counts {
        if domain >= snap.n_domains() {
            return Err(DtganError::UnknownDomain(format!("domain id {domain}")));
        }
        for k in 0..count {
            let mut rng = rng_from(seed, &[tag::AUGMENT, domain as u64, k as u64]);
            let (src_img, src_product, src_id) = &normals[rng.random_range(0..normals.len())];
            let reference = refs.draw(domain, *src_product, recipe.policy, &mut rng)?;
            let img = synth_reference(snap, src_img, domain, &reference.image, &reference.image)?;
            let output = format!(
                "{}_{}_{:05}.png",
                product_names[*src_product], domain_names[domain], counter
            );
            counter += 1;
            out.push(AugmentedSample {
                sample: LabeledSample {
                    image: img,
                    domain,
                    product: *src_product,
                    defect_mask: None,
                },
                provenance: Provenance {
                    output,
                    source: src_id.clone(),
                    target_domain: domain_names[domain].clone(),
                    product: product_names[*src_product].clone(),
                    guidance: Guidance::Reference {
                        defect_ref: reference.id.clone(),
                        style_ref: reference.id.clone(),
                    },
                    seed,
                },
            });
        }
    }
    Ok(out)
}

/// Tile images into a (rows x cols) grid, row-major.
pub fn image_grid(images: &[ImageTensor], cols: usize) -> Result<ndarray::Array3<f64>> {
    if images.is_empty() || cols == 0 {
        return Err(DtganError::Config("grid needs images and cols >= 1".into()));
    }
    let s = images[0].size();
    let rows = images.len().div_ceil(cols);
    let mut grid = ndarray::Array3::from_elem((3, rows * s, cols * s), -1.0);
    for (k, img) in images.iter().enumerate() {
        if img.size() != s {
            return Err(DtganError::Shape("grid images must share a size".into()));
        }
        let (r, c) = (k / cols, k % cols);
        for ch in 0..3 {
            for i in 0..s {
                for j in 0..s {
                    grid[[ch, r * s + i, c * s + j]] = img.data()[[ch, i, j]];
                }
            }
        }
    }
    Ok(grid)
}
