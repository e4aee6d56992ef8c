//! Shared value types: label spaces, image/latent/code/style containers,
//! model-shape configuration.

use crate::error::DtganError;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Canonical defect-domain names. Index 0 is the anchor (defect-free) class.
pub const DOMAIN_NAMES: [&str; 3] = ["Normal", "Scratches", "Spots"];

/// A foreground defect type. Ids are dense in `[0, N)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectDomain {
    pub id: usize,
    pub name: String,
}

/// The full defect-domain label space with its designated anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSchema {
    domains: Vec<DefectDomain>,
    anchor: usize,
}

impl DomainSchema {
    /// The canonical schema: the first `n` of Normal / Scratches / Spots,
    /// with Normal as the anchor.
    pub fn canonical(n: usize) -> Result<Self, DtganError> {
        if !(2..=DOMAIN_NAMES.len()).contains(&n) {
            return Err(DtganError::Config(format!(
                "n_domains must be in [2, {}], got {}",
                DOMAIN_NAMES.len(),
                n
            )));
        }
        Ok(DomainSchema {
            domains: (0..n)
                .map(|id| DefectDomain {
                    id,
                    name: DOMAIN_NAMES[id].to_string(),
                })
                .collect(),
            anchor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn anchor_id(&self) -> usize {
        self.anchor
    }

    pub fn domains(&self) -> &[DefectDomain] {
        &self.domains
    }

    pub fn name(&self, id: usize) -> &str {
        &self.domains[id].name
    }

    /// Case-insensitive name lookup.
    pub fn parse(&self, name: &str) -> Result<usize, DtganError> {
        self.domains
            .iter()
            .find(|d| d.name.eq_ignore_ascii_case(name))
            .map(|d| d.id)
            .ok_or_else(|| DtganError::UnknownDomain(name.to_string()))
    }
}

/// A background product. Ids are dense in `[0, P)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductLabel {
    pub id: usize,
    pub name: String,
}

/// Product label space: names free-form, ids dense.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductSchema {
    products: Vec<ProductLabel>,
}

impl ProductSchema {
    pub fn new(names: Vec<String>) -> Result<Self, DtganError> {
        if names.is_empty() {
            return Err(DtganError::Config("need at least one product".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(DtganError::Config(format!("duplicate product name {n}")));
            }
        }
        Ok(ProductSchema {
            products: names
                .into_iter()
                .enumerate()
                .map(|(id, name)| ProductLabel { id, name })
                .collect(),
        })
    }

    /// Default names A, B, C, ... for `p` products.
    pub fn lettered(p: usize) -> Result<Self, DtganError> {
        Self::new(
            (0..p)
                .map(|i| char::from(b'A' + (i % 26) as u8).to_string())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn products(&self) -> &[ProductLabel] {
        &self.products
    }

    pub fn name(&self, id: usize) -> &str {
        &self.products[id].name
    }

    pub fn parse(&self, name: &str) -> Result<usize, DtganError> {
        self.products
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .map(|p| p.id)
            .ok_or_else(|| DtganError::Config(format!("unknown product {name}")))
    }
}

/// A 3×H×W image with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self, DtganError> {
        let s = data.shape();
        if s[0] != 3 {
            return Err(DtganError::Shape(format!("image must have 3 channels, got {}", s[0])));
        }
        if s[1] != s[2] {
            return Err(DtganError::Shape(format!("image must be square, got {}x{}", s[1], s[2])));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(DtganError::Shape(format!("image value {v} outside [-1, 1]")));
            }
        }
        Ok(ImageTensor { data })
    }

    /// Wrap generator output: clamps the tanh range edge noise, checks finiteness.
    pub fn from_generated(mut data: Array3<f64>) -> Result<Self, DtganError> {
        for v in data.iter() {
            if !v.is_finite() {
                return Err(DtganError::NonFinite("generated image".into()));
            }
        }
        data.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Self::new(data)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn size(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}

/// Flat latent vector, standard-normal by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Array1<f64>,
}

/// Spatial defect-shape map at the generator bottleneck (Cfg × Hb × Wb).
#[derive(Clone, Debug, PartialEq)]
pub struct DefectCode {
    pub values: Array3<f64>,
}

impl DefectCode {
    pub fn zeros(cfg: usize, hb: usize, wb: usize) -> Self {
        DefectCode {
            values: Array3::zeros((cfg, hb, wb)),
        }
    }

    pub fn is_exactly_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Flat style vector carrying the artistic look of a defect.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub values: Array1<f64>,
}

/// One dataset element: image + defect domain + product, plus the exact
/// defect mask when the sample came from the procedural generator.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub domain: usize,
    pub product: usize,
    pub defect_mask: Option<Array2<u8>>,
}

impl LabeledSample {
    pub fn validate(&self, schema: &DomainSchema) -> Result<(), DtganError> {
        if let Some(mask) = &self.defect_mask {
            let s = self.image.data().shape();
            if mask.shape() != [s[1], s[2]] {
                return Err(DtganError::Shape("mask does not match image dims".into()));
            }
            if self.domain == schema.anchor_id() && mask.iter().any(|&m| m != 0) {
                return Err(DtganError::Shape("anchor-domain sample with nonzero mask".into()));
            }
        }
        Ok(())
    }
}

/// Weights for the composed generator/discriminator objectives.
/// `ds_decay_steps = 0` means "derive as half the total step count".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sd: f64,
    pub lambda_d: f64,
    pub lambda_ds: f64,
    pub lambda_cyc: f64,
    pub lambda_fg: f64,
    pub lambda_bg: f64,
    pub lambda_r1: f64,
    pub ds_decay_steps: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sd: 1.0,
            lambda_d: 1.0,
            lambda_ds: 1.0,
            lambda_cyc: 1.0,
            lambda_fg: 1.0,
            lambda_bg: 1.0,
            lambda_r1: 1.0,
            ds_decay_steps: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DtganError> {
        for (name, v) in [
            ("lambda_sd", self.lambda_sd),
            ("lambda_d", self.lambda_d),
            ("lambda_ds", self.lambda_ds),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_fg", self.lambda_fg),
            ("lambda_bg", self.lambda_bg),
            ("lambda_r1", self.lambda_r1),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DtganError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Linearly decayed diversity weight at `step`.
    pub fn lambda_ds_at(&self, step: usize) -> f64 {
        if self.ds_decay_steps == 0 {
            return 0.0;
        }
        let frac = 1.0 - (step as f64 / self.ds_decay_steps as f64);
        self.lambda_ds * frac.max(0.0)
    }
}

/// Model-shape configuration. `image_size` 32 and `style_dim` 64 are the
/// desk-scale defaults; 128/512 are valid config points for full scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub n_domains: usize,
    pub n_products: usize,
    pub bottleneck_channels: usize,
    pub fg_channels: usize,
    pub bottleneck_downsampling: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            latent_dim: 16,
            style_dim: 64,
            n_domains: 3,
            n_products: 3,
            bottleneck_channels: 32,
            fg_channels: 8,
            bottleneck_downsampling: 4,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Bottleneck spatial size Hb = Wb = image_size / downsampling.
    pub fn bottleneck_hw(&self) -> usize {
        self.image_size / self.bottleneck_downsampling
    }

    pub fn bg_channels(&self) -> usize {
        self.bottleneck_channels - self.fg_channels
    }

    pub fn domain_schema(&self) -> Result<DomainSchema, DtganError> {
        DomainSchema::canonical(self.n_domains)
    }
}

/// Check every shape invariant; returns the config unchanged on success.
pub fn validate_config(config: ModelConfig) -> Result<ModelConfig, DtganError> {
    let c = &config;
    let positive = [
        ("image_size", c.image_size),
        ("latent_dim", c.latent_dim),
        ("style_dim", c.style_dim),
        ("n_domains", c.n_domains),
        ("n_products", c.n_products),
        ("bottleneck_channels", c.bottleneck_channels),
        ("fg_channels", c.fg_channels),
        ("bottleneck_downsampling", c.bottleneck_downsampling),
    ];
    for (name, v) in positive {
        if v == 0 {
            return Err(DtganError::Config(format!("{name} must be positive")));
        }
    }
    if c.n_domains < 2 {
        return Err(DtganError::Config("n_domains must be >= 2".into()));
    }
    if c.n_domains > DOMAIN_NAMES.len() {
        return Err(DtganError::Config(format!(
            "n_domains must be <= {}",
            DOMAIN_NAMES.len()
        )));
    }
    if c.image_size % c.bottleneck_downsampling != 0 {
        return Err(DtganError::Config(format!(
            "image_size {} not divisible by downsampling factor {}",
            c.image_size, c.bottleneck_downsampling
        )));
    }
    if !c.bottleneck_downsampling.is_power_of_two() || c.bottleneck_downsampling < 2 {
        return Err(DtganError::Config(format!(
            "bottleneck_downsampling must be a power of two >= 2, got {}",
            c.bottleneck_downsampling
        )));
    }
    if c.fg_channels >= c.bottleneck_channels {
        return Err(DtganError::Config(format!(
            "fg_channels ({}) must be < bottleneck_channels ({}): the background needs at least one channel",
            c.fg_channels, c.bottleneck_channels
        )));
    }
    if c.bottleneck_hw() < 2 {
        return Err(DtganError::Config(
            "bottleneck spatial size must be >= 2".into(),
        ));
    }
    Ok(config)
}

/// Draw an i.i.d. standard-normal latent vector.
pub fn sample_latent<R: Rng>(rng: &mut R, dim: usize) -> Result<LatentCode, DtganError> {
    if dim == 0 {
        return Err(DtganError::Config("latent dim must be >= 1".into()));
    }
    Ok(LatentCode {
        values: Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bottleneck_derivation() {
        let cfg = ModelConfig {
            image_size: 32,
            bottleneck_downsampling: 4,
            ..Default::default()
        };
        let cfg = validate_config(cfg).unwrap();
        assert_eq!(cfg.bottleneck_hw(), 8);
    }

    #[test]
    fn indivisible_image_size_rejected() {
        let cfg = ModelConfig {
            image_size: 30,
            bottleneck_downsampling: 4,
            ..Default::default()
        };
        let err = validate_config(cfg).unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
    }

    #[test]
    fn fg_must_leave_room_for_bg() {
        let cfg = ModelConfig {
            fg_channels: 8,
            bottleneck_channels: 8,
            ..Default::default()
        };
        let err = validate_config(cfg).unwrap_err().to_string();
        assert!(err.contains("must be < bottleneck_channels"), "{err}");
    }

    #[test]
    fn latent_is_deterministic_under_seed() {
        let a = sample_latent(&mut ChaCha8Rng::seed_from_u64(42), 16).unwrap();
        let b = sample_latent(&mut ChaCha8Rng::seed_from_u64(42), 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latent_moments_match_standard_normal() {
        // law-of-large-numbers oracle: 1e5 draws, dim 16
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let dim = 16;
        let n = 100_000;
        let mut sum = vec![0.0; dim];
        let mut sumsq = vec![0.0; dim];
        for _ in 0..n {
            let z = sample_latent(&mut rng, dim).unwrap();
            for (i, v) in z.values.iter().enumerate() {
                sum[i] += v;
                sumsq[i] += v * v;
            }
        }
        for i in 0..dim {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "coord {i} mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "coord {i} var {var}");
        }
    }

    #[test]
    fn zero_dim_latent_rejected() {
        assert!(sample_latent(&mut ChaCha8Rng::seed_from_u64(0), 0).is_err());
    }

    #[test]
    fn domain_schema_is_dense_with_anchor() {
        let s = DomainSchema::canonical(3).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.anchor_id(), 0);
        for (i, d) in s.domains().iter().enumerate() {
            assert_eq!(d.id, i);
        }
        assert_eq!(s.parse("normal").unwrap(), 0);
        assert_eq!(s.parse("SPOTS").unwrap(), 2);
        assert!(s.parse("Cracks").is_err());
    }

    #[test]
    fn image_range_enforced() {
        let ok = Array3::zeros((3, 4, 4));
        assert!(ImageTensor::new(ok).is_ok());
        let mut bad = Array3::zeros((3, 4, 4));
        bad[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(bad).is_err());
    }
}
