//! Fidelity, diversity, memorization, and downstream-utility measurement:
//! Fréchet distance on embedded moments, mean pairwise embedded distance,
//! nearest-neighbor audit, and the gradient-reversal defect classifier
//! benchmark.

use crate::config::EvalConfig;
use crate::datagen::{
    image_to_rgb8, sha256_hex, AugmentParams, BalancedSampler, DatasetManifest, SamplerMode, Split,
};
use crate::domain::{ImageTensor, LabeledSample};
use crate::error::{DtganError, Result};
use crate::networks::{Conv, Dense, PlainResBlock, Resample};
use crate::params::{Bindings, ParamSet};
use crate::rng::{rng_from, tag};
use dtgan_autodiff::{Adam, Tape, TensorId};
use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------------------
// Fréchet distance
// ---------------------------------------------------------------------------

/// Squared Fréchet distance between two Gaussians:
/// ||mu1-mu2||^2 + tr(c1 + c2 - 2 (c1 c2)^{1/2}).
///
/// The square-root trace comes from the eigendecomposition of the
/// symmetrized product; negative eigenvalues clamp to zero.
pub fn frechet_distance(
    mu1: &Array1<f64>,
    cov1: &Array2<f64>,
    mu2: &Array1<f64>,
    cov2: &Array2<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != [d, d] || cov2.shape() != [d, d] {
        return Err(DtganError::Eval(format!(
            "dimension mismatch: mu {}/{} cov {:?}/{:?}",
            mu1.len(),
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    let sym = |c: &Array2<f64>| -> Array2<f64> { (c + &c.t()) / 2.0 };
    let c1 = sym(cov1);
    let c2 = sym(cov2);
    let prod = c1.dot(&c2);
    let prod_sym = (&prod + &prod.t()) / 2.0;
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| prod_sym[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let sqrt_trace: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let trace_term = c1.diag().sum() + c2.diag().sum() - 2.0 * sqrt_trace;
    Ok(mean_term + trace_term)
}

/// Sample mean and unbiased covariance of a set of embeddings.
pub fn gaussian_moments(embs: &[Array1<f64>]) -> Result<(Array1<f64>, Array2<f64>)> {
    if embs.len() < 2 {
        return Err(DtganError::Eval("need >= 2 samples for moments".into()));
    }
    let d = embs[0].len();
    let n = embs.len() as f64;
    let mut mu = Array1::<f64>::zeros(d);
    for e in embs {
        mu += e;
    }
    mu /= n;
    let mut cov = Array2::<f64>::zeros((d, d));
    for e in embs {
        let c = e - &mu;
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

/// Deterministic image -> feature map used by all metrics.
pub enum Embedder {
    /// Channel means/stds plus a 4x4 grid of gray block means (dim 22).
    RawMoments,
    /// Penultimate features of a small trained classifier.
    Probe(ProbeModel),
}

impl Embedder {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::RawMoments => 22,
            Embedder::Probe(p) => p.embed_dim,
        }
    }

    pub fn provenance(&self) -> &'static str {
        match self {
            Embedder::RawMoments => "raw-pixel-moments",
            Embedder::Probe(_) => "trained-probe",
        }
    }

    pub fn embed(&self, img: &ImageTensor) -> Array1<f64> {
        match self {
            Embedder::RawMoments => raw_moments(img),
            Embedder::Probe(p) => p.embed(img),
        }
    }

    pub fn embed_all(&self, imgs: &[ImageTensor]) -> Vec<Array1<f64>> {
        imgs.par_iter().map(|i| self.embed(i)).collect()
    }
}

fn raw_moments(img: &ImageTensor) -> Array1<f64> {
    let d = img.data();
    let (h, w) = (d.shape()[1], d.shape()[2]);
    let mut out = Vec::with_capacity(22);
    for c in 0..3 {
        let plane = d.index_axis(ndarray::Axis(0), c);
        let mean = plane.sum() / (h * w) as f64;
        let var = plane.mapv(|v| (v - mean) * (v - mean)).sum() / (h * w) as f64;
        out.push(mean);
        out.push(var.sqrt());
    }
    // 4x4 gray block means
    for bi in 0..4 {
        for bj in 0..4 {
            let (i0, i1) = (bi * h / 4, ((bi + 1) * h / 4).max(bi * h / 4 + 1));
            let (j0, j1) = (bj * w / 4, ((bj + 1) * w / 4).max(bj * w / 4 + 1));
            let mut acc = 0.0;
            let mut n = 0.0;
            for i in i0..i1 {
                for j in j0..j1 {
                    acc += (d[[0, i, j]] + d[[1, i, j]] + d[[2, i, j]]) / 3.0;
                    n += 1.0;
                }
            }
            out.push(acc / n);
        }
    }
    Array1::from_vec(out)
}

// ---------------------------------------------------------------------------
// small residual classifier (probe + benchmark backbone)
// ---------------------------------------------------------------------------

pub(crate) struct SmallCnn {
    from_rgb: Conv,
    blocks: Vec<PlainResBlock>,
    embed: Dense,
    head: Dense,
    grl_head: Option<Dense>,
}

impl SmallCnn {
    /// `blocks` residual blocks of base `width`; downsampling at block 0 and
    /// block blocks/2. Optional auxiliary real/fake head for GRL training.
    pub(crate) fn structure(
        prefix: &str,
        width: usize,
        blocks: usize,
        embed_dim: usize,
        n_classes: usize,
        grl_head: bool,
    ) -> Self {
        assert!(blocks >= 1);
        let mut blks = Vec::new();
        let mut c = width;
        for i in 0..blocks {
            let down = i == 0 || i == blocks / 2;
            let cout = if down { (c * 2).min(width * 4) } else { c };
            let resample = if down { Resample::Down } else { Resample::None };
            blks.push(PlainResBlock::new(
                &format!("{prefix}.blk{i}"),
                c,
                cout,
                false,
                resample,
            ));
            c = cout;
        }
        SmallCnn {
            from_rgb: Conv::new(format!("{prefix}.from_rgb"), 3, width, 3, 1, true),
            blocks: blks,
            embed: Dense::new(format!("{prefix}.embed"), 2 * c, embed_dim, true),
            head: Dense::new(format!("{prefix}.head"), embed_dim, n_classes, true),
            grl_head: grl_head.then(|| Dense::new(format!("{prefix}.grl_head"), embed_dim, 2, true)),
        }
    }

    pub(crate) fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        self.from_rgb.init(p, rng);
        for b in &self.blocks {
            b.init(p, rng);
        }
        self.embed.init(p, rng);
        self.head.init(p, rng);
        if let Some(g) = &self.grl_head {
            g.init(p, rng);
        }
    }

    /// Returns (embedding, class logits, optional real/fake logits through
    /// the gradient-reversal op at strength `grl_lambda`).
    pub(crate) fn forward(
        &self,
        t: &mut Tape,
        b: &Bindings,
        x: TensorId,
        grl_lambda: Option<f64>,
    ) -> (TensorId, TensorId, Option<TensorId>) {
        let mut h = self.from_rgb.fwd(t, b, x);
        for blk in &self.blocks {
            h = blk.fwd(t, b, h);
        }
        h = t.leaky_relu(h, 0.2);
        // average pooling captures the global texture, max pooling the
        // strongest local response (tiny defects survive it)
        let avg = t.global_avg_pool(h);
        let mx = t.global_max_pool(h);
        let pooled = t.concat_v(avg, mx);
        let emb_pre = self.embed.fwd(t, b, pooled);
        let emb = t.leaky_relu(emb_pre, 0.2);
        let logits = self.head.fwd(t, b, emb);
        let rf = match (&self.grl_head, grl_lambda) {
            (Some(gh), Some(lambda)) => {
                let rev = grl(t, emb, lambda);
                Some(gh.fwd(t, b, rev))
            }
            _ => None,
        };
        (emb, logits, rf)
    }
}

/// Gradient reversal: identity forward; upstream gradient times -lambda on
/// the way back.
pub fn grl(t: &mut Tape, features: TensorId, lambda: f64) -> TensorId {
    assert!(lambda >= 0.0, "grl lambda must be >= 0");
    t.grl(features, lambda)
}

/// A trained classifier with frozen parameters.
pub struct ProbeModel {
    cnn: SmallCnn,
    params: ParamSet,
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl ProbeModel {
    pub fn embed(&self, img: &ImageTensor) -> Array1<f64> {
        let mut t = Tape::new();
        let b = Bindings::frozen(&self.params);
        let x = t.constant(img.data().clone().into_dyn());
        let (emb, _, _) = self.cnn.forward(&mut t, &b, x, None);
        t.value(emb)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("embedding is 1-d")
    }

    pub fn predict(&self, img: &ImageTensor) -> usize {
        let mut t = Tape::new();
        let b = Bindings::frozen(&self.params);
        let x = t.constant(img.data().clone().into_dyn());
        let (_, logits, _) = self.cnn.forward(&mut t, &b, x, None);
        argmax(t.value(logits).as_slice().unwrap())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Train a small classifier on (image, label) pairs. Deterministic in seed.
/// Plain uniform sampling, traditional augmentation off (probe training uses
/// clean images so embeddings stay comparable).
fn train_small_classifier(
    data: &[(ImageTensor, usize)],
    n_classes: usize,
    width: usize,
    blocks: usize,
    embed_dim: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<ProbeModel> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, l)) in data.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(DtganError::Eval(
            "degenerate training data: fewer than two classes".into(),
        ));
    }
    let cells: Vec<Vec<usize>> = by_class.into_values().collect();
    let cnn = SmallCnn::structure("p", width, blocks, embed_dim, n_classes, false);
    let mut params = ParamSet::new();
    let mut rng = rng_from(seed, &[tag::CLS, 1]);
    cnn.init(&mut params, &mut rng);
    let mut opt = Adam::new(lr, 0.5, 0.999);

    let steps = epochs * data.len().div_ceil(batch);
    for step in 0..steps {
        let mut srng = rng_from(seed, &[tag::CLS, 2, step as u64]);
        // class-balanced draws keep minority defect cells represented;
        // axis flips stretch the handful of unique minority images
        let picks: Vec<(ImageTensor, usize)> = (0..batch)
            .map(|_| {
                let cell = &cells[srng.random_range(0..cells.len())];
                let (img, label) = &data[cell[srng.random_range(0..cell.len())]];
                let mut d = img.data().clone();
                if srng.random::<f64>() < 0.5 {
                    d = crate::datagen::flip_horizontal(&d);
                }
                if srng.random::<f64>() < 0.5 {
                    d = crate::datagen::flip_vertical(&d);
                }
                (ImageTensor::new(d).expect("flip keeps range"), *label)
            })
            .collect();
        let idxs: Vec<usize> = (0..picks.len()).collect();
        let grads = batch_class_grads(&cnn, &params, &picks, &idxs, None)?;
        opt.step(params.map.iter_mut().map(|(k, v)| {
            (k.as_str(), v, grads.get(k.as_str()))
        }));
    }
    Ok(ProbeModel {
        cnn,
        params,
        embed_dim,
        n_classes,
    })
}

fn batch_class_grads(
    cnn: &SmallCnn,
    params: &ParamSet,
    data: &[(ImageTensor, usize)],
    idxs: &[usize],
    grl_batch: Option<(&[bool], f64)>,
    // (is_fake flags aligned with idxs, lambda)
) -> Result<BTreeMap<String, dtgan_autodiff::Arr>> {
    let outcomes: Result<Vec<BTreeMap<String, dtgan_autodiff::Arr>>> = idxs
        .par_iter()
        .enumerate()
        .map(|(bi, &i)| {
            let (img, label) = &data[i];
            let mut t = Tape::new();
            let b = Bindings::new(params, &["p."]);
            let x = t.constant(img.data().clone().into_dyn());
            let lambda = grl_batch.map(|(_, l)| l);
            let (_, logits, rf) = cnn.forward(&mut t, &b, x, lambda);
            let mut loss = crate::losses::fg_cls_loss(&mut t, logits, *label)?;
            if let (Some(rf_logits), Some((flags, _))) = (rf, grl_batch) {
                let rf_target = usize::from(flags[bi]);
                let rf_loss = crate::losses::fg_cls_loss(&mut t, rf_logits, rf_target)?;
                loss = t.add(loss, rf_loss);
            }
            let grads = t.backward(loss);
            Ok(b.gradients(&grads))
        })
        .collect();
    let outcomes = outcomes?;
    let mut total: BTreeMap<String, dtgan_autodiff::Arr> = BTreeMap::new();
    let scale = 1.0 / idxs.len() as f64;
    for o in outcomes {
        for (k, v) in o {
            match total.get_mut(&k) {
                Some(acc) => acc.zip_mut_with(&v, |a, &b| *a += b * scale),
                None => {
                    total.insert(k, v * scale);
                }
            }
        }
    }
    Ok(total)
}

/// Train the embedding probe on (domain x product) labels from the train
/// split; the penultimate layer is the embedding.
pub fn train_probe(manifest: &DatasetManifest, cfg: &EvalConfig, seed: u64) -> Result<Embedder> {
    let n_products = manifest.n_products();
    let data: Vec<(ImageTensor, usize)> = manifest
        .entries_in(Split::Train)
        .map(|e| {
            let img = manifest.load_image(e)?;
            Ok((img, e.domain * n_products + e.product))
        })
        .collect::<Result<_>>()?;
    if data.is_empty() {
        return Err(DtganError::Eval("probe: empty train split".into()));
    }
    let n_classes = manifest.n_domains() * n_products;
    let probe = train_small_classifier(
        &data,
        n_classes,
        8,
        2,
        cfg.embed_dim,
        cfg.probe_epochs,
        cfg.probe_lr,
        16,
        seed,
    )?;
    Ok(Embedder::Probe(probe))
}

/// Accuracy of a probe on labeled images.
pub fn probe_accuracy(probe: &ProbeModel, data: &[(ImageTensor, usize)]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits: usize = data
        .par_iter()
        .map(|(img, l)| usize::from(probe.predict(img) == *l))
        .sum();
    hits as f64 / data.len() as f64
}

/// Train a classifier over product labels (used for identity-preservation
/// agreement on synthesized images).
pub fn train_product_classifier(
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<ProbeModel> {
    let data: Vec<(ImageTensor, usize)> = manifest
        .entries_in(Split::Train)
        .map(|e| Ok((manifest.load_image(e)?, e.product)))
        .collect::<Result<_>>()?;
    train_small_classifier(
        &data,
        manifest.n_products(),
        8,
        2,
        cfg.embed_dim,
        cfg.probe_epochs,
        cfg.probe_lr,
        16,
        seed,
    )
}

// ---------------------------------------------------------------------------
// metrics over image sets
// ---------------------------------------------------------------------------

/// Fréchet distance between Gaussian fits of the embedded sets.
pub fn fid_proxy(real: &[ImageTensor], fake: &[ImageTensor], embed: &Embedder) -> Result<f64> {
    let need = embed.dim() + 1;
    if real.len() < need || fake.len() < need {
        return Err(DtganError::Eval(format!(
            "too few samples: need >= {need} per side, got {} real / {} fake",
            real.len(),
            fake.len()
        )));
    }
    let er = embed.embed_all(real);
    let ef = embed.embed_all(fake);
    let (mu1, c1) = gaussian_moments(&er)?;
    let (mu2, c2) = gaussian_moments(&ef)?;
    frechet_distance(&mu1, &c1, &mu2, &c2)
}

/// Mean embedded L2 distance over all unordered pairs. Higher = more diverse.
pub fn pairwise_diversity(samples: &[ImageTensor], embed: &Embedder) -> Result<f64> {
    if samples.len() < 2 {
        return Err(DtganError::Eval("pairwise diversity needs >= 2 samples".into()));
    }
    let embs = embed.embed_all(samples);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            let d: f64 = embs[i]
                .iter()
                .zip(embs[j].iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct NnAuditRow {
    pub generated: usize,
    pub nearest: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NnAudit {
    pub rows: Vec<NnAuditRow>,
    pub min: f64,
    pub p1: f64,
    pub median: f64,
    /// Indices flagged as exact copies (distance < 1e-6).
    pub flagged: Vec<usize>,
}

/// Nearest train neighbor (embedded L2) for every generated image.
pub fn nn_audit(generated: &[ImageTensor], train: &[ImageTensor], embed: &Embedder) -> Result<NnAudit> {
    if generated.is_empty() || train.is_empty() {
        return Err(DtganError::Eval("nn_audit needs nonempty sets".into()));
    }
    let ge = embed.embed_all(generated);
    let te = embed.embed_all(train);
    let rows: Vec<NnAuditRow> = ge
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let mut best = (0usize, f64::INFINITY);
            for (ti, t) in te.iter().enumerate() {
                let d: f64 = g
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d < best.1 {
                    best = (ti, d);
                }
            }
            NnAuditRow {
                generated: gi,
                nearest: best.0,
                distance: best.1,
            }
        })
        .collect();
    let mut dists: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| -> f64 {
        let k = ((dists.len() as f64 - 1.0) * p).round() as usize;
        dists[k]
    };
    let flagged = rows
        .iter()
        .filter(|r| r.distance < 1e-6)
        .map(|r| r.generated)
        .collect();
    Ok(NnAudit {
        min: dists[0],
        p1: pct(0.01),
        median: pct(0.5),
        rows,
        flagged,
    })
}

// ---------------------------------------------------------------------------
// downstream defect classifier benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub width: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub grl_lambda: f64,
    pub seeds: Vec<u64>,
}

impl ClassifierConfig {
    pub fn from_eval(cfg: &EvalConfig) -> Self {
        ClassifierConfig {
            width: cfg.cls_width,
            blocks: cfg.cls_blocks,
            epochs: cfg.cls_epochs,
            lr: cfg.cls_lr,
            batch: cfg.cls_batch,
            grl_lambda: cfg.grl_lambda,
            seeds: (0..cfg.cls_seeds as u64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DtganError::Config("classifier needs >= 1 seed".into()));
        }
        if self.grl_lambda < 0.0 {
            return Err(DtganError::Config("grl_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClsBenchReport {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ClsBenchReport {
    fn from_errors(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        ClsBenchReport {
            per_seed,
            mean,
            std: var.sqrt(),
        }
    }
}

pub fn pixel_hash(img: &ImageTensor) -> String {
    sha256_hex(&image_to_rgb8(img))
}

/// No synthetic sample may collide with val/test content.
pub fn leak_check(synthetic: &[LabeledSample], manifest: &DatasetManifest) -> Result<()> {
    let mut held: BTreeSet<String> = BTreeSet::new();
    for e in manifest.entries.iter().filter(|e| e.split != Split::Train) {
        held.insert(pixel_hash(&manifest.load_image(e)?));
    }
    for (i, s) in synthetic.iter().enumerate() {
        if held.contains(&pixel_hash(&s.image)) {
            return Err(DtganError::Eval(format!(
                "leak check failed: synthetic sample {i} matches val/test content"
            )));
        }
    }
    Ok(())
}

struct ClsSample {
    image: ImageTensor,
    domain: usize,
    is_fake: bool,
}

/// Train the defect classifier on real (+ optional synthetic) data and
/// report the test error for one seed.
///
/// With synthetic data: natural sampling over the combined pool plus a
/// real/fake head through the gradient-reversal op (lambda warms up linearly
/// over the first quarter of the steps). Without: oversampling over
/// (product, domain) cells and no auxiliary head. Traditional augmentation
/// is always on. Model selection on val error.
pub fn train_defect_classifier(
    manifest: &DatasetManifest,
    train_indices: &[usize],
    synthetic: Option<&[LabeledSample]>,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if let Some(synth) = synthetic {
        leak_check(synth, manifest)?;
    }
    let n_domains = manifest.n_domains();

    // materialize pools
    let mut pool: Vec<ClsSample> = Vec::new();
    for &i in train_indices {
        let e = &manifest.entries[i];
        debug_assert_eq!(e.split, Split::Train);
        pool.push(ClsSample {
            image: manifest.load_image(e)?,
            domain: e.domain,
            is_fake: false,
        });
    }
    let n_real = pool.len();
    if n_real == 0 {
        return Err(DtganError::Dataset("classifier: empty train set".into()));
    }
    if let Some(synth) = synthetic {
        for s in synth {
            pool.push(ClsSample {
                image: s.image.clone(),
                domain: s.domain,
                is_fake: true,
            });
        }
    }
    let use_grl = synthetic.is_some_and(|s| !s.is_empty());

    let val: Vec<(ImageTensor, usize)> = manifest
        .entries_in(Split::Val)
        .map(|e| Ok((manifest.load_image(e)?, e.domain)))
        .collect::<Result<_>>()?;
    let test: Vec<(ImageTensor, usize)> = manifest
        .entries_in(Split::Test)
        .map(|e| Ok((manifest.load_image(e)?, e.domain)))
        .collect::<Result<_>>()?;
    if val.is_empty() || test.is_empty() {
        return Err(DtganError::Dataset("classifier: empty val or test split".into()));
    }

    // oversampling only when no synthetic balancing
    let sampler = if use_grl {
        None
    } else {
        Some(BalancedSampler::over_indices(
            manifest,
            train_indices.to_vec(),
            SamplerMode::Oversample,
        )?)
    };
    // map manifest entry index -> pool index for the oversampler
    let entry_to_pool: BTreeMap<usize, usize> = train_indices
        .iter()
        .enumerate()
        .map(|(pi, &ei)| (ei, pi))
        .collect();

    let cnn = SmallCnn::structure("p", cfg.width, cfg.blocks, 16, n_domains, use_grl);
    let mut params = ParamSet::new();
    let mut rng = rng_from(seed, &[tag::CLS, 10]);
    cnn.init(&mut params, &mut rng);
    let mut opt = Adam::new(cfg.lr, 0.5, 0.999);

    let steps_per_epoch = n_real.div_ceil(cfg.batch).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = (total_steps / 4).max(1);
    let mut best = (f64::INFINITY, params.clone());

    let aug = AugmentParams::default();
    for step in 0..total_steps {
        let mut srng = rng_from(seed, &[tag::CLS, 11, step as u64]);
        let mut batch_imgs: Vec<(ImageTensor, usize)> = Vec::with_capacity(cfg.batch);
        let mut flags: Vec<bool> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let pi = match &sampler {
                Some(s) => entry_to_pool[&s.next(&mut srng)],
                None => srng.random_range(0..pool.len()),
            };
            let s = &pool[pi];
            batch_imgs.push((traditional_augmented(&s.image, &mut srng, &aug), s.domain));
            flags.push(s.is_fake);
        }
        let lambda = if use_grl {
            let w = ((step + 1) as f64 / warmup as f64).min(1.0);
            Some((flags.as_slice(), cfg.grl_lambda * w))
        } else {
            None
        };
        let idxs: Vec<usize> = (0..batch_imgs.len()).collect();
        let grads = batch_class_grads(&cnn, &params, &batch_imgs, &idxs, lambda)?;
        opt.step(params.map.iter_mut().map(|(k, v)| {
            (k.as_str(), v, grads.get(k.as_str()))
        }));

        if (step + 1) % steps_per_epoch == 0 {
            let model = ProbeModel {
                cnn: SmallCnn::structure("p", cfg.width, cfg.blocks, 16, n_domains, use_grl),
                params: params.clone(),
                embed_dim: 16,
                n_classes: n_domains,
            };
            let err = 1.0 - probe_accuracy(&model, &val);
            if err < best.0 {
                best = (err, params.clone());
            }
        }
    }

    let model = ProbeModel {
        cnn: SmallCnn::structure("p", cfg.width, cfg.blocks, 16, n_domains, use_grl),
        params: best.1,
        embed_dim: 16,
        n_classes: n_domains,
    };
    Ok(1.0 - probe_accuracy(&model, &test))
}

fn traditional_augmented<R: Rng>(img: &ImageTensor, rng: &mut R, p: &AugmentParams) -> ImageTensor {
    crate::datagen::traditional_augment(img, rng, p)
}

/// Five-seed protocol: error rate per seed, mean and std.
pub fn benchmark_classifier(
    manifest: &DatasetManifest,
    train_indices: &[usize],
    synthetic: Option<&[LabeledSample]>,
    cfg: &ClassifierConfig,
) -> Result<ClsBenchReport> {
    let errors: Result<Vec<f64>> = cfg
        .seeds
        .iter()
        .map(|&s| train_defect_classifier(manifest, train_indices, synthetic, cfg, s))
        .collect();
    Ok(ClsBenchReport::from_errors(errors?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_procedural, write_dataset, ProceduralSpec};
    use ndarray::{arr1, arr2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frechet_identical_gaussians_is_zero() {
        let mu = arr1(&[0.3, -1.2, 0.8]);
        let cov = arr2(&[[2.0, 0.3, 0.0], [0.3, 1.5, -0.2], [0.0, -0.2, 0.9]]);
        let d = frechet_distance(&mu, &cov, &mu, &cov).unwrap();
        assert!(d.abs() < 1e-8, "{d}");
    }

    #[test]
    fn frechet_one_dimensional_exact() {
        // N(0,1) vs N(1,1) -> (0-1)^2 + (1 + 1 - 2) = 1
        let d = frechet_distance(
            &arr1(&[0.0]),
            &arr2(&[[1.0]]),
            &arr1(&[1.0]),
            &arr2(&[[1.0]]),
        )
        .unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn frechet_diagonal_matches_per_coordinate_sum() {
        // independent oracle: for diagonal covariances and equal means the
        // distance reduces to sums of 1-d terms (sigma1_i - sigma2_i)^2
        let mu = arr1(&[0.0, 0.0]);
        let c1 = arr2(&[[1.0, 0.0], [0.0, 4.0]]);
        let c2 = arr2(&[[4.0, 0.0], [0.0, 1.0]]);
        let d = frechet_distance(&mu, &c1, &mu, &c2).unwrap();
        let oracle: f64 = [(1.0f64, 4.0f64), (4.0, 1.0)]
            .iter()
            .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
            .sum();
        assert!((d - oracle).abs() < 1e-8, "{d} vs {oracle}");
        assert!((oracle - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_clamps_negative_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu1 = arr1(&[0.1, 0.5, -0.3, 0.9]);
        let mu2 = arr1(&[-0.2, 0.1, 0.6, 0.4]);
        let rand_psd = |rng: &mut ChaCha8Rng| {
            let a = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
            a.t().dot(&a)
        };
        let c1 = rand_psd(&mut rng);
        let c2 = rand_psd(&mut rng);
        let ab = frechet_distance(&mu1, &c1, &mu2, &c2).unwrap();
        let ba = frechet_distance(&mu2, &c2, &mu1, &c1).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        assert!(ab >= 0.0);

        // degenerate rank-1 covariances still produce a finite value
        let lowrank = {
            let v = arr1(&[1.0, 0.0, 0.0, 0.0]);
            let mut m = Array2::zeros((4, 4));
            for i in 0..4 {
                for j in 0..4 {
                    m[[i, j]] = v[i] * v[j];
                }
            }
            m
        };
        let d = frechet_distance(&mu1, &lowrank, &mu2, &c2).unwrap();
        assert!(d.is_finite());
    }

    #[test]
    fn frechet_dimension_mismatch_is_an_error() {
        let err = frechet_distance(
            &arr1(&[0.0]),
            &arr2(&[[1.0]]),
            &arr1(&[0.0, 1.0]),
            &arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        );
        assert!(err.is_err());
    }

    #[test]
    fn fid_proxy_zero_on_identical_sets_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<ImageTensor> = (0..30)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| {
                    rng.random::<f64>() * 2.0 - 1.0
                }))
                .unwrap()
            })
            .collect();
        let more: Vec<ImageTensor> = (0..30)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| {
                    rng.random::<f64>() * 2.0 - 1.0
                }))
                .unwrap()
            })
            .collect();
        let e = Embedder::RawMoments;
        let same = fid_proxy(&imgs, &imgs, &e).unwrap();
        assert!(same.abs() < 1e-6, "{same}");
        let ab = fid_proxy(&imgs, &more, &e).unwrap();
        let ba = fid_proxy(&more, &imgs, &e).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 0.0);

        // too few samples
        assert!(fid_proxy(&imgs[..5], &more, &e).is_err());
    }

    #[test]
    fn fid_moment_blend_decreases_monotonically() {
        // analytic check on Gaussian moments: blending fake moments toward
        // the real ones must shrink the distance at every step
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        let rand_psd = |rng: &mut ChaCha8Rng| {
            let a = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() - 0.5);
            a.t().dot(&a) + Array2::<f64>::eye(d) * 0.1
        };
        let mu_r = Array1::from_shape_fn(d, |_| rng.random::<f64>());
        let c_r = rand_psd(&mut rng);
        let mu_f = Array1::from_shape_fn(d, |_| rng.random::<f64>() + 2.0);
        let c_f = rand_psd(&mut rng) * 3.0;
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let a = k as f64 / 10.0; // 0 = fake, 1 = real
            let mu = &mu_f * (1.0 - a) + &mu_r * a;
            let c = &c_f * (1.0 - a) + &c_r * a;
            let dist = frechet_distance(&mu_r, &c_r, &mu, &c).unwrap();
            assert!(dist <= prev + 1e-9, "blend {a}: {dist} > {prev}");
            prev = dist;
        }
        assert!(prev.abs() < 1e-8);
    }

    #[test]
    fn pairwise_diversity_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| {
            ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| {
                rng.random::<f64>() * 2.0 - 1.0
            }))
            .unwrap()
        };
        let imgs: Vec<ImageTensor> = (0..6).map(|_| mk(&mut rng)).collect();
        let e = Embedder::RawMoments;

        // identical samples -> 0
        let same: Vec<ImageTensor> = (0..5).map(|_| imgs[0].clone()).collect();
        assert_eq!(pairwise_diversity(&same, &e).unwrap(), 0.0);

        // brute-force oracle over unordered pairs
        let got = pairwise_diversity(&imgs, &e).unwrap();
        let embs: Vec<Array1<f64>> = imgs.iter().map(|i| e.embed(i)).collect();
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                total += embs[i]
                    .iter()
                    .zip(embs[j].iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                n += 1;
            }
        }
        assert!((got - total / n as f64).abs() < 1e-12);

        // duplicating the set keeps the mean score consistent with the
        // recomputed pair count (each cross pair adds distance, self pairs 0)
        let mut doubled = imgs.clone();
        doubled.extend(imgs.iter().cloned());
        let got2 = pairwise_diversity(&doubled, &e).unwrap();
        let n2 = doubled.len() * (doubled.len() - 1) / 2;
        // oracle: every unordered pair among 12 items; distances between
        // copies are 0, cross/self structure recomputed by brute force
        let embs2: Vec<Array1<f64>> = doubled.iter().map(|i| e.embed(i)).collect();
        let mut total2 = 0.0;
        for i in 0..embs2.len() {
            for j in (i + 1)..embs2.len() {
                total2 += embs2[i]
                    .iter()
                    .zip(embs2[j].iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        assert!((got2 - total2 / n2 as f64).abs() < 1e-12);

        // order invariance
        let mut rev = imgs.clone();
        rev.reverse();
        assert!((pairwise_diversity(&rev, &e).unwrap() - got).abs() < 1e-12);

        assert!(pairwise_diversity(&imgs[..1], &e).is_err());
    }

    #[test]
    fn nn_audit_flags_copies_and_respects_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train: Vec<ImageTensor> = (0..12)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| {
                    rng.random::<f64>() * 1.6 - 0.8
                }))
                .unwrap()
            })
            .collect();
        let e = Embedder::RawMoments;

        // copies of train -> every row flagged at distance 0
        let audit = nn_audit(&train, &train, &e).unwrap();
        assert_eq!(audit.rows.len(), train.len());
        assert_eq!(audit.flagged.len(), train.len());
        assert!(audit.min.abs() < 1e-12);

        // train + per-pixel noise sigma=0.1 -> strictly positive distances,
        // no flags; the floor follows from the noise level: block means of
        // 4 px (8x8 grid blocks are 2x2) shift by sigma/2 per dim on average
        let noisy: Vec<ImageTensor> = train
            .iter()
            .map(|img| {
                let d = img.data().mapv(|v| {
                    (v + 0.1
                        * {
                            let u1: f64 = rng.random::<f64>().max(1e-12);
                            let u2: f64 = rng.random();
                            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                        })
                    .clamp(-1.0, 1.0)
                });
                ImageTensor::new(d).unwrap()
            })
            .collect();
        let audit = nn_audit(&noisy, &train, &e).unwrap();
        assert!(audit.flagged.is_empty());
        assert!(audit.min > 1e-4, "min {}", audit.min);
        assert_eq!(audit.rows.len(), noisy.len());
    }

    #[test]
    fn probe_training_learns_the_procedural_classes() {
        // default procedural counts (400/60/20 per product) at 32x32: the
        // stated held-out accuracy floor applies to this default dataset
        let dir = tempfile::tempdir().unwrap();
        let spec = ProceduralSpec {
            seed: 33,
            ..Default::default()
        };
        let samples = generate_procedural(&spec).unwrap();
        let manifest = write_dataset(&spec, &samples, dir.path()).unwrap();
        let cfg = EvalConfig {
            probe_epochs: 8,
            ..Default::default()
        };
        let embedder = train_probe(&manifest, &cfg, 7).unwrap();
        assert_eq!(embedder.dim(), cfg.embed_dim);
        assert_eq!(embedder.provenance(), "trained-probe");

        // held-out accuracy on (domain x product) labels
        let Embedder::Probe(probe) = &embedder else {
            panic!("expected probe")
        };
        let val: Vec<(ImageTensor, usize)> = manifest
            .entries_in(Split::Val)
            .map(|e| {
                (
                    manifest.load_image(e).unwrap(),
                    e.domain * manifest.n_products() + e.product,
                )
            })
            .collect();
        let acc = probe_accuracy(probe, &val);
        assert!(acc >= 0.85, "held-out probe accuracy {acc}");

        // determinism
        let e2 = train_probe(&manifest, &cfg, 7).unwrap();
        let img = manifest.load_image(&manifest.entries[0]).unwrap();
        assert_eq!(embedder.embed(&img), e2.embed(&img));
    }

    #[test]
    fn probe_rejects_single_class_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<(ImageTensor, usize)> = (0..8)
            .map(|_| {
                (
                    ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| {
                        rng.random::<f64>() - 0.5
                    }))
                    .unwrap(),
                    0usize,
                )
            })
            .collect();
        assert!(train_small_classifier(&data, 3, 4, 1, 8, 1, 1e-3, 4, 1).is_err());
    }

    #[test]
    fn grl_module_contract() {
        // forward bitwise identity
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = dtgan_autodiff::Arr::from_shape_fn(ndarray::IxDyn(&[6]), |_| rng.random::<f64>());
        let mut t = Tape::new();
        let id = t.leaf(x.clone());
        let y = grl(&mut t, id, 1.0);
        assert_eq!(t.value(y), &x);

        // lambda = 1: gradient at the input equals minus the downstream one
        let sq = t.square(y);
        let loss = t.mean_all(sq);
        let g = t.backward(loss);
        let got = g.get(id).unwrap();
        let expect = x.mapv(|v| -2.0 * v / 6.0);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // lambda = 0 passes zero gradient
        let mut t = Tape::new();
        let id = t.leaf(x.clone());
        let y = grl(&mut t, id, 0.0);
        let sq = t.square(y);
        let loss = t.mean_all(sq);
        let g = t.backward(loss);
        assert!(g.get(id).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leak_check_catches_heldout_content() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ProceduralSpec {
            image_size: 16,
            seed: 40,
            counts: vec![[8, 6, 6]],
            textures: crate::datagen::default_textures(1),
            ..Default::default()
        };
        let samples = generate_procedural(&spec).unwrap();
        let manifest = write_dataset(&spec, &samples, dir.path()).unwrap();

        // a synthetic set copied from a val image must fail
        let val_entry = manifest.entries_in(Split::Val).next().unwrap();
        let stolen = LabeledSample {
            image: manifest.load_image(val_entry).unwrap(),
            domain: val_entry.domain,
            product: val_entry.product,
            defect_mask: None,
        };
        assert!(leak_check(&[stolen], &manifest).is_err());

        // genuinely novel image passes
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fresh = LabeledSample {
            image: ImageTensor::new(Array3::from_shape_fn((3, 16, 16), |_| {
                rng.random::<f64>() * 2.0 - 1.0
            }))
            .unwrap(),
            domain: 1,
            product: 0,
            defect_mask: None,
        };
        assert!(leak_check(&[fresh], &manifest).is_ok());
    }
}

/// Diagnostic trainer used by examples: exposes the loss curve.
pub fn debug_train_probe(
    data: &[(ImageTensor, usize)],
    n_classes: usize,
    width: usize,
    embed_dim: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> (ProbeModel, Vec<f64>) {
    let cnn = SmallCnn::structure("p", width, 2, embed_dim, n_classes, false);
    let mut params = ParamSet::new();
    let mut rng = rng_from(seed, &[tag::CLS, 1]);
    cnn.init(&mut params, &mut rng);
    let mut opt = Adam::new(lr, 0.5, 0.999);
    let mut losses = Vec::new();
    let steps = epochs * data.len().div_ceil(batch);
    for step in 0..steps {
        let mut srng = rng_from(seed, &[tag::CLS, 2, step as u64]);
        let idxs: Vec<usize> = (0..batch).map(|_| srng.random_range(0..data.len())).collect();
        // loss value for the curve
        let mut lsum = 0.0;
        for &i in &idxs {
            let (img, label) = &data[i];
            let mut t = Tape::new();
            let b = Bindings::frozen(&params);
            let x = t.constant(img.data().clone().into_dyn());
            let (_, logits, _) = cnn.forward(&mut t, &b, x, None);
            let l = crate::losses::fg_cls_loss(&mut t, logits, *label).unwrap();
            lsum += t.scalar(l);
        }
        losses.push(lsum / idxs.len() as f64);
        let grads = batch_class_grads(&cnn, &params, data, &idxs, None).unwrap();
        opt.step(params.map.iter_mut().map(|(k, v)| (k.as_str(), v, grads.get(k.as_str()))));
    }
    (
        ProbeModel {
            cnn,
            params,
            embed_dim,
            n_classes,
        },
        losses,
    )
}
