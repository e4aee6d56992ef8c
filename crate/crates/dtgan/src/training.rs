//! Alternating optimization of the discriminator and the generator triple
//! (generator, encoder, mapper), EMA shadows, and deterministic seeding.

use crate::domain::{sample_latent, ImageTensor, LabeledSample, LossWeights, ModelConfig};
use crate::error::{DtganError, Result};
use crate::losses::{self, LossParts, LossReport};
use crate::networks::Networks;
use crate::params::{Bindings, ParamSet};
use crate::rng::{self, tag};
use dtgan_autodiff::{Adam, Arr, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Training hyperparameters. Adam runs with beta = (0.0, 0.99).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_e: f64,
    pub lr_m: f64,
    pub ema_decay: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_e: 1e-4,
            lr_m: 1e-6,
            ema_decay: 0.999,
            checkpoint_every: 500,
            log_every: 10,
            weights: LossWeights::default(),
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lr_e", self.lr_e),
            ("lr_m", self.lr_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DtganError::Config(format!("{name} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(DtganError::Config(format!(
                "ema_decay must be in [0,1), got {}",
                self.ema_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(DtganError::Config(
                "batch_size must be >= 2 (the diversity term needs two latents per sample)".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(DtganError::Config("total_steps must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Uniform draw over domains != y; the anchor is a valid target (defect
/// removal). Errors when there is nowhere to go.
pub fn select_target_domain<R: Rng>(y: usize, n_domains: usize, rng: &mut R) -> Result<usize> {
    if n_domains < 2 {
        return Err(DtganError::Config("need at least 2 domains".into()));
    }
    let k = rng.random_range(0..n_domains - 1);
    Ok(if k >= y { k + 1 } else { k })
}

/// shadow <- decay * shadow + (1 - decay) * live, elementwise.
pub fn ema_update(shadow: &mut Arr, live: &Arr, decay: f64) -> Result<()> {
    if shadow.shape() != live.shape() {
        return Err(DtganError::Shape(format!(
            "ema shapes {:?} vs {:?}",
            shadow.shape(),
            live.shape()
        )));
    }
    shadow.zip_mut_with(live, |s, &l| *s = decay * *s + (1.0 - decay) * l);
    Ok(())
}

/// Per-domain pools of real images used by reference-mode steps.
pub struct RefPool {
    by_domain: Vec<Vec<ImageTensor>>,
}

impl RefPool {
    pub fn from_samples(samples: &[LabeledSample], n_domains: usize) -> Self {
        let mut by_domain = vec![Vec::new(); n_domains];
        for s in samples {
            by_domain[s.domain].push(s.image.clone());
        }
        RefPool { by_domain }
    }

    pub fn draw<R: Rng>(&self, domain: usize, rng: &mut R) -> Option<&ImageTensor> {
        let pool = self.by_domain.get(domain)?;
        if pool.is_empty() {
            return None;
        }
        Some(&pool[rng.random_range(0..pool.len())])
    }

    pub fn has(&self, domain: usize) -> bool {
        self.by_domain.get(domain).is_some_and(|p| !p.is_empty())
    }
}

/// Everything the training loop owns: live parameters, EMA shadows,
/// optimizer state, and the step counter.
pub struct TrainState {
    pub nets: Networks,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub opt_enc: Adam,
    pub opt_map: Adam,
    pub step: usize,
    pub cfg: TrainConfig,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let (nets, params) = Networks::init(model_cfg);
        let mut ema = ParamSet::new();
        for (k, v) in &params.map {
            if k.starts_with("g.") || k.starts_with("e.") || k.starts_with("m.") {
                ema.insert(k.clone(), v.clone());
            }
        }
        let beta = (0.0, 0.99);
        Ok(TrainState {
            nets,
            params,
            ema,
            opt_gen: Adam::new(train_cfg.lr_g, beta.0, beta.1),
            opt_disc: Adam::new(train_cfg.lr_d, beta.0, beta.1),
            opt_enc: Adam::new(train_cfg.lr_e, beta.0, beta.1),
            opt_map: Adam::new(train_cfg.lr_m, beta.0, beta.1),
            step: 0,
            cfg: train_cfg,
        })
    }

    /// Loss weights with the decay-window default resolved.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.cfg.weights.clone();
        if w.ds_decay_steps == 0 {
            w.ds_decay_steps = (self.cfg.total_steps / 2).max(1);
        }
        w
    }

    fn apply_ema(&mut self) -> Result<()> {
        let decay = self.cfg.ema_decay;
        for (k, shadow) in self.ema.map.iter_mut() {
            let live = self.params.get(k);
            ema_update(shadow, live, decay)?;
        }
        Ok(())
    }
}

enum Guidance {
    Latent,
    Reference,
}

struct SampleOutcome {
    grads: BTreeMap<String, Arr>,
    parts: LossParts,
}

fn accumulate(total: &mut BTreeMap<String, Arr>, part: BTreeMap<String, Arr>, scale: f64) {
    for (k, v) in part {
        match total.get_mut(&k) {
            Some(acc) => acc.zip_mut_with(&v, |a, &b| *a += b * scale),
            None => {
                total.insert(k, v * scale);
            }
        }
    }
}

/// One alternating step: discriminator phase on detached fakes, then the
/// generator/encoder/mapper phase, then EMA. Deterministic given the rng.
pub fn train_step(
    state: &mut TrainState,
    batch: &[LabeledSample],
    refs: &RefPool,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(DtganError::Config("empty batch".into()));
    }
    let weights = state.effective_weights();
    let step = state.step;
    let guidance = if step % 2 == 0 {
        Guidance::Latent
    } else {
        Guidance::Reference
    };

    // Stream seeds drawn up front keep per-sample work order-independent.
    let seeds_d: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
    let seeds_g: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();

    // ---- phase D ----
    let d_outcomes: Result<Vec<SampleOutcome>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut srng = rng::rng_from(seeds_d[i], &[tag::SAMPLE_D]);
            phase_d_sample(state, sample, refs, &guidance, &weights, &mut srng)
        })
        .collect();
    let d_outcomes = d_outcomes?;

    let inv_batch = 1.0 / batch.len() as f64;
    let mut d_grads = BTreeMap::new();
    let mut d_parts = LossParts::default();
    for o in d_outcomes {
        accumulate(&mut d_grads, o.grads, inv_batch);
        d_parts.adv_d += o.parts.adv_d * inv_batch;
        d_parts.fg_cls_real += o.parts.fg_cls_real * inv_batch;
        d_parts.bg_cls_real += o.parts.bg_cls_real * inv_batch;
        d_parts.r1 += o.parts.r1 * inv_batch;
    }
    for (k, _) in d_grads.iter() {
        debug_assert!(k.starts_with("d."), "phase D gradient leaked into {k}");
    }
    state
        .opt_disc
        .step(state.params.map.iter_mut().map(|(k, v)| {
            let g = if k.starts_with("d.") { d_grads.get(k.as_str()) } else { None };
            (k.as_str(), v, g)
        }));

    // ---- phase G ----
    let g_outcomes: Result<Vec<SampleOutcome>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut srng = rng::rng_from(seeds_g[i], &[tag::SAMPLE_G]);
            phase_g_sample(state, sample, refs, &guidance, &weights, step, &mut srng)
        })
        .collect();
    let g_outcomes = g_outcomes?;

    let mut g_grads = BTreeMap::new();
    let mut g_parts = LossParts::default();
    for o in g_outcomes {
        accumulate(&mut g_grads, o.grads, inv_batch);
        g_parts.adv_g += o.parts.adv_g * inv_batch;
        g_parts.sd_rec += o.parts.sd_rec * inv_batch;
        g_parts.d_rec += o.parts.d_rec * inv_batch;
        g_parts.ds += o.parts.ds * inv_batch;
        g_parts.cyc += o.parts.cyc * inv_batch;
        g_parts.fg_cls_fake += o.parts.fg_cls_fake * inv_batch;
        g_parts.bg_cls_fake += o.parts.bg_cls_fake * inv_batch;
    }
    for (k, _) in g_grads.iter() {
        debug_assert!(
            !k.starts_with("d."),
            "phase G gradient leaked into discriminator {k}"
        );
    }
    for (opt, prefix) in [
        (&mut state.opt_gen, "g."),
        (&mut state.opt_enc, "e."),
        (&mut state.opt_map, "m."),
    ] {
        opt.step(state.params.map.iter_mut().map(|(k, v)| {
            let g = if k.starts_with(prefix) { g_grads.get(k.as_str()) } else { None };
            (k.as_str(), v, g)
        }));
    }

    state.apply_ema()?;
    state.step += 1;

    let parts = LossParts {
        adv_d: d_parts.adv_d,
        adv_g: g_parts.adv_g,
        sd_rec: g_parts.sd_rec,
        d_rec: g_parts.d_rec,
        ds: g_parts.ds,
        cyc: g_parts.cyc,
        fg_cls_real: d_parts.fg_cls_real,
        fg_cls_fake: g_parts.fg_cls_fake,
        bg_cls_real: d_parts.bg_cls_real,
        bg_cls_fake: g_parts.bg_cls_fake,
        r1: d_parts.r1,
    };
    losses::compose(&parts, &weights, step)
}

/// Build (code, style) for the target domain without gradients, for phase D.
fn guidance_pair_detached(
    state: &TrainState,
    target: usize,
    refs: &RefPool,
    guidance: &Guidance,
    rng: &mut ChaCha8Rng,
) -> Result<crate::networks::StyleDefectPair> {
    match guidance {
        Guidance::Reference if refs.has(target) => {
            let image = refs.draw(target, rng).expect("pool checked").clone();
            crate::networks::encoder_forward(&state.nets, &state.params, &image, target)
        }
        _ => {
            let z = sample_latent(rng, state.nets.cfg.latent_dim)?;
            crate::networks::mapping_forward(&state.nets, &state.params, &z, target, rng)
        }
    }
}

fn phase_d_sample(
    state: &TrainState,
    sample: &LabeledSample,
    refs: &RefPool,
    guidance: &Guidance,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let n_domains = state.nets.cfg.n_domains;
    let target = select_target_domain(sample.domain, n_domains, rng)?;
    let pair = guidance_pair_detached(state, target, refs, guidance, rng)?;
    let (fake, _) =
        crate::networks::generate(&state.nets, &state.params, &sample.image, &pair.code, &pair.style)?;

    let mut t = Tape::new();
    let b = Bindings::new(&state.params, &["d."]);
    let x_real = t.constant(sample.image.data().clone().into_dyn());
    let x_fake = t.constant(fake.data().clone().into_dyn());

    let (real_heads, _) = state.nets.disc.forward(&mut t, &b, x_real, None);
    let (fake_heads, _) = state.nets.disc.forward(&mut t, &b, x_fake, None);
    let real_logit = t.pick(real_heads.adv, sample.domain);
    let fake_logit = t.pick(fake_heads.adv, target);

    let adv = losses::adv_loss_d(&mut t, real_logit, fake_logit);
    let fg_real = losses::fg_cls_loss(&mut t, real_heads.fg, sample.domain)?;
    let bg_real = losses::bg_cls_loss(&mut t, real_heads.bg, sample.product)?;
    let r1 = losses::r1_penalty(
        &mut t,
        &state.nets.disc,
        &b,
        &state.params,
        sample.image.data(),
        sample.domain,
    );

    let mut total = adv;
    let wfg = t.scale(fg_real, weights.lambda_fg);
    total = t.add(total, wfg);
    let wbg = t.scale(bg_real, weights.lambda_bg);
    total = t.add(total, wbg);
    let wr1 = t.scale(r1, weights.lambda_r1);
    total = t.add(total, wr1);

    let grads = t.backward(total);
    let parts = LossParts {
        adv_d: t.scalar(adv),
        fg_cls_real: t.scalar(fg_real),
        bg_cls_real: t.scalar(bg_real),
        r1: t.scalar(r1),
        ..Default::default()
    };
    Ok(SampleOutcome {
        grads: b.gradients(&grads),
        parts,
    })
}

fn phase_g_sample(
    state: &TrainState,
    sample: &LabeledSample,
    refs: &RefPool,
    guidance: &Guidance,
    weights: &LossWeights,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let n_domains = state.nets.cfg.n_domains;
    let cfg = &state.nets.cfg;
    let target = select_target_domain(sample.domain, n_domains, rng)?;

    let mut t = Tape::new();
    let b = Bindings::new(&state.params, &["g.", "e.", "m."]);
    let x = t.constant(sample.image.data().clone().into_dyn());

    // two guided pairs for the diversity term
    let ((c1, s1), (c2, s2)) = match guidance {
        Guidance::Reference if refs.has(target) => {
            let r1img = refs.draw(target, rng).expect("pool checked").clone();
            let r2img = refs.draw(target, rng).expect("pool checked").clone();
            let r1 = t.constant(r1img.data().clone().into_dyn());
            let r2 = t.constant(r2img.data().clone().into_dyn());
            (
                state.nets.encoder.forward(&mut t, &b, r1, target)?,
                state.nets.encoder.forward(&mut t, &b, r2, target)?,
            )
        }
        _ => {
            let z1 = sample_latent(rng, cfg.latent_dim)?;
            let z2 = sample_latent(rng, cfg.latent_dim)?;
            let z1 = t.constant(z1.values.into_dyn());
            let z2 = t.constant(z2.values.into_dyn());
            (
                state.nets.mapper.forward(&mut t, &b, z1, target, rng)?,
                state.nets.mapper.forward(&mut t, &b, z2, target, rng)?,
            )
        }
    };

    let enc_x = state.nets.gen.encode(&mut t, &b, x);
    let dec11 = state.nets.gen.decode(&mut t, &b, enc_x.bg, c1, s1);
    let fake = dec11.image;

    let (fake_heads, _) = state.nets.disc.forward(&mut t, &b, fake, None);
    let fake_logit = t.pick(fake_heads.adv, target);
    let adv_g = losses::adv_loss_g(&mut t, fake_logit);
    let fg_fake = losses::fg_cls_loss(&mut t, fake_heads.fg, target)?;
    let bg_fake = losses::bg_cls_loss(&mut t, fake_heads.bg, sample.product)?;

    // style-defect reconstruction through the encoder
    let (c_rec, s_rec) = state.nets.encoder.forward(&mut t, &b, fake, target)?;
    let sd = losses::sd_rec_loss(&mut t, c1, c_rec, s1, s_rec)?;

    // diversity across the four mixed decodes
    let dec12 = state.nets.gen.decode(&mut t, &b, enc_x.bg, c1, s2);
    let dec21 = state.nets.gen.decode(&mut t, &b, enc_x.bg, c2, s1);
    let dec22 = state.nets.gen.decode(&mut t, &b, enc_x.bg, c2, s2);
    let ds = losses::diversity_loss(&mut t, [fake, dec12.image, dec21.image, dec22.image])?;

    // cycle back with the source's own code and style
    let (c_src, s_src) = state.nets.encoder.forward(&mut t, &b, x, sample.domain)?;
    let enc_fake = state.nets.gen.encode(&mut t, &b, fake);
    let cyc_dec = state.nets.gen.decode(&mut t, &b, enc_fake.bg, c_src, s_src);
    let cyc = losses::cycle_loss(&mut t, x, cyc_dec.image)?;

    // bottleneck-extraction consistency
    let d_rec = losses::d_rec_loss(&mut t, enc_x.fg, c_src, enc_fake.fg, c1)?;

    let mut total = adv_g;
    let wsd = t.scale(sd, weights.lambda_sd);
    total = t.add(total, wsd);
    let wdr = t.scale(d_rec, weights.lambda_d);
    total = t.add(total, wdr);
    let wds = t.scale(ds, -weights.lambda_ds_at(step));
    total = t.add(total, wds);
    let wcyc = t.scale(cyc, weights.lambda_cyc);
    total = t.add(total, wcyc);
    let wfg = t.scale(fg_fake, weights.lambda_fg);
    total = t.add(total, wfg);
    let wbg = t.scale(bg_fake, weights.lambda_bg);
    total = t.add(total, wbg);

    let grads = t.backward(total);
    let parts = LossParts {
        adv_g: t.scalar(adv_g),
        sd_rec: t.scalar(sd),
        d_rec: t.scalar(d_rec),
        ds: t.scalar(ds),
        cyc: t.scalar(cyc),
        fg_cls_fake: t.scalar(fg_fake),
        bg_cls_fake: t.scalar(bg_fake),
        ..Default::default()
    };
    Ok(SampleOutcome {
        grads: b.gradients(&grads),
        parts,
    })
}
