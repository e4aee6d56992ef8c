//! Objective terms as differentiable tape functions, plus the numeric
//! composition into generator / discriminator totals.
//!
//! Conventions: non-saturating logistic adversarial form with R1
//! regularization; all L1 terms are mean-reduced; classifier fake terms
//! drive the generator only, real terms the discriminator only.

use crate::domain::LossWeights;
use crate::error::{DtganError, Result};
use crate::networks::{Discriminator, Networks};
use crate::params::{Bindings, ParamSet};
use dtgan_autodiff::tape::softplus64;
use dtgan_autodiff::{Tape, TensorId};
use ndarray::Array3;

/// Named scalar values for every objective term of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub sd_rec: f64,
    pub d_rec: f64,
    pub ds: f64,
    pub cyc: f64,
    pub fg_cls_real: f64,
    pub fg_cls_fake: f64,
    pub bg_cls_real: f64,
    pub bg_cls_fake: f64,
    pub r1: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_d,adv_g,sd_rec,d_rec,ds,cyc,fg_cls_real,fg_cls_fake,bg_cls_real,bg_cls_fake,r1,total_g,total_d";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            step,
            self.adv_d,
            self.adv_g,
            self.sd_rec,
            self.d_rec,
            self.ds,
            self.cyc,
            self.fg_cls_real,
            self.fg_cls_fake,
            self.bg_cls_real,
            self.bg_cls_fake,
            self.r1,
            self.total_g,
            self.total_d
        )
    }

    /// Error naming the first non-finite term, if any.
    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in [
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("sd_rec", self.sd_rec),
            ("d_rec", self.d_rec),
            ("ds", self.ds),
            ("cyc", self.cyc),
            ("fg_cls_real", self.fg_cls_real),
            ("fg_cls_fake", self.fg_cls_fake),
            ("bg_cls_real", self.bg_cls_real),
            ("bg_cls_fake", self.bg_cls_fake),
            ("r1", self.r1),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ] {
            if !v.is_finite() {
                return Err(DtganError::NonFinite(format!("loss term {name}")));
            }
        }
        Ok(())
    }
}

fn check_same_shape(t: &Tape, a: TensorId, b: TensorId, what: &str) -> Result<()> {
    if t.value(a).shape() != t.value(b).shape() {
        return Err(DtganError::Shape(format!(
            "{what}: {:?} vs {:?}",
            t.value(a).shape(),
            t.value(b).shape()
        )));
    }
    Ok(())
}

/// Discriminator side of the adversarial objective:
/// softplus(-real) + softplus(fake), both logits taken from the branch of
/// the sample's domain.
pub fn adv_loss_d(t: &mut Tape, real_logit: TensorId, fake_logit: TensorId) -> TensorId {
    let nr = t.neg(real_logit);
    let a = t.softplus(nr);
    let b = t.softplus(fake_logit);
    t.add(a, b)
}

/// Generator side: softplus(-fake), the non-saturating form.
pub fn adv_loss_g(t: &mut Tape, fake_logit: TensorId) -> TensorId {
    let nf = t.neg(fake_logit);
    t.softplus(nf)
}

/// The literal saturating evaluation of the adversarial objective under a
/// logistic discriminator: log sigmoid(real) + log(1 - sigmoid(fake)).
/// Used by value-level tests; equals minus [`adv_loss_d`].
pub fn adv_value_saturating(real_logit: f64, fake_logit: f64) -> f64 {
    -softplus64(-real_logit) - softplus64(fake_logit)
}

/// Style-defect reconstruction: mean-abs code error + mean-abs style error.
pub fn sd_rec_loss(
    t: &mut Tape,
    code_target: TensorId,
    code_rec: TensorId,
    style_target: TensorId,
    style_rec: TensorId,
) -> Result<TensorId> {
    check_same_shape(t, code_target, code_rec, "sd_rec codes")?;
    check_same_shape(t, style_target, style_rec, "sd_rec styles")?;
    let c = t.mean_abs_diff(code_target, code_rec);
    let s = t.mean_abs_diff(style_target, style_rec);
    Ok(t.add(c, s))
}

/// Defect reconstruction: the generator's own bottleneck extraction must
/// match the encoder code on the source and the injected code on the fake.
pub fn d_rec_loss(
    t: &mut Tape,
    fg_from_source: TensorId,
    code_source: TensorId,
    fg_from_fake: TensorId,
    code_target: TensorId,
) -> Result<TensorId> {
    check_same_shape(t, fg_from_source, code_source, "d_rec source pair")?;
    check_same_shape(t, fg_from_fake, code_target, "d_rec fake pair")?;
    let a = t.mean_abs_diff(fg_from_source, code_source);
    let b = t.mean_abs_diff(fg_from_fake, code_target);
    Ok(t.add(a, b))
}

/// Diversity objective over the four mixed outputs G(x, c_i, s_j): the sum
/// of mean-abs differences over all 6 unordered image pairs. Maximized in
/// training (entered negatively into the generator total).
///
/// Order convention: `images = [c1s1, c1s2, c2s1, c2s2]`.
pub fn diversity_loss(t: &mut Tape, images: [TensorId; 4]) -> Result<TensorId> {
    for w in images.windows(2) {
        check_same_shape(t, w[0], w[1], "diversity images")?;
    }
    let mut total: Option<TensorId> = None;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let d = t.mean_abs_diff(images[i], images[j]);
            total = Some(match total {
                Some(acc) => t.add(acc, d),
                None => d,
            });
        }
    }
    Ok(total.expect("six pairs"))
}

/// Cycle consistency: mean-abs between the input and its round trip.
pub fn cycle_loss(t: &mut Tape, x: TensorId, x_cycled: TensorId) -> Result<TensorId> {
    check_same_shape(t, x, x_cycled, "cycle images")?;
    Ok(t.mean_abs_diff(x, x_cycled))
}

/// Cross-entropy of the FG defect classifier: -log softmax(logits)[target].
pub fn fg_cls_loss(t: &mut Tape, logits: TensorId, target: usize) -> Result<TensorId> {
    cls_loss(t, logits, target)
}

/// Cross-entropy of the BG product classifier. Same contract with P classes;
/// for fakes the target is the source image's product.
pub fn bg_cls_loss(t: &mut Tape, logits: TensorId, target: usize) -> Result<TensorId> {
    cls_loss(t, logits, target)
}

fn cls_loss(t: &mut Tape, logits: TensorId, target: usize) -> Result<TensorId> {
    let n = t.value(logits).len();
    if target >= n {
        return Err(DtganError::Config(format!(
            "class target {target} out of range for {n} logits"
        )));
    }
    let ls = t.log_softmax(logits);
    let p = t.pick(ls, target);
    Ok(t.neg(p))
}

/// R1 penalty for one real image: half the squared norm of the gradient of
/// the sample's domain-branch logit w.r.t. the input image.
///
/// Built in two passes. A throwaway tape computes g = d(logit)/d(image)
/// numerically; the main tape then carries a linearized (JVP) chain along
/// direction g whose value is ||g||^2 and whose parameter gradient is the
/// exact R1 gradient (the discriminator is piecewise linear, so the frozen
/// activation masks are exact almost everywhere). The returned node is
/// shifted by the constant -||g||^2/2 so its *value* is the penalty itself.
pub fn r1_penalty(
    t: &mut Tape,
    disc: &Discriminator,
    bindings: &Bindings,
    params: &ParamSet,
    image: &Array3<f64>,
    domain: usize,
) -> TensorId {
    // pass 1: plain input gradient, parameters frozen
    let mut probe = Tape::new();
    let pb = Bindings::frozen(params);
    let x = probe.leaf(image.clone().into_dyn());
    let (heads, _) = disc.forward(&mut probe, &pb, x, None);
    let logit = probe.pick(heads.adv, domain);
    let grads = probe.backward(logit);
    let g = grads.get_or_zeros(x, &[image.shape()[0], image.shape()[1], image.shape()[2]]);
    let g_sq: f64 = g.iter().map(|v| v * v).sum();

    // pass 2: tangent chain on the training tape
    let x_main = t.constant(image.clone().into_dyn());
    let dir = t.constant(g);
    let (heads, adv_tangent) = disc.forward(t, bindings, x_main, Some(dir));
    let _ = heads;
    let jvp = t.pick(adv_tangent.expect("tangent chain requested"), domain);
    // value: jvp - g_sq/2 == ||g||^2 - ||g||^2/2 == penalty;
    // gradient: d(jvp)/d(params) == exact penalty gradient.
    t.add_scalar(jvp, -0.5 * g_sq)
}

/// Same penalty as a plain number (no tape), for reporting and tests.
pub fn r1_penalty_value(nets: &Networks, params: &ParamSet, image: &Array3<f64>, domain: usize) -> f64 {
    let mut probe = Tape::new();
    let pb = Bindings::frozen(params);
    let x = probe.leaf(image.clone().into_dyn());
    let (heads, _) = nets.disc.forward(&mut probe, &pb, x, None);
    let logit = probe.pick(heads.adv, domain);
    let grads = probe.backward(logit);
    let g = grads.get_or_zeros(x, &[image.shape()[0], image.shape()[1], image.shape()[2]]);
    0.5 * g.iter().map(|v| v * v).sum::<f64>()
}

/// Per-term inputs of [`compose`]: everything except the totals.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub adv_d: f64,
    pub adv_g: f64,
    pub sd_rec: f64,
    pub d_rec: f64,
    pub ds: f64,
    pub cyc: f64,
    pub fg_cls_real: f64,
    pub fg_cls_fake: f64,
    pub bg_cls_real: f64,
    pub bg_cls_fake: f64,
    pub r1: f64,
}

/// Weighted composition of one step's parts into the generator and
/// discriminator totals. The diversity weight decays linearly to zero over
/// `weights.ds_decay_steps`.
pub fn compose(parts: &LossParts, weights: &LossWeights, step: usize) -> Result<LossReport> {
    weights.validate()?;
    let lds = weights.lambda_ds_at(step);
    let total_g = parts.adv_g
        + weights.lambda_sd * parts.sd_rec
        + weights.lambda_d * parts.d_rec
        - lds * parts.ds
        + weights.lambda_cyc * parts.cyc
        + weights.lambda_fg * parts.fg_cls_fake
        + weights.lambda_bg * parts.bg_cls_fake;
    let total_d = parts.adv_d
        + weights.lambda_fg * parts.fg_cls_real
        + weights.lambda_bg * parts.bg_cls_real
        + weights.lambda_r1 * parts.r1;
    let report = LossReport {
        adv_d: parts.adv_d,
        adv_g: parts.adv_g,
        sd_rec: parts.sd_rec,
        d_rec: parts.d_rec,
        ds: parts.ds,
        cyc: parts.cyc,
        fg_cls_real: parts.fg_cls_real,
        fg_cls_fake: parts.fg_cls_fake,
        bg_cls_real: parts.bg_cls_real,
        bg_cls_fake: parts.bg_cls_fake,
        r1: parts.r1,
        total_g,
        total_d,
    };
    report.assert_finite()?;
    Ok(report)
}

/// Scalar-input convenience used by tests: run a loss on plain numbers.
pub fn eval_adv_loss_d(real_logit: f64, fake_logit: f64) -> f64 {
    let mut t = Tape::new();
    let r = t.constant(dtgan_autodiff::scalar(real_logit));
    let f = t.constant(dtgan_autodiff::scalar(fake_logit));
    let l = adv_loss_d(&mut t, r, f);
    t.scalar(l)
}

pub fn eval_adv_loss_g(fake_logit: f64) -> f64 {
    let mut t = Tape::new();
    let f = t.constant(dtgan_autodiff::scalar(fake_logit));
    let l = adv_loss_g(&mut t, f);
    t.scalar(l)
}

/// Mean of a slice of scalar nodes (batch reduction).
pub fn mean_of(t: &mut Tape, ids: &[TensorId]) -> TensorId {
    assert!(!ids.is_empty());
    let mut acc = ids[0];
    for id in &ids[1..] {
        acc = t.add(acc, *id);
    }
    t.scale(acc, 1.0 / ids.len() as f64)
}
