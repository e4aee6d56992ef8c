//! The four parameterized functions: generator (with the bottleneck FG/BG
//! split and twin decoders), mapping network (N-branch, noise-injected code
//! path), style encoder (N-branch), and the multi-task discriminator.
//!
//! Tape-level forwards take `(&mut Tape, &Bindings, ...)` and return node
//! ids; value-level wrappers at the bottom run a throwaway tape and return
//! plain domain types.

use crate::domain::{DefectCode, ImageTensor, ModelConfig, StyleVector};
use crate::error::{DtganError, Result};
use crate::params::{Bindings, ParamSet};
use dtgan_autodiff::{Arr, Tape, TensorId};
use ndarray::{Array1, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LRELU_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Bottleneck trace of one generator pass.
///
/// `fg_code_extracted` is what the encoder half pulled out of the input (the
/// defect the generator detaches); `injected_code` is the code the decoder
/// half actually consumed; `bg_decoded` is the pre-merge background stack,
/// exposed so style-locality can be asserted bit-exactly.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub bg_features: Array3<f64>,
    pub fg_code_extracted: DefectCode,
    pub injected_code: Option<DefectCode>,
    pub bg_decoded: Option<Array3<f64>>,
}

/// Discriminator heads for one image.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    pub adv_logits: Array1<f64>,
    pub fg_logits: Array1<f64>,
    pub bg_logits: Array1<f64>,
}

impl DiscriminatorOutput {
    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in [
            ("adv_logits", &self.adv_logits),
            ("fg_logits", &self.fg_logits),
            ("bg_logits", &self.bg_logits),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DtganError::NonFinite(name.into()));
            }
        }
        Ok(())
    }
}

/// A (defect code, style vector) pair for one target domain.
#[derive(Clone, Debug)]
pub struct StyleDefectPair {
    pub code: DefectCode,
    pub style: StyleVector,
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct Conv {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: bool,
}

impl Conv {
    pub(crate) fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, pad: usize, bias: bool) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            pad,
            bias,
        }
    }

    pub(crate) fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        p.init_conv(rng, &self.name, self.cout, self.cin, self.k, self.bias);
    }

    pub(crate) fn fwd(&self, t: &mut Tape, b: &Bindings, x: TensorId) -> TensorId {
        let w = b.id(t, &format!("{}.w", self.name));
        let bias = if self.bias {
            Some(b.id(t, &format!("{}.b", self.name)))
        } else {
            None
        };
        t.conv2d(x, w, bias, self.stride, self.pad)
    }

    /// Tangent of the conv at fixed weights: bias drops out.
    pub(crate) fn fwd_lin(&self, t: &mut Tape, b: &Bindings, tx: TensorId) -> TensorId {
        let w = b.id(t, &format!("{}.w", self.name));
        t.conv2d(tx, w, None, self.stride, self.pad)
    }
}

#[derive(Clone)]
pub(crate) struct Dense {
    name: String,
    nin: usize,
    nout: usize,
    bias: bool,
}

impl Dense {
    pub(crate) fn new(name: impl Into<String>, nin: usize, nout: usize, bias: bool) -> Self {
        Dense {
            name: name.into(),
            nin,
            nout,
            bias,
        }
    }

    pub(crate) fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        p.init_dense(rng, &self.name, self.nout, self.nin, self.bias);
    }

    pub(crate) fn fwd(&self, t: &mut Tape, b: &Bindings, x: TensorId) -> TensorId {
        let w = b.id(t, &format!("{}.w", self.name));
        let bias = if self.bias {
            Some(b.id(t, &format!("{}.b", self.name)))
        } else {
            None
        };
        t.linear(w, x, bias)
    }

    pub(crate) fn fwd_lin(&self, t: &mut Tape, b: &Bindings, tx: TensorId) -> TensorId {
        let w = b.id(t, &format!("{}.w", self.name));
        t.linear(w, tx, None)
    }
}

/// Leaky-relu on the primal chain plus the matching mask product on an
/// optional tangent chain.
fn lrelu_pair(
    t: &mut Tape,
    x: TensorId,
    tx: Option<TensorId>,
    slope: f64,
) -> (TensorId, Option<TensorId>) {
    let mask = t
        .value(x)
        .mapv(|v| if v > 0.0 { 1.0 } else { slope });
    let y = t.leaky_relu(x, slope);
    let ty = tx.map(|tid| t.mul_const(tid, mask));
    (y, ty)
}

/// Adaptive instance normalization: normalize per channel, then scale/shift
/// with an affine projection of the style vector. Returns the modulated map.
pub fn adain_modulate(
    t: &mut Tape,
    features: TensorId,
    style: TensorId,
    affine_w: TensorId,
    affine_b: TensorId,
) -> TensorId {
    let c = t.value(features).shape()[0];
    let a = t.linear(affine_w, style, Some(affine_b));
    debug_assert_eq!(t.value(a).len(), 2 * c, "adain affine must emit 2C values");
    let gamma_raw = t.slice_v(a, 0, c);
    let beta = t.slice_v(a, c, 2 * c);
    let gamma = t.add_scalar(gamma_raw, 1.0);
    let normed = t.instance_norm(features, NORM_EPS);
    let scaled = t.mul_channel(normed, gamma);
    t.add_channel(scaled, beta)
}

#[derive(Clone)]
struct AdainLayer {
    affine: Dense,
    channels: usize,
}

impl AdainLayer {
    pub(crate) fn new(name: &str, style_dim: usize, channels: usize) -> Self {
        AdainLayer {
            affine: Dense::new(name, style_dim, 2 * channels, true),
            channels,
        }
    }

    pub(crate) fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        // small affine weights keep gamma near 1 at the start
        let std = 1.0 / (self.affine.nin as f64).sqrt() * 0.1;
        let w = Arr::from_shape_fn(IxDyn(&[self.affine.nout, self.affine.nin]), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        p.insert(format!("{}.w", self.affine.name), w);
        p.insert(
            format!("{}.b", self.affine.name),
            Arr::zeros(IxDyn(&[self.affine.nout])),
        );
    }

    pub(crate) fn fwd(&self, t: &mut Tape, b: &Bindings, x: TensorId, style: TensorId) -> TensorId {
        debug_assert_eq!(t.value(x).shape()[0], self.channels);
        let w = b.id(t, &format!("{}.w", self.affine.name));
        let bias = b.id(t, &format!("{}.b", self.affine.name));
        adain_modulate(t, x, style, w, bias)
    }
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum Resample {
    None,
    Up,
    Down,
}

/// Pre-activation residual block with optional instance norm and resampling.
#[derive(Clone)]
pub(crate) struct PlainResBlock {
    c1: Conv,
    c2: Conv,
    skip: Option<Conv>,
    norm: bool,
    resample: Resample,
}

impl PlainResBlock {
    pub(crate) fn new(name: &str, cin: usize, cout: usize, norm: bool, resample: Resample) -> Self {
        let (c1_in, c1_out) = match resample {
            Resample::Down => (cin, cin),
            _ => (cin, cout),
        };
        let c2_in = match resample {
            Resample::Down => cin,
            _ => cout,
        };
        PlainResBlock {
            c1: Conv::new(format!("{name}.c1"), c1_in, c1_out, 3, 1, true),
            c2: Conv::new(format!("{name}.c2"), c2_in, cout, 3, 1, true),
            skip: (cin != cout).then(|| Conv::new(format!("{name}.skip"), cin, cout, 1, 0, false)),
            norm,
            resample,
        }
    }

    pub(crate) fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        self.c1.init(p, rng);
        self.c2.init(p, rng);
        if let Some(s) = &self.skip {
            s.init(p, rng);
        }
    }

    pub(crate) fn fwd(&self, t: &mut Tape, b: &Bindings, x: TensorId) -> TensorId {
        let (y, _) = self.fwd_pair(t, b, x, None);
        y
    }

    /// Primal plus optional tangent chain (tangent only valid without norm).
    pub(crate) fn fwd_pair(
        &self,
        t: &mut Tape,
        b: &Bindings,
        x: TensorId,
        tx: Option<TensorId>,
    ) -> (TensorId, Option<TensorId>) {
        assert!(
            tx.is_none() || !self.norm,
            "tangent chain is only implemented for norm-free blocks"
        );
        let mut h = x;
        let mut th = tx;
        if self.norm {
            h = t.instance_norm(h, NORM_EPS);
        }
        (h, th) = lrelu_pair(t, h, th, LRELU_SLOPE);
        if self.resample == Resample::Up {
            h = t.upsample2x(h);
            th = th.map(|i| t.upsample2x(i));
        }
        h = self.c1.fwd(t, b, h);
        th = th.map(|i| self.c1.fwd_lin(t, b, i));
        if self.resample == Resample::Down {
            h = t.avgpool2x(h);
            th = th.map(|i| t.avgpool2x(i));
        }
        if self.norm {
            h = t.instance_norm(h, NORM_EPS);
        }
        (h, th) = lrelu_pair(t, h, th, LRELU_SLOPE);
        h = self.c2.fwd(t, b, h);
        th = th.map(|i| self.c2.fwd_lin(t, b, i));

        let mut s = x;
        let mut ts = tx;
        match self.resample {
            Resample::Up => {
                s = t.upsample2x(s);
                ts = ts.map(|i| t.upsample2x(i));
            }
            Resample::Down => {
                s = t.avgpool2x(s);
                ts = ts.map(|i| t.avgpool2x(i));
            }
            Resample::None => {}
        }
        if let Some(skip) = &self.skip {
            s = skip.fwd(t, b, s);
            ts = ts.map(|i| skip.fwd_lin(t, b, i));
        }
        let sum = t.add(h, s);
        let y = t.scale(sum, INV_SQRT2);
        let ty = match (th, ts) {
            (Some(a), Some(bb)) => {
                let su = t.add(a, bb);
                Some(t.scale(su, INV_SQRT2))
            }
            _ => None,
        };
        (y, ty)
    }
}

/// Residual block whose normalizations are style-modulated.
#[derive(Clone)]
struct AdainResBlock {
    a1: AdainLayer,
    c1: Conv,
    a2: AdainLayer,
    c2: Conv,
    skip: Option<Conv>,
    up: bool,
}

impl AdainResBlock {
    pub(crate) fn new(name: &str, cin: usize, cout: usize, style_dim: usize, up: bool) -> Self {
        AdainResBlock {
            a1: AdainLayer::new(&format!("{name}.a1"), style_dim, cin),
            c1: Conv::new(format!("{name}.c1"), cin, cout, 3, 1, true),
            a2: AdainLayer::new(&format!("{name}.a2"), style_dim, cout),
            c2: Conv::new(format!("{name}.c2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| Conv::new(format!("{name}.skip"), cin, cout, 1, 0, false)),
            up,
        }
    }

    pub(crate) fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        self.a1.init(p, rng);
        self.c1.init(p, rng);
        self.a2.init(p, rng);
        self.c2.init(p, rng);
        if let Some(s) = &self.skip {
            s.init(p, rng);
        }
    }

    pub(crate) fn fwd(&self, t: &mut Tape, b: &Bindings, x: TensorId, style: TensorId) -> TensorId {
        let mut h = self.a1.fwd(t, b, x, style);
        h = t.leaky_relu(h, LRELU_SLOPE);
        if self.up {
            h = t.upsample2x(h);
        }
        h = self.c1.fwd(t, b, h);
        h = self.a2.fwd(t, b, h, style);
        h = t.leaky_relu(h, LRELU_SLOPE);
        h = self.c2.fwd(t, b, h);

        let mut s = x;
        if self.up {
            s = t.upsample2x(s);
        }
        if let Some(skip) = &self.skip {
            s = skip.fwd(t, b, s);
        }
        let sum = t.add(h, s);
        t.scale(sum, INV_SQRT2)
    }
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

/// Encoder channel schedule c_0..c_k: starts at Cb/2 (min 4), doubles per
/// stage, capped and forced to end at the bottleneck width.
fn channel_schedule(cfg: &ModelConfig) -> Vec<usize> {
    let stages = cfg.bottleneck_downsampling.trailing_zeros() as usize;
    let cb = cfg.bottleneck_channels;
    let w0 = (cb / 2).max(4);
    let mut c = vec![w0];
    for i in 0..stages {
        let next = if i == stages - 1 { cb } else { (c[i] * 2).min(cb) };
        c.push(next);
    }
    c
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

pub struct GenEncodeIds {
    pub bottleneck: TensorId,
    pub bg: TensorId,
    pub fg: TensorId,
}

pub struct GenDecodeIds {
    pub image: TensorId,
    pub fg_stack: TensorId,
    pub bg_stack: TensorId,
}

pub struct Generator {
    from_rgb: Conv,
    enc: Vec<PlainResBlock>,
    enc_mid: PlainResBlock,
    fg_in: Conv,
    fg_mid: AdainResBlock,
    fg_up: Vec<AdainResBlock>,
    bg_in: Conv,
    bg_mid: PlainResBlock,
    bg_up: Vec<PlainResBlock>,
    to_rgb: Conv,
    bg_channels: usize,
    bottleneck_channels: usize,
}

impl Generator {
    pub fn structure(cfg: &ModelConfig) -> Self {
        let sched = channel_schedule(cfg);
        let k = sched.len() - 1;
        let cb = cfg.bottleneck_channels;
        let enc = (0..k)
            .map(|i| {
                PlainResBlock::new(&format!("g.enc{i}"), sched[i], sched[i + 1], true, Resample::Down)
            })
            .collect();
        let fg_up = (0..k)
            .rev()
            .map(|i| {
                AdainResBlock::new(
                    &format!("g.fgup{i}"),
                    sched[i + 1],
                    sched[i],
                    cfg.style_dim,
                    true,
                )
            })
            .collect();
        let bg_up = (0..k)
            .rev()
            .map(|i| {
                PlainResBlock::new(&format!("g.bgup{i}"), sched[i + 1], sched[i], true, Resample::Up)
            })
            .collect();
        Generator {
            from_rgb: Conv::new("g.from_rgb", 3, sched[0], 3, 1, true),
            enc,
            enc_mid: PlainResBlock::new("g.encmid", cb, cb, true, Resample::None),
            fg_in: Conv::new("g.fgin", cfg.fg_channels, cb, 1, 0, true),
            fg_mid: AdainResBlock::new("g.fgmid", cb, cb, cfg.style_dim, false),
            bg_in: Conv::new("g.bgin", cfg.bg_channels(), cb, 1, 0, true),
            bg_mid: PlainResBlock::new("g.bgmid", cb, cb, true, Resample::None),
            to_rgb: Conv::new("g.to_rgb", sched[0], 3, 1, 0, true),
            fg_up,
            bg_up,
            bg_channels: cfg.bg_channels(),
            bottleneck_channels: cb,
        }
    }

    pub fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        self.from_rgb.init(p, rng);
        for blk in &self.enc {
            blk.init(p, rng);
        }
        self.enc_mid.init(p, rng);
        self.fg_in.init(p, rng);
        self.fg_mid.init(p, rng);
        for blk in &self.fg_up {
            blk.init(p, rng);
        }
        self.bg_in.init(p, rng);
        self.bg_mid.init(p, rng);
        for blk in &self.bg_up {
            blk.init(p, rng);
        }
        self.to_rgb.init(p, rng);
    }

    /// Downsample to the bottleneck and split channels: first Cb-Cfg carry
    /// the background, the rest are the extracted foreground code.
    pub fn encode(&self, t: &mut Tape, b: &Bindings, x: TensorId) -> GenEncodeIds {
        let mut h = self.from_rgb.fwd(t, b, x);
        for blk in &self.enc {
            h = blk.fwd(t, b, h);
        }
        let h = self.enc_mid.fwd(t, b, h);
        let bg = t.slice_c(h, 0, self.bg_channels);
        let fg = t.slice_c(h, self.bg_channels, self.bottleneck_channels);
        GenEncodeIds { bottleneck: h, bg, fg }
    }

    /// Decode: FG path style-modulated, BG path plain, merged by pairwise
    /// channel max, then one convolution and tanh.
    pub fn decode(
        &self,
        t: &mut Tape,
        b: &Bindings,
        bg: TensorId,
        code: TensorId,
        style: TensorId,
    ) -> GenDecodeIds {
        let mut f = self.fg_in.fwd(t, b, code);
        f = self.fg_mid.fwd(t, b, f, style);
        for blk in &self.fg_up {
            f = blk.fwd(t, b, f, style);
        }
        let mut g = self.bg_in.fwd(t, b, bg);
        g = self.bg_mid.fwd(t, b, g);
        for blk in &self.bg_up {
            g = blk.fwd(t, b, g);
        }
        let merged = t.max_elem(f, g);
        let normed = t.instance_norm(merged, NORM_EPS);
        let act = t.leaky_relu(normed, LRELU_SLOPE);
        let rgb = self.to_rgb.fwd(t, b, act);
        let image = t.tanh(rgb);
        GenDecodeIds {
            image,
            fg_stack: f,
            bg_stack: g,
        }
    }

    pub fn generate(
        &self,
        t: &mut Tape,
        b: &Bindings,
        x: TensorId,
        code: TensorId,
        style: TensorId,
    ) -> (GenEncodeIds, GenDecodeIds) {
        let enc = self.encode(t, b, x);
        let dec = self.decode(t, b, enc.bg, code, style);
        (enc, dec)
    }
}

// ---------------------------------------------------------------------------
// Mapping network
// ---------------------------------------------------------------------------

struct MapBranch {
    style0: Dense,
    style1: Dense,
    /// None for the anchor branch: its code is hard-zero by construction.
    code_head: Option<MapCodeHead>,
}

struct MapCodeHead {
    to_map: Dense,
    conv1: Conv,
    conv2: Conv,
    noise_scales: [String; 2],
}

pub struct MappingNetwork {
    trunk: Vec<Dense>,
    branches: Vec<MapBranch>,
    fg_channels: usize,
    bottleneck_hw: usize,
    anchor: usize,
}

impl MappingNetwork {
    pub fn structure(cfg: &ModelConfig) -> Self {
        let hidden = 128.max(cfg.style_dim);
        let hb = cfg.bottleneck_hw();
        let trunk = vec![
            Dense::new("m.trunk0", cfg.latent_dim, hidden, true),
            Dense::new("m.trunk1", hidden, hidden, true),
            Dense::new("m.trunk2", hidden, hidden, true),
        ];
        let branches = (0..cfg.n_domains)
            .map(|n| {
                let code_head = (n != 0).then(|| MapCodeHead {
                    to_map: Dense::new(
                        format!("m.b{n}.code0"),
                        hidden,
                        cfg.fg_channels * hb * hb,
                        true,
                    ),
                    conv1: Conv::new(format!("m.b{n}.cc1"), cfg.fg_channels, cfg.fg_channels, 3, 1, true),
                    conv2: Conv::new(format!("m.b{n}.cc2"), cfg.fg_channels, cfg.fg_channels, 3, 1, true),
                    noise_scales: [format!("m.b{n}.noise0"), format!("m.b{n}.noise1")],
                });
                MapBranch {
                    style0: Dense::new(format!("m.b{n}.style0"), hidden, hidden, true),
                    style1: Dense::new(format!("m.b{n}.style1"), hidden, cfg.style_dim, true),
                    code_head,
                }
            })
            .collect();
        MappingNetwork {
            trunk,
            branches,
            fg_channels: cfg.fg_channels,
            bottleneck_hw: hb,
            anchor: 0,
        }
    }

    pub fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        for d in &self.trunk {
            d.init(p, rng);
        }
        for br in &self.branches {
            br.style0.init(p, rng);
            br.style1.init(p, rng);
            if let Some(head) = &br.code_head {
                head.to_map.init(p, rng);
                head.conv1.init(p, rng);
                head.conv2.init(p, rng);
                // noise scales start at zero: injection is learned
                p.init_zeros(&head.noise_scales[0], &[]);
                p.init_zeros(&head.noise_scales[1], &[]);
            }
        }
    }

    pub fn n_domains(&self) -> usize {
        self.branches.len()
    }

    /// Shared trunk, one selected head. Per-pixel gaussian noise scaled by a
    /// learned per-layer scalar enters the code path only; the anchor branch
    /// returns an exactly-zero code.
    pub fn forward(
        &self,
        t: &mut Tape,
        b: &Bindings,
        z: TensorId,
        target: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TensorId, TensorId)> {
        let branch = self
            .branches
            .get(target)
            .ok_or_else(|| DtganError::UnknownDomain(format!("domain id {target}")))?;
        let mut h = z;
        for d in &self.trunk {
            h = d.fwd(t, b, h);
            h = t.leaky_relu(h, LRELU_SLOPE);
        }
        let s0 = branch.style0.fwd(t, b, h);
        let s0 = t.leaky_relu(s0, LRELU_SLOPE);
        let style = branch.style1.fwd(t, b, s0);

        let hb = self.bottleneck_hw;
        let code = match (&branch.code_head, target == self.anchor) {
            (None, _) | (_, true) => {
                t.constant(Arr::zeros(IxDyn(&[self.fg_channels, hb, hb])))
            }
            (Some(head), false) => {
                let flat = head.to_map.fwd(t, b, h);
                let mut c = t.reshape(flat, &[self.fg_channels, hb, hb]);
                c = self.inject_noise(t, b, c, &head.noise_scales[0], rng);
                c = t.leaky_relu(c, LRELU_SLOPE);
                c = head.conv1.fwd(t, b, c);
                c = self.inject_noise(t, b, c, &head.noise_scales[1], rng);
                c = t.leaky_relu(c, LRELU_SLOPE);
                head.conv2.fwd(t, b, c)
            }
        };
        Ok((code, style))
    }

    fn inject_noise(
        &self,
        t: &mut Tape,
        b: &Bindings,
        x: TensorId,
        scale_name: &str,
        rng: &mut ChaCha8Rng,
    ) -> TensorId {
        let hb = self.bottleneck_hw;
        let noise = Arr::from_shape_fn(IxDyn(&[hb, hb]), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let noise_id = t.constant(noise);
        let alpha = b.id(t, scale_name);
        let scaled = t.mul_scalar_node(noise_id, alpha);
        t.add_hw(x, scaled)
    }
}

// ---------------------------------------------------------------------------
// Style encoder
// ---------------------------------------------------------------------------

struct EncBranch {
    /// None for the anchor branch.
    code: Option<Conv>,
    style0: Dense,
    style1: Dense,
}

pub struct StyleEncoder {
    from_rgb: Conv,
    enc: Vec<PlainResBlock>,
    branches: Vec<EncBranch>,
    anchor: usize,
    fg_channels: usize,
    bottleneck_hw: usize,
}

impl StyleEncoder {
    pub fn structure(cfg: &ModelConfig) -> Self {
        let sched = channel_schedule(cfg);
        let k = sched.len() - 1;
        let cb = cfg.bottleneck_channels;
        let enc = (0..k)
            .map(|i| {
                PlainResBlock::new(&format!("e.enc{i}"), sched[i], sched[i + 1], false, Resample::Down)
            })
            .collect();
        let branches = (0..cfg.n_domains)
            .map(|n| EncBranch {
                code: (n != 0).then(|| {
                    Conv::new(format!("e.b{n}.code"), cb, cfg.fg_channels, 3, 1, true)
                }),
                style0: Dense::new(format!("e.b{n}.style0"), cb, cb, true),
                style1: Dense::new(format!("e.b{n}.style1"), cb, cfg.style_dim, true),
            })
            .collect();
        StyleEncoder {
            from_rgb: Conv::new("e.from_rgb", 3, sched[0], 3, 1, true),
            enc,
            branches,
            anchor: 0,
            fg_channels: cfg.fg_channels,
            bottleneck_hw: cfg.bottleneck_hw(),
        }
    }

    pub fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        self.from_rgb.init(p, rng);
        for blk in &self.enc {
            blk.init(p, rng);
        }
        for br in &self.branches {
            if let Some(c) = &br.code {
                c.init(p, rng);
            }
            br.style0.init(p, rng);
            br.style1.init(p, rng);
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        b: &Bindings,
        x: TensorId,
        domain: usize,
    ) -> Result<(TensorId, TensorId)> {
        let branch = self
            .branches
            .get(domain)
            .ok_or_else(|| DtganError::UnknownDomain(format!("domain id {domain}")))?;
        let mut h = self.from_rgb.fwd(t, b, x);
        for blk in &self.enc {
            h = blk.fwd(t, b, h);
        }
        let h = t.leaky_relu(h, LRELU_SLOPE);

        let pooled = t.global_avg_pool(h);
        let s0 = branch.style0.fwd(t, b, pooled);
        let s0 = t.leaky_relu(s0, LRELU_SLOPE);
        let style = branch.style1.fwd(t, b, s0);

        let code = match (&branch.code, domain == self.anchor) {
            (None, _) | (_, true) => {
                let hb = self.bottleneck_hw;
                t.constant(Arr::zeros(IxDyn(&[self.fg_channels, hb, hb])))
            }
            (Some(conv), false) => conv.fwd(t, b, h),
        };
        Ok((code, style))
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

pub struct DiscIds {
    pub adv: TensorId,
    pub fg: TensorId,
    pub bg: TensorId,
}

pub struct Discriminator {
    from_rgb: Conv,
    blocks: Vec<PlainResBlock>,
    final_conv: Conv,
    adv: Dense,
    fg: Dense,
    bg_conv: Conv,
    bg_dense: Dense,
}

impl Discriminator {
    pub fn structure(cfg: &ModelConfig) -> Self {
        let sched = channel_schedule(cfg);
        let k = sched.len() - 1;
        let cb = cfg.bottleneck_channels;
        let hb = cfg.bottleneck_hw();
        let blocks: Vec<PlainResBlock> = (0..k)
            .map(|i| {
                PlainResBlock::new(&format!("d.blk{i}"), sched[i], sched[i + 1], false, Resample::Down)
            })
            .collect();
        let flat = cb * hb * hb;
        Discriminator {
            from_rgb: Conv::new("d.from_rgb", 3, sched[0], 3, 1, true),
            blocks,
            final_conv: Conv::new("d.final", cb, cb, 3, 1, true),
            adv: Dense::new("d.adv", flat, cfg.n_domains, true),
            fg: Dense::new("d.fg", flat, cfg.n_domains, true),
            bg_conv: Conv::new("d.bg_conv", sched[1], sched[1], 3, 1, true),
            bg_dense: Dense::new("d.bg_dense", sched[1], cfg.n_products, true),
        }
    }

    pub fn init<R: Rng>(&self, p: &mut ParamSet, rng: &mut R) {
        self.from_rgb.init(p, rng);
        for blk in &self.blocks {
            blk.init(p, rng);
        }
        self.final_conv.init(p, rng);
        self.adv.init(p, rng);
        self.fg.init(p, rng);
        self.bg_conv.init(p, rng);
        self.bg_dense.init(p, rng);
    }

    /// Shared trunk; adversarial and FG-classifier heads on the final
    /// features, BG-classifier head on the first (half-resolution) stage.
    /// When `tangent` is given, a linearized chain runs alongside and the
    /// tangent of the adversarial logit vector is returned with the heads.
    pub fn forward(
        &self,
        t: &mut Tape,
        b: &Bindings,
        x: TensorId,
        tangent: Option<TensorId>,
    ) -> (DiscIds, Option<TensorId>) {
        let mut h = self.from_rgb.fwd(t, b, x);
        let mut th = tangent.map(|tx| self.from_rgb.fwd_lin(t, b, tx));
        let mut half_res = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let (nh, nth) = blk.fwd_pair(t, b, h, th);
            h = nh;
            th = nth;
            if i == 0 {
                half_res = Some(h);
            }
        }
        (h, th) = lrelu_pair(t, h, th, LRELU_SLOPE);
        h = self.final_conv.fwd(t, b, h);
        th = th.map(|i| self.final_conv.fwd_lin(t, b, i));
        (h, th) = lrelu_pair(t, h, th, LRELU_SLOPE);
        let flat = t.flatten(h);
        let tflat = th.map(|i| t.flatten(i));

        let adv = self.adv.fwd(t, b, flat);
        let adv_tangent = tflat.map(|i| self.adv.fwd_lin(t, b, i));
        let fg = self.fg.fwd(t, b, flat);

        let hr = half_res.expect("discriminator needs at least one block");
        let mut bgh = self.bg_conv.fwd(t, b, hr);
        bgh = t.leaky_relu(bgh, LRELU_SLOPE);
        let pooled = t.global_avg_pool(bgh);
        let bg = self.bg_dense.fwd(t, b, pooled);

        (DiscIds { adv, fg, bg }, adv_tangent)
    }
}

// ---------------------------------------------------------------------------
// bundle + value-level wrappers
// ---------------------------------------------------------------------------

pub struct Networks {
    pub cfg: ModelConfig,
    pub gen: Generator,
    pub mapper: MappingNetwork,
    pub encoder: StyleEncoder,
    pub disc: Discriminator,
}

impl Networks {
    pub fn structure(cfg: &ModelConfig) -> Self {
        Networks {
            cfg: cfg.clone(),
            gen: Generator::structure(cfg),
            mapper: MappingNetwork::structure(cfg),
            encoder: StyleEncoder::structure(cfg),
            disc: Discriminator::structure(cfg),
        }
    }

    /// Structure plus freshly initialized parameters, seeded by the config.
    pub fn init(cfg: &ModelConfig) -> (Self, ParamSet) {
        let nets = Self::structure(cfg);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        nets.gen.init(&mut params, &mut rng);
        rng.set_stream(2);
        nets.mapper.init(&mut params, &mut rng);
        rng.set_stream(3);
        nets.encoder.init(&mut params, &mut rng);
        rng.set_stream(4);
        nets.disc.init(&mut params, &mut rng);
        (nets, params)
    }
}

fn image_to_node(t: &mut Tape, x: &ImageTensor) -> TensorId {
    t.constant(x.data().clone().into_dyn())
}

fn node_to_array3(t: &Tape, id: TensorId) -> Array3<f64> {
    t.value(id)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected a 3-d node")
}

/// Latent-guided (code, style) for `target`, from frozen parameters.
pub fn mapping_forward(
    nets: &Networks,
    params: &ParamSet,
    z: &crate::domain::LatentCode,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StyleDefectPair> {
    for v in z.values.iter() {
        if !v.is_finite() {
            return Err(DtganError::NonFinite("latent code".into()));
        }
    }
    let mut t = Tape::new();
    let b = Bindings::frozen(params);
    let zid = t.constant(z.values.clone().into_dyn());
    let (code, style) = nets.mapper.forward(&mut t, &b, zid, target, rng)?;
    Ok(StyleDefectPair {
        code: DefectCode {
            values: node_to_array3(&t, code),
        },
        style: StyleVector {
            values: t
                .value(style)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("style is 1-d"),
        },
    })
}

/// Reference-guided (code, style) extracted from an image for `domain`.
pub fn encoder_forward(
    nets: &Networks,
    params: &ParamSet,
    x: &ImageTensor,
    domain: usize,
) -> Result<StyleDefectPair> {
    let mut t = Tape::new();
    let b = Bindings::frozen(params);
    let xid = image_to_node(&mut t, x);
    let (code, style) = nets.encoder.forward(&mut t, &b, xid, domain)?;
    Ok(StyleDefectPair {
        code: DefectCode {
            values: node_to_array3(&t, code),
        },
        style: StyleVector {
            values: t
                .value(style)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("style is 1-d"),
        },
    })
}

/// Run only the generator's encoder half and split the bottleneck.
pub fn generator_encode(nets: &Networks, params: &ParamSet, x: &ImageTensor) -> GeneratorState {
    let mut t = Tape::new();
    let b = Bindings::frozen(params);
    let xid = image_to_node(&mut t, x);
    let enc = nets.gen.encode(&mut t, &b, xid);
    GeneratorState {
        bg_features: node_to_array3(&t, enc.bg),
        fg_code_extracted: DefectCode {
            values: node_to_array3(&t, enc.fg),
        },
        injected_code: None,
        bg_decoded: None,
    }
}

/// Full generation x + (code, style) -> image, with the bottleneck trace.
pub fn generate(
    nets: &Networks,
    params: &ParamSet,
    x: &ImageTensor,
    code: &DefectCode,
    style: &StyleVector,
) -> Result<(ImageTensor, GeneratorState)> {
    let mut t = Tape::new();
    let b = Bindings::frozen(params);
    let xid = image_to_node(&mut t, x);
    let cid = t.constant(code.values.clone().into_dyn());
    let sid = t.constant(style.values.clone().into_dyn());
    let (enc, dec) = nets.gen.generate(&mut t, &b, xid, cid, sid);
    let image = ImageTensor::from_generated(node_to_array3(&t, dec.image))?;
    let state = GeneratorState {
        bg_features: node_to_array3(&t, enc.bg),
        fg_code_extracted: DefectCode {
            values: node_to_array3(&t, enc.fg),
        },
        injected_code: Some(code.clone()),
        bg_decoded: Some(node_to_array3(&t, dec.bg_stack)),
    };
    Ok((image, state))
}

/// All three discriminator heads for one image.
pub fn discriminator_forward(
    nets: &Networks,
    params: &ParamSet,
    x: &ImageTensor,
) -> DiscriminatorOutput {
    let mut t = Tape::new();
    let b = Bindings::frozen(params);
    let xid = image_to_node(&mut t, x);
    let (heads, _) = nets.disc.forward(&mut t, &b, xid, None);
    let to1d = |id: TensorId| {
        t.value(id)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("head is 1-d")
    };
    DiscriminatorOutput {
        adv_logits: to1d(heads.adv),
        fg_logits: to1d(heads.fg),
        bg_logits: to1d(heads.bg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{sample_latent, validate_config};
    use dtgan_autodiff::gradcheck;
    use ndarray::Array1;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        validate_config(ModelConfig {
            image_size: 16,
            latent_dim: 8,
            style_dim: 16,
            n_domains: 3,
            n_products: 3,
            bottleneck_channels: 16,
            fg_channels: 4,
            bottleneck_downsampling: 4,
            seed: 5,
        })
        .unwrap()
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = ndarray::Array3::from_shape_fn(
            (3, cfg.image_size, cfg.image_size),
            |_| (rng.random::<f64>() * 2.0 - 1.0) * 0.9,
        );
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn anchor_codes_are_exactly_zero() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for i in 0..100 {
            let z = sample_latent(&mut rng, cfg.latent_dim).unwrap();
            let pair = mapping_forward(&nets, &params, &z, 0, &mut rng).unwrap();
            assert!(pair.code.is_exactly_zero(), "mapping anchor code draw {i}");
            let img = random_image(&cfg, 1000 + i);
            let epair = encoder_forward(&nets, &params, &img, 0).unwrap();
            assert!(epair.code.is_exactly_zero(), "encoder anchor code draw {i}");
        }
    }

    #[test]
    fn mapping_is_deterministic_with_zero_noise_and_sensitive_to_z() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        // noise scales initialize to zero, so different noise rngs must not matter
        let z = sample_latent(&mut ChaCha8Rng::seed_from_u64(1), cfg.latent_dim).unwrap();
        let a = mapping_forward(&nets, &params, &z, 1, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let b = mapping_forward(&nets, &params, &z, 1, &mut ChaCha8Rng::seed_from_u64(999)).unwrap();
        assert_eq!(a.code.values, b.code.values);
        assert_eq!(a.style.values, b.style.values);

        // one-coordinate change in z moves the output
        let mut z2 = z.clone();
        z2.values[0] += 0.5;
        let c = mapping_forward(&nets, &params, &z2, 1, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let l1: f64 = (&a.code.values - &c.code.values).mapv(f64::abs).sum();
        assert!(l1 > 0.0);

        // nonzero noise scale makes the rng stream matter
        let mut params2 = params.clone();
        *params2.get_mut("m.b1.noise0") = dtgan_autodiff::scalar(0.5);
        let d1 = mapping_forward(&nets, &params2, &z, 1, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let d2 = mapping_forward(&nets, &params2, &z, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let diff: f64 = (&d1.code.values - &d2.code.values).mapv(f64::abs).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn encoder_shape_contract_and_domain_sensitivity() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        let img = random_image(&cfg, 3);
        let pair = encoder_forward(&nets, &params, &img, 1).unwrap();
        assert_eq!(
            pair.code.values.shape(),
            &[cfg.fg_channels, cfg.bottleneck_hw(), cfg.bottleneck_hw()]
        );
        assert_eq!(pair.style.values.len(), cfg.style_dim);

        let other = encoder_forward(&nets, &params, &img, 2).unwrap();
        let dcode: f64 = (&pair.code.values - &other.code.values).mapv(f64::abs).sum();
        let dstyle: f64 = (&pair.style.values - &other.style.values).mapv(f64::abs).sum();
        assert!(dcode > 0.0 && dstyle > 0.0, "branches must differ at init");

        assert!(encoder_forward(&nets, &params, &img, 99).is_err());
        let z = sample_latent(&mut ChaCha8Rng::seed_from_u64(2), cfg.latent_dim).unwrap();
        assert!(mapping_forward(&nets, &params, &z, 99, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn bottleneck_split_is_a_partition() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        let img = random_image(&cfg, 4);
        let mut t = Tape::new();
        let b = Bindings::frozen(&params);
        let x = t.constant(img.data().clone().into_dyn());
        let enc = nets.gen.encode(&mut t, &b, x);
        // channel accounting
        assert_eq!(t.value(enc.bg).shape()[0], cfg.bg_channels());
        assert_eq!(t.value(enc.fg).shape()[0], cfg.fg_channels);
        // concatenating the parts reproduces the bottleneck bit-exactly
        let cat = t.concat_c(enc.bg, enc.fg);
        assert_eq!(t.value(cat), t.value(enc.bottleneck));

        // a one-pixel change moves the bottleneck
        let mut data = img.data().clone();
        data[[0, 3, 3]] = (data[[0, 3, 3]] + 0.4).clamp(-1.0, 1.0);
        let img2 = ImageTensor::new(data).unwrap();
        let mut t2 = Tape::new();
        let b2 = Bindings::frozen(&params);
        let x2 = t2.constant(img2.data().clone().into_dyn());
        let enc2 = nets.gen.encode(&mut t2, &b2, x2);
        let d: f64 = (t.value(enc.bottleneck) - t2.value(enc2.bottleneck))
            .mapv(f64::abs)
            .sum();
        assert!(d > 0.0);
    }

    #[test]
    fn bg_path_is_bit_identical_across_styles() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        let img = random_image(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z = sample_latent(&mut rng, cfg.latent_dim).unwrap();
        let pair = mapping_forward(&nets, &params, &z, 1, &mut rng).unwrap();

        let mut reference: Option<ndarray::Array3<f64>> = None;
        for k in 0..20 {
            let style = StyleVector {
                values: Array1::from_shape_fn(cfg.style_dim, |i| {
                    ((k * 31 + i) as f64 * 0.37).sin() * 2.0
                }),
            };
            let (_, state) = generate(&nets, &params, &img, &pair.code, &style).unwrap();
            let bg = state.bg_decoded.unwrap();
            match &reference {
                None => reference = Some(bg),
                Some(r) => assert_eq!(r, &bg, "style swap {k} changed the BG stack"),
            }
        }
    }

    #[test]
    fn merged_stack_equals_bg_stack_when_fg_equals_bg() {
        // max(a,a) = a at the merge point
        let mut t = Tape::new();
        let a = t.constant(Arr::from_shape_fn(IxDyn(&[4, 3, 3]), |_| 0.3));
        let b = t.constant(Arr::from_shape_fn(IxDyn(&[4, 3, 3]), |_| 0.3));
        let m = t.max_elem(a, b);
        assert_eq!(t.value(m), t.value(a));
    }

    #[test]
    fn generate_shape_determinism_and_range() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        let img = random_image(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = sample_latent(&mut rng, cfg.latent_dim).unwrap();
        let pair = mapping_forward(&nets, &params, &z, 2, &mut rng).unwrap();
        let (out1, state) = generate(&nets, &params, &img, &pair.code, &pair.style).unwrap();
        let (out2, _) = generate(&nets, &params, &img, &pair.code, &pair.style).unwrap();
        assert_eq!(out1.data(), out2.data());
        assert_eq!(out1.data().shape(), &[3, cfg.image_size, cfg.image_size]);
        assert!(out1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(
            state.injected_code.as_ref().unwrap().values,
            pair.code.values
        );
    }

    #[test]
    fn discriminator_output_lengths_and_extreme_inputs() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        for fill in [-1.0, 1.0] {
            let img = ImageTensor::new(ndarray::Array3::from_elem(
                (3, cfg.image_size, cfg.image_size),
                fill,
            ))
            .unwrap();
            let out = discriminator_forward(&nets, &params, &img);
            assert_eq!(out.adv_logits.len(), cfg.n_domains);
            assert_eq!(out.fg_logits.len(), cfg.n_domains);
            assert_eq!(out.bg_logits.len(), cfg.n_products);
            out.assert_finite().unwrap();
        }
    }

    #[test]
    fn branch_isolation_gradients_are_exactly_zero() {
        let cfg = tiny_cfg();
        let (nets, params) = Networks::init(&cfg);
        // mapping network, target branch 1
        let mut t = Tape::new();
        let b = Bindings::new(&params, &["m."]);
        let z = t.constant(Arr::from_shape_fn(IxDyn(&[cfg.latent_dim]), |_| 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (code, style) = nets.mapper.forward(&mut t, &b, z, 1, &mut rng).unwrap();
        let cs = t.sum_all(code);
        let ss = t.sum_all(style);
        let root = t.add(cs, ss);
        let grads = t.backward(root);
        let got = b.gradients(&grads);
        assert!(got.keys().any(|k| k.starts_with("m.b1.")));
        for k in got.keys() {
            assert!(
                !k.starts_with("m.b0.") && !k.starts_with("m.b2."),
                "gradient leaked into non-selected branch {k}"
            );
        }

        // encoder, domain branch 2
        let mut t = Tape::new();
        let b = Bindings::new(&params, &["e."]);
        let img = random_image(&cfg, 8);
        let x = t.constant(img.data().clone().into_dyn());
        let (code, style) = nets.encoder.forward(&mut t, &b, x, 2).unwrap();
        let cs = t.sum_all(code);
        let ss = t.sum_all(style);
        let root = t.add(cs, ss);
        let grads = t.backward(root);
        let got = b.gradients(&grads);
        assert!(got.keys().any(|k| k.starts_with("e.b2.")));
        for k in got.keys() {
            assert!(
                !k.starts_with("e.b0.") && !k.starts_with("e.b1."),
                "gradient leaked into non-selected branch {k}"
            );
        }
    }

    #[test]
    fn forward_passes_total_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for trial in 0..100 {
            let down = [2usize, 4][rng.random_range(0..2)];
            let size = down * [4usize, 8][rng.random_range(0..2)];
            let cb = [8usize, 12, 16][rng.random_range(0..3)];
            let cfg = validate_config(ModelConfig {
                image_size: size,
                latent_dim: rng.random_range(2..8),
                style_dim: rng.random_range(4..16),
                n_domains: rng.random_range(2..4),
                n_products: rng.random_range(1..4),
                bottleneck_channels: cb,
                fg_channels: rng.random_range(1..cb / 2),
                bottleneck_downsampling: down,
                seed: trial,
            })
            .unwrap();
            let (nets, params) = Networks::init(&cfg);
            let img = random_image(&cfg, trial);
            let z = sample_latent(&mut rng, cfg.latent_dim).unwrap();
            let target = rng.random_range(0..cfg.n_domains);
            let pair = mapping_forward(&nets, &params, &z, target, &mut rng).unwrap();
            let (out, _) = generate(&nets, &params, &img, &pair.code, &pair.style).unwrap();
            assert!(out.data().iter().all(|v| v.is_finite()));
            let dout = discriminator_forward(&nets, &params, &out);
            dout.assert_finite().unwrap();
            let ep = encoder_forward(&nets, &params, &out, target).unwrap();
            assert!(ep.code.values.iter().all(|v| v.is_finite()));
            assert!(ep.style.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn parameter_counts_are_config_pure() {
        let cfg = tiny_cfg();
        let (_, p1) = Networks::init(&cfg);
        let (_, p2) = Networks::init(&cfg);
        for prefix in ["g.", "m.", "e.", "d."] {
            assert_eq!(p1.count(prefix), p2.count(prefix));
        }
        // regression-pinned counts for the tiny config
        assert_eq!(
            (p1.count("g."), p1.count("m."), p1.count("e."), p1.count("d.")),
            (36995, 107012, 9536, 12977),
            "parameter count drifted; intentional architecture changes must update this pin"
        );
    }

    #[test]
    fn adain_statistics_and_style_gradient() {
        // identity affine: per-channel mean 0, std 1
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = Arr::from_shape_fn(IxDyn(&[3, 5, 5]), |_| rng.random::<f64>() * 3.0 - 1.0);
        let style_dim = 4;
        let c = 3;

        // affine with zero weights: bias fixes gamma_raw and beta directly
        let build = |gamma: f64, beta: f64| {
            let w = Arr::zeros(IxDyn(&[2 * c, style_dim]));
            let mut bias = Arr::zeros(IxDyn(&[2 * c]));
            for i in 0..c {
                bias[[i]] = gamma - 1.0; // stored as gamma_raw = gamma - 1
                bias[[c + i]] = beta;
            }
            (w, bias)
        };

        let (w, bias) = build(1.0, 0.0);
        let mut t = Tape::new();
        let f = t.constant(feats.clone());
        let s = t.constant(Arr::zeros(IxDyn(&[style_dim])));
        let wid = t.constant(w);
        let bid = t.constant(bias);
        let y = adain_modulate(&mut t, f, s, wid, bid);
        for ch in 0..c {
            let plane = t.value(y).index_axis(ndarray::Axis(0), ch).to_owned();
            let mu = plane.sum() / 25.0;
            let var = plane.mapv(|v| (v - mu) * (v - mu)).sum() / 25.0;
            assert!(mu.abs() < 1e-5);
            assert!((var.sqrt() - 1.0).abs() < 1e-5);
        }

        let (w, bias) = build(2.0, 3.0);
        let mut t = Tape::new();
        let f = t.constant(feats.clone());
        let s = t.constant(Arr::zeros(IxDyn(&[style_dim])));
        let wid = t.constant(w);
        let bid = t.constant(bias);
        let y = adain_modulate(&mut t, f, s, wid, bid);
        for ch in 0..c {
            let plane = t.value(y).index_axis(ndarray::Axis(0), ch).to_owned();
            let mu = plane.sum() / 25.0;
            let var = plane.mapv(|v| (v - mu) * (v - mu)).sum() / 25.0;
            assert!((mu - 3.0).abs() < 1e-4);
            assert!((var.sqrt() - 2.0).abs() < 1e-4);
        }

        // gradient w.r.t. the style vector vs finite differences
        let mut srng = ChaCha8Rng::seed_from_u64(5);
        let style = Arr::from_shape_fn(IxDyn(&[style_dim]), |_| srng.random::<f64>() - 0.5);
        let wmat = Arr::from_shape_fn(IxDyn(&[2 * c, style_dim]), |_| srng.random::<f64>() * 0.4 - 0.2);
        let bvec = Arr::from_shape_fn(IxDyn(&[2 * c]), |_| srng.random::<f64>() * 0.2);
        let feats2 = feats.clone();
        gradcheck::check(
            move |t, ids| {
                let f = t.constant(feats2.clone());
                let w = t.constant(wmat.clone());
                let b = t.constant(bvec.clone());
                let y = adain_modulate(t, f, ids[0], w, b);
                let sq = t.square(y);
                t.mean_all(sq)
            },
            &[style],
            1e-5,
            1e-4,
        );
    }
}
