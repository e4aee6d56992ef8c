//! The tape: node storage, forward ops, reverse pass.

use crate::Arr;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Backward closure: given the upstream gradient, return the gradient
/// contribution for each parent, in parent order.
type BackFn = Box<dyn Fn(&Arr) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<TensorId>,
    back: Option<BackFn>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient for `id`, `None` if the node never received one.
    pub fn get(&self, id: TensorId) -> Option<&Arr> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, materializing zeros of the given shape when absent.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> Arr {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(shape)),
        }
    }
}

/// A recorded computation. Create, push ops, call [`Tape::backward`] once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn lse(a: f64, b: f64) -> f64 {
    // numerically stable log(exp(a) + exp(b))
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus64(x: f64) -> f64 {
    lse(0.0, x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value stored at `id`.
    pub fn value(&self, id: TensorId) -> &Arr {
        &self.nodes[id.0].value
    }

    /// Scalar value stored at a 0-d node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        crate::scalar_value(self.value(id))
    }

    fn push(&mut self, value: Arr, parents: Vec<TensorId>, back: Option<BackFn>) -> TensorId {
        let needs_grad = back.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            back: if needs_grad { back } else { None },
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf that does not require gradients (data, masks, frozen params).
    pub fn constant(&mut self, value: Arr) -> TensorId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            back: None,
            needs_grad: false,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf that accumulates gradients (trainable parameter or probed input).
    pub fn leaf(&mut self, value: Arr) -> TensorId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            back: None,
            needs_grad: true,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Consumes nothing; the tape stays
    /// readable so several roots can be differentiated on separate calls.
    pub fn backward(&self, root: TensorId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(crate::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(back) = &node.back {
                let contributions = back(&g);
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (parent, contrib) in node.parents.iter().zip(contributions) {
                    if !self.nodes[parent.0].needs_grad {
                        continue;
                    }
                    match &mut grads[parent.0] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            if node.needs_grad && node.back.is_none() {
                grads[idx] = Some(g); // keep leaf gradients
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, vec![a, b], Some(Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, vec![a, b], Some(Box::new(|g| vec![g.clone(), -g])))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = &av * &bv;
        self.push(v, vec![a, b], Some(Box::new(move |g| vec![g * &bv, g * &av])))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let v = -self.value(a);
        self.push(v, vec![a], Some(Box::new(|g| vec![-g])))
    }

    /// Multiply by a plain constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) * c;
        self.push(v, vec![a], Some(Box::new(move |g| vec![g * c])))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) + c;
        self.push(v, vec![a], Some(Box::new(|g| vec![g.clone()])))
    }

    /// Elementwise product with a constant mask (no gradient into the mask).
    pub fn mul_const(&mut self, a: TensorId, mask: Arr) -> TensorId {
        assert_eq!(self.value(a).shape(), mask.shape(), "mul_const: shape mismatch");
        let v = self.value(a) * &mask;
        self.push(v, vec![a], Some(Box::new(move |g| vec![g * &mask])))
    }

    /// Multiply every element of `a` by a 0-d node `s`.
    pub fn mul_scalar_node(&mut self, a: TensorId, s: TensorId) -> TensorId {
        assert_eq!(self.value(s).ndim(), 0, "mul_scalar_node: s must be 0-d");
        let av = self.value(a).clone();
        let sv = crate::scalar_value(self.value(s));
        let v = &av * sv;
        self.push(
            v,
            vec![a, s],
            Some(Box::new(move |g| {
                let gs = (g * &av).sum();
                vec![g * sv, crate::scalar(gs)]
            })),
        )
    }

    // ---- activations ----

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let x = self.value(a);
        let v = x.mapv(|t| if t > 0.0 { t } else { slope * t });
        let mask = x.mapv(|t| if t > 0.0 { 1.0 } else { slope });
        self.push(v, vec![a], Some(Box::new(move |g| vec![g * &mask])))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::tanh);
        let vc = v.clone();
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| vec![g * &vc.mapv(|y| 1.0 - y * y)])),
        )
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a).clone();
        let v = x.mapv(softplus64);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| vec![g * &x.mapv(sigmoid)])),
        )
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let v = x.mapv(f64::abs);
        let sgn = x.mapv(|t| {
            if t > 0.0 {
                1.0
            } else if t < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.push(v, vec![a], Some(Box::new(move |g| vec![g * &sgn])))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a).clone();
        let v = &x * &x;
        self.push(v, vec![a], Some(Box::new(move |g| vec![g * &(&x * 2.0)])))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let v = crate::scalar(self.value(a).sum());
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                let g0 = crate::scalar_value(g);
                vec![Arr::from_elem(IxDyn(&shape), g0)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let n = self.value(a).len() as f64;
        let v = crate::scalar(self.value(a).sum() / n);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                let g0 = crate::scalar_value(g) / n;
                vec![Arr::from_elem(IxDyn(&shape), g0)]
            })),
        )
    }

    /// Mean absolute difference, the workhorse L1 reduction.
    pub fn mean_abs_diff(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Inner product of two 1-d nodes.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let old_shape: Vec<usize> = self.value(a).shape().to_vec();
        let n: usize = shape.iter().product();
        assert_eq!(self.value(a).len(), n, "reshape: element count mismatch");
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Arr::from_shape_vec(IxDyn(shape), flat).expect("reshape");
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                let flat: Vec<f64> = g.iter().copied().collect();
                vec![Arr::from_shape_vec(IxDyn(&old_shape), flat).expect("reshape back")]
            })),
        )
    }

    pub fn flatten(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    /// Concatenate two (C,H,W) maps along channels.
    pub fn concat_c(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa.len(), 3, "concat_c expects (C,H,W)");
        assert_eq!(&sa[1..], &sb[1..], "concat_c: spatial mismatch");
        let ca = sa[0];
        let cb = sb[0];
        let mut v = Arr::zeros(IxDyn(&[ca + cb, sa[1], sa[2]]));
        v.slice_mut(ndarray::s![..ca, .., ..]).assign(self.value(a));
        v.slice_mut(ndarray::s![ca.., .., ..]).assign(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = g.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn();
                let gb = g.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn();
                vec![ga, gb]
            })),
        )
    }

    /// Slice `[from, to)` of a 1-d node.
    pub fn slice_v(&mut self, a: TensorId, from: usize, to: usize) -> TensorId {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 1, "slice_v expects a vector");
        assert!(from < to && to <= s[0], "slice_v: bad range");
        let v = self
            .value(a)
            .slice(ndarray::s![from..to])
            .to_owned()
            .into_dyn();
        let full = s[0];
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                let mut ga = Arr::zeros(IxDyn(&[full]));
                ga.slice_mut(ndarray::s![from..to]).assign(g);
                vec![ga]
            })),
        )
    }

    /// Channel slice `[from, to)` of a (C,H,W) map.
    pub fn slice_c(&mut self, a: TensorId, from: usize, to: usize) -> TensorId {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3, "slice_c expects (C,H,W)");
        assert!(from < to && to <= s[0], "slice_c: bad range");
        let v = self
            .value(a)
            .slice(ndarray::s![from..to, .., ..])
            .to_owned()
            .into_dyn();
        let full = s.clone();
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g| {
                let mut ga = Arr::zeros(IxDyn(&full));
                ga.slice_mut(ndarray::s![from..to, .., ..]).assign(g);
                vec![ga]
            })),
        )
    }

    // ---- broadcast helpers over (C,H,W) ----

    /// `x[c,h,w] * s[c]`
    pub fn mul_channel(&mut self, x: TensorId, s: TensorId) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "mul_channel expects (C,H,W)");
        assert_eq!(self.value(s).shape(), &[xs[0]], "mul_channel: channel mismatch");
        let xv = self.value(x).clone();
        let sv = self.value(s).clone();
        let mut v = xv.clone();
        for (c, mut plane) in v.outer_iter_mut().enumerate() {
            plane *= sv[[c]];
        }
        self.push(
            v,
            vec![x, s],
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                let mut gs = Arr::zeros(IxDyn(&[xs[0]]));
                for (c, mut plane) in gx.outer_iter_mut().enumerate() {
                    plane *= sv[[c]];
                }
                for c in 0..xs[0] {
                    let gsum = (&g.index_axis(ndarray::Axis(0), c)
                        * &xv.index_axis(ndarray::Axis(0), c))
                        .sum();
                    gs[[c]] = gsum;
                }
                vec![gx, gs]
            })),
        )
    }

    /// `x[c,h,w] + b[c]`
    pub fn add_channel(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "add_channel expects (C,H,W)");
        assert_eq!(self.value(b).shape(), &[xs[0]], "add_channel: channel mismatch");
        let bv = self.value(b).clone();
        let mut v = self.value(x).clone();
        for (c, mut plane) in v.outer_iter_mut().enumerate() {
            plane += bv[[c]];
        }
        self.push(
            v,
            vec![x, b],
            Some(Box::new(move |g| {
                let mut gb = Arr::zeros(IxDyn(&[xs[0]]));
                for c in 0..xs[0] {
                    gb[[c]] = g.index_axis(ndarray::Axis(0), c).sum();
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// `x[c,h,w] + n[h,w]` — one spatial map added to every channel.
    pub fn add_hw(&mut self, x: TensorId, n: TensorId) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        let ns = self.value(n).shape().to_vec();
        assert_eq!(xs.len(), 3, "add_hw expects (C,H,W)");
        assert_eq!(&xs[1..], &ns[..], "add_hw: spatial mismatch");
        let nv = self.value(n).clone();
        let mut v = self.value(x).clone();
        for mut plane in v.outer_iter_mut() {
            plane += &nv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        }
        self.push(
            v,
            vec![x, n],
            Some(Box::new(move |g| {
                let gn = g.sum_axis(ndarray::Axis(0));
                vec![g.clone(), gn.into_dyn()]
            })),
        )
    }

    // ---- linear algebra ----

    /// `y = W x (+ b)` with `W: (out,in)`, `x: (in)`.
    pub fn linear(&mut self, w: TensorId, x: TensorId, b: Option<TensorId>) -> TensorId {
        let wv = self.value(w).clone();
        let xv = self.value(x).clone();
        assert_eq!(wv.ndim(), 2, "linear: W must be 2-d");
        assert_eq!(xv.ndim(), 1, "linear: x must be 1-d");
        let w2: ArrayView2<f64> = wv.view().into_dimensionality().unwrap();
        let x1: ArrayView1<f64> = xv.view().into_dimensionality().unwrap();
        assert_eq!(w2.ncols(), x1.len(), "linear: dim mismatch");
        let mut y = w2.dot(&x1);
        if let Some(bid) = b {
            let bv: ArrayView1<f64> = self.value(bid).view().into_dimensionality().unwrap();
            y += &bv;
        }
        let mut parents = vec![w, x];
        if let Some(bid) = b {
            parents.push(bid);
        }
        let has_bias = b.is_some();
        self.push(
            y.into_dyn(),
            parents,
            Some(Box::new(move |g| {
                let g1: ArrayView1<f64> = g.view().into_dimensionality().unwrap();
                let w2: ArrayView2<f64> = wv.view().into_dimensionality().unwrap();
                let x1: ArrayView1<f64> = xv.view().into_dimensionality().unwrap();
                // gW = g ⊗ x
                let mut gw = Array2::<f64>::zeros((w2.nrows(), w2.ncols()));
                for (i, gi) in g1.iter().enumerate() {
                    if *gi != 0.0 {
                        gw.row_mut(i).scaled_add(*gi, &x1);
                    }
                }
                let gx = w2.t().dot(&g1);
                let mut out = vec![gw.into_dyn(), gx.into_dyn()];
                if has_bias {
                    out.push(g.clone());
                }
                out
            })),
        )
    }

    // ---- convolution ----

    /// 2-d convolution: `x: (Cin,H,W)`, `w: (Cout,Cin,k,k)`, optional bias
    /// `(Cout)`, zero padding `pad`, stride `stride`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (cin, h, wd) = dims3(&xv);
        let ws = wv.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d: weight must be (Cout,Cin,k,k)");
        assert_eq!(ws[1], cin, "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let k = ws[2];
        let cout = ws[0];
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let col = im2col(&xv, k, stride, pad, ho, wo); // (Cin*k*k, Ho*Wo)
        let wmat = to2d(&wv, cout, cin * k * k);
        let mut out = wmat.dot(&col); // (Cout, Ho*Wo)
        if let Some(bid) = b {
            let bv = self.value(bid).clone();
            for (c, mut row) in out.outer_iter_mut().enumerate() {
                row += bv[[c]];
            }
        }
        let y = Arr::from_shape_vec(IxDyn(&[cout, ho, wo]), out.into_raw_vec_and_offset().0)
            .expect("conv2d out");

        let mut parents = vec![x, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        let has_bias = b.is_some();
        self.push(
            y,
            parents,
            Some(Box::new(move |g| {
                let gmat = to2d(g, cout, ho * wo);
                // weight grad: g · colᵀ
                let col = im2col(&xv, k, stride, pad, ho, wo);
                let gw = gmat.dot(&col.t());
                // input grad: col2im(Wᵀ · g)
                let wmat = to2d(&wv, cout, cin * k * k);
                let gcol = wmat.t().dot(&gmat);
                let gx = col2im(&gcol, cin, h, wd, k, stride, pad, ho, wo);
                let mut out = vec![
                    gx,
                    Arr::from_shape_vec(IxDyn(&[cout, cin, k, k]), gw.into_raw_vec_and_offset().0)
                        .expect("gw"),
                ];
                if has_bias {
                    let mut gb = Array1::<f64>::zeros(cout);
                    for c in 0..cout {
                        gb[c] = gmat.row(c).sum();
                    }
                    out.push(gb.into_dyn());
                }
                out
            })),
        )
    }

    // ---- resampling ----

    /// Nearest-neighbor 2x upsampling of (C,H,W).
    pub fn upsample2x(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let mut v = Arr::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let t = xv[[ci, i, j]];
                    v[[ci, 2 * i, 2 * j]] = t;
                    v[[ci, 2 * i + 1, 2 * j]] = t;
                    v[[ci, 2 * i, 2 * j + 1]] = t;
                    v[[ci, 2 * i + 1, 2 * j + 1]] = t;
                }
            }
        }
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[[ci, i, j]] = g[[ci, 2 * i, 2 * j]]
                                + g[[ci, 2 * i + 1, 2 * j]]
                                + g[[ci, 2 * i, 2 * j + 1]]
                                + g[[ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// 2x2 average pooling of (C,H,W); H and W must be even.
    pub fn avgpool2x(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x: odd spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut v = Arr::zeros(IxDyn(&[c, ho, wo]));
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    v[[ci, i, j]] = 0.25
                        * (xv[[ci, 2 * i, 2 * j]]
                            + xv[[ci, 2 * i + 1, 2 * j]]
                            + xv[[ci, 2 * i, 2 * j + 1]]
                            + xv[[ci, 2 * i + 1, 2 * j + 1]]);
                }
            }
        }
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let q = 0.25 * g[[ci, i, j]];
                            gx[[ci, 2 * i, 2 * j]] = q;
                            gx[[ci, 2 * i + 1, 2 * j]] = q;
                            gx[[ci, 2 * i, 2 * j + 1]] = q;
                            gx[[ci, 2 * i + 1, 2 * j + 1]] = q;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Spatial mean of every channel: (C,H,W) -> (C).
    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let n = (h * w) as f64;
        let mut v = Arr::zeros(IxDyn(&[c]));
        for ci in 0..c {
            v[[ci]] = xv.index_axis(ndarray::Axis(0), ci).sum() / n;
        }
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Arr::zeros(IxDyn(&[c, h, w]));
                for (ci, mut plane) in gx.outer_iter_mut().enumerate() {
                    plane.fill(g[[ci]] / n);
                }
                vec![gx]
            })),
        )
    }

    /// Spatial maximum of every channel: (C,H,W) -> (C). Gradient routes to
    /// the first argmax position per channel.
    pub fn global_max_pool(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let mut v = Arr::zeros(IxDyn(&[c]));
        let mut arg = vec![(0usize, 0usize); c];
        for ci in 0..c {
            let plane = xv.index_axis(ndarray::Axis(0), ci);
            let mut best = f64::NEG_INFINITY;
            for i in 0..h {
                for j in 0..w {
                    if plane[[i, j]] > best {
                        best = plane[[i, j]];
                        arg[ci] = (i, j);
                    }
                }
            }
            v[[ci]] = best;
        }
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let (i, j) = arg[ci];
                    gx[[ci, i, j]] = g[[ci]];
                }
                vec![gx]
            })),
        )
    }

    /// Concatenate two 1-d nodes.
    pub fn concat_v(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ndim(), 1, "concat_v expects vectors");
        assert_eq!(bv.ndim(), 1, "concat_v expects vectors");
        let (na, nb) = (av.len(), bv.len());
        let mut v = Arr::zeros(IxDyn(&[na + nb]));
        v.slice_mut(ndarray::s![..na]).assign(av);
        v.slice_mut(ndarray::s![na..]).assign(bv);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = g.slice(ndarray::s![..na]).to_owned().into_dyn();
                let gb = g.slice(ndarray::s![na..]).to_owned().into_dyn();
                vec![ga, gb]
            })),
        )
    }

    // ---- normalization ----

    /// Instance normalization over (C,H,W): per channel, subtract the spatial
    /// mean and divide by the spatial std (biased variance, epsilon-guarded).
    /// No affine part — compose with `mul_channel`/`add_channel` for that.
    pub fn instance_norm(&mut self, x: TensorId, eps: f64) -> TensorId {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let n = (h * w) as f64;
        assert!(h * w >= 2, "instance_norm needs >=2 spatial positions");
        let mut y = Arr::zeros(IxDyn(&[c, h, w]));
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let plane = xv.index_axis(ndarray::Axis(0), ci);
            let mu = plane.sum() / n;
            let var = plane.mapv(|t| (t - mu) * (t - mu)).sum() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let mut out = y.index_axis_mut(ndarray::Axis(0), ci);
            out.assign(&plane.mapv(|t| (t - mu) * inv));
        }
        let yc = y.clone();
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let gp = g.index_axis(ndarray::Axis(0), ci);
                    let yp = yc.index_axis(ndarray::Axis(0), ci);
                    let gm = gp.sum() / n;
                    let gym = (&gp * &yp).sum() / n;
                    let inv = inv_std[ci];
                    let mut out = gx.index_axis_mut(ndarray::Axis(0), ci);
                    out.assign(&(&gp.mapv(|t| t - gm) - &yp.mapv(|t| t * gym)).mapv(|t| t * inv));
                }
                vec![gx]
            })),
        )
    }

    // ---- classification ----

    /// Log-softmax over a 1-d node.
    pub fn log_softmax(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 1, "log_softmax expects 1-d");
        let mx = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + xv.mapv(|t| (t - mx).exp()).sum().ln();
        let y = xv.mapv(|t| t - lse);
        let yc = y.clone();
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g| {
                let gsum = g.sum();
                vec![g - &yc.mapv(|t| t.exp() * gsum)]
            })),
        )
    }

    /// Pick element `idx` of a 1-d node as a 0-d node.
    pub fn pick(&mut self, x: TensorId, idx: usize) -> TensorId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 1, "pick expects 1-d");
        let len = xv.len();
        assert!(idx < len, "pick: index out of range");
        let v = crate::scalar(xv[[idx]]);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Arr::zeros(IxDyn(&[len]));
                gx[[idx]] = crate::scalar_value(g);
                vec![gx]
            })),
        )
    }

    /// Elementwise maximum; on ties the gradient flows to the first argument.
    pub fn max_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "max_elem: shape mismatch");
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut v = av.clone();
        ndarray::Zip::from(&mut v).and(&bv).for_each(|x, &y| {
            if y > *x {
                *x = y;
            }
        });
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(&av)
                    .and(&bv)
                    .for_each(|x, y, &p, &q| {
                        if p >= q {
                            *y = 0.0;
                        } else {
                            *x = 0.0;
                        }
                    });
                vec![ga, gb]
            })),
        )
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// backward.
    pub fn grl(&mut self, x: TensorId, lambda: f64) -> TensorId {
        let v = self.value(x).clone();
        self.push(v, vec![x], Some(Box::new(move |g| vec![g * (-lambda)])))
    }
}

fn dims3(a: &Arr) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected a (C,H,W) tensor, got shape {:?}", s);
    (s[0], s[1], s[2])
}

fn to2d(a: &Arr, r: usize, c: usize) -> Array2<f64> {
    let flat: Vec<f64> = a.iter().copied().collect();
    Array2::from_shape_vec((r, c), flat).expect("to2d")
}

fn im2col(x: &Arr, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (cin, h, w) = dims3(x);
    let mut col = Array2::<f64>::zeros((cin * k * k, ho * wo));
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    for c in 0..cin {
        let base = c * h * w;
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut dst = col.row_mut(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = base + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * wo + oj] = xs[src_row + jj as usize];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Arr {
    let mut gx = Arr::zeros(IxDyn(&[cin, h, w]));
    let gs = gx.as_slice_mut().expect("col2im");
    for c in 0..cin {
        let base = c * h * w;
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = gcol.row(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = base + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gs[dst_row + jj as usize] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar_value;

    #[test]
    fn backward_through_add_mul() {
        let mut t = Tape::new();
        let a = t.leaf(crate::scalar(3.0));
        let b = t.leaf(crate::scalar(4.0));
        let p = t.mul(a, b);
        let s = t.add(p, a); // f = a*b + a
        let g = t.backward(s);
        assert_eq!(scalar_value(g.get(a).unwrap()), 5.0); // b + 1
        assert_eq!(scalar_value(g.get(b).unwrap()), 3.0); // a
    }

    #[test]
    fn repeated_parent_accumulates() {
        let mut t = Tape::new();
        let a = t.leaf(crate::scalar(3.0));
        let s = t.mul(a, a); // a^2
        let g = t.backward(s);
        assert_eq!(scalar_value(g.get(a).unwrap()), 6.0);
    }

    #[test]
    fn constant_gets_no_grad() {
        let mut t = Tape::new();
        let a = t.leaf(crate::scalar(2.0));
        let c = t.constant(crate::scalar(5.0));
        let p = t.mul(a, c);
        let g = t.backward(p);
        assert!(g.get(c).is_none());
        assert_eq!(scalar_value(g.get(a).unwrap()), 5.0);
    }

    #[test]
    fn grl_negates_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(crate::scalar(2.0));
        let r = t.grl(a, 0.5);
        assert_eq!(t.scalar(r), 2.0); // identity forward
        let s = t.scale(r, 3.0);
        let g = t.backward(s);
        assert_eq!(scalar_value(g.get(a).unwrap()), -1.5); // -λ * 3
    }
}
