//! Named parameter storage and tape binding.
//!
//! All four networks keep their tensors in one [`ParamSet`] under dotted
//! prefixes (`g.`, `d.`, `e.`, `m.`). A [`Bindings`] lazily places parameters
//! onto a tape, so a backward pass only ever touches what a forward pass
//! actually used — untouched parameters get no gradient entry at all.

use dtgan_autodiff::{Arr, Tape, TensorId};
use ndarray::IxDyn;
use rand::Rng;
use rand_distr::StandardNormal;
use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Clone, Default)]
pub struct ParamSet {
    pub map: BTreeMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Total number of scalar parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.map.keys().filter(move |k| k.starts_with(prefix))
    }

    /// He-normal conv weight (Cout,Cin,k,k) plus zero bias when asked.
    pub fn init_conv<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        bias: bool,
    ) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Arr::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        self.insert(format!("{name}.w"), w);
        if bias {
            self.insert(format!("{name}.b"), Arr::zeros(IxDyn(&[cout])));
        }
    }

    /// He-normal dense weight (out,in) plus zero bias when asked.
    pub fn init_dense<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        out: usize,
        inp: usize,
        bias: bool,
    ) {
        let std = (2.0 / inp as f64).sqrt();
        let w = Arr::from_shape_fn(IxDyn(&[out, inp]), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        self.insert(format!("{name}.w"), w);
        if bias {
            self.insert(format!("{name}.b"), Arr::zeros(IxDyn(&[out])));
        }
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Arr::zeros(IxDyn(shape)));
    }
}

/// Lazy tape binding of a [`ParamSet`].
pub struct Bindings<'p> {
    params: &'p ParamSet,
    trainable_prefixes: Vec<String>,
    ids: RefCell<BTreeMap<String, TensorId>>,
}

impl<'p> Bindings<'p> {
    /// Parameters whose name starts with any of `trainable_prefixes` become
    /// gradient leaves; everything else binds as a constant.
    pub fn new(params: &'p ParamSet, trainable_prefixes: &[&str]) -> Self {
        Bindings {
            params,
            trainable_prefixes: trainable_prefixes.iter().map(|s| s.to_string()).collect(),
            ids: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn frozen(params: &'p ParamSet) -> Self {
        Self::new(params, &[])
    }

    pub fn id(&self, tape: &mut Tape, name: &str) -> TensorId {
        if let Some(id) = self.ids.borrow().get(name) {
            return *id;
        }
        let value = self.params.get(name).clone();
        let trainable = self.trainable_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let id = if trainable {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.ids.borrow_mut().insert(name.to_string(), id);
        id
    }

    /// `(name, id)` pairs bound so far — the ones a backward pass can feed.
    pub fn bound(&self) -> Vec<(String, TensorId)> {
        self.ids
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Collect gradients for every bound parameter that received one.
    pub fn gradients(&self, grads: &dtgan_autodiff::Gradients) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, id) in self.ids.borrow().iter() {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
