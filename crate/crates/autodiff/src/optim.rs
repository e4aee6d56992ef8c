//! Adaptive moment estimation over named parameter maps.

use crate::Arr;
use std::collections::BTreeMap;

/// Adam optimizer. Moments are kept per parameter name so that a single
/// instance can own any subset of a model's parameters (selected by prefix
/// at the call site).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Arr>,
    pub v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over `(name, param, grad)` triples. Parameters without a
    /// gradient entry are left untouched.
    pub fn step<'a, I>(&mut self, entries: I)
    where
        I: Iterator<Item = (&'a str, &'a mut Arr, Option<&'a Arr>)>,
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param, grad) in entries {
            let Some(g) = grad else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mi, gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
