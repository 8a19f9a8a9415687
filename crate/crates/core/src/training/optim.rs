use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// SGD momentum buffers, one per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptState<T> {
    /// Zero velocities for every parameter accepted by `trainable`.
    pub fn new(params: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let velocity = params
            .iter()
            .filter(|(n, _)| trainable(n))
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self { velocity }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.velocity.keys().map(String::as_str)
    }
}

/// One SGD step with coupled weight decay:
/// `g' = g + wd·w; v ← momentum·v + g'; w ← w − rate·v`.
pub fn sgd_update<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradientSet<T>,
    opt: &mut OptState<T>,
    rate: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    let (rate, wd, mu) = (T::of(rate), T::of(weight_decay), T::of(momentum));
    for (name, v) in opt.velocity.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let w = params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if g.shape() != w.shape() {
            return Err(Error::shape(
                "sgd_update",
                format!("`{name}`: gradient {:?} vs parameter {:?}", g.shape(), w.shape()),
            ));
        }
        for ((wv, &gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g2 = gv + wd * *wv;
            *vv = mu * *vv + g2;
            *wv = *wv - rate * *vv;
        }
    }
    Ok(())
}
