//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParamStore};
use crate::tensor::Scalar;

/// `(f(p + h·e_i) - f(p - h·e_i)) / 2h` for every coordinate of every
/// parameter accepted by `select`.
pub fn finite_diff_grad<T, F>(
    mut f: F,
    params: &ParamStore<T>,
    h: T,
    select: impl Fn(&str) -> bool,
) -> Result<GradientSet<T>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    if h <= T::zero() {
        return Err(Error::InvalidInput("finite difference step must be > 0".into()));
    }
    let mut probe = params.clone();
    let mut grads = GradientSet::new();
    let names: Vec<String> = params.names().filter(|n| select(n)).map(String::from).collect();
    for name in names {
        let base = params.require(&name)?.clone();
        let mut g = base.clone();
        for i in 0..base.len() {
            let x = base.data()[i];
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = x + h;
            let up = f(&probe)?;
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = x - h;
            let down = f(&probe)?;
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = x;
            g.data_mut()[i] = (up - down) / (h + h);
        }
        grads.insert(name, g);
    }
    Ok(grads)
}
