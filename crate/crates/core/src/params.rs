//! Named parameter and gradient collections.

use std::collections::BTreeMap;

use crate::autodiff::{Adjoints, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named weight tensors. Both network branches read the same entries.
///
/// Iteration order is the lexicographic name order, which fixes the layout of
/// any concatenated "long vector" view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// One gradient tensor per parameter name, shaped like the parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

macro_rules! named_map {
    ($ty:ident) => {
        impl<T: Scalar> $ty<T> {
            pub fn new() -> Self {
                Self {
                    tensors: BTreeMap::new(),
                }
            }

            pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
                self.tensors.insert(name.into(), tensor)
            }

            pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
                self.tensors.get(name)
            }

            pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
                self.tensors.get_mut(name)
            }

            pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
                self.get(name)
                    .ok_or_else(|| Error::UnknownParameter(name.to_string()))
            }

            pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
                self.tensors.remove(name)
            }

            pub fn contains(&self, name: &str) -> bool {
                self.tensors.contains_key(name)
            }

            pub fn names(&self) -> impl Iterator<Item = &str> {
                self.tensors.keys().map(String::as_str)
            }

            pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
                self.tensors.iter().map(|(k, v)| (k.as_str(), v))
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
                self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
            }

            pub fn len(&self) -> usize {
                self.tensors.len()
            }

            pub fn is_empty(&self) -> bool {
                self.tensors.is_empty()
            }

            /// Euclidean norm of all entries concatenated.
            pub fn global_norm(&self) -> T {
                self.tensors.values().map(Tensor::sq_norm).sum::<T>().sqrt()
            }

            pub fn cast<U: Scalar>(&self) -> $ty<U> {
                $ty {
                    tensors: self
                        .tensors
                        .iter()
                        .map(|(k, v)| (k.clone(), v.cast()))
                        .collect(),
                }
            }
        }
    };
}

named_map!(ParamStore);
named_map!(GradientSet);

impl<T: Scalar> GradientSet<T> {
    /// `self + c · other`, name by name. Both sets must hold the same names.
    pub fn add_scaled(&self, other: &Self, c: T) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::InvalidInput("gradient sets differ in names".into()));
        }
        let mut out = Self::new();
        for (name, a) in self.iter() {
            let b = other.require(name)?;
            out.insert(name, a.zip_map(b, |x, y| x + c * y)?);
        }
        Ok(out)
    }

    /// Checks every key names a parameter of the same shape.
    pub fn validate_against(&self, params: &ParamStore<T>) -> Result<()> {
        for (name, g) in self.iter() {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "gradient",
                    format!("`{name}`: {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters placed on a tape, remembering which ones are differentiated.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, (Var, bool)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .map(|&(v, _)| v)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.vars.get(name).is_some_and(|&(_, t)| t)
    }

    /// Gradients for every trainable bound parameter (zeros where unreached).
    pub fn gradients<T: Scalar>(&self, tape: &Tape<T>, adjoints: &Adjoints<T>) -> GradientSet<T> {
        let mut out = GradientSet::new();
        for (name, &(var, trainable)) in &self.vars {
            if trainable {
                out.insert(name.clone(), adjoints.get_or_zeros(var, tape.value(var)));
            }
        }
        out
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Places every parameter on `tape`; those accepted by `trainable` become
    /// differentiated leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let tr = trainable(name);
                let v = if tr {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), (v, tr))
            })
            .collect();
        BoundParams { vars }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        self.bind(tape, |_| false)
    }
}
