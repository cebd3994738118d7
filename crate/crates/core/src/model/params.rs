//! Named parameter traversal. Every trainable tensor is an `Array2<f64>`;
//! gradients are stored in a second instance of the same model type, so
//! optimisers and checkpoints just walk two structures in lockstep.

use ndarray::Array2;

pub type Tensor = Array2<f64>;

pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(inner) = self {
            inner.visit(prefix, f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Parameters`] by visiting the listed fields in order.
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::model::params::Parameters for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::model::params::Tensor),
            ) {
                $( self.$field.visit(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a mut $crate::model::params::Tensor),
            ) {
                $( self.$field.visit_mut(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

pub fn named<P: Parameters + ?Sized>(p: &P) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |n, t| out.push((n, t)));
    out
}

pub fn named_mut<P: Parameters + ?Sized>(p: &mut P) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |n, t| out.push((n, t)));
    out
}

pub fn num_params<P: Parameters + ?Sized>(p: &P) -> usize {
    named(p).iter().map(|(_, t)| t.len()).sum()
}

pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.fill(0.0));
    z
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<P: Parameters>(acc: &mut P, other: &P) {
    let src = named(other);
    for ((_, dst), (_, s)) in named_mut(acc).into_iter().zip(src) {
        *dst += s;
    }
}

pub fn scale<P: Parameters>(p: &mut P, factor: f64) {
    p.visit_mut("", &mut |_, t| t.mapv_inplace(|v| v * factor));
}

pub fn all_finite<P: Parameters + ?Sized>(p: &P) -> bool {
    named(p).iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
}
