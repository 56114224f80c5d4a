//! Uniform access to a model's named parameter tensors.
//!
//! Weight structs implement [`ParamBundle`]; gradient bundles reuse the same
//! struct types, so a bundle and its gradients flatten to identically named,
//! identically ordered lists. The names double as the canonical entry names
//! of the weights-archive format.

use crate::num::Element;
use crate::tensor::Tensor;

pub trait ParamBundle<T: Element> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    /// Total number of scalar coordinates.
    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Flattens a bundle into one `f64` coordinate vector (gradient checking).
pub fn flatten_f64<T: Element, B: ParamBundle<T>>(bundle: &B) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in bundle.params() {
        out.extend(t.data().iter().map(|v| v.as_f64()));
    }
    out
}
