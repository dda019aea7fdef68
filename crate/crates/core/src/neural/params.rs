//! Flat views over parameter blocks, in a fixed documented order.

use ndarray::{Array1, Array2};

/// A named, ordered set of parameter blocks.
///
/// Every model and every gradient of a model implements this; the order of
/// [`ParamSet::blocks`] is the serialization order and must match
/// [`ParamSet::blocks_mut`].
pub trait ParamSet {
    fn blocks(&self) -> Vec<(String, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Copies every value out in block order.
    fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }
}

pub(crate) fn m2<'a>(prefix: &str, name: &str, a: &'a Array2<f64>) -> (String, &'a [f64]) {
    (
        format!("{prefix}.{name}"),
        a.as_slice().expect("parameter arrays are contiguous"),
    )
}

pub(crate) fn m2_mut<'a>(
    prefix: &str,
    name: &str,
    a: &'a mut Array2<f64>,
) -> (String, &'a mut [f64]) {
    (
        format!("{prefix}.{name}"),
        a.as_slice_mut().expect("parameter arrays are contiguous"),
    )
}

pub(crate) fn v1<'a>(prefix: &str, name: &str, a: &'a Array1<f64>) -> (String, &'a [f64]) {
    (
        format!("{prefix}.{name}"),
        a.as_slice().expect("parameter arrays are contiguous"),
    )
}

pub(crate) fn v1_mut<'a>(
    prefix: &str,
    name: &str,
    a: &'a mut Array1<f64>,
) -> (String, &'a mut [f64]) {
    (
        format!("{prefix}.{name}"),
        a.as_slice_mut().expect("parameter arrays are contiguous"),
    )
}
