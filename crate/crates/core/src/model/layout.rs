//! Flat parameter storage.
//!
//! Every parameter tensor of the network lives in one contiguous buffer,
//! addressed by name through a layout built deterministically from the
//! model config. Parameters, gradients and optimizer momentum are all
//! `ParamBuf`s over the same layout, which makes the SGD update an
//! elementwise loop, checkpointing a flat dump, and finite-difference
//! probing a single-index perturbation.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Default)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    by_name: HashMap<String, usize>,
    total_len: usize,
}

impl ParamLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder {
            layout: ParamLayout::default(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        let idx = self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.specs[*idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }
}

pub struct LayoutBuilder {
    layout: ParamLayout,
}

impl LayoutBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> &mut Self {
        let name = name.into();
        assert!(
            !self.layout.by_name.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        let spec = TensorSpec {
            name: name.clone(),
            offset: self.layout.total_len,
            shape: shape.to_vec(),
        };
        self.layout.total_len += spec.len();
        self.layout.by_name.insert(name, self.layout.specs.len());
        self.layout.specs.push(spec);
        self
    }

    pub fn build(self) -> Arc<ParamLayout> {
        Arc::new(self.layout)
    }
}

/// One flat value buffer over a layout.
#[derive(Debug, Clone)]
pub struct ParamBuf<S: Scalar> {
    layout: Arc<ParamLayout>,
    data: Vec<S>,
}

impl<S: Scalar> ParamBuf<S> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![S::zero(); layout.total_len()];
        ParamBuf { layout, data }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn slice(&self, name: &str) -> (&TensorSpec, &[S]) {
        let spec = self.layout.spec(name);
        (spec, &self.data[spec.offset..spec.offset + spec.len()])
    }

    /// 2-D view of a named tensor.
    pub fn mat(&self, name: &str) -> ArrayView2<'_, S> {
        let (spec, slice) = self.slice(name);
        assert_eq!(spec.shape.len(), 2, "'{name}' is not a matrix");
        ArrayView2::from_shape((spec.shape[0], spec.shape[1]), slice).expect("layout shape")
    }

    pub fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, S> {
        let spec = self.layout.spec(name).clone();
        assert_eq!(spec.shape.len(), 2, "'{name}' is not a matrix");
        let slice = &mut self.data[spec.offset..spec.offset + spec.len()];
        ArrayViewMut2::from_shape((spec.shape[0], spec.shape[1]), slice).expect("layout shape")
    }

    /// 1-D view of a named tensor.
    pub fn vec(&self, name: &str) -> ArrayView1<'_, S> {
        let (spec, slice) = self.slice(name);
        assert_eq!(spec.shape.len(), 1, "'{name}' is not a vector");
        ArrayView1::from_shape(spec.shape[0], slice).expect("layout shape")
    }

    pub fn vec_mut(&mut self, name: &str) -> ArrayViewMut1<'_, S> {
        let spec = self.layout.spec(name).clone();
        assert_eq!(spec.shape.len(), 1, "'{name}' is not a vector");
        let slice = &mut self.data[spec.offset..spec.offset + spec.len()];
        ArrayViewMut1::from_shape(spec.shape[0], slice).expect("layout shape")
    }

    /// Elementwise accumulate; layouts must match.
    pub fn add_assign(&mut self, other: &ParamBuf<S>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Converts every element to a different scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamBuf<T> {
        ParamBuf {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| T::cast(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_addresses_are_stable_and_views_are_shaped() {
        let mut b = ParamLayout::builder();
        b.add("a.w", &[2, 3]).add("a.b", &[3]).add("z.w", &[1, 1]);
        let layout = b.build();
        assert_eq!(layout.total_len(), 10);
        assert_eq!(layout.spec("a.b").offset, 6);

        let mut buf = ParamBuf::<f64>::zeros(layout);
        buf.mat_mut("a.w")[[1, 2]] = 5.0;
        assert_eq!(buf.data()[5], 5.0);
        buf.vec_mut("a.b")[1] = 2.0;
        assert_eq!(buf.data()[7], 2.0);
        assert_eq!(buf.mat("a.w").dim(), (2, 3));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut b = ParamLayout::builder();
        b.add("x", &[1]).add("x", &[2]);
    }
}
