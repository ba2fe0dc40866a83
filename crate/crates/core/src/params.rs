//! Flat parameter vectors with a per-layer segment table.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All model weights laid out contiguously; segments tile the vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

/// Weight differences and obfuscated updates share the parameter layout.
pub type GradientVector = ParamVector;

impl ParamVector {
    /// Zero vector for the given `(name, shape)` layout.
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        let mut offset = 0;
        let segments = layout
            .iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.clone(),
                    offset,
                    shape: shape.clone(),
                };
                offset += seg.len();
                seg
            })
            .collect();
        Self {
            data: vec![0.0; offset],
            segments,
        }
    }

    pub fn from_parts(data: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut offset = 0;
        for s in &segments {
            if s.offset != offset {
                return Err(Error::shape(
                    "param_vector",
                    format!("segment {} starts at {} instead of {offset}", s.name, s.offset),
                ));
            }
            offset += s.len();
        }
        if offset != data.len() {
            return Err(Error::shape(
                "param_vector",
                format!("segments cover {offset} of {} values", data.len()),
            ));
        }
        Ok(Self { data, segments })
    }

    /// Same layout as `self`, with new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_parts(data, self.segments.clone())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            segments: self.segments.clone(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_data(&self, seg: &Segment) -> &[f64] {
        &self.data[seg.range()]
    }

    pub fn segment_data_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.segments[index].range();
        &mut self.data[range]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.segments == other.segments
    }

    fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(op, "segment tables differ"))
        }
    }

    /// Per-segment tensors.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.segments
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), self.data[s.range()].to_vec()).expect("segment"))
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`] against this layout.
    pub fn flatten_like(&self, parts: &[Tensor]) -> Result<Self> {
        if parts.len() != self.segments.len() {
            return Err(Error::shape(
                "flatten",
                format!("{} tensors for {} segments", parts.len(), self.segments.len()),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for (t, s) in parts.iter().zip(&self.segments) {
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape(
                    "flatten",
                    format!("{}: {:?} vs {:?}", s.name, t.shape(), s.shape),
                ));
            }
            data.extend_from_slice(t.data());
        }
        self.with_data(data)
    }

    /// Record each segment on `tape`, as differentiable leaves or constants.
    pub fn to_vars(&self, tape: &Tape, differentiable: bool) -> Vec<Var> {
        self.unflatten()
            .into_iter()
            .map(|t| if differentiable { tape.var(t) } else { tape.constant(t) })
            .collect()
    }

    /// Collect tape values back into this layout.
    pub fn from_vars(&self, vars: &[Var]) -> Result<Self> {
        let parts: Vec<Tensor> = vars.iter().map(Var::value).collect();
        self.flatten_like(&parts)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_layout(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        self.with_data(data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_layout(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        self.with_data(data)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * c).collect(),
            segments: self.segments.clone(),
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn segment_norms(&self) -> Vec<f64> {
        self.segments
            .iter()
            .map(|s| self.data[s.range()].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Vec<(String, Vec<usize>)> {
        vec![
            ("a.weight".into(), vec![2, 3]),
            ("a.bias".into(), vec![2]),
            ("b.weight".into(), vec![3, 1, 2, 2]),
        ]
    }

    #[test]
    fn segments_tile_exactly() {
        let p = ParamVector::zeros(&layout());
        assert_eq!(p.len(), 6 + 2 + 12);
        let mut next = 0;
        for s in p.segments() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, p.len());
    }

    #[test]
    fn rejects_gaps() {
        let mut segs = ParamVector::zeros(&layout()).segments().to_vec();
        segs[1].offset += 1;
        assert!(ParamVector::from_parts(vec![0.0; 20], segs).is_err());
    }

    #[test]
    fn segment_norms_match_differences() {
        let base = ParamVector::zeros(&layout());
        let a = base.with_data((0..20).map(|i| i as f64).collect()).unwrap();
        let b = base.with_data((0..20).map(|i| (i * i) as f64 * 0.1).collect()).unwrap();
        let d = a.sub(&b).unwrap();
        for (seg, norm) in d.segments().iter().zip(d.segment_norms()) {
            let direct: f64 = seg
                .range()
                .map(|i| (a.data()[i] - b.data()[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert_eq!(norm, direct);
        }
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 20)) {
            let p = ParamVector::zeros(&layout()).with_data(values).unwrap();
            let back = p.flatten_like(&p.unflatten()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
