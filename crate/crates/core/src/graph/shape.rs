use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Shape known at graph-construction time. `None` marks a dimension (usually
/// the batch) whose size is only known when the graph runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StaticShape(Vec<Option<usize>>);

impl StaticShape {
    pub fn new(dims: Vec<Option<usize>>) -> Self {
        StaticShape(dims)
    }

    pub fn scalar() -> Self {
        StaticShape(Vec::new())
    }

    pub fn known(dims: &[usize]) -> Self {
        StaticShape(dims.iter().map(|&d| Some(d)).collect())
    }

    /// `[None, rest...]`: a batch of rows with the given trailing dims.
    pub fn batched(rest: &[usize]) -> Self {
        let mut dims = vec![None];
        dims.extend(rest.iter().map(|&d| Some(d)));
        StaticShape(dims)
    }

    pub fn dims(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn dim(&self, i: usize) -> Option<usize> {
        self.0.get(i).copied().flatten()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> Option<usize> {
        self.0.iter().try_fold(1usize, |acc, d| d.map(|d| acc * d))
    }

    pub fn is_fully_known(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    pub fn to_shape(&self) -> Option<Shape> {
        self.0
            .iter()
            .copied()
            .collect::<Option<Vec<_>>>()
            .map(Shape::new)
    }

    pub(crate) fn dim_eq(a: Option<usize>, b: Option<usize>) -> bool {
        match (a, b) {
            (Some(x), Some(y)) => x == y,
            _ => true,
        }
    }

    pub fn compatible(&self, other: &StaticShape) -> bool {
        self.rank() == other.rank()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| Self::dim_eq(*a, *b))
    }

    /// Whether a concrete runtime shape satisfies this static shape.
    pub fn accepts(&self, shape: &Shape) -> bool {
        self.rank() == shape.rank()
            && self
                .0
                .iter()
                .zip(shape.dims())
                .all(|(a, b)| a.is_none_or(|a| a == *b))
    }

    pub fn merge(&self, other: &StaticShape) -> StaticShape {
        StaticShape(self.0.iter().zip(&other.0).map(|(a, b)| a.or(*b)).collect())
    }

    /// Suffix broadcasting: the lower-rank operand must match the trailing dims
    /// of the other.
    pub(crate) fn broadcast(
        op: &'static str,
        a: &StaticShape,
        b: &StaticShape,
    ) -> Result<StaticShape> {
        let (big, small) = if a.rank() >= b.rank() { (a, b) } else { (b, a) };
        let offset = big.rank() - small.rank();
        let mut dims = big.0.clone();
        for (i, s) in small.0.iter().enumerate() {
            let d = &mut dims[offset + i];
            if !Self::dim_eq(*d, *s) {
                return Err(Error::shape(op, a.dims(), b.dims()));
            }
            if offset == 0 {
                *d = d.or(*s);
            } else if d.is_none() && s.is_some() {
                // The small side must tile exactly, so its size pins the dim.
                *d = *s;
            }
        }
        Ok(StaticShape(dims))
    }
}

impl From<&Shape> for StaticShape {
    fn from(shape: &Shape) -> Self {
        StaticShape::known(shape.dims())
    }
}

impl fmt::Display for StaticShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match d {
                Some(d) => write!(f, "{d}")?,
                None => f.write_str("?")?,
            }
        }
        f.write_str("]")
    }
}
