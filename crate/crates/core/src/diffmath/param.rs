//! Trainable parameters, stored unconstrained, and their binding onto a tape.

use std::collections::HashMap;

use super::tape::{Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};

/// How the unconstrained storage maps to the value the model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    None,
    /// Stored as a log; the model sees `exp(raw)`.
    Positive,
    /// Square storage; the model sees a lower-triangular factor with
    /// `exp(raw_ii)` on the diagonal and `raw_ij` below it.
    Cholesky,
}

impl Constraint {
    pub fn code(self) -> u8 {
        match self {
            Constraint::None => 0,
            Constraint::Positive => 1,
            Constraint::Cholesky => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Constraint::None),
            1 => Some(Constraint::Positive),
            2 => Some(Constraint::Cholesky),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub raw: Mat,
    pub constraint: Constraint,
    pub grad: Option<Mat>,
    pub trainable: bool,
}

impl Param {
    /// The constrained value.
    pub fn value(&self) -> Mat {
        match self.constraint {
            Constraint::None => self.raw.clone(),
            Constraint::Positive => self.raw.map(f64::exp),
            Constraint::Cholesky => {
                let n = self.raw.nrows();
                Mat::from_fn(n, self.raw.ncols(), |i, j| {
                    if i == j {
                        self.raw[(i, j)].exp()
                    } else if i > j {
                        self.raw[(i, j)]
                    } else {
                        0.0
                    }
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Arena of named parameters. Components keep [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, raw: Mat, constraint: Constraint) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        if constraint == Constraint::Cholesky {
            assert_eq!(raw.nrows(), raw.ncols(), "cholesky parameter must be square");
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            raw,
            constraint,
            grad: None,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a positive parameter given its constrained value.
    pub fn add_positive(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.add(name, value.map(f64::ln), Constraint::Positive)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> Mat {
        self.params[id.0].value()
    }

    /// Sets a parameter from its constrained value (the inverse of [`Param::value`]).
    /// For Cholesky parameters the strict upper triangle of `value` is ignored.
    pub fn set_value(&mut self, id: ParamId, value: &Mat) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.raw.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` is {:?}, got {:?}", p.name, p.raw.shape(), value.shape()),
            ));
        }
        let bad = || Error::InvalidArgument(format!("value out of the domain of `{}`", p.name));
        match p.constraint {
            Constraint::None => p.raw.copy_from(value),
            Constraint::Positive => {
                if value.iter().any(|&v| !(v > 0.0)) {
                    return Err(bad());
                }
                p.raw = value.map(f64::ln);
            }
            Constraint::Cholesky => {
                let n = value.nrows();
                if (0..n).any(|i| !(value[(i, i)] > 0.0)) {
                    return Err(bad());
                }
                p.raw = Mat::from_fn(n, n, |i, j| {
                    if i == j {
                        value[(i, i)].ln()
                    } else if i > j {
                        value[(i, j)]
                    } else {
                        0.0
                    }
                });
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.raw.len())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Records every parameter on `tape`; frozen ones become constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut views = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let leaf = if p.trainable {
                tape.leaf(p.raw.clone())
            } else {
                tape.constant(p.raw.clone())
            };
            let view = match p.constraint {
                Constraint::None => leaf,
                Constraint::Positive => leaf.exp(),
                Constraint::Cholesky => {
                    let n = p.raw.nrows();
                    let strict = tape.constant(Mat::from_fn(n, n, |i, j| (i > j) as u8 as f64));
                    let eye = tape.constant(Mat::identity(n, n));
                    leaf * strict + leaf.exp() * eye
                }
            };
            leaves.push(leaf);
            views.push(view);
        }
        Bound { leaves, views }
    }

    /// Copies gradients of the unconstrained leaves into each parameter.
    pub fn set_grads(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (p, leaf) in self.params.iter_mut().zip(&bound.leaves) {
            p.grad = if p.trainable {
                Some(grads.get_or_zeros(*leaf))
            } else {
                None
            };
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites the values of parameters present in `other` by name.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for p in &other.params {
            let id = self
                .id_of(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
            let dst = &mut self.params[id.0];
            if dst.raw.shape() != p.raw.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    p.raw.shape(),
                    dst.raw.shape()
                )));
            }
            dst.raw.copy_from(&p.raw);
        }
        Ok(())
    }
}

/// Parameters recorded on a particular tape.
pub struct Bound<'t> {
    leaves: Vec<Var<'t>>,
    views: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Constrained view of a parameter.
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.views[id.0]
    }

    /// The unconstrained leaf.
    pub fn leaf(&self, id: ParamId) -> Var<'t> {
        self.leaves[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_view_has_positive_diagonal() {
        let mut ps = ParamSet::new();
        let raw = Mat::from_row_slice(2, 2, &[-3.0, 7.0, 0.5, 0.0]);
        let id = ps.add("L", raw, Constraint::Cholesky);
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let l = b.get(id).value();
        assert!((l[(0, 0)] - (-3.0f64).exp()).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert_eq!(l[(1, 0)], 0.5);
        assert_eq!(l[(1, 1)], 1.0);
        assert_eq!(*l, ps.value(id));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Mat::from_element(1, 1, 2.0), Constraint::None);
        let b = ps.add("b", Mat::from_element(1, 1, 3.0), Constraint::None);
        ps.get_mut(b).trainable = false;
        let tape = Tape::new();
        let bound = ps.bind(&tape);
        let loss = (bound.get(a) * bound.get(b)).sum();
        let g = tape.backward(loss).unwrap();
        ps.set_grads(&bound, &g);
        assert_eq!(ps.get(a).grad.as_ref().unwrap()[(0, 0)], 3.0);
        assert!(ps.get(b).grad.is_none());
    }
}
