//! Named parameter storage and the convolution building block.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Gradients, Im2Col, Tape, Var};
use crate::error::{Error, Result};

/// Flat map of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// He-normal conv weight `out × in × k × k`, plus a zero bias when asked.
    #[allow(clippy::too_many_arguments)]
    pub fn init_conv<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        bias: bool,
        gain: f64,
    ) {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("valid std");
        let w = Array::from_shape_simple_fn(IxDyn(&[out_ch, in_ch, k, k]), || normal.sample(rng));
        self.insert(format!("{name}.w"), w);
        if bias {
            self.insert(format!("{name}.b"), Array::zeros(IxDyn(&[out_ch])));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Parameters of a [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Place every parameter on `tape`; `trainable` decides whether they
    /// collect gradients.
    pub fn new(tape: &'t Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, value)| {
                let v = if trainable {
                    tape.param(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound parameter (zeros where unused).
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.vars
            .iter()
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// `x` (`C × H × W`) convolved with `w` (`O × C × kh × kw`).
pub fn conv2d<'t>(x: Var<'t>, w: Var<'t>, bias: Option<Var<'t>>, geom: Im2Col) -> Var<'t> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv2d input must be C×H×W");
    assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
    let (ho, wo) = geom.output_size(xs[1], xs[2]);
    let out_ch = ws[0];
    let cols = x.im2col(geom);
    let mut y = w
        .reshape(&[out_ch, ws[1] * ws[2] * ws[3]])
        .matmul(cols)
        .reshape(&[out_ch, ho, wo]);
    if let Some(b) = bias {
        y = y.add(b.reshape(&[out_ch, 1, 1]));
    }
    y
}

/// Apply the conv layer `name` (weights `name.w`, optional `name.b`).
pub fn conv<'t>(p: &Bound<'t>, name: &str, x: Var<'t>, stride: usize) -> Var<'t> {
    let w = p.get(&format!("{name}.w"));
    let k = w.shape()[2];
    conv2d(x, w, p.try_get(&format!("{name}.b")), Im2Col::same(k, stride))
}

/// Check that a plain array has the expected number of channels.
pub fn expect_channels(what: &str, a: &Array, channels: usize) -> Result<()> {
    if a.ndim() != 3 || a.shape()[0] != channels {
        return Err(Error::Config(format!(
            "{what}: expected {channels} channels, got shape {:?}",
            a.shape()
        )));
    }
    Ok(())
}
