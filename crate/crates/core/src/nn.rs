//! Named parameters and the convolution layers built on them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`: trainable leaves when the tape
    /// records gradients, constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Replaces every tensor with zeros of the same shape.
    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
    }
}

/// Parameters of a [`ParamStore`] placed on a particular tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

/// He-normal initialization scale for a layer feeding a leaky rectifier.
fn he_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Registers `{name}.weight` (`[out, in, k, k]`) and `{name}.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        slope: f64,
    ) -> Self {
        let std = he_std(in_channels * kernel * kernel, slope);
        store.insert(
            format!("{name}.weight"),
            Tensor::randn(&[out_channels, in_channels, kernel, kernel], std, rng),
        );
        store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            spec,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = params.var(&self.weight_name())?;
        let b = params.var(&format!("{}.bias", self.name))?;
        x.conv2d(w, Some(b), self.spec)
    }

    /// Forward with an explicitly supplied (e.g. normalized) weight.
    pub fn forward_with_weight<'t>(
        &self,
        params: &Bound<'t>,
        x: Var<'t>,
        weight: Var<'t>,
    ) -> Result<Var<'t>> {
        let b = params.var(&format!("{}.bias", self.name))?;
        x.conv2d(weight, Some(b), self.spec)
    }
}

/// 3×3 stride-2 transposed convolution that exactly doubles spatial size.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Deconv2d {
    pub const KERNEL: usize = 3;

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        // Each output pixel of a stride-2 deconvolution sees about a quarter of the taps.
        let fan_in = (in_channels * Self::KERNEL * Self::KERNEL / 4).max(1);
        store.insert(
            format!("{name}.weight"),
            Tensor::randn(
                &[in_channels, out_channels, Self::KERNEL, Self::KERNEL],
                he_std(fan_in, 0.0),
                rng,
            ),
        );
        store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Deconv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
        }
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = params.var(&format!("{}.weight", self.name))?;
        let b = params.var(&format!("{}.bias", self.name))?;
        x.conv_transpose2d(w, Some(b), 2, 1, 1)
    }
}
