//! Affine layers addressed by index into a [`ParamSet`].

use rand::Rng;

use super::ops::{axpy, dot, relu_backward_inplace, relu_inplace};
use super::tensor::{GradSet, ParamSet, Parameter, Tensor};
use crate::error::{Error, Result};

/// `y = W x + b` on standalone parameters.
pub fn linear_forward(x: &[f64], weight: &Parameter, bias: &Parameter) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = check_linear_shapes(weight, bias)?;
    if x.len() != in_dim {
        return Err(Error::shape(&[in_dim], &[x.len()]));
    }
    let w = weight.value.data();
    let b = bias.value.data();
    Ok((0..out_dim)
        .map(|o| dot(&w[o * in_dim..(o + 1) * in_dim], x) + b[o])
        .collect())
}

/// Accumulates `dL/dW`, `dL/db` into the parameters and returns `dL/dx`.
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    weight: &mut Parameter,
    bias: &mut Parameter,
) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = check_linear_shapes(weight, bias)?;
    if x.len() != in_dim || dy.len() != out_dim {
        return Err(Error::shape(&[in_dim, out_dim], &[x.len(), dy.len()]));
    }
    let mut dx = vec![0.0; in_dim];
    let w = weight.value.data().to_vec();
    let gw = weight.grad.data_mut();
    for o in 0..out_dim {
        axpy(dy[o], x, &mut gw[o * in_dim..(o + 1) * in_dim]);
        axpy(dy[o], &w[o * in_dim..(o + 1) * in_dim], &mut dx);
    }
    bias.accumulate(dy);
    Ok(dx)
}

fn check_linear_shapes(weight: &Parameter, bias: &Parameter) -> Result<(usize, usize)> {
    let ws = weight.value.shape();
    if ws.len() != 2 {
        return Err(Error::shape(&[0, 0], ws));
    }
    if bias.value.shape() != [ws[0]] {
        return Err(Error::shape(&[ws[0]], bias.value.shape()));
    }
    Ok((ws[0], ws[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers a He-uniform initialised layer, with weights multiplied by `gain`.
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain * (6.0 / in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w = params.push(Parameter::new(
            format!("{name}.weight"),
            Tensor::from_vec(&[out_dim, in_dim], w).expect("weight extents"),
        ));
        let b = params.push(Parameter::new(
            format!("{name}.bias"),
            Tensor::zeros(&[out_dim]),
        ));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        let w = params.value(self.w);
        let b = params.value(self.b);
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(&w[o * self.in_dim..(o + 1) * self.in_dim], x) + b[o];
        }
    }

    pub fn forward_vec(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim];
        self.forward(params, x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grads`; adds `W^T dy` into `dx` when given.
    pub fn backward(
        &self,
        params: &ParamSet,
        x: &[f64],
        dy: &[f64],
        dx: Option<&mut [f64]>,
        grads: &mut GradSet,
    ) {
        let (gw, gb) = grads.pair_mut(self.w, self.b);
        for (o, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                axpy(d, x, &mut gw[o * self.in_dim..(o + 1) * self.in_dim]);
            }
            gb[o] += d;
        }
        if let Some(dx) = dx {
            let w = params.value(self.w);
            for (o, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &w[o * self.in_dim..(o + 1) * self.in_dim], dx);
                }
            }
        }
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Mlp2Cache {
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl Mlp2 {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        dims: (usize, usize, usize),
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let first = Linear::register(params, &format!("{name}.0"), dims.0, dims.1, 1.0, rng);
        let second = Linear::register(params, &format!("{name}.1"), dims.1, dims.2, out_gain, rng);
        Self { first, second }
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Mlp2Cache {
        let mut hidden = self.first.forward_vec(params, x);
        relu_inplace(&mut hidden);
        let out = self.second.forward_vec(params, &hidden);
        Mlp2Cache { hidden, out }
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        x: &[f64],
        cache: &Mlp2Cache,
        dout: &[f64],
        dx: Option<&mut [f64]>,
        grads: &mut GradSet,
    ) {
        let mut dh = vec![0.0; self.first.out_dim];
        self.second
            .backward(params, &cache.hidden, dout, Some(&mut dh), grads);
        relu_backward_inplace(&cache.hidden, &mut dh);
        self.first.backward(params, x, &dh, dx, grads);
    }
}
