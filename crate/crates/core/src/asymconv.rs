//! Convolution split across a trusted and an untrusted context.
//!
//! The trusted side never convolves the `N` original channels: the kernels
//! are first mixed by the factor coefficients (`W′_{i,l} = Σ_j a_{j,l} W_{i,j}`)
//! and only the `r` basis channels are convolved. The untrusted side runs an
//! ordinary convolution on the residual. Outputs and kernel gradients of the
//! two sides add up to those of the undivided layer.
//!
//! MAC figures here are nominal dense-kernel counts (padding taps included),
//! the same convention the planner uses.

use crate::error::{Error, Result};
use crate::spectral::{Decomposition, FactoredActivation};
use crate::tensor::{
    add_channel_bias, conv2d_backward_weight, conv2d_forward, ConvGeometry, Tensor,
};

/// An activation held as factored trusted part plus dense residual.
#[derive(Clone, Debug)]
pub struct DecomposedActivation {
    pub trusted: FactoredActivation,
    pub untrusted: Tensor,
}

impl DecomposedActivation {
    pub fn new(trusted: FactoredActivation, untrusted: Tensor) -> Result<Self> {
        let (n, h, w) = untrusted.dims3()?;
        if trusted.shape() != [n, h, w] {
            return Err(Error::shape(
                "decomposed activation",
                format!("{:?}", trusted.shape()),
                format!("[{n}, {h}, {w}]"),
            ));
        }
        Ok(DecomposedActivation { trusted, untrusted })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.trusted.shape()
    }

    /// `X^(T) + X^(U)`.
    pub fn original(&self) -> Tensor {
        self.trusted
            .reconstruct()
            .add(&self.untrusted)
            .expect("shapes validated at construction")
    }
}

impl From<Decomposition> for DecomposedActivation {
    fn from(d: Decomposition) -> Self {
        DecomposedActivation {
            trusted: d.trusted,
            untrusted: d.untrusted,
        }
    }
}

/// Kernels mixed by the factor coefficients, `M×r×k×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedKernels {
    weights: Tensor,
}

impl TransformedKernels {
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn rank(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// `W′_{i,l} = Σ_j u_l[j]·W_{i,j}`.
pub fn transform_kernels(w: &Tensor, f: &FactoredActivation) -> Result<TransformedKernels> {
    let (m, n, kh, kw) = w.dims4()?;
    let [fn_, _, _] = f.shape();
    if fn_ != n {
        return Err(Error::shape(
            "kernel input channels vs factor length",
            fn_,
            n,
        ));
    }
    let r = f.rank();
    let kk = kh * kw;
    let ws = w.data();
    let mut out = vec![0.0; m * r * kk];
    for i in 0..m {
        for (l, pair) in f.pairs().iter().enumerate() {
            let dst = &mut out[(i * r + l) * kk..(i * r + l + 1) * kk];
            for (j, &a) in pair.u.iter().enumerate() {
                let src = &ws[(i * n + j) * kk..(i * n + j + 1) * kk];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }
    Ok(TransformedKernels {
        weights: Tensor::from_parts(vec![m, r, kh, kw], out),
    })
}

fn rank_geometry(g: &ConvGeometry, r: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: r,
        ..*g
    }
}

/// `Y^(T) = Σ_l X′_l ⋆ W′_{·,l}` over the `r` basis channels.
pub fn trusted_forward(
    f: &FactoredActivation,
    wt: &TransformedKernels,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let [n, h, w] = f.shape();
    if n != g.in_channels {
        return Err(Error::shape(
            "factored activation channels",
            g.in_channels,
            n,
        ));
    }
    if wt.rank() != f.rank() {
        return Err(Error::shape("transformed kernel rank", f.rank(), wt.rank()));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    if f.rank() == 0 {
        return Ok(Tensor::zeros(&[g.out_channels, oh, ow]));
    }
    conv2d_forward(
        &f.basis_channels(),
        wt.weights(),
        &rank_geometry(g, f.rank()),
    )
}

/// Plain convolution of the residual.
pub fn untrusted_forward(xu: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    conv2d_forward(xu, w, g)
}

/// `Y = Y^(T) + Y^(U)` (+ bias). The trusted addend comes first so the
/// result does not depend on which context finished last.
pub fn merge_outputs(yt: &Tensor, yu: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let y = yt.add(yu)?;
    match bias {
        Some(b) => add_channel_bias(&y, b),
        None => Ok(y),
    }
}

/// Trusted kernel gradient in factored form: correlate the `r` basis channels
/// with `∇Y` once, then expand by the coefficients `a_{j,l}`.
pub fn trusted_weight_grad(
    f: &FactoredActivation,
    dy: &Tensor,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let [n, _, _] = f.shape();
    if n != g.in_channels {
        return Err(Error::shape(
            "factored activation channels",
            g.in_channels,
            n,
        ));
    }
    let (m, k, r) = (g.out_channels, g.kernel, f.rank());
    let kk = k * k;
    let mut out = vec![0.0; m * n * kk];
    if r > 0 {
        let basis_grad = conv2d_backward_weight(&f.basis_channels(), dy, &rank_geometry(g, r))?;
        let bg = basis_grad.data();
        for i in 0..m {
            for j in 0..n {
                let dst = &mut out[(i * n + j) * kk..(i * n + j + 1) * kk];
                for (l, pair) in f.pairs().iter().enumerate() {
                    let a = pair.u[j];
                    let src = &bg[(i * r + l) * kk..(i * r + l + 1) * kk];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += a * s;
                    }
                }
            }
        }
    } else {
        // still validate dy against the geometry
        let [_, h, w] = f.shape();
        conv2d_backward_weight(&Tensor::zeros(&[n, h, w]), dy, g)?;
    }
    Ok(Tensor::from_parts(vec![m, n, k, k], out))
}

pub fn untrusted_weight_grad(xu: &Tensor, dy: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    conv2d_backward_weight(xu, dy, g)
}

/// Dense convolution MACs, `N·M·H′·W′·k²`.
pub fn dense_conv_macs(g: &ConvGeometry, out_h: usize, out_w: usize) -> u64 {
    (g.in_channels * g.out_channels * out_h * out_w * g.kernel * g.kernel) as u64
}

/// Factored spatial convolution MACs, `r·M·H′·W′·k²`.
pub fn trusted_conv_macs(g: &ConvGeometry, r: usize, out_h: usize, out_w: usize) -> u64 {
    (r * g.out_channels * out_h * out_w * g.kernel * g.kernel) as u64
}

/// Kernel transform MACs, `M·N·r·k²`.
pub fn transform_macs(g: &ConvGeometry, r: usize) -> u64 {
    (g.out_channels * g.in_channels * r * g.kernel * g.kernel) as u64
}

/// Factored kernel-gradient MACs: `r·M·H′·W′·k²` correlations plus the
/// `M·N·r·k²` expansion.
pub fn trusted_weight_grad_macs(g: &ConvGeometry, r: usize, out_h: usize, out_w: usize) -> u64 {
    trusted_conv_macs(g, r, out_h, out_w) + transform_macs(g, r)
}

/// Output of [`split_conv_forward`].
#[derive(Clone, Debug)]
pub struct SplitForward {
    pub output: Tensor,
    pub trusted: Tensor,
    pub untrusted: Tensor,
    pub trusted_macs: u64,
    pub untrusted_macs: u64,
}

/// Runs both halves of a decomposed convolution in sequence and merges them.
pub fn split_conv_forward(
    x: &DecomposedActivation,
    w: &Tensor,
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> Result<SplitForward> {
    let [_, h, wd] = x.shape();
    let (oh, ow) = g.output_hw(h, wd)?;
    let r = x.trusted.rank();
    let wt = transform_kernels(w, &x.trusted)?;
    let yt = trusted_forward(&x.trusted, &wt, g)?;
    let yu = untrusted_forward(&x.untrusted, w, g)?;
    let output = merge_outputs(&yt, &yu, bias)?;
    Ok(SplitForward {
        output,
        trusted: yt,
        untrusted: yu,
        trusted_macs: transform_macs(g, r) + trusted_conv_macs(g, r, oh, ow),
        untrusted_macs: dense_conv_macs(g, oh, ow),
    })
}
