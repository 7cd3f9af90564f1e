//! SVD-channel entropy and the bounds built on it: principal-channel counts,
//! retained spectral energy, patch conversion of `k×k` convolutions, and the
//! output-entropy bounds for convolution and average pooling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{channel_spectrum, SpectralProfile};
use crate::tensor::{flatten_channels, pool_forward, relu_forward, Matrix, PoolMode, Tensor};

/// Slack absorbed before rounding `2^μ` up, so that a spectrum with exactly
/// `n` equal values yields `n` and not `n + 1` after rounding noise.
const CEIL_SLACK: f64 = 1e-9;

/// `μ = −log₂ Σ s̄_j²` with `s̄_j = s_j / Σ s`. Zero for an all-zero spectrum.
pub fn svd_channel_entropy(s: &[f64]) -> f64 {
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let concentration: f64 = s.iter().map(|v| (v / total) * (v / total)).sum();
    let mu = -concentration.log2();
    if mu <= 0.0 {
        0.0
    } else {
        mu
    }
}

/// `N′ = ⌈2^μ⌉`, never below one.
pub fn principal_count(mu: f64) -> usize {
    ((mu.exp2() - CEIL_SLACK).ceil() as usize).max(1)
}

/// Share of spectral energy kept by the leading `n` values.
pub fn energy_fraction(s: &[f64], n: usize) -> f64 {
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 1.0;
    }
    s.iter().take(n).map(|v| v * v).sum::<f64>() / total
}

/// SVD-channel entropy of a channel-first tensor.
pub fn tensor_entropy(x: &Tensor) -> Result<f64> {
    Ok(channel_spectrum(&flatten_channels(x)?)?.entropy)
}

/// Strictly decreasing spectrum `s_i = a·b^(i−1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricSpectrum {
    pub scale: f64,
    pub decay: f64,
    pub len: usize,
}

impl GeometricSpectrum {
    pub fn new(scale: f64, decay: f64, len: usize) -> Result<Self> {
        if scale.is_nan() || scale <= 0.0 {
            return Err(Error::invalid("geometric scale must be positive"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid("geometric decay must lie in (0, 1)"));
        }
        if len == 0 {
            return Err(Error::invalid(
                "geometric spectrum needs at least one value",
            ));
        }
        Ok(GeometricSpectrum { scale, decay, len })
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len)
            .map(|i| self.scale * self.decay.powi(i as i32))
            .collect()
    }

    /// Energy kept by `⌈2^μ⌉` leading values.
    pub fn principal_energy(&self) -> f64 {
        let s = self.values();
        energy_fraction(&s, principal_count(svd_channel_entropy(&s)))
    }
}

/// Rewrites `x` (`N×H×W`) as `N·k²` shifted copies: patch `(j, q, r)` lands at
/// channel `j·k² + q·k + r` and holds `X_j` shifted by `(q − c, r − c)` with
/// `c = (k−1)/2`, vacated border positions set to zero. A `k×k` convolution
/// with padding `c` is then a sum of `1×1` convolutions over these patches.
pub fn extract_patches(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "patch conversion needs an odd kernel size, got {k}"
        )));
    }
    let (n, h, w) = x.dims3()?;
    let c = (k / 2) as isize;
    let xs = x.data();
    let mut out = vec![0.0; n * k * k * h * w];
    for j in 0..n {
        let src = &xs[j * h * w..(j + 1) * h * w];
        for q in 0..k {
            for r in 0..k {
                let dst =
                    &mut out[((j * k + q) * k + r) * h * w..((j * k + q) * k + r + 1) * h * w];
                let (dq, dr) = (q as isize - c, r as isize - c);
                for row in 0..h {
                    let sr = row as isize + dq;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for col in 0..w {
                        let sc = col as isize + dr;
                        if sc < 0 || sc >= w as isize {
                            continue;
                        }
                        dst[row * w + col] = src[sr as usize * w + sc as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n * k * k, h, w], out))
}

/// How the `k²` shifted copies of a channel treat the image border.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchBorder {
    /// Full `H×W` copies with vacated positions zeroed, as in [`extract_patches`].
    ZeroFill,
    /// Only the `(H−k+1)×(W−k+1)` interior that every shift covers.
    Valid,
}

fn valid_patch_matrix(xc: &[f64], h: usize, w: usize, k: usize) -> Result<Matrix> {
    if h < k || w < k {
        return Err(Error::shape(
            "patch source extent",
            format!("at least {k}x{k}"),
            format!("{h}x{w}"),
        ));
    }
    let (vh, vw) = (h - k + 1, w - k + 1);
    let mut data = Vec::with_capacity(k * k * vh * vw);
    for q in 0..k {
        for r in 0..k {
            for row in 0..vh {
                data.extend_from_slice(&xc[(row + q) * w + r..(row + q) * w + r + vw]);
            }
        }
    }
    Matrix::new(k * k, vh * vw, data)
}

/// SVD-channel entropy of the `k²` patches of every channel, treating each
/// patch as a channel.
pub fn per_channel_patch_entropy(x: &Tensor, k: usize, border: PatchBorder) -> Result<Vec<f64>> {
    let (n, h, w) = x.dims3()?;
    match border {
        PatchBorder::ZeroFill => {
            let patches = extract_patches(x, k)?;
            let block = k * k * h * w;
            (0..n)
                .map(|j| {
                    let m = Matrix::new(
                        k * k,
                        h * w,
                        patches.data()[j * block..(j + 1) * block].to_vec(),
                    )?;
                    Ok(channel_spectrum(&m)?.entropy)
                })
                .collect()
        }
        PatchBorder::Valid => {
            if k == 0 || k.is_multiple_of(2) {
                return Err(Error::invalid(format!(
                    "patch conversion needs an odd kernel size, got {k}"
                )));
            }
            (0..n)
                .map(|j| {
                    let m = valid_patch_matrix(&x.data()[j * h * w..(j + 1) * h * w], h, w, k)?;
                    Ok(channel_spectrum(&m)?.entropy)
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEntropyReport {
    pub kernel: usize,
    /// `μ̂_j` for every input channel, in channel order.
    pub per_channel: Vec<f64>,
    /// Principal-channel count of the input, capped at `N`.
    pub principal: usize,
    /// Mean of the `principal` smallest `μ̂_j`.
    pub mean: f64,
    /// `log₂ Σ_{j ≤ N′} ⌈2^{μ̂_j}⌉` over the smallest `μ̂_j`.
    pub bound: f64,
}

pub fn patch_entropy_report(x: &Tensor, k: usize) -> Result<PatchEntropyReport> {
    let profile = channel_spectrum(&flatten_channels(x)?)?;
    let per_channel = per_channel_patch_entropy(x, k, PatchBorder::ZeroFill)?;
    let principal = profile.principal_count.min(per_channel.len());
    let mut sorted = per_channel.clone();
    sorted.sort_by(f64::total_cmp);
    let chosen = &sorted[..principal];
    let mean = chosen.iter().sum::<f64>() / principal as f64;
    let bound = (chosen.iter().map(|&m| principal_count(m)).sum::<usize>() as f64).log2();
    Ok(PatchEntropyReport {
        kernel: k,
        per_channel,
        principal,
        mean,
        bound,
    })
}

/// Upper bound on the SVD-channel entropy of a convolution output: with no
/// patch report (`1×1` kernels) `log₂⌈2^{μ_X}⌉`, otherwise the patch bound.
pub fn conv_output_entropy_bound(
    profile_in: &SpectralProfile,
    patches: Option<&PatchEntropyReport>,
) -> f64 {
    match patches {
        None => (profile_in.principal_count as f64).log2(),
        Some(report) => report.bound,
    }
}

/// Average-pooling output bound `log₂⌈2^{μ_X}⌉`.
pub fn pooling_entropy_bound(profile_in: &SpectralProfile) -> f64 {
    (profile_in.principal_count as f64).log2()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementwiseOp {
    Relu,
    MaxPool(usize),
    AvgPool(usize),
}

/// Measured SVD-channel entropy before and after one elementwise layer.
pub fn entropy_delta_study(x: &Tensor, op: ElementwiseOp) -> Result<(f64, f64)> {
    let after = match op {
        ElementwiseOp::Relu => relu_forward(x),
        ElementwiseOp::MaxPool(k) => pool_forward(x, k, PoolMode::Max)?,
        ElementwiseOp::AvgPool(k) => pool_forward(x, k, PoolMode::Avg)?,
    };
    Ok((tensor_entropy(x)?, tensor_entropy(&after)?))
}

/// One row of the kernel-size study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEntropyRecord {
    pub k: usize,
    pub mean_mu: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub n_samples: usize,
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Distribution of per-channel patch entropy over a dataset for each kernel
/// size. Every (image, channel) pair is one sample. Patches are cropped to the
/// interior so that border zeros do not register as extra entropy.
pub fn kernel_size_entropy_study(
    dataset: &[Tensor],
    k_list: &[usize],
) -> Result<Vec<KernelEntropyRecord>> {
    k_list
        .iter()
        .map(|&k| {
            let per_image: Vec<Vec<f64>> = dataset
                .par_iter()
                .map(|x| per_channel_patch_entropy(x, k, PatchBorder::Valid))
                .collect::<Result<_>>()?;
            let mut samples: Vec<f64> = per_image.into_iter().flatten().collect();
            let n = samples.len();
            let mean_mu = if n == 0 {
                0.0
            } else {
                samples.iter().sum::<f64>() / n as f64
            };
            samples.sort_by(f64::total_cmp);
            Ok(KernelEntropyRecord {
                k,
                mean_mu,
                q10: quantile(&samples, 0.1),
                q50: quantile(&samples, 0.5),
                q90: quantile(&samples, 0.9),
                n_samples: n,
            })
        })
        .collect()
}
