//! Leakage measurement: Gaussian masking of residuals and a binned
//! mutual-information estimator over position-paired samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::harness::model::{LayerKind, ModelSpec};
use crate::harness::sim::Mode;
use crate::harness::train::{train, train_with, TrainConfig};
use crate::planner::PartitionPlan;
use crate::spectral::decompose_activation;
use crate::tensor::{pool_forward, relu_forward, PoolMode, Tensor};

pub const DEFAULT_BINS: usize = 64;

/// Adds i.i.d. `N(0, nsr·mean(xu²))` noise.
pub fn add_noise(xu: &Tensor, nsr: f64, seed: u64) -> Result<Tensor> {
    if !nsr.is_finite() || nsr < 0.0 {
        return Err(Error::invalid(format!(
            "nsr must be a finite non-negative number, got {nsr}"
        )));
    }
    if nsr == 0.0 {
        return Ok(xu.clone());
    }
    let std = (nsr * xu.mean_square()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = xu
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + std * z
        })
        .collect();
    Tensor::new(xu.shape().to_vec(), data)
}

/// Equal-width binning of an observed range; a degenerate range maps every
/// value to bin 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Binning {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Binning {
    pub fn fit<'a>(streams: impl IntoIterator<Item = &'a [f64]>, bins: usize) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in streams {
            for &v in s {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            lo = 0.0;
            hi = 0.0;
        }
        Binning { lo, hi, bins }
    }

    pub fn is_degenerate(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn index(&self, v: f64) -> usize {
        if self.is_degenerate() {
            return 0;
        }
        let t = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        (t.max(0.0) as usize).min(self.bins - 1)
    }
}

/// Joint counts of two binned streams. Merging is integer addition, so any
/// accumulation order gives the same histogram.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    bins_a: usize,
    bins_b: usize,
    counts: Vec<u64>,
}

impl JointHistogram {
    pub fn new(bins_a: usize, bins_b: usize) -> Self {
        JointHistogram {
            bins_a,
            bins_b,
            counts: vec![0; bins_a * bins_b],
        }
    }

    pub fn accumulate(&mut self, a: &[f64], b: &[f64], ba: &Binning, bb: &Binning) {
        for (&x, &y) in a.iter().zip(b) {
            self.counts[ba.index(x) * self.bins_b + bb.index(y)] += 1;
        }
    }

    pub fn merge(mut self, other: &JointHistogram) -> Self {
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Plug-in mutual information in bits.
    pub fn mutual_information(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let n = total as f64;
        let mut pa = vec![0u64; self.bins_a];
        let mut pb = vec![0u64; self.bins_b];
        for (row, a) in self.counts.chunks(self.bins_b).zip(pa.iter_mut()) {
            for (c, b) in row.iter().zip(pb.iter_mut()) {
                *a += c;
                *b += c;
            }
        }
        let mut mi = 0.0;
        for (row, &a) in self.counts.chunks(self.bins_b).zip(&pa) {
            for (&c, &b) in row.iter().zip(&pb) {
                if c > 0 {
                    // p(i,j) / (p(i) p(j)) = c·n / (a·b)
                    let ratio = (c as f64 * n) / (a as f64 * b as f64);
                    mi += (c as f64 / n) * ratio.log2();
                }
            }
        }
        mi.max(0.0)
    }
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    Ok(())
}

/// Plug-in entropy (bits) of a stream binned over its observed range.
pub fn binned_entropy(a: &[f64], bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let b = Binning::fit([a], bins);
    if a.is_empty() || b.is_degenerate() {
        return Ok(0.0);
    }
    let mut counts = vec![0u64; bins];
    for &v in a {
        counts[b.index(v)] += 1;
    }
    let n = a.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| -(c as f64 / n) * (c as f64 / n).log2())
        .sum::<f64>()
        .max(0.0))
}

/// `I(a; b)` in bits from a joint histogram with `bins` equal-width bins per
/// marginal. A constant stream on either side carries no information.
pub fn estimate_mi(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    estimate_mi_pooled(&[(a, b)], bins)
}

/// [`estimate_mi`] over several paired chunks sharing one binning.
pub fn estimate_mi_pooled(pairs: &[(&[f64], &[f64])], bins: usize) -> Result<f64> {
    check_bins(bins)?;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::shape("paired samples", a.len(), b.len()));
        }
    }
    let ba = Binning::fit(pairs.iter().map(|p| p.0), bins);
    let bb = Binning::fit(pairs.iter().map(|p| p.1), bins);
    if ba.is_degenerate() || bb.is_degenerate() {
        return Ok(0.0);
    }
    let hist = pairs
        .par_iter()
        .map(|(a, b)| {
            let mut h = JointHistogram::new(bins, bins);
            h.accumulate(a, b, &ba, &bb);
            h
        })
        .reduce(|| JointHistogram::new(bins, bins), |x, y| x.merge(&y));
    Ok(hist.mutual_information())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub nsr: f64,
    pub relative_leakage: f64,
    pub mi_bits: f64,
    pub self_info_bits: f64,
    pub n_samples: usize,
    pub bins: usize,
    pub layer: usize,
    pub r: usize,
    /// Training accuracy of the model trained under this masking level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Layer index of the first conv and the activation it sees for `x`. Only
/// parameter-free layers may precede it.
pub fn first_conv_input(model: &ModelSpec, x: &Tensor) -> Result<(usize, Tensor)> {
    let mut act = x.clone();
    for (i, l) in model.layers().iter().enumerate() {
        act = match l.kind {
            LayerKind::Conv(_) => return Ok((i, act)),
            LayerKind::Relu => relu_forward(&act),
            LayerKind::MaxPool { k } => pool_forward(&act, k, PoolMode::Max)?,
            LayerKind::AvgPool { k } => pool_forward(&act, k, PoolMode::Avg)?,
            LayerKind::Flatten | LayerKind::Linear { .. } => {
                return Err(Error::invalid(
                    "no conv layer before the first flatten or linear layer",
                ))
            }
        };
    }
    Err(Error::invalid("model has no conv layer"))
}

fn sample_seed(seed: u64, idx: usize) -> u64 {
    seed ^ (idx as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn relative(mi: f64, self_info: f64) -> f64 {
    if self_info > 0.0 {
        mi / self_info
    } else {
        0.0
    }
}

/// Leakage of the first conv layer's residual at every masking level.
///
/// Each sample is factored at the planned rank from a cold start; the same
/// per-sample noise draw is scaled for every `nsr`.
pub fn leakage_sweep(
    dataset: &Dataset,
    model: &ModelSpec,
    plan: &PartitionPlan,
    nsr_list: &[f64],
    seed: u64,
    bins: usize,
) -> Result<Vec<LeakageReport>> {
    check_bins(bins)?;
    plan.validate_for(model)?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut layer = 0;
    let mut pairs = Vec::with_capacity(dataset.len());
    for x in dataset.samples() {
        let (i, act) = first_conv_input(model, x)?;
        layer = i;
        let r = plan
            .rank_of(i)
            .ok_or_else(|| Error::Internal("first conv has no rank".into()))?;
        let d = decompose_activation(&act, r, None, plan.max_iter)?;
        pairs.push((act, d.untrusted));
    }
    let r = plan.rank_of(layer).unwrap_or(0);
    let xs: Vec<&[f64]> = pairs.iter().map(|p| p.0.data()).collect();
    let self_info = estimate_mi_pooled(&xs.iter().map(|x| (*x, *x)).collect::<Vec<_>>(), bins)?;
    let n_samples = xs.iter().map(|x| x.len()).sum();
    nsr_list
        .iter()
        .map(|&nsr| {
            let masked = pairs
                .iter()
                .enumerate()
                .map(|(idx, (_, xu))| add_noise(xu, nsr, sample_seed(seed, idx)))
                .collect::<Result<Vec<_>>>()?;
            let joined: Vec<(&[f64], &[f64])> = xs
                .iter()
                .zip(&masked)
                .map(|(x, m)| (*x, m.data()))
                .collect();
            let mi = estimate_mi_pooled(&joined, bins)?;
            Ok(LeakageReport {
                nsr,
                relative_leakage: relative(mi, self_info),
                mi_bits: mi,
                self_info_bits: self_info,
                n_samples,
                bins,
                layer,
                r,
                accuracy: None,
            })
        })
        .collect()
}

/// Trains under each masking level and attaches the final training accuracy
/// to the matching report.
pub fn attach_accuracy(
    reports: &mut [LeakageReport],
    dataset: &Dataset,
    model: &ModelSpec,
    plan: &PartitionPlan,
    base: &TrainConfig,
) -> Result<()> {
    for rep in reports.iter_mut() {
        let cfg = TrainConfig {
            nsr: rep.nsr,
            mode: Mode::Decomposed,
            ..*base
        };
        rep.accuracy = Some(train(model, plan, dataset, &cfg)?.report.final_accuracy);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientLeakagePoint {
    pub epoch: usize,
    pub relative_leakage: f64,
    pub mi_bits: f64,
    pub self_info_bits: f64,
    pub n_samples: usize,
}

/// Trains and, at every probe epoch (0 is before training), measures
/// `I(X; ∇X L)` at the first conv layer pooled over the dataset.
pub fn gradient_leakage_check(
    dataset: &Dataset,
    model: &ModelSpec,
    plan: &PartitionPlan,
    cfg: &TrainConfig,
    probe_epochs: &[usize],
    bins: usize,
) -> Result<Vec<GradientLeakagePoint>> {
    check_bins(bins)?;
    let first = model
        .conv_layers()
        .next()
        .map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("model has no conv layer"))?;
    let mut inputs = Vec::with_capacity(dataset.len());
    for x in dataset.samples() {
        inputs.push(first_conv_input(model, x)?.1);
    }
    let xs: Vec<&[f64]> = inputs.iter().map(|t| t.data()).collect();
    let self_info = estimate_mi_pooled(&xs.iter().map(|x| (*x, *x)).collect::<Vec<_>>(), bins)?;
    let n_samples = xs.iter().map(|x| x.len()).sum();
    let mut points = Vec::new();
    train_with(model, plan, dataset, cfg, |epoch, params, sim| {
        if !probe_epochs.contains(&epoch) {
            return Ok(());
        }
        let mut grads = Vec::with_capacity(dataset.len());
        for (x, &y) in dataset.samples().iter().zip(dataset.labels()) {
            let fwd = sim.forward(params, x)?;
            let (_, dl) = crate::harness::train::softmax_cross_entropy(&fwd.output, y)?;
            let mut bwd = sim.backward(params, &fwd.cache, &dl)?;
            grads.push(
                bwd.conv_input_grads
                    .remove(&first)
                    .ok_or_else(|| Error::Internal("missing first conv gradient".into()))?,
            );
        }
        let joined: Vec<(&[f64], &[f64])> =
            xs.iter().zip(&grads).map(|(x, g)| (*x, g.data())).collect();
        let mi = estimate_mi_pooled(&joined, bins)?;
        points.push(GradientLeakagePoint {
            epoch,
            relative_leakage: relative(mi, self_info),
            mi_bits: mi,
            self_info_bits: self_info,
            n_samples,
        });
        Ok(())
    })?;
    Ok(points)
}
