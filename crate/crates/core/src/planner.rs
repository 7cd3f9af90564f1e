//! Per-layer trusted rank assignment and the two-context cost model.

use serde::{Deserialize, Serialize};

use crate::asymconv::{dense_conv_macs, transform_macs, trusted_conv_macs};
use crate::error::{Error, Result};
use crate::harness::model::{ActShape, LayerKind, ModelSpec};
use crate::spectral::DEFAULT_MAX_ITER;

pub use crate::harness::model::LayerSpec;

pub const DEFAULT_R_CAP: usize = 32;

/// Bytes per transferred value.
pub const BYTES_PER_VALUE: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvPlan {
    pub layer: usize,
    pub r: usize,
}

/// Predicted per-layer costs. Memory is in values, transfers in bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub layer: usize,
    pub kind: String,
    pub r: Option<usize>,
    pub macs_trusted: u64,
    pub macs_untrusted: u64,
    pub mem_trusted: u64,
    pub mem_untrusted: u64,
    pub xfer_fwd_bytes: u64,
    pub xfer_bwd_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub r_cap: usize,
    pub max_iter: usize,
    pub convs: Vec<ConvPlan>,
    pub layers: Vec<CostReport>,
    pub warnings: Vec<String>,
}

impl PartitionPlan {
    /// Trusted rank for layer `i`, if it is a conv layer.
    pub fn rank_of(&self, layer: usize) -> Option<usize> {
        self.convs.iter().find(|c| c.layer == layer).map(|c| c.r)
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.r).collect()
    }

    /// Plan with explicit ranks, one per conv layer in order. Ranks may be
    /// zero; each must fit `min(N, H·W)` of its layer input.
    pub fn with_ranks(model: &ModelSpec, ranks: &[usize], max_iter: usize) -> Result<Self> {
        if max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        let conv_layers: Vec<usize> = model.conv_layers().map(|(i, _)| i).collect();
        if ranks.len() != conv_layers.len() {
            return Err(Error::shape("rank list", conv_layers.len(), ranks.len()));
        }
        let mut convs = Vec::with_capacity(ranks.len());
        for (&layer, &r) in conv_layers.iter().zip(ranks) {
            let limit = rank_limit(model, layer);
            if r > limit {
                return Err(Error::invalid(format!(
                    "rank {r} at layer {layer} exceeds {limit}"
                )));
            }
            convs.push(ConvPlan { layer, r });
        }
        let mut plan = PartitionPlan {
            r_cap: ranks.iter().copied().max().unwrap_or(0),
            max_iter,
            convs,
            layers: Vec::new(),
            warnings: Vec::new(),
        };
        plan.layers = cost_model(model, &plan, 1)?;
        Ok(plan)
    }

    /// Checks that the plan covers exactly the conv layers of `model`.
    pub fn validate_for(&self, model: &ModelSpec) -> Result<()> {
        let conv_layers: Vec<usize> = model.conv_layers().map(|(i, _)| i).collect();
        let planned: Vec<usize> = self.convs.iter().map(|c| c.layer).collect();
        if conv_layers != planned {
            return Err(Error::invalid(format!(
                "plan covers conv layers {planned:?}, model has {conv_layers:?}"
            )));
        }
        for c in &self.convs {
            let limit = rank_limit(model, c.layer);
            if c.r > limit {
                return Err(Error::invalid(format!(
                    "rank {} at layer {} exceeds {limit}",
                    c.r, c.layer
                )));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

fn rank_limit(model: &ModelSpec, layer: usize) -> usize {
    match model.input_shape(layer) {
        ActShape::Spatial([n, h, w]) => n.min(h * w),
        ActShape::Flat(_) => 0,
    }
}

/// Rank 1 at the first conv, doubled per later conv (or per new residual
/// block when the model carries block tags), clamped to the layer's channel
/// count and spatial size and to `r_cap`.
pub fn plan_r_schedule(model: &ModelSpec, r_cap: usize) -> Result<PartitionPlan> {
    if r_cap == 0 {
        return Err(Error::invalid("r_cap must be at least 1"));
    }
    let blocks = model.has_blocks();
    let mut convs = Vec::new();
    let mut warnings = Vec::new();
    let mut nominal = 0usize;
    let mut last_block = None;
    for (i, _) in model.conv_layers() {
        let block = model.layers()[i].block;
        if nominal == 0 {
            nominal = 1;
        } else if !blocks || (block.is_some() && block != last_block) {
            nominal = nominal.saturating_mul(2);
        }
        if block.is_some() {
            last_block = block;
        }
        let r = nominal.min(r_cap).min(rank_limit(model, i));
        convs.push(ConvPlan { layer: i, r });
    }
    if convs.is_empty() {
        warnings.push("model has no conv layer; nothing to partition".to_string());
    }
    let mut plan = PartitionPlan {
        r_cap,
        max_iter: DEFAULT_MAX_ITER,
        convs,
        layers: Vec::new(),
        warnings,
    };
    plan.layers = cost_model(model, &plan, 1)?;
    Ok(plan)
}

/// Per-layer costs for `batch` samples under `plan`.
///
/// Conv layers: the untrusted side convolves the full-channel residual; the
/// trusted side runs the factorisation, the kernel transform and the rank-`r`
/// convolution. Forward transfers are the residual out and its conv output
/// back; backward transfers are the output gradient out, the input gradient
/// back and the trusted kernel gradient out. Every other layer runs trusted.
pub fn cost_model(
    model: &ModelSpec,
    plan: &PartitionPlan,
    batch: usize,
) -> Result<Vec<CostReport>> {
    plan.validate_for(model)?;
    let b = batch as u64;
    let mut out = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let input = model.input_shape(i);
        let output = model.output_shape(i);
        let (in_len, out_len) = (input.len() as u64, output.len() as u64);
        let mut rep = CostReport {
            layer: i,
            kind: layer.kind.name().to_string(),
            r: None,
            macs_trusted: 0,
            macs_untrusted: 0,
            mem_trusted: 0,
            mem_untrusted: 0,
            xfer_fwd_bytes: 0,
            xfer_bwd_bytes: 0,
        };
        match layer.kind {
            LayerKind::Conv(g) => {
                let ActShape::Spatial([n, h, w]) = input else {
                    return Err(Error::Internal("conv on flat input".into()));
                };
                let ActShape::Spatial([_, oh, ow]) = output else {
                    return Err(Error::Internal("conv produced flat output".into()));
                };
                let r = plan
                    .rank_of(i)
                    .ok_or_else(|| Error::Internal(format!("no rank for layer {i}")))?;
                let svd = (2 * plan.max_iter * r * n * h * w) as u64;
                rep.r = Some(r);
                rep.macs_untrusted = dense_conv_macs(&g, oh, ow) * b;
                rep.macs_trusted =
                    (trusted_conv_macs(&g, r, oh, ow) + transform_macs(&g, r) + svd) * b;
                rep.mem_trusted = ((r * (n + h * w)) as u64 + out_len) * b;
                rep.mem_untrusted = (in_len + out_len) * b;
                rep.xfer_fwd_bytes = (in_len + out_len) * BYTES_PER_VALUE * b;
                let kernel_len = (g.out_channels * g.in_channels * g.kernel * g.kernel) as u64;
                rep.xfer_bwd_bytes = (out_len + in_len + kernel_len) * BYTES_PER_VALUE * b;
            }
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } => {
                rep.macs_trusted = in_len * b;
                rep.mem_trusted = (in_len + out_len) * b;
            }
            LayerKind::Flatten => {
                rep.mem_trusted = (in_len + out_len) * b;
            }
            LayerKind::Linear { inputs, outputs } => {
                rep.macs_trusted = (inputs * outputs) as u64 * b;
                rep.mem_trusted = (in_len + out_len) * b;
            }
        }
        out.push(rep);
    }
    Ok(out)
}
