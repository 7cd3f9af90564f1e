//! Two-context execution of a model.
//!
//! The coordinator plays the trusted context. The untrusted context is a
//! worker that owns the residual activations and partial kernel gradients it
//! has received; it runs either inline or on its own thread, connected by
//! order-preserving queues. Every tensor crossing between the two is logged
//! as a transfer event.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::asymconv::{
    dense_conv_macs, merge_outputs, transform_kernels, transform_macs, trusted_conv_macs,
    trusted_forward, trusted_weight_grad, trusted_weight_grad_macs, untrusted_forward,
    untrusted_weight_grad,
};
use crate::error::{Error, Result};
use crate::harness::model::{ActShape, LayerKind, ModelSpec};
use crate::planner::{PartitionPlan, BYTES_PER_VALUE};
use crate::privacy::add_noise;
use crate::spectral::{decompose_activation, FactoredActivation};
use crate::tensor::{
    add_channel_bias, channel_sums, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    linear_backward, linear_forward, pool_backward, pool_forward, relu_backward, relu_forward,
    ConvGeometry, PoolMode, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Everything dense in the trusted context.
    Monolithic,
    Decomposed,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monolithic" => Ok(Mode::Monolithic),
            "decomposed" => Ok(Mode::Decomposed),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Untrusted requests are served inline, in submission order.
    Sequential,
    /// Untrusted requests are served by a worker thread.
    Concurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: Mode,
    pub schedule: Schedule,
    /// Noise-to-signal ratio of the mask added to every residual sent out.
    pub nsr: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(mode: Mode) -> Self {
        SimConfig {
            mode,
            schedule: Schedule::Sequential,
            nsr: 0.0,
            seed: 0,
        }
    }
}

/// Weights and biases of the parametrised layers; `None` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Arc<Tensor>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Option<LayerParams>>,
}

impl Params {
    /// He-normal weights, zero biases.
    pub fn init(model: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let (shape, fan_in, outs) = match l.kind {
                    LayerKind::Conv(g) => (
                        g.weight_shape().to_vec(),
                        g.in_channels * g.kernel * g.kernel,
                        g.out_channels,
                    ),
                    LayerKind::Linear { inputs, outputs } => {
                        (vec![outputs, inputs], inputs, outputs)
                    }
                    _ => return None,
                };
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Some(LayerParams {
                    weight: Arc::new(Tensor::new(shape, data).unwrap()),
                    bias: vec![0.0; outs],
                })
            })
            .collect();
        Params { layers }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                l.as_ref().map(|p| LayerParams {
                    weight: Arc::new(Tensor::zeros(p.weight.shape())),
                    bias: vec![0.0; p.bias.len()],
                })
            })
            .collect();
        Params { layers }
    }

    /// `self += c·other`.
    pub fn axpy(&mut self, c: f64, other: &Params) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "parameter layers",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    Arc::make_mut(&mut a.weight).axpy(c, &b.weight)?;
                    if a.bias.len() != b.bias.len() {
                        return Err(Error::shape("bias", a.bias.len(), b.bias.len()));
                    }
                    for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                        *x += c * y;
                    }
                }
                (None, None) => {}
                _ => return Err(Error::invalid("parameter sets have different layouts")),
            }
        }
        Ok(())
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a
                    .weight
                    .data()
                    .iter()
                    .zip(b.weight.data())
                    .chain(a.bias.iter().zip(&b.bias))
                {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }

    /// Frobenius norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(|p| {
                p.weight
                    .data()
                    .iter()
                    .chain(&p.bias)
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    fn check_for(&self, model: &ModelSpec) -> Result<()> {
        if self.layers.len() != model.layers().len() {
            return Err(Error::shape(
                "parameter layers",
                model.layers().len(),
                self.layers.len(),
            ));
        }
        for (i, (l, p)) in model.layers().iter().zip(&self.layers).enumerate() {
            let expect: Option<(Vec<usize>, usize)> = match l.kind {
                LayerKind::Conv(g) => Some((g.weight_shape().to_vec(), g.out_channels)),
                LayerKind::Linear { inputs, outputs } => Some((vec![outputs, inputs], outputs)),
                _ => None,
            };
            match (expect, p) {
                (None, None) => {}
                (Some((shape, outs)), Some(p))
                    if p.weight.shape() == shape.as_slice() && p.bias.len() == outs => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "parameters do not fit layer {i} ({})",
                        l.kind.name()
                    )))
                }
            }
        }
        Ok(())
    }

    fn get(&self, i: usize) -> Result<&LayerParams> {
        self.layers
            .get(i)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Internal(format!("layer {i} has no parameters")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TrustedToUntrusted,
    UntrustedToTrusted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub seq: usize,
    pub layer: usize,
    pub phase: Phase,
    pub direction: Direction,
    pub tensor: String,
    pub bytes: u64,
    pub received: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub kind: String,
    pub r: Option<usize>,
    pub macs_trusted: u64,
    pub macs_untrusted: u64,
    /// Residual updates of the factorisation, outside the cost-model formula.
    pub deflation_macs: u64,
    pub mem_trusted: u64,
    pub mem_untrusted: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub mode: Mode,
    pub phase: Phase,
    pub layers: Vec<LayerTrace>,
    pub transfers: Vec<TransferEvent>,
    pub warnings: Vec<String>,
}

impl ExecutionTrace {
    fn new(mode: Mode, phase: Phase) -> Self {
        ExecutionTrace {
            mode,
            phase,
            layers: Vec::new(),
            transfers: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Every send matched by exactly one receive.
    pub fn transfers_conserved(&self) -> bool {
        self.transfers.iter().all(|t| t.received)
    }

    pub fn transfer_bytes(&self) -> u64 {
        self.transfers.iter().map(|t| t.bytes).sum()
    }

    pub fn layer_transfer_bytes(&self, layer: usize) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.layer == layer)
            .map(|t| t.bytes)
            .sum()
    }

    fn send(&mut self, layer: usize, direction: Direction, tensor: &str, values: usize) -> usize {
        let seq = self.transfers.len();
        self.transfers.push(TransferEvent {
            seq,
            layer,
            phase: self.phase,
            direction,
            tensor: tensor.to_string(),
            bytes: values as u64 * BYTES_PER_VALUE,
            received: false,
        });
        seq
    }

    fn receive(&mut self, seq: usize) -> Result<()> {
        let ev = self
            .transfers
            .get_mut(seq)
            .ok_or_else(|| Error::Internal("unknown transfer".into()))?;
        if ev.received {
            return Err(Error::Internal(format!("transfer {seq} received twice")));
        }
        ev.received = true;
        Ok(())
    }
}

enum Request {
    Forward {
        pass: u64,
        layer: usize,
        xu: Tensor,
        weight: Arc<Tensor>,
        geometry: ConvGeometry,
    },
    Backward {
        pass: u64,
        layer: usize,
        dy: Tensor,
        weight: Arc<Tensor>,
        geometry: ConvGeometry,
    },
    Merge {
        pass: u64,
        layer: usize,
        trusted_grad: Tensor,
    },
}

enum Reply {
    Output(Tensor),
    InputGrad(Tensor),
    WeightGrad(Tensor),
}

/// State owned by the untrusted context.
#[derive(Default)]
struct Untrusted {
    residuals: HashMap<usize, (u64, Tensor)>,
    partial_grads: HashMap<usize, (u64, Tensor)>,
}

impl Untrusted {
    fn handle(&mut self, req: Request) -> Result<Reply> {
        match req {
            Request::Forward {
                pass,
                layer,
                xu,
                weight,
                geometry,
            } => {
                let y = untrusted_forward(&xu, &weight, &geometry)?;
                self.residuals.insert(layer, (pass, xu));
                Ok(Reply::Output(y))
            }
            Request::Backward {
                pass,
                layer,
                dy,
                weight,
                geometry,
            } => {
                let (stored, xu) = self
                    .residuals
                    .get(&layer)
                    .ok_or_else(|| Error::invalid(format!("no residual held for layer {layer}")))?;
                if *stored != pass {
                    return Err(Error::invalid(format!(
                        "backward for layer {layer} does not follow its forward pass"
                    )));
                }
                let (_, h, w) = xu.dims3()?;
                let dw = untrusted_weight_grad(xu, &dy, &geometry)?;
                let dx = conv2d_backward_input(&dy, &weight, &geometry, h, w)?;
                self.partial_grads.insert(layer, (pass, dw));
                Ok(Reply::InputGrad(dx))
            }
            Request::Merge {
                pass,
                layer,
                trusted_grad,
            } => {
                let (stored, dw) = self.partial_grads.remove(&layer).ok_or_else(|| {
                    Error::invalid(format!("no partial kernel gradient for layer {layer}"))
                })?;
                if stored != pass {
                    return Err(Error::invalid(format!(
                        "kernel gradient merge for layer {layer} is stale"
                    )));
                }
                Ok(Reply::WeightGrad(trusted_grad.add(&dw)?))
            }
        }
    }
}

enum Link {
    Inline {
        state: Untrusted,
        queue: VecDeque<Request>,
    },
    Thread {
        tx: Option<mpsc::Sender<Request>>,
        rx: mpsc::Receiver<Result<Reply>>,
        worker: Option<thread::JoinHandle<()>>,
    },
}

impl Link {
    fn new(schedule: Schedule) -> Self {
        match schedule {
            Schedule::Sequential => Link::Inline {
                state: Untrusted::default(),
                queue: VecDeque::new(),
            },
            Schedule::Concurrent => {
                let (tx, worker_rx) = mpsc::channel::<Request>();
                let (worker_tx, rx) = mpsc::channel();
                let worker = thread::spawn(move || {
                    let mut state = Untrusted::default();
                    for req in worker_rx {
                        if worker_tx.send(state.handle(req)).is_err() {
                            break;
                        }
                    }
                });
                Link::Thread {
                    tx: Some(tx),
                    rx,
                    worker: Some(worker),
                }
            }
        }
    }

    fn submit(&mut self, req: Request) -> Result<()> {
        match self {
            Link::Inline { queue, .. } => {
                queue.push_back(req);
                Ok(())
            }
            Link::Thread { tx, .. } => tx
                .as_ref()
                .ok_or_else(|| Error::Internal("untrusted worker closed".into()))?
                .send(req)
                .map_err(|_| Error::Internal("untrusted worker stopped".into())),
        }
    }

    fn wait(&mut self) -> Result<Reply> {
        match self {
            Link::Inline { state, queue } => {
                let req = queue
                    .pop_front()
                    .ok_or_else(|| Error::Internal("no pending request".into()))?;
                state.handle(req)
            }
            Link::Thread { rx, .. } => rx
                .recv()
                .map_err(|_| Error::Internal("untrusted worker stopped".into()))?,
        }
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        if let Link::Thread { tx, worker, .. } = self {
            tx.take();
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}

enum Cached {
    DenseConv { input: Tensor },
    SplitConv { factors: FactoredActivation },
    Elementwise { input: Tensor },
    Flatten { shape: Vec<usize> },
    Linear { input: Tensor },
}

/// What a forward pass leaves behind for its backward pass.
pub struct ForwardCache {
    pass: u64,
    mode: Mode,
    layers: Vec<Cached>,
}

pub struct ForwardPass {
    pub output: Tensor,
    pub cache: ForwardCache,
    pub trace: ExecutionTrace,
}

pub struct BackwardPass {
    pub grads: Params,
    pub input_grad: Tensor,
    /// Gradient of the loss with respect to each conv layer's input.
    pub conv_input_grads: BTreeMap<usize, Tensor>,
    pub trace: ExecutionTrace,
}

pub struct Simulator {
    model: ModelSpec,
    plan: PartitionPlan,
    config: SimConfig,
    link: Link,
    warm: Vec<Option<FactoredActivation>>,
    pass: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Simulator {
    pub fn new(model: &ModelSpec, plan: &PartitionPlan, config: SimConfig) -> Result<Self> {
        plan.validate_for(model)?;
        if !config.nsr.is_finite() || config.nsr < 0.0 {
            return Err(Error::invalid(format!(
                "nsr must be a finite non-negative number, got {}",
                config.nsr
            )));
        }
        Ok(Simulator {
            model: model.clone(),
            plan: plan.clone(),
            config,
            link: Link::new(config.schedule),
            warm: vec![None; model.layers().len()],
            pass: 0,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    fn noise_seed(&self, layer: usize) -> u64 {
        splitmix(
            self.config.seed
                ^ splitmix(self.pass.wrapping_mul(0x1_0000).wrapping_add(layer as u64)),
        )
    }

    pub fn forward(&mut self, params: &Params, x: &Tensor) -> Result<ForwardPass> {
        params.check_for(&self.model)?;
        let [c, h, w] = self.model.input();
        if x.shape() != [c, h, w] {
            return Err(Error::shape(
                "model input",
                format!("{:?}", [c, h, w]),
                format!("{:?}", x.shape()),
            ));
        }
        self.pass += 1;
        let mode = self.config.mode;
        let mut trace = ExecutionTrace::new(mode, Phase::Forward);
        let mut cache = Vec::with_capacity(self.model.layers().len());
        let mut act = x.clone();
        for (i, layer) in self.model.layers().to_vec().iter().enumerate() {
            let in_len = act.len() as u64;
            let mut lt = LayerTrace {
                layer: i,
                kind: layer.kind.name().to_string(),
                r: None,
                macs_trusted: 0,
                macs_untrusted: 0,
                deflation_macs: 0,
                mem_trusted: 0,
                mem_untrusted: 0,
                note: None,
            };
            let out = match layer.kind {
                LayerKind::Conv(g) => {
                    let p = params.get(i)?;
                    let (_, ih, iw) = act.dims3()?;
                    let (oh, ow) = g.output_hw(ih, iw)?;
                    match mode {
                        Mode::Monolithic => {
                            let y =
                                add_channel_bias(&conv2d_forward(&act, &p.weight, &g)?, &p.bias)?;
                            lt.macs_trusted = dense_conv_macs(&g, oh, ow);
                            lt.mem_trusted = in_len + y.len() as u64;
                            cache.push(Cached::DenseConv { input: act });
                            y
                        }
                        Mode::Decomposed => {
                            let r = self
                                .plan
                                .rank_of(i)
                                .ok_or_else(|| Error::Internal(format!("no rank for {i}")))?;
                            let d = decompose_activation(
                                &act,
                                r,
                                self.warm[i].as_ref(),
                                self.plan.max_iter,
                            )?;
                            trace
                                .warnings
                                .extend(d.warnings.iter().map(|m| format!("layer {i}: {m}")));
                            let xu = if self.config.nsr > 0.0 {
                                add_noise(&d.untrusted, self.config.nsr, self.noise_seed(i))?
                            } else {
                                d.untrusted
                            };
                            let xu_len = xu.len();
                            let sent =
                                trace.send(i, Direction::TrustedToUntrusted, "residual", xu_len);
                            self.link.submit(Request::Forward {
                                pass: self.pass,
                                layer: i,
                                xu,
                                weight: Arc::clone(&p.weight),
                                geometry: g,
                            })?;
                            trace.receive(sent)?;

                            let wt = transform_kernels(&p.weight, &d.trusted)?;
                            let yt = trusted_forward(&d.trusted, &wt, &g)?;

                            let Reply::Output(yu) = self.link.wait()? else {
                                return Err(Error::Internal("unexpected reply to forward".into()));
                            };
                            let back = trace.send(
                                i,
                                Direction::UntrustedToTrusted,
                                "residual_output",
                                yu.len(),
                            );
                            trace.receive(back)?;
                            let y = merge_outputs(&yt, &yu, Some(&p.bias))?;

                            let r_eff = d.trusted.rank();
                            lt.r = Some(r_eff);
                            lt.macs_trusted = d.alternating_macs
                                + transform_macs(&g, r_eff)
                                + trusted_conv_macs(&g, r_eff, oh, ow);
                            lt.deflation_macs = d.deflation_macs;
                            lt.macs_untrusted = dense_conv_macs(&g, oh, ow);
                            lt.mem_trusted = (d.trusted.stored_values() + yt.len()) as u64;
                            lt.mem_untrusted = (xu_len + yu.len()) as u64;
                            self.warm[i] = Some(d.trusted.clone());
                            cache.push(Cached::SplitConv { factors: d.trusted });
                            y
                        }
                    }
                }
                LayerKind::Relu => {
                    let y = relu_forward(&act);
                    lt.macs_trusted = in_len;
                    lt.mem_trusted = in_len + y.len() as u64;
                    cache.push(Cached::Elementwise { input: act });
                    y
                }
                LayerKind::MaxPool { k } | LayerKind::AvgPool { k } => {
                    let pm = if matches!(layer.kind, LayerKind::MaxPool { .. }) {
                        PoolMode::Max
                    } else {
                        PoolMode::Avg
                    };
                    let y = pool_forward(&act, k, pm)?;
                    lt.macs_trusted = in_len;
                    lt.mem_trusted = in_len + y.len() as u64;
                    cache.push(Cached::Elementwise { input: act });
                    y
                }
                LayerKind::Flatten => {
                    let shape = act.shape().to_vec();
                    let n = act.len();
                    lt.mem_trusted = 2 * in_len;
                    cache.push(Cached::Flatten { shape });
                    act.reshape(vec![n])?
                }
                LayerKind::Linear { inputs, outputs } => {
                    let p = params.get(i)?;
                    let y = linear_forward(&act, &p.weight, &p.bias)?;
                    lt.macs_trusted = (inputs * outputs) as u64;
                    lt.mem_trusted = in_len + y.len() as u64;
                    if mode == Mode::Decomposed {
                        lt.note = Some("fully connected layer kept in the trusted context".into());
                    }
                    cache.push(Cached::Linear { input: act });
                    y
                }
            };
            trace.layers.push(lt);
            act = out;
        }
        Ok(ForwardPass {
            output: act,
            cache: ForwardCache {
                pass: self.pass,
                mode,
                layers: cache,
            },
            trace,
        })
    }

    pub fn backward(
        &mut self,
        params: &Params,
        cache: &ForwardCache,
        dloss: &Tensor,
    ) -> Result<BackwardPass> {
        params.check_for(&self.model)?;
        if cache.mode != self.config.mode || cache.layers.len() != self.model.layers().len() {
            return Err(Error::invalid(
                "forward cache does not belong to this simulator",
            ));
        }
        let final_shape = self.model.final_shape();
        if dloss.len() != final_shape.len() {
            return Err(Error::shape(
                "loss gradient",
                final_shape.len(),
                dloss.len(),
            ));
        }
        let mode = self.config.mode;
        let mut trace = ExecutionTrace::new(mode, Phase::Backward);
        let mut grads = params.zeros_like();
        let mut conv_input_grads = BTreeMap::new();

        if dloss.is_all_zero() {
            let seq = trace.send(
                self.model.layers().len().saturating_sub(1),
                Direction::TrustedToUntrusted,
                "control:skip",
                0,
            );
            trace.receive(seq)?;
            for (i, _) in self.model.conv_layers() {
                conv_input_grads.insert(i, Tensor::zeros(&self.model.input_shape(i).dims()));
            }
            let input_grad = Tensor::zeros(&self.model.input_shape(0).dims());
            return Ok(BackwardPass {
                grads,
                input_grad,
                conv_input_grads,
                trace,
            });
        }

        let mut g = dloss.clone().reshape(final_shape.dims())?;
        let mut layer_traces = Vec::new();
        for (i, layer) in self.model.layers().to_vec().iter().enumerate().rev() {
            let mut lt = LayerTrace {
                layer: i,
                kind: layer.kind.name().to_string(),
                r: None,
                macs_trusted: 0,
                macs_untrusted: 0,
                deflation_macs: 0,
                mem_trusted: 0,
                mem_untrusted: 0,
                note: None,
            };
            let dy_len = g.len() as u64;
            g = match (&layer.kind, &cache.layers[i]) {
                (LayerKind::Conv(geo), Cached::DenseConv { input }) => {
                    let p = params.get(i)?;
                    let (_, ih, iw) = input.dims3()?;
                    let (oh, ow) = geo.output_hw(ih, iw)?;
                    let dw = conv2d_backward_weight(input, &g, geo)?;
                    let db = channel_sums(&g)?;
                    let dx = conv2d_backward_input(&g, &p.weight, geo, ih, iw)?;
                    set_grad(&mut grads, i, dw, db);
                    lt.macs_trusted = 2 * dense_conv_macs(geo, oh, ow);
                    lt.mem_trusted = input.len() as u64 + dy_len + dx.len() as u64;
                    conv_input_grads.insert(i, dx.clone());
                    dx
                }
                (LayerKind::Conv(geo), Cached::SplitConv { factors }) => {
                    let p = params.get(i)?;
                    let [n, ih, iw] = factors.shape();
                    let (oh, ow) = geo.output_hw(ih, iw)?;
                    let r = factors.rank();
                    let sent = trace.send(i, Direction::TrustedToUntrusted, "output_grad", g.len());
                    self.link.submit(Request::Backward {
                        pass: cache.pass,
                        layer: i,
                        dy: g.clone(),
                        weight: Arc::clone(&p.weight),
                        geometry: *geo,
                    })?;
                    trace.receive(sent)?;

                    let dwt = trusted_weight_grad(factors, &g, geo)?;
                    let db = channel_sums(&g)?;

                    let Reply::InputGrad(dx) = self.link.wait()? else {
                        return Err(Error::Internal("unexpected reply to backward".into()));
                    };
                    let back = trace.send(i, Direction::UntrustedToTrusted, "input_grad", dx.len());
                    trace.receive(back)?;

                    let out = trace.send(
                        i,
                        Direction::TrustedToUntrusted,
                        "trusted_kernel_grad",
                        dwt.len(),
                    );
                    self.link.submit(Request::Merge {
                        pass: cache.pass,
                        layer: i,
                        trusted_grad: dwt,
                    })?;
                    trace.receive(out)?;
                    let Reply::WeightGrad(dw) = self.link.wait()? else {
                        return Err(Error::Internal("unexpected reply to merge".into()));
                    };
                    set_grad(&mut grads, i, dw, db);

                    lt.r = Some(r);
                    lt.macs_trusted = trusted_weight_grad_macs(geo, r, oh, ow);
                    lt.macs_untrusted = 2 * dense_conv_macs(geo, oh, ow);
                    lt.mem_trusted = factors.stored_values() as u64 + dy_len;
                    lt.mem_untrusted = (n * ih * iw) as u64 + dy_len + dx.len() as u64;
                    lt.note = Some("kernel gradient merged in the untrusted context".into());
                    conv_input_grads.insert(i, dx.clone());
                    dx
                }
                (LayerKind::Relu, Cached::Elementwise { input }) => {
                    lt.macs_trusted = input.len() as u64;
                    lt.mem_trusted = input.len() as u64 + dy_len;
                    relu_backward(input, &g)?
                }
                (
                    LayerKind::MaxPool { k } | LayerKind::AvgPool { k },
                    Cached::Elementwise { input },
                ) => {
                    let pm = if matches!(layer.kind, LayerKind::MaxPool { .. }) {
                        PoolMode::Max
                    } else {
                        PoolMode::Avg
                    };
                    lt.macs_trusted = input.len() as u64;
                    lt.mem_trusted = input.len() as u64 + dy_len;
                    pool_backward(input, &g, *k, pm)?
                }
                (LayerKind::Flatten, Cached::Flatten { shape }) => {
                    lt.mem_trusted = 2 * dy_len;
                    g.reshape(shape.clone())?
                }
                (LayerKind::Linear { inputs, outputs }, Cached::Linear { input }) => {
                    let p = params.get(i)?;
                    let (dx, dw, db) = linear_backward(input, &p.weight, &g)?;
                    set_grad(&mut grads, i, dw, db);
                    lt.macs_trusted = 2 * (inputs * outputs) as u64;
                    lt.mem_trusted = input.len() as u64 + dy_len;
                    dx
                }
                _ => {
                    return Err(Error::Internal(format!(
                        "cache entry does not match layer {i}"
                    )))
                }
            };
            layer_traces.push(lt);
        }
        layer_traces.reverse();
        trace.layers = layer_traces;
        Ok(BackwardPass {
            grads,
            input_grad: g,
            conv_input_grads,
            trace,
        })
    }
}

fn set_grad(grads: &mut Params, i: usize, dw: Tensor, db: Vec<f64>) {
    grads.layers[i] = Some(LayerParams {
        weight: Arc::new(dw),
        bias: db,
    });
}

/// One forward pass with a fresh simulator.
pub fn run_forward(
    model: &ModelSpec,
    plan: &PartitionPlan,
    params: &Params,
    x: &Tensor,
    config: SimConfig,
) -> Result<(Tensor, ExecutionTrace)> {
    let mut sim = Simulator::new(model, plan, config)?;
    let fwd = sim.forward(params, x)?;
    Ok((fwd.output, fwd.trace))
}

/// Shape of layer `i`'s input, as a tensor shape.
pub fn layer_input_dims(model: &ModelSpec, i: usize) -> Vec<usize> {
    match model.input_shape(i) {
        ActShape::Spatial(s) => s.to_vec(),
        ActShape::Flat(n) => vec![n],
    }
}
