//! Dense row-major tensors and the direct-loop kernels used by every other
//! module: convolution, ReLU, pooling, channel flattening and a linear layer,
//! each with its backward pass.
//!
//! All kernels are pure and use a fixed summation order, so two executions
//! with the same inputs are bitwise identical regardless of which thread ran
//! them.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting a length/shape disagreement or any NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("data length", expected, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Kernel-internal constructor; the caller guarantees the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a channel-first activation `N×H×W`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w] => Ok((n, h, w)),
            _ => Err(Error::shape("rank", 3, self.shape.len())),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape("rank", 4, self.shape.len())),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape element count", self.data.len(), n));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "elementwise operand",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    /// `self += c * other`, used by optimizers and gradient accumulation.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Splits the leading axis into sub-tensors (the batch outer loop).
    pub fn unstack(&self) -> Vec<Tensor> {
        if self.shape.is_empty() {
            return vec![self.clone()];
        }
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let step: usize = inner.iter().product();
        (0..self.shape[0])
            .map(|b| {
                Tensor::from_parts(inner.clone(), self.data[b * step..(b + 1) * step].to_vec())
            })
            .collect()
    }

    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.check_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error on mismatched shapes");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Row-major dense matrix; rows are channels when produced by
/// [`flatten_channels`].
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("matrix data length", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Convolution hyper-parameters. Output extents follow
/// `⌊(H + 2p − k)/s⌋ + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid(
                "convolution channel counts must be positive",
            ));
        }
        if kernel == 0 {
            return Err(Error::invalid("kernel size must be positive"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        Ok(ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Output spatial extents for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |len: usize, name: &str| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::shape(
                    name,
                    format!("at least {} after padding", self.kernel),
                    padded,
                ));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h, "input height")?, span(w, "input width")?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, h, w) = x.dims3()?;
        if n != self.in_channels {
            return Err(Error::shape("input channels", self.in_channels, n));
        }
        Ok((n, h, w))
    }

    fn check_weight(&self, w: &Tensor) -> Result<()> {
        let (m, n, kh, kw) = w.dims4()?;
        if m != self.out_channels {
            return Err(Error::shape("kernel output channels", self.out_channels, m));
        }
        if n != self.in_channels {
            return Err(Error::shape("kernel input channels", self.in_channels, n));
        }
        if kh != self.kernel || kw != self.kernel {
            return Err(Error::shape(
                "kernel size",
                self.kernel,
                format!("{kh}x{kw}"),
            ));
        }
        Ok(())
    }

    fn check_output(&self, dy: &Tensor, h: usize, w: usize) -> Result<(usize, usize)> {
        let (m, oh, ow) = dy.dims3()?;
        let (eh, ew) = self.output_hw(h, w)?;
        if m != self.out_channels {
            return Err(Error::shape(
                "output-gradient channels",
                self.out_channels,
                m,
            ));
        }
        if oh != eh || ow != ew {
            return Err(Error::shape(
                "output-gradient extent",
                format!("{eh}x{ew}"),
                format!("{oh}x{ow}"),
            ));
        }
        Ok((oh, ow))
    }

    /// Input coordinate touched by output index `o` and kernel tap `t`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        if pos < 0 || pos as usize >= len {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Direct cross-correlation with zero padding. Accumulation order per output
/// element: input channel, then kernel row, then kernel column.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let (n, h, wd) = g.check_input(x)?;
    g.check_weight(w)?;
    let (oh, ow) = g.output_hw(h, wd)?;
    let (m, k) = (g.out_channels, g.kernel);
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; m * oh * ow];
    for i in 0..m {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0;
                for j in 0..n {
                    let xj = &xs[j * h * wd..(j + 1) * h * wd];
                    let wij = &ws[(i * n + j) * k * k..(i * n + j + 1) * k * k];
                    for kh in 0..k {
                        let Some(ih) = g.source(r, kh, h) else {
                            continue;
                        };
                        for kw in 0..k {
                            let Some(iw) = g.source(c, kw, wd) else {
                                continue;
                            };
                            acc += xj[ih * wd + iw] * wij[kh * k + kw];
                        }
                    }
                }
                out[(i * oh + r) * ow + c] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, oh, ow], out))
}

/// Kernel gradient `∇W_{i,j} = X_j ⋆ ∇Y_i` over the valid, strided positions.
pub fn conv2d_backward_weight(x: &Tensor, dy: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let (n, h, wd) = g.check_input(x)?;
    let (oh, ow) = g.check_output(dy, h, wd)?;
    let (m, k) = (g.out_channels, g.kernel);
    let xs = x.data();
    let ds = dy.data();
    let mut out = vec![0.0; m * n * k * k];
    for i in 0..m {
        let di = &ds[i * oh * ow..(i + 1) * oh * ow];
        for j in 0..n {
            let xj = &xs[j * h * wd..(j + 1) * h * wd];
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = 0.0;
                    for r in 0..oh {
                        let Some(ih) = g.source(r, kh, h) else {
                            continue;
                        };
                        for c in 0..ow {
                            let Some(iw) = g.source(c, kw, wd) else {
                                continue;
                            };
                            acc += di[r * ow + c] * xj[ih * wd + iw];
                        }
                    }
                    out[((i * n + j) * k + kh) * k + kw] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n, k, k], out))
}

/// Input gradient (transposed convolution of `dy` with `w`) for an input of
/// spatial size `h×wd`.
pub fn conv2d_backward_input(
    dy: &Tensor,
    w: &Tensor,
    g: &ConvGeometry,
    h: usize,
    wd: usize,
) -> Result<Tensor> {
    g.check_weight(w)?;
    let (oh, ow) = g.check_output(dy, h, wd)?;
    let (m, n, k, s, p) = (g.out_channels, g.in_channels, g.kernel, g.stride, g.padding);
    let ds = dy.data();
    let ws = w.data();
    // output index o and tap t reach input position o*s + t - p
    let taps = |pos: usize, len_out: usize| -> Vec<(usize, usize)> {
        (0..k)
            .filter_map(|t| {
                let shifted = pos + p;
                if shifted < t || !(shifted - t).is_multiple_of(s) {
                    return None;
                }
                let o = (shifted - t) / s;
                (o < len_out).then_some((o, t))
            })
            .collect()
    };
    let row_taps: Vec<Vec<(usize, usize)>> = (0..h).map(|r| taps(r, oh)).collect();
    let col_taps: Vec<Vec<(usize, usize)>> = (0..wd).map(|c| taps(c, ow)).collect();
    let mut out = vec![0.0; n * h * wd];
    for j in 0..n {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = 0.0;
                for i in 0..m {
                    let di = &ds[i * oh * ow..(i + 1) * oh * ow];
                    let wij = &ws[(i * n + j) * k * k..(i * n + j + 1) * k * k];
                    for &(orow, kh) in &row_taps[r] {
                        for &(ocol, kw) in &col_taps[c] {
                            acc += di[orow * ow + ocol] * wij[kh * k + kw];
                        }
                    }
                }
                out[(j * h + r) * wd + c] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, h, wd], out))
}

/// Adds `bias[i]` to every element of output channel `i`.
pub fn add_channel_bias(y: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (m, h, w) = y.dims3()?;
    if bias.len() != m {
        return Err(Error::shape("bias length", m, bias.len()));
    }
    let mut data = y.data().to_vec();
    for (i, b) in bias.iter().enumerate() {
        for v in &mut data[i * h * w..(i + 1) * h * w] {
            *v += b;
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), data))
}

/// Per-channel sum of an output gradient, i.e. the bias gradient.
pub fn channel_sums(dy: &Tensor) -> Result<Vec<f64>> {
    let (m, h, w) = dy.dims3()?;
    Ok((0..m)
        .map(|i| dy.data()[i * h * w..(i + 1) * h * w].iter().sum())
        .collect())
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect(),
    )
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.check_same_shape(dy)?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
            .collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Output extents of non-overlapping `k×k` pooling; trailing rows/columns
/// that do not fill a window are dropped.
pub fn pool_output_hw(h: usize, w: usize, k: usize) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(Error::invalid("pool window must be positive"));
    }
    if h < k || w < k {
        return Err(Error::shape(
            "pool input extent",
            format!("at least {k}x{k}"),
            format!("{h}x{w}"),
        ));
    }
    Ok((h / k, w / k))
}

/// Flat offset (within the channel) of the window maximum; ties go to the
/// first position in row-major order.
fn window_argmax(xc: &[f64], wd: usize, r: usize, c: usize, k: usize) -> usize {
    let mut best = (r * k) * wd + c * k;
    for dr in 0..k {
        for dc in 0..k {
            let idx = (r * k + dr) * wd + c * k + dc;
            if xc[idx] > xc[best] {
                best = idx;
            }
        }
    }
    best
}

pub fn pool_forward(x: &Tensor, k: usize, mode: PoolMode) -> Result<Tensor> {
    let (n, h, wd) = x.dims3()?;
    let (oh, ow) = pool_output_hw(h, wd, k)?;
    let xs = x.data();
    let mut out = vec![0.0; n * oh * ow];
    let inv = 1.0 / (k * k) as f64;
    for j in 0..n {
        let xc = &xs[j * h * wd..(j + 1) * h * wd];
        for r in 0..oh {
            for c in 0..ow {
                out[(j * oh + r) * ow + c] = match mode {
                    PoolMode::Max => xc[window_argmax(xc, wd, r, c, k)],
                    PoolMode::Avg => {
                        let mut acc = 0.0;
                        for dr in 0..k {
                            for dc in 0..k {
                                acc += xc[(r * k + dr) * wd + c * k + dc];
                            }
                        }
                        acc * inv
                    }
                };
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, oh, ow], out))
}

/// Pooling backward. Max pooling routes each gradient to the recorded argmax
/// of the forward input `x`; average pooling spreads it uniformly.
pub fn pool_backward(x: &Tensor, dy: &Tensor, k: usize, mode: PoolMode) -> Result<Tensor> {
    let (n, h, wd) = x.dims3()?;
    let (oh, ow) = pool_output_hw(h, wd, k)?;
    let (dn, dh, dw) = dy.dims3()?;
    if (dn, dh, dw) != (n, oh, ow) {
        return Err(Error::shape(
            "pool output gradient",
            format!("{n}x{oh}x{ow}"),
            format!("{dn}x{dh}x{dw}"),
        ));
    }
    let xs = x.data();
    let ds = dy.data();
    let mut out = vec![0.0; n * h * wd];
    let inv = 1.0 / (k * k) as f64;
    for j in 0..n {
        let xc = &xs[j * h * wd..(j + 1) * h * wd];
        let oc = &mut out[j * h * wd..(j + 1) * h * wd];
        for r in 0..oh {
            for c in 0..ow {
                let d = ds[(j * oh + r) * ow + c];
                match mode {
                    PoolMode::Max => oc[window_argmax(xc, wd, r, c, k)] += d,
                    PoolMode::Avg => {
                        for dr in 0..k {
                            for dc in 0..k {
                                oc[(r * k + dr) * wd + c * k + dc] += d * inv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, h, wd], out))
}

/// `N×H×W` → `N×HW`, one channel per row in row-major spatial order.
pub fn flatten_channels(x: &Tensor) -> Result<Matrix> {
    let (n, h, w) = x.dims3()?;
    Ok(Matrix::from_parts(n, h * w, x.data().to_vec()))
}

/// Inverse of [`flatten_channels`].
pub fn unflatten_channels(m: &Matrix, h: usize, w: usize) -> Result<Tensor> {
    if m.cols() != h * w {
        return Err(Error::shape("flattened spatial length", h * w, m.cols()));
    }
    Ok(Tensor::from_parts(vec![m.rows(), h, w], m.data().to_vec()))
}

/// `y = W·x + b` for a flat input; `w` is `OUT×IN`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor> {
    let (out, inp) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::shape("linear weight rank", 2, s.len())),
    };
    if x.len() != inp {
        return Err(Error::shape("linear input features", inp, x.len()));
    }
    if b.len() != out {
        return Err(Error::shape("linear bias length", out, b.len()));
    }
    let xs = x.data();
    let y = (0..out)
        .map(|o| {
            let row = &w.data()[o * inp..(o + 1) * inp];
            row.iter().zip(xs).fold(b[o], |acc, (a, v)| acc + a * v)
        })
        .collect();
    Ok(Tensor::from_parts(vec![out], y))
}

/// Returns `(∇x, ∇W, ∇b)` for [`linear_forward`].
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (out, inp) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::shape("linear weight rank", 2, s.len())),
    };
    if dy.len() != out {
        return Err(Error::shape("linear output gradient", out, dy.len()));
    }
    if x.len() != inp {
        return Err(Error::shape("linear input features", inp, x.len()));
    }
    let (xs, ds, ws) = (x.data(), dy.data(), w.data());
    let mut dx = vec![0.0; inp];
    for o in 0..out {
        for (i, slot) in dx.iter_mut().enumerate() {
            *slot += ds[o] * ws[o * inp + i];
        }
    }
    let mut dw = vec![0.0; out * inp];
    for o in 0..out {
        for i in 0..inp {
            dw[o * inp + i] = ds[o] * xs[i];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![out, inp], dw),
        ds.to_vec(),
    ))
}
