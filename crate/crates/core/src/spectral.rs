//! Channel spectra and the lightweight alternating-optimization factorization
//! that splits an activation into a low-rank trusted part and a dense residual.

use serde::{Deserialize, Serialize};

use crate::entropy::{principal_count, svd_channel_entropy};
use crate::error::{Error, Result};
use crate::tensor::{flatten_channels, unflatten_channels, Matrix, Tensor};

/// Iterations per component when the caller does not say otherwise; one to
/// two alternating steps already reach the optimum from a reasonable start.
pub const DEFAULT_MAX_ITER: usize = 2;

/// Residuals with `‖R‖ ≤ RESIDUAL_FLUSH·‖X‖` are replaced by zero.
pub const RESIDUAL_FLUSH: f64 = 64.0 * f64::EPSILON;

/// Off-diagonal Frobenius norm, relative to `‖G‖_F`, at which the Jacobi
/// sweeps stop.
const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations,
/// returned in descending order.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "symmetric_eigenvalues: expected {n}x{n}");
    let mut m = a.to_vec();
    let total: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let threshold = JACOBI_TOLERANCE * total;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q] * m[p * n + q])
            .sum::<f64>()
            .sqrt();
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let (arp, arq) = (m[r * n + p], m[r * n + q]);
                    let np = c * arp - s * arq;
                    let nq = s * arp + c * arq;
                    m[r * n + p] = np;
                    m[p * n + r] = np;
                    m[r * n + q] = nq;
                    m[q * n + r] = nq;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// Singular values of the channel matrix together with its SVD-channel
/// entropy and principal-channel count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    /// Descending, non-negative, length `min(N, HW)`.
    pub singular_values: Vec<f64>,
    /// `s_j / Σ s`; all zero when the matrix is zero.
    pub normalized: Vec<f64>,
    /// SVD-channel entropy in bits.
    pub entropy: f64,
    /// `⌈2^μ⌉`.
    pub principal_count: usize,
}

impl SpectralProfile {
    pub fn from_singular_values(mut s: Vec<f64>) -> Self {
        s.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = s.iter().sum();
        let normalized = if total > 0.0 {
            s.iter().map(|v| v / total).collect()
        } else {
            vec![0.0; s.len()]
        };
        let entropy = svd_channel_entropy(&s);
        SpectralProfile {
            singular_values: s,
            normalized,
            entropy,
            principal_count: principal_count(entropy),
        }
    }

    pub fn channels(&self) -> usize {
        self.singular_values.len()
    }
}

/// Singular values of `xf` (`N×HW`) from the eigenvalues of its Gram matrix.
///
/// The smaller of `X̄X̄*` and `X̄*X̄` is diagonalized. Eigenvalues below the
/// Gram matrix's own rounding floor are treated as exact zeros, which keeps
/// exactly low-rank inputs at their true rank.
pub fn channel_spectrum(xf: &Matrix) -> Result<SpectralProfile> {
    let (n, hw) = (xf.rows(), xf.cols());
    if n == 0 || hw == 0 {
        return Err(Error::invalid(
            "channel_spectrum needs at least one channel and one position",
        ));
    }
    let d = xf.data();
    let (dim, gram) = if n <= hw {
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let v: f64 = xf.row(a).iter().zip(xf.row(b)).map(|(p, q)| p * q).sum();
                g[a * n + b] = v;
                g[b * n + a] = v;
            }
        }
        (n, g)
    } else {
        let mut g = vec![0.0; hw * hw];
        for a in 0..hw {
            for b in a..hw {
                let v: f64 = (0..n).map(|r| d[r * hw + a] * d[r * hw + b]).sum();
                g[a * hw + b] = v;
                g[b * hw + a] = v;
            }
        }
        (hw, g)
    };
    let eig = symmetric_eigenvalues(&gram, dim);
    let top = eig.first().copied().unwrap_or(0.0).max(0.0);
    let floor = top * dim.max(n.max(hw)) as f64 * f64::EPSILON * 4.0;
    let s = eig
        .into_iter()
        .map(|l| if l <= floor { 0.0 } else { l.sqrt() })
        .collect();
    Ok(SpectralProfile::from_singular_values(s))
}

/// One rank-1 term `u·v*` of a factored activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    /// Length `N`; entry `j` is the mixing coefficient of channel `j`.
    pub u: Vec<f64>,
    /// Length `HW`; a transformed channel in row-major spatial order.
    pub v: Vec<f64>,
}

/// The trusted part of an activation, kept as `r` vector pairs rather than a
/// dense tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactoredActivation {
    shape: [usize; 3],
    pairs: Vec<FactorPair>,
}

impl FactoredActivation {
    pub fn new(shape: [usize; 3], pairs: Vec<FactorPair>) -> Result<Self> {
        let [n, h, w] = shape;
        for (i, p) in pairs.iter().enumerate() {
            if p.u.len() != n {
                return Err(Error::shape(format!("factor {i} u length"), n, p.u.len()));
            }
            if p.v.len() != h * w {
                return Err(Error::shape(
                    format!("factor {i} v length"),
                    h * w,
                    p.v.len(),
                ));
            }
            if p.u.iter().chain(&p.v).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "factor {i} holds a non-finite value"
                )));
            }
        }
        Ok(FactoredActivation { shape, pairs })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        FactoredActivation {
            shape,
            pairs: Vec::new(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn rank(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[FactorPair] {
        &self.pairs
    }

    /// `a_{j,l}`: weight of transformed channel `l` in original channel `j`.
    pub fn coefficient(&self, channel: usize, component: usize) -> f64 {
        self.pairs[component].u[channel]
    }

    /// The `v` vectors reshaped into an `r×H×W` tensor.
    pub fn basis_channels(&self) -> Tensor {
        let [_, h, w] = self.shape;
        let data = self
            .pairs
            .iter()
            .flat_map(|p| p.v.iter().copied())
            .collect();
        Tensor::from_parts(vec![self.rank(), h, w], data)
    }

    /// Number of stored scalars, `r·(N + HW)`.
    pub fn stored_values(&self) -> usize {
        let [n, h, w] = self.shape;
        self.rank() * (n + h * w)
    }

    /// Dense `N×H×W` tensor `Σ_i u_i·v_i*`.
    pub fn reconstruct(&self) -> Tensor {
        let [n, h, w] = self.shape;
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for p in &self.pairs {
            for (j, &a) in p.u.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[j * hw..(j + 1) * hw].iter_mut().zip(&p.v) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_parts(vec![n, h, w], out)
    }
}

/// Result of [`light_svd`].
#[derive(Clone, Debug)]
pub struct LightSvd {
    pub pairs: Vec<FactorPair>,
    /// `X̄` with every extracted component subtracted.
    pub residual: Matrix,
    /// Multiply-adds spent in the alternating `u`/`v` updates.
    pub alternating_macs: u64,
    /// Multiply-adds spent subtracting components from the residual.
    pub deflation_macs: u64,
    /// Components that hit a zero-norm iterate and were emitted as `u = 0`.
    pub degenerate: usize,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Default starting vector for component `i`: row `i` of the current
/// residual, or its largest row when row `i` is zero, scaled to unit norm.
fn cold_start(x: &Matrix, i: usize) -> Vec<f64> {
    let pick = if norm_sq(x.row(i)) > 0.0 {
        i
    } else {
        (0..x.rows())
            .max_by(|&a, &b| {
                norm_sq(x.row(a))
                    .total_cmp(&norm_sq(x.row(b)))
                    .then(b.cmp(&a))
            })
            .unwrap_or(i)
    };
    let row = x.row(pick);
    let norm = norm_sq(row).sqrt();
    if norm == 0.0 {
        row.to_vec()
    } else {
        row.iter().map(|v| v / norm).collect()
    }
}

/// Rank-`r` alternating-optimization factorization with deflation.
///
/// For each component, `u = X̄v/‖v‖²` and `v = X̄*u/‖u‖²` alternate for
/// `max_iter` rounds, then `u·v*` is subtracted from `X̄`. No orthogonality is
/// imposed between components. Whatever the iteration count, the returned
/// factors plus the residual reproduce the input.
pub fn light_svd(
    xf: &Matrix,
    r: usize,
    init_v: Option<&[Vec<f64>]>,
    max_iter: usize,
) -> Result<LightSvd> {
    let (n, hw) = (xf.rows(), xf.cols());
    if r == 0 || r > n.min(hw) {
        return Err(Error::invalid(format!(
            "rank {r} outside 1..={} for a {n}x{hw} matrix",
            n.min(hw)
        )));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if let Some(init) = init_v {
        if let Some(bad) = init.iter().find(|v| v.len() != hw) {
            return Err(Error::shape("initial v length", hw, bad.len()));
        }
    }

    let mut x = xf.clone();
    let mut pairs = Vec::with_capacity(r);
    let mut alternating_macs = 0u64;
    let mut deflation_macs = 0u64;
    let mut degenerate = 0;
    let cost = (n * hw) as u64;

    for i in 0..r {
        let mut v = match init_v.and_then(|init| init.get(i)) {
            Some(v0) => v0.clone(),
            None => cold_start(&x, i),
        };
        let mut u = vec![0.0; n];
        let mut ok = true;
        for _ in 0..max_iter {
            let vn = norm_sq(&v);
            if vn == 0.0 {
                ok = false;
                break;
            }
            for (j, slot) in u.iter_mut().enumerate() {
                *slot = x.row(j).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / vn;
            }
            alternating_macs += cost;
            let un = norm_sq(&u);
            if un == 0.0 {
                ok = false;
                break;
            }
            let mut next = vec![0.0; hw];
            for (j, &uj) in u.iter().enumerate() {
                for (o, &a) in next.iter_mut().zip(x.row(j)) {
                    *o += a * uj;
                }
            }
            for o in &mut next {
                *o /= un;
            }
            v = next;
            alternating_macs += cost;
        }
        if !ok {
            degenerate += 1;
            pairs.push(FactorPair { u: vec![0.0; n], v });
            continue;
        }
        let data = x.data_mut();
        for (j, &uj) in u.iter().enumerate() {
            for (o, &b) in data[j * hw..(j + 1) * hw].iter_mut().zip(&v) {
                *o -= uj * b;
            }
        }
        deflation_macs += cost;
        pairs.push(FactorPair { u, v });
    }

    Ok(LightSvd {
        pairs,
        residual: x,
        alternating_macs,
        deflation_macs,
        degenerate,
    })
}

/// An activation split into its factored trusted part and dense residual.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub trusted: FactoredActivation,
    pub untrusted: Tensor,
    pub alternating_macs: u64,
    pub deflation_macs: u64,
    pub warnings: Vec<String>,
}

/// Flatten, factor with [`light_svd`], and reshape the residual.
///
/// `warm_start` supplies initial `v` vectors when its shape matches `x`.
/// `r = 0` keeps everything untrusted; `r` above `min(N, HW)` is clamped and
/// reported in `warnings`.
pub fn decompose_activation(
    x: &Tensor,
    r: usize,
    warm_start: Option<&FactoredActivation>,
    max_iter: usize,
) -> Result<Decomposition> {
    let (n, h, w) = x.dims3()?;
    let mut warnings = Vec::new();
    let limit = n.min(h * w);
    let r = if r > limit {
        warnings.push(format!("requested rank {r} exceeds {limit}; clamped"));
        limit
    } else {
        r
    };
    if r == 0 {
        return Ok(Decomposition {
            trusted: FactoredActivation::empty([n, h, w]),
            untrusted: x.clone(),
            alternating_macs: 0,
            deflation_macs: 0,
            warnings,
        });
    }
    let init: Option<Vec<Vec<f64>>> = warm_start
        .filter(|f| f.shape() == [n, h, w])
        .map(|f| f.pairs().iter().map(|p| p.v.clone()).collect());
    let xf = flatten_channels(x)?;
    let out = light_svd(&xf, r, init.as_deref(), max_iter)?;
    if out.degenerate > 0 {
        warnings.push(format!(
            "{} degenerate component(s) emitted as zero",
            out.degenerate
        ));
    }
    // a residual at rounding level is exactly zero
    let residual = if out.residual.norm() <= RESIDUAL_FLUSH * xf.norm() {
        Matrix::zeros(n, h * w)
    } else {
        out.residual
    };
    Ok(Decomposition {
        trusted: FactoredActivation::new([n, h, w], out.pairs)?,
        untrusted: unflatten_channels(&residual, h, w)?,
        alternating_macs: out.alternating_macs,
        deflation_macs: out.deflation_macs,
        warnings,
    })
}
