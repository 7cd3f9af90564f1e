//! Generators and reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use splitconv_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), normals(rng, shape.iter().product())).unwrap()
}

pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Rows of `v` (each `len` long) made orthonormal by modified Gram-Schmidt.
pub fn orthonormal_rows(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..v.len() {
        for j in 0..i {
            let d: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            let vj = v[j].clone();
            for (a, b) in v[i].iter_mut().zip(&vj) {
                *a -= d * b;
            }
        }
        let n: f64 = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in v[i].iter_mut() {
            *a /= n;
        }
    }
    v
}

/// Separable box-free smoothing of an `h×w` map with a Gaussian of width `sigma`.
pub fn smooth(map: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, wt) in taps.iter().enumerate() {
                let cc = c as i64 + t as i64 - half;
                if cc >= 0 && (cc as usize) < w {
                    acc += wt * map[r * w + cc as usize];
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, wt) in taps.iter().enumerate() {
                let rr = r as i64 + t as i64 - half;
                if rr >= 0 && (rr as usize) < h {
                    acc += wt * tmp[rr as usize * w + c];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// `X = A·diag(s)·B` with orthonormal `A` columns, orthonormal `B` rows and
/// `s_l` drawn from `[1, 1 + spread]`: exactly `rank` channels, nearly flat
/// spectrum. `sigma` smooths the spatial maps before orthonormalisation.
pub fn low_rank(
    rng: &mut ChaCha8Rng,
    n: usize,
    h: usize,
    w: usize,
    rank: usize,
    spread: f64,
    sigma: Option<f64>,
) -> Tensor {
    let hw = h * w;
    let a = orthonormal_rows((0..rank).map(|_| normals(rng, n)).collect());
    let b = orthonormal_rows(
        (0..rank)
            .map(|_| {
                let m = normals(rng, hw);
                match sigma {
                    Some(s) => smooth(&m, h, w, s),
                    None => m,
                }
            })
            .collect(),
    );
    let s: Vec<f64> = (0..rank)
        .map(|_| 1.0 + spread * rng.random::<f64>())
        .collect();
    let mut data = vec![0.0; n * hw];
    for j in 0..n {
        for l in 0..rank {
            let c = a[l][j] * s[l];
            for p in 0..hw {
                data[j * hw + p] += c * b[l][p];
            }
        }
    }
    Tensor::new(vec![n, h, w], data).unwrap()
}

/// Reference cross-correlation with signed index arithmetic.
pub fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (m, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; m * oh * ow];
    for i in 0..m {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0;
                for j in 0..n {
                    for q in 0..k {
                        for t in 0..k {
                            let rr = (r * stride + q) as i64 - pad as i64;
                            let cc = (c * stride + t) as i64 - pad as i64;
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= wd as i64 {
                                continue;
                            }
                            acc += x.data()[(j * h + rr as usize) * wd + cc as usize]
                                * w.data()[((i * n + j) * k + q) * k + t];
                        }
                    }
                }
                out[(i * oh + r) * ow + c] = acc;
            }
        }
    }
    Tensor::new(vec![m, oh, ow], out).unwrap()
}
