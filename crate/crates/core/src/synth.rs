//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::tensor::Tensor;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Two classes around fixed random centres, alternating labels.
pub fn blobs(n: usize, shape: [usize; 3], spread: f64, seed: u64) -> Result<Dataset> {
    if shape.contains(&0) {
        return Err(Error::invalid("blob shape extents must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    let centres = [normals(&mut rng, len), normals(&mut rng, len)];
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let data = centres[label]
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c + spread * z
            })
            .collect();
        samples.push(Tensor::new(shape.to_vec(), data)?);
        labels.push(label);
    }
    Dataset::new(samples, labels)
}

/// Per-sample `A·B + texture·Z`: `rank` random spatial maps mixed into
/// `channels` channels, plus i.i.d. texture. Labels are all zero.
pub fn low_rank_images(
    n: usize,
    channels: usize,
    size: usize,
    rank: usize,
    texture: f64,
    seed: u64,
) -> Result<Dataset> {
    if channels == 0 || size == 0 {
        return Err(Error::invalid("channels and size must be positive"));
    }
    if rank > channels {
        return Err(Error::invalid(format!(
            "rank {rank} exceeds {channels} channels"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = size * size;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let a = normals(&mut rng, channels * rank);
        let b = normals(&mut rng, rank * hw);
        let z = normals(&mut rng, channels * hw);
        let mut data = vec![0.0; channels * hw];
        for j in 0..channels {
            for l in 0..rank {
                let c = a[j * rank + l];
                for p in 0..hw {
                    data[j * hw + p] += c * b[l * hw + p];
                }
            }
            for p in 0..hw {
                data[j * hw + p] += texture * z[j * hw + p];
            }
        }
        samples.push(Tensor::new(vec![channels, size, size], data)?);
    }
    Dataset::new(samples, vec![0; n])
}

/// Smoothing taps for a field whose correlation is `exp(-d²/(2ℓ²))`.
fn gaussian_taps(length_scale: f64) -> Vec<f64> {
    let sigma = length_scale / std::f64::consts::SQRT_2;
    let half = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.into_iter().map(|t| t / norm).collect()
}

/// Stationary Gaussian random fields on `size×size`, one channel each,
/// unit marginal variance and squared-exponential correlation with length
/// scale `length_scale` pixels.
pub fn correlated_gaussian_images(
    n: usize,
    size: usize,
    length_scale: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if size == 0 || length_scale.is_nan() || length_scale <= 0.0 {
        return Err(Error::invalid("size and length scale must be positive"));
    }
    let taps = gaussian_taps(length_scale);
    let half = taps.len() / 2;
    let big = size + 2 * half;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let noise = normals(&mut rng, big * big);
        // rows, then columns; only the interior is kept
        let mut rows = vec![0.0; big * size];
        for r in 0..big {
            for c in 0..size {
                rows[r * size + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * noise[r * big + c + t])
                    .sum();
            }
        }
        let mut img = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                img[r * size + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * rows[(r + t) * size + c])
                    .sum();
            }
        }
        out.push(Tensor::new(vec![1, size, size], img)?);
    }
    Ok(out)
}

/// Uniform integer in `0..n` from a seeded stream; used for labels in demos.
pub fn uniform_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| rng.random_range(0..classes.max(1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(
            blobs(6, [1, 2, 2], 0.3, 4).unwrap(),
            blobs(6, [1, 2, 2], 0.3, 4).unwrap()
        );
        assert_eq!(
            correlated_gaussian_images(2, 8, 2.0, 1).unwrap(),
            correlated_gaussian_images(2, 8, 2.0, 1).unwrap()
        );
    }

    #[test]
    fn low_rank_without_texture_has_that_rank() {
        let ds = low_rank_images(1, 8, 6, 3, 0.0, 2).unwrap();
        let m = crate::tensor::flatten_channels(&ds.samples()[0]).unwrap();
        let p = crate::spectral::channel_spectrum(&m).unwrap();
        let top = p.singular_values[0];
        assert!(p.singular_values[2] > 1e-6 * top);
        assert!(p.singular_values[3..].iter().all(|&s| s <= 1e-9 * top));
    }

    #[test]
    fn field_has_unit_variance_and_correlation() {
        let imgs = correlated_gaussian_images(200, 32, 4.0, 3).unwrap();
        let (mut v, mut c1, mut n) = (0.0, 0.0, 0.0);
        for im in &imgs {
            let d = im.data();
            for r in 0..32 {
                for col in 0..31 {
                    v += d[r * 32 + col] * d[r * 32 + col];
                    c1 += d[r * 32 + col] * d[r * 32 + col + 1];
                    n += 1.0;
                }
            }
        }
        let (var, corr) = (v / n, c1 / v);
        assert!((var - 1.0).abs() < 0.1, "{var}");
        let expect = (-1.0f64 / 32.0).exp();
        assert!((corr - expect).abs() < 0.02, "{corr} vs {expect}");
    }
}
