//! Synthetic federations with controllable heterogeneity.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ClientShard, StreamSettings};
use crate::error::{Error, Result};
use crate::models::{Samples, Targets};

#[derive(Debug, Clone)]
pub struct SynthFederation {
    pub shards: Vec<ClientShard>,
    /// Parameter vector generating each client's targets (regression only).
    pub client_optima: Vec<Vec<f64>>,
    pub common_optimum: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Linear-regression clients: client `k` draws `x ~ N(0, I)` and
/// `y = x . (w* + delta_k) + noise`, with `||delta_k|| = dissimilarity`.
/// Sizes are drawn uniformly from `sizes`.
pub fn synth_regression(
    dim: usize,
    n_clients: usize,
    dissimilarity: f64,
    sizes: (usize, usize),
    noise: f64,
    stream: &StreamSettings,
    seed: u64,
) -> Result<SynthFederation> {
    if dim == 0 || n_clients == 0 {
        return Err(Error::InvalidArgument("dim and n_clients must be >= 1".into()));
    }
    if !(dissimilarity >= 0.0) {
        return Err(Error::InvalidArgument(format!("dissimilarity {dissimilarity} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = gaussian_vec(&mut rng, dim);
    let mut shards = Vec::with_capacity(n_clients);
    let mut optima = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let dir = unit_vec(&mut rng, dim);
        let w_k: Vec<f64> = common.iter().zip(&dir).map(|(c, d)| c + dissimilarity * d).collect();
        let n = if sizes.1 > sizes.0 { rng.gen_range(sizes.0..=sizes.1) } else { sizes.0 };
        let x = Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(&mut rng));
        let w = Array1::from(w_k.clone());
        let mut y = x.dot(&w);
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += noise * e;
        }
        let samples = Samples::new(x, Targets::Real(y.insert_axis(ndarray::Axis(1))))?;
        shards.push(ClientShard::from_samples(samples, stream, &mut rng)?);
        optima.push(w_k);
    }
    Ok(SynthFederation { shards, client_optima: optima, common_optimum: common })
}

/// Noise-free least-squares federation of 200-sample clients with every
/// sample visible. Client `k`'s loss is minimized exactly at its own optimum,
/// so dissimilarity 0 gives clients sharing one optimum.
pub fn synth_quadratic(dim: usize, n_clients: usize, dissimilarity: f64, seed: u64) -> Result<SynthFederation> {
    synth_regression(dim, n_clients, dissimilarity, (200, 200), 0.0, &StreamSettings::static_full(), seed)
}

/// Gaussian-blob classification with label skew: each client draws most of
/// its samples from two dominant classes, the remainder uniformly.
pub fn synth_classification(
    dim: usize,
    n_classes: usize,
    n_clients: usize,
    skew: f64,
    sizes: (usize, usize),
    stream: &StreamSettings,
    seed: u64,
) -> Result<SynthFederation> {
    if dim == 0 || n_clients == 0 || n_classes < 2 {
        return Err(Error::InvalidArgument("dim, n_clients >= 1 and n_classes >= 2 required".into()));
    }
    if !(0.0..=1.0).contains(&skew) {
        return Err(Error::InvalidArgument(format!("label skew {skew} must be in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> =
        (0..n_classes).map(|_| gaussian_vec(&mut rng, dim).into_iter().map(|v| 2.0 * v).collect()).collect();
    let mut shards = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let mut classes: Vec<usize> = (0..n_classes).collect();
        classes.shuffle(&mut rng);
        let dominant = [classes[0], classes[1 % n_classes]];
        let n = if sizes.1 > sizes.0 { rng.gen_range(sizes.0..=sizes.1) } else { sizes.0 };
        let labels: Vec<usize> = (0..n)
            .map(|_| if rng.gen::<f64>() < skew { dominant[rng.gen_range(0..2)] } else { rng.gen_range(0..n_classes) })
            .collect();
        let mut x = Array2::zeros((n, dim));
        for (i, &c) in labels.iter().enumerate() {
            for j in 0..dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[[i, j]] = means[c][j] + e;
            }
        }
        let samples = Samples::new(x, Targets::Class(labels))?;
        shards.push(ClientShard::from_samples(samples, stream, &mut rng)?);
    }
    Ok(SynthFederation { shards, client_optima: Vec::new(), common_optimum: Vec::new() })
}
