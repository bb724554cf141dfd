use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array4};
use rand_distr::{Distribution, Normal, Uniform};

use super::{Checkpoint, Conv2d, Dense, Layer, Network, Padding};
use crate::error::{Error, Result};
use crate::rng::{stream, Streams};

/// Checkpoints of TinyNet-A, in network order.
pub const TINYNET_CHECKPOINTS: [&str; 5] = ["c1", "c2", "c3", "pool", "logits"];

/// Checkpoints that may be masked (everything before the classifier).
pub const TINYNET_MASKABLE: [&str; 4] = ["c1", "c2", "c3", "pool"];

fn he_conv(streams: &Streams, layer: u64, c_out: usize, c_in: usize, k: usize) -> Conv2d {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = streams.at(stream::WEIGHTS, 2 * layer);
    let weight = Array4::from_shape_simple_fn((c_out, c_in, k, k), || normal.sample(&mut rng) as f32);
    let uniform = Uniform::new(-0.05, 0.05).expect("valid range");
    let mut rng = streams.at(stream::WEIGHTS, 2 * layer + 1);
    let bias = Array1::from_shape_simple_fn(c_out, || uniform.sample(&mut rng) as f32);
    Conv2d::new(weight, bias, 1, 0, Padding::Zero(1)).expect("consistent shapes")
}

/// The 3×32×32 reference network with random convolution weights and a
/// zero readout:
///
/// ```text
/// conv(3→8) relu [c1] maxpool2 conv(8→16) relu [c2]
/// conv(16→16) +c2 relu [c3] avgpool(4×4) [pool] flatten dense(256→C) [logits]
/// ```
pub fn tinynet_a(class_count: usize, seed: u64) -> Result<Network> {
    let s = Streams::new(seed);
    let layers = vec![
        Layer::Conv2d(he_conv(&s, 0, 8, 3, 3)),
        Layer::Relu,
        Layer::MaxPool { k: 2, stride: 2 },
        Layer::Conv2d(he_conv(&s, 1, 16, 8, 3)),
        Layer::Relu,
        Layer::Conv2d(he_conv(&s, 2, 16, 16, 3)),
        Layer::ResidualAdd { source: "c2".into() },
        Layer::Relu,
        Layer::AdaptiveAvgPool { out_h: 4, out_w: 4 },
        Layer::Flatten,
        Layer::Dense(Dense {
            weight: Array2::zeros((class_count, 256)),
            bias: Array1::zeros(class_count),
        }),
    ];
    let checkpoints = [("c1", 1), ("c2", 4), ("c3", 7), ("pool", 8), ("logits", 10)]
        .iter()
        .map(|&(name, layer)| Checkpoint {
            name: name.into(),
            layer,
        })
        .collect();
    Network::new(layers, checkpoints, (3, 32, 32), class_count)
}

impl Network {
    /// Fits the final dense layer by ridge regression of one-hot targets on
    /// `features` (`samples × n_in`, the flattened input of that layer).
    pub fn fit_readout(&mut self, features: &Array2<f64>, labels: &[usize], lambda: f64) -> Result<()> {
        let classes = self.class_count;
        let Some(Layer::Dense(dense)) = self.layers.last_mut() else {
            return Err(Error::InvalidArgument("network does not end in a dense layer".into()));
        };
        let (n, p) = features.dim();
        if n != labels.len() || n == 0 {
            return Err(Error::Arity { expected: n, got: labels.len() });
        }
        if p != dense.n_in() {
            return Err(Error::Shape(format!("readout expects {} features, got {p}", dense.n_in())));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        // Centre features so the bias absorbs the means.
        let mean = features.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let x = DMatrix::from_fn(n, p, |i, j| features[[i, j]] - mean[j]);
        let mut gram = x.transpose() * &x;
        let scale = (gram.trace() / p as f64).max(1e-12);
        for j in 0..p {
            gram[(j, j)] += lambda * scale;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("readout system is not positive definite".into()))?;
        for c in 0..classes {
            let y = DVector::from_fn(n, |i, _| if labels[i] == c { 1.0 } else { 0.0 });
            let ybar = y.mean();
            let w = chol.solve(&(x.transpose() * &y));
            for j in 0..p {
                dense.weight[[c, j]] = w[j] as f32;
            }
            let offset: f64 = (0..p).map(|j| w[j] * mean[j]).sum();
            dense.bias[c] = (ybar - offset) as f32;
        }
        Ok(())
    }
}
