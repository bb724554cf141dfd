//! A minimal feed-forward network with named activation checkpoints.
//!
//! Activations are `channels × height × width` tensors; dense outputs use the
//! shape `(n, 1, 1)`. The pseudo-checkpoint [`INPUT`] names the network input.

mod io;
mod layers;
mod tinynet;

use ndarray::{Array1, Array3};

pub use layers::{adaptive_avg_pool, max_pool, relu, Conv2d, Dense, Layer, Padding};
pub use tinynet::{tinynet_a, TINYNET_CHECKPOINTS, TINYNET_MASKABLE};

use crate::error::{Error, Result};

pub const INPUT: &str = "input";

/// Activation captured at one checkpoint for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub checkpoint: String,
    pub sample_id: usize,
    pub tensor: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub name: String,
    /// Index of the layer whose output is tapped.
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    checkpoints: Vec<Checkpoint>,
    input_shape: (usize, usize, usize),
    class_count: usize,
}

impl Network {
    pub fn new(
        layers: Vec<Layer>,
        checkpoints: Vec<Checkpoint>,
        input_shape: (usize, usize, usize),
        class_count: usize,
    ) -> Result<Self> {
        let net = Self {
            layers,
            checkpoints,
            input_shape,
            class_count,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.checkpoints.iter().map(|c| c.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) || names.contains(&INPUT) {
            return Err(Error::InvalidArgument("checkpoint names must be unique and not `input`".into()));
        }
        if self.checkpoints.iter().any(|c| c.layer >= self.layers.len()) {
            return Err(Error::InvalidArgument("checkpoint bound to a missing layer".into()));
        }
        match self.layers.last() {
            Some(Layer::Dense(d)) if d.n_out() == self.class_count => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "final layer must be dense with {} outputs",
                    self.class_count
                )))
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::ResidualAdd { source } = layer {
                match self.checkpoint(source) {
                    Some(c) if c.layer < i => {}
                    _ => return Err(Error::InvalidArgument(format!("residual source `{source}` must precede layer {i}"))),
                }
            }
        }
        self.shapes().map(|_| ())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn checkpoint_names(&self) -> Vec<String> {
        self.checkpoints.iter().map(|c| c.name.clone()).collect()
    }

    pub fn checkpoint(&self, name: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.name == name)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Output shape of every layer for the configured input.
    fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Static tensor shape of a checkpoint (or of the input).
    pub fn checkpoint_shape(&self, name: &str) -> Result<(usize, usize, usize)> {
        if name == INPUT {
            return Ok(self.input_shape);
        }
        let c = self.checkpoint(name).ok_or_else(|| Error::UnknownCheckpoint(name.into()))?;
        Ok(self.shapes()?[c.layer])
    }

    fn layer_index_of(&self, name: &str) -> Result<Option<usize>> {
        if name == INPUT {
            return Ok(None);
        }
        self.checkpoint(name)
            .map(|c| Some(c.layer))
            .ok_or_else(|| Error::UnknownCheckpoint(name.into()))
    }

    /// Runs layers `start..end` on `x`. `hook` sees (and may edit) every
    /// checkpoint tensor before it propagates further.
    fn run(
        &self,
        start: usize,
        end: usize,
        x: Array3<f32>,
        mut stored: Vec<(String, Array3<f32>)>,
        hook: &mut dyn FnMut(&str, &mut Array3<f32>) -> Result<()>,
    ) -> Result<(Array3<f32>, Vec<(String, Array3<f32>)>)> {
        let mut cur = x;
        for i in start..end {
            cur = match &self.layers[i] {
                Layer::Conv2d(conv) => conv.forward(&cur)?,
                Layer::Relu => {
                    relu(&mut cur);
                    cur
                }
                Layer::MaxPool { k, stride } => {
                    self.layers[i].output_shape(cur.dim())?;
                    max_pool(&cur, *k, *stride)
                }
                Layer::AdaptiveAvgPool { out_h, out_w } => {
                    self.layers[i].output_shape(cur.dim())?;
                    adaptive_avg_pool(&cur, *out_h, *out_w)
                }
                Layer::Dense(d) => d.forward(&cur)?,
                Layer::ResidualAdd { source } => {
                    let (_, src) = stored
                        .iter()
                        .find(|(n, _)| n == source)
                        .ok_or_else(|| Error::UnknownCheckpoint(source.clone()))?;
                    if src.dim() != cur.dim() {
                        return Err(Error::Shape(format!("residual {:?} + {:?}", src.dim(), cur.dim())));
                    }
                    cur + src
                }
                Layer::Flatten => {
                    let n = cur.len();
                    cur.into_shape_with_order((n, 1, 1)).expect("length preserved")
                }
            };
            for c in self.checkpoints.iter().filter(|c| c.layer == i) {
                hook(&c.name, &mut cur)?;
                stored.push((c.name.clone(), cur.clone()));
            }
        }
        Ok((cur, stored))
    }

    fn check_input(&self, x: &Array3<f32>, expected: (usize, usize, usize)) -> Result<()> {
        if x.dim() != expected {
            return Err(Error::Shape(format!("expected input {:?}, got {:?}", expected, x.dim())));
        }
        Ok(())
    }

    /// Full forward pass with a hook at every checkpoint.
    pub fn forward_with_hook(
        &self,
        x: &Array3<f32>,
        hook: &mut dyn FnMut(&str, &mut Array3<f32>) -> Result<()>,
    ) -> Result<Array1<f32>> {
        self.check_input(x, self.input_shape)?;
        let (out, _) = self.run(0, self.layers.len(), x.clone(), Vec::new(), hook)?;
        Ok(Array1::from_iter(out.iter().copied()))
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array1<f32>> {
        self.forward_with_hook(x, &mut |_, _| Ok(()))
    }

    /// Logits plus one record per checkpoint.
    pub fn forward_with_checkpoints(&self, x: &Array3<f32>, sample_id: usize) -> Result<(Array1<f32>, Vec<ActivationRecord>)> {
        let mut records = Vec::with_capacity(self.checkpoints.len());
        let logits = self.forward_with_hook(x, &mut |name, t| {
            records.push(ActivationRecord {
                checkpoint: name.to_string(),
                sample_id,
                tensor: t.clone(),
            });
            Ok(())
        })?;
        Ok((logits, records))
    }

    /// Executes the layers after `from` up to and including checkpoint `to`.
    ///
    /// `from = "input"` starts at the first layer. A residual source inside
    /// the segment or equal to `from` is satisfied; any other is dangling.
    pub fn run_segment(&self, from: &str, to: &str, x: &Array3<f32>) -> Result<Array3<f32>> {
        let start = self.layer_index_of(from)?.map_or(0, |i| i + 1);
        let end = self.layer_index_of(to)?.map_or(0, |i| i + 1);
        self.check_input(x, self.checkpoint_shape(from)?)?;
        if end <= start {
            if from == to {
                return Ok(x.clone());
            }
            return Err(Error::InvalidArgument(format!("checkpoint `{to}` does not follow `{from}`")));
        }
        let mut stored = Vec::new();
        if from != INPUT {
            stored.push((from.to_string(), x.clone()));
        }
        for layer in &self.layers[start..end] {
            if let Layer::ResidualAdd { source } = layer {
                let inside = self.checkpoint(source).is_some_and(|c| c.layer >= start && c.layer < end);
                if !inside && source != from {
                    return Err(Error::DanglingSkip {
                        from: from.into(),
                        to: to.into(),
                        source_name: source.clone(),
                    });
                }
            }
        }
        let (out, _) = self.run(start, end, x.clone(), stored, &mut |_, _| Ok(()))?;
        Ok(out)
    }
}

impl Network {
    /// Input-pixel rectangle `(y0, y1, x0, x1)` (half-open, clipped) that can
    /// influence spatial position `(y, x)` of checkpoint `name`.
    ///
    /// Wrap-around from circular padding is not tracked.
    pub fn receptive_field(&self, name: &str, y: usize, x: usize) -> Result<(usize, usize, usize, usize)> {
        let (_, ih, iw) = self.input_shape;
        let Some(last) = self.layer_index_of(name)? else {
            return Ok((y, y + 1, x, x + 1));
        };
        let shapes = self.shapes()?;
        let (mut ry, mut rx) = ((y as isize, y as isize), (x as isize, x as isize));
        for i in (0..=last).rev() {
            let (_, h, w) = if i == 0 { self.input_shape } else { shapes[i - 1] };
            match &self.layers[i] {
                Layer::Conv2d(conv) => {
                    let (eh, ew) = conv.extent();
                    let (s, p) = (conv.stride as isize, conv.padding.amount() as isize);
                    ry = (ry.0 * s - p, ry.1 * s - p + eh as isize - 1);
                    rx = (rx.0 * s - p, rx.1 * s - p + ew as isize - 1);
                }
                Layer::MaxPool { k, stride } => {
                    let (k, s) = (*k as isize, *stride as isize);
                    ry = (ry.0 * s, ry.1 * s + k - 1);
                    rx = (rx.0 * s, rx.1 * s + k - 1);
                }
                Layer::AdaptiveAvgPool { out_h, out_w } => {
                    let lo = |i: isize, n: usize, total: usize| (i.max(0) as usize * total / n) as isize;
                    let hi = |i: isize, n: usize, total: usize| (((i.max(0) as usize + 1) * total).div_ceil(n)) as isize - 1;
                    ry = (lo(ry.0, *out_h, h), hi(ry.1, *out_h, h));
                    rx = (lo(rx.0, *out_w, w), hi(rx.1, *out_w, w));
                }
                Layer::Dense(_) | Layer::Flatten => {
                    ry = (0, h as isize - 1);
                    rx = (0, w as isize - 1);
                }
                Layer::Relu | Layer::ResidualAdd { .. } => {}
            }
        }
        let clip = |r: (isize, isize), n: usize| (r.0.max(0) as usize, ((r.1 + 1).max(0) as usize).min(n));
        let (y0, y1) = clip(ry, ih);
        let (x0, x1) = clip(rx, iw);
        Ok((y0, y1, x0, x1))
    }
}

/// Indices of the `k` largest logits, descending, ties to the lower index.
pub fn predict_topk(logits: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > logits.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} classes", logits.len())));
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    #[test]
    fn tinynet_receptive_fields() {
        let net = super::tinynet_a(10, 0).unwrap();
        assert_eq!(net.receptive_field("c1", 0, 5).unwrap(), (0, 2, 4, 7));
        assert_eq!(net.receptive_field("c2", 4, 4).unwrap(), (5, 13, 5, 13));
        assert_eq!(net.receptive_field("c3", 4, 4).unwrap(), (3, 15, 3, 15));
        assert_eq!(net.receptive_field("pool", 0, 0).unwrap().0, 0);
        assert_eq!(net.receptive_field("logits", 0, 0).unwrap(), (0, 32, 0, 32));
    }

    use super::*;
    use ndarray::{Array2, Array4};

    fn residual_net() -> Network {
        let conv = |seed: f32| {
            Layer::Conv2d(
                Conv2d::new(
                    Array4::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| ((a + 2 * b + 3 * c + d) as f32 * 0.1 + seed).sin()),
                    Array1::from(vec![0.05, -0.02]),
                    1,
                    0,
                    Padding::Zero(1),
                )
                .unwrap(),
            )
        };
        Network::new(
            vec![
                conv(0.0),
                Layer::Relu,
                conv(1.0),
                Layer::ResidualAdd { source: "a".into() },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense(Dense {
                    weight: Array2::from_shape_fn((3, 32), |(i, j)| ((i * 32 + j) as f32 * 0.37).cos()),
                    bias: Array1::zeros(3),
                }),
            ],
            vec![
                Checkpoint { name: "a".into(), layer: 1 },
                Checkpoint { name: "pre".into(), layer: 2 },
                Checkpoint { name: "b".into(), layer: 4 },
                Checkpoint { name: "logits".into(), layer: 6 },
            ],
            (2, 4, 4),
            3,
        )
        .unwrap()
    }

    fn input() -> Array3<f32> {
        Array3::from_shape_fn((2, 4, 4), |(c, y, x)| ((c * 16 + y * 4 + x) as f32 * 0.7).sin().abs())
    }

    #[test]
    fn residual_tap_is_the_elementwise_sum() {
        let net = residual_net();
        let (_, rec) = net.forward_with_checkpoints(&input(), 0).unwrap();
        let get = |n: &str| rec.iter().find(|r| r.checkpoint == n).unwrap().tensor.clone();
        let expect = (get("a") + get("pre")).mapv(|v| v.max(0.0));
        assert_eq!(get("b"), expect);
    }

    #[test]
    fn segments_reproduce_forward_slices() {
        let net = residual_net();
        let x = input();
        let (logits, rec) = net.forward_with_checkpoints(&x, 0).unwrap();
        let get = |n: &str| rec.iter().find(|r| r.checkpoint == n).unwrap().tensor.clone();
        assert_eq!(net.run_segment(INPUT, "a", &x).unwrap(), get("a"));
        assert_eq!(net.run_segment("a", "b", &get("a")).unwrap(), get("b"));
        assert_eq!(net.run_segment(INPUT, "b", &x).unwrap(), get("b"));
        assert_eq!(net.run_segment("b", "b", &get("b")).unwrap(), get("b"));
        let tail = net.run_segment("b", "logits", &get("b")).unwrap();
        assert_eq!(tail.iter().copied().collect::<Vec<_>>(), logits.to_vec());
    }

    #[test]
    fn dangling_skip_is_rejected() {
        let net = residual_net();
        let (_, rec) = net.forward_with_checkpoints(&input(), 0).unwrap();
        let pre = rec.iter().find(|r| r.checkpoint == "pre").unwrap().tensor.clone();
        assert!(matches!(net.run_segment("pre", "b", &pre), Err(Error::DanglingSkip { .. })));
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut net = residual_net();
        for layer in net.layers_mut() {
            match layer {
                Layer::Conv2d(c) => {
                    c.weight.fill(0.0);
                    c.bias.fill(0.0);
                }
                Layer::Dense(d) => {
                    d.weight.fill(0.0);
                    d.bias.fill(0.0);
                }
                _ => {}
            }
        }
        let (logits, rec) = net.forward_with_checkpoints(&input(), 0).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert!(rec.iter().all(|r| r.tensor.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wrong_input_shape() {
        let net = residual_net();
        assert!(matches!(net.forward(&Array3::zeros((3, 4, 4))), Err(Error::Shape(_))));
        assert!(matches!(net.run_segment("nope", "b", &input()), Err(Error::UnknownCheckpoint(_))));
    }

    #[test]
    fn topk_order_and_ties() {
        assert_eq!(predict_topk(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(predict_topk(&[1.0; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(predict_topk(&[1.0], 2).is_err());
    }
}
