//! Glue between sample plans, the dataset, the network and the estimators.

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{channel_repeat, compose_ordered, resize_bilinear, rgb_to_hsv, Image};
use crate::convnet::{Network, INPUT};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{SaltelliAccumulator, SensitivityMap, ShapleyAccumulator, ShapleyEffects, SobolIndices};
use crate::inputspace::{Design, Realization, SamplePlan};

/// Default number of estimator blocks evaluated per streaming chunk.
pub const CHUNK_BLOCKS: usize = 64;

/// The dataset image picked by a realization and its augmented version.
pub fn render(data: &Dataset, r: &Realization) -> Result<(usize, Image)> {
    let id = data.select(r.class, r.partition, r.instance)?;
    let img = data.image(id);
    if r.transforms.is_empty() {
        return Ok((id, img.clone()));
    }
    Ok((id, compose_ordered(img, &r.transforms, &r.order)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HsvChannel {
    Hue,
    Saturation,
    Value,
}

impl HsvChannel {
    pub const ALL: [HsvChannel; 3] = [HsvChannel::Hue, HsvChannel::Saturation, HsvChannel::Value];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HsvChannel::Hue => "hue",
            HsvChannel::Saturation => "saturation",
            HsvChannel::Value => "value",
        }
    }
}

/// A standalone network slice fed with one replicated HSV plane, or with the
/// RGB image itself when `channel` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub from: String,
    pub to: String,
    pub channel: Option<HsvChannel>,
}

impl Segment {
    /// The segment input derived from an augmented RGB image.
    pub fn input(&self, net: &Network, img: &Image) -> Result<Array3<f32>> {
        let (c, h, w) = net.checkpoint_shape(&self.from)?;
        match self.channel {
            None => {
                if img.data().dim() != (c, h, w) {
                    return Err(Error::Shape(format!(
                        "RGB image {:?} does not fit segment input {:?}",
                        img.data().dim(),
                        (c, h, w)
                    )));
                }
                Ok(img.data().clone())
            }
            Some(ch) => {
                let hsv = rgb_to_hsv(img)?;
                let plane = if (hsv.height(), hsv.width()) == (h, w) {
                    hsv
                } else {
                    resize_bilinear(&hsv, h, w)?
                };
                Ok(channel_repeat(&plane, ch.index(), c)?.into_data())
            }
        }
    }
}

/// What the evaluator records for each plan row.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Checkpoints(Vec<String>),
    Segment(Segment),
}

/// Sensitivity results at one output tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Indices {
    Sobol(SobolIndices),
    Shapley(ShapleyEffects),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub checkpoint: String,
    pub shape: Vec<usize>,
    pub indices: Indices,
}

impl Estimate {
    /// One map per (kind, group): Sobol yields first-order then total maps.
    pub fn maps(&self, groups: &[String]) -> Vec<SensitivityMap> {
        match &self.indices {
            Indices::Sobol(s) => {
                let (first, total): (Vec<_>, Vec<_>) = s.to_maps(&self.checkpoint, &self.shape, groups).into_iter().unzip();
                first.into_iter().chain(total).collect()
            }
            Indices::Shapley(s) => s.to_maps(&self.checkpoint, &self.shape, groups),
        }
    }

    pub fn dead(&self) -> &[bool] {
        match &self.indices {
            Indices::Sobol(s) => &s.dead,
            Indices::Shapley(s) => &s.dead,
        }
    }

    /// Groups that never changed any output: every total index (or Shapley
    /// effect) is exactly zero.
    pub fn inert_groups(&self) -> Vec<usize> {
        let values = match &self.indices {
            Indices::Sobol(s) => &s.total,
            Indices::Shapley(s) => &s.values,
        };
        (0..values.nrows())
            .filter(|&g| values.row(g).iter().all(|&v| v == 0.0))
            .collect()
    }
}

enum Acc {
    Sobol(SaltelliAccumulator),
    Shapley(ShapleyAccumulator),
}

impl Acc {
    fn new(design: &Design, units: usize) -> Result<Self> {
        Ok(match design {
            Design::Saltelli { n_groups, .. } => Acc::Sobol(SaltelliAccumulator::new(*n_groups, units)),
            Design::Shapley {
                permutations,
                n_groups,
                n_outer,
                n_inner,
                ..
            } => Acc::Shapley(ShapleyAccumulator::new(permutations.clone(), *n_groups, *n_outer, *n_inner, units)?),
        })
    }

    fn push(&mut self, block: ndarray::ArrayView2<f64>) -> Result<()> {
        match self {
            Acc::Sobol(a) => a.push_block(block),
            Acc::Shapley(a) => a.push_block(block),
        }
    }

    fn finish(&self) -> Result<Indices> {
        Ok(match self {
            Acc::Sobol(a) => Indices::Sobol(a.finish()?),
            Acc::Shapley(a) => Indices::Shapley(a.finish()?),
        })
    }
}

/// Evaluates plan rows through a network.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub net: &'a Network,
    pub data: &'a Dataset,
    pub probe: &'a Probe,
}

impl<'a> Evaluator<'a> {
    pub fn new(net: &'a Network, data: &'a Dataset, probe: &'a Probe) -> Result<Self> {
        match probe {
            Probe::Checkpoints(names) => {
                if names.is_empty() {
                    return Err(Error::InvalidArgument("no checkpoints selected".into()));
                }
                for n in names {
                    if n == INPUT {
                        return Err(Error::UnknownCheckpoint(INPUT.into()));
                    }
                    net.checkpoint_shape(n)?;
                }
            }
            Probe::Segment(seg) => {
                net.checkpoint_shape(&seg.from)?;
                let probe_input = Array3::<f32>::zeros(net.checkpoint_shape(&seg.from)?);
                net.run_segment(&seg.from, &seg.to, &probe_input)?;
            }
        }
        Ok(Self { net, data, probe })
    }

    pub fn output_names(&self) -> Vec<String> {
        match self.probe {
            Probe::Checkpoints(n) => n.clone(),
            Probe::Segment(seg) => vec![seg.to.clone()],
        }
    }

    pub fn output_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        self.output_names().iter().map(|n| self.net.checkpoint_shape(n)).collect()
    }

    /// Flattened output tensors for one realization.
    pub fn evaluate_realization(&self, r: &Realization) -> Result<Vec<Vec<f64>>> {
        let (_, img) = render(self.data, r)?;
        self.evaluate_image(&img)
    }

    /// Flattened output tensors for an already rendered image.
    pub fn evaluate_image(&self, img: &Image) -> Result<Vec<Vec<f64>>> {
        match self.probe {
            Probe::Checkpoints(names) => {
                let mut out: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
                self.net.forward_with_hook(img.data(), &mut |name, t| {
                    if let Some(k) = names.iter().position(|n| n == name) {
                        out[k] = t.iter().map(|&v| v as f64).collect();
                    }
                    Ok(())
                })?;
                Ok(out)
            }
            Probe::Segment(seg) => {
                let x = seg.input(self.net, img)?;
                let y = self.net.run_segment(&seg.from, &seg.to, &x)?;
                Ok(vec![y.iter().map(|&v| v as f64).collect()])
            }
        }
    }

    /// Outputs for plan rows `start..end`, one `rows × units` matrix per
    /// output tensor. Rows are evaluated in parallel and kept in order.
    pub fn evaluate_rows(&self, plan: &SamplePlan, start: usize, end: usize) -> Result<Vec<Array2<f64>>> {
        let rows: Vec<Vec<Vec<f64>>> = (start..end)
            .into_par_iter()
            .map(|i| self.evaluate_realization(&plan.realization(i)?))
            .collect::<Result<_>>()?;
        let shapes = self.output_shapes()?;
        let mut out = Vec::with_capacity(shapes.len());
        for (k, (c, h, w)) in shapes.into_iter().enumerate() {
            let units = c * h * w;
            let mut m = Array2::<f64>::zeros((rows.len(), units));
            for (r, row) in rows.iter().enumerate() {
                m.row_mut(r).assign(&ndarray::ArrayView1::from(&row[k][..]));
            }
            out.push(m);
        }
        Ok(out)
    }

    /// All plan outputs, materialized (the persisted mode).
    pub fn evaluate_plan(&self, plan: &SamplePlan) -> Result<Vec<Array2<f64>>> {
        self.evaluate_rows(plan, 0, plan.len())
    }

    /// Estimates from materialized outputs.
    pub fn estimate_from_outputs(&self, plan: &SamplePlan, outputs: &[Array2<f64>]) -> Result<Vec<Estimate>> {
        let mut b = self.builder(plan)?;
        b.push_rows(outputs)?;
        b.finish()
    }

    /// Estimates without keeping activations: rows are evaluated
    /// `chunk_blocks` estimator blocks at a time and folded into running
    /// accumulators in plan order.
    pub fn estimate_streaming(&self, plan: &SamplePlan, chunk_blocks: usize) -> Result<Vec<Estimate>> {
        let chunk = plan.block_len() * chunk_blocks.max(1);
        let mut b = self.builder(plan)?;
        let mut start = 0;
        while start < plan.len() {
            let end = (start + chunk).min(plan.len());
            b.push_rows(&self.evaluate_rows(plan, start, end)?)?;
            log::debug!("evaluated rows {start}..{end} of {}", plan.len());
            start = end;
        }
        b.finish()
    }

    /// An empty accumulator set for this evaluator's outputs.
    pub fn builder(&self, plan: &SamplePlan) -> Result<EstimateBuilder> {
        let names = self.output_names();
        let shapes = self.output_shapes()?;
        let accs = shapes
            .iter()
            .map(|&(c, h, w)| Acc::new(&plan.design, c * h * w))
            .collect::<Result<Vec<_>>>()?;
        Ok(EstimateBuilder {
            names,
            shapes,
            accs,
            block_len: plan.block_len(),
            rows_expected: plan.len(),
            rows_seen: 0,
        })
    }
}

/// Running estimator state fed with consecutive plan rows.
pub struct EstimateBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize, usize)>,
    accs: Vec<Acc>,
    block_len: usize,
    rows_expected: usize,
    rows_seen: usize,
}

impl EstimateBuilder {
    /// Folds in the next rows, one `rows × units` matrix per output; the row
    /// count must be a whole number of estimator blocks.
    pub fn push_rows(&mut self, outputs: &[Array2<f64>]) -> Result<()> {
        if outputs.len() != self.accs.len() {
            return Err(Error::Arity {
                expected: self.accs.len(),
                got: outputs.len(),
            });
        }
        let rows = outputs.first().map_or(0, |m| m.nrows());
        if rows % self.block_len != 0 || outputs.iter().any(|m| m.nrows() != rows) {
            return Err(Error::Shape(format!("{rows} rows do not form whole blocks of {}", self.block_len)));
        }
        for ((acc, m), &(c, h, w)) in self.accs.iter_mut().zip(outputs).zip(&self.shapes) {
            if m.ncols() != c * h * w {
                return Err(Error::Arity {
                    expected: c * h * w,
                    got: m.ncols(),
                });
            }
            for b in 0..rows / self.block_len {
                acc.push(m.slice(s![b * self.block_len..(b + 1) * self.block_len, ..]))?;
            }
        }
        self.rows_seen += rows;
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<Estimate>> {
        if self.rows_seen != self.rows_expected {
            return Err(Error::Arity {
                expected: self.rows_expected,
                got: self.rows_seen,
            });
        }
        self.names
            .into_iter()
            .zip(self.shapes)
            .zip(self.accs)
            .map(|((checkpoint, (c, h, w)), acc)| {
                Ok(Estimate {
                    checkpoint,
                    shape: vec![c, h, w],
                    indices: acc.finish()?,
                })
            })
            .collect()
    }
}

/// Share of the largest sensitivity values that falls on units whose
/// receptive field overlaps a region, against the share of such units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// Fraction of the top-decile mass carried by overlapping units.
    pub top_mass_fraction: f64,
    /// Fraction of all units that overlap.
    pub baseline: f64,
}

impl Concentration {
    pub fn ratio(&self) -> f64 {
        self.top_mass_fraction / self.baseline
    }
}

/// Pools the units of `maps`, keeps the top tenth by value (negative
/// estimates clipped to zero, ties to the earlier unit) and measures how
/// much of their mass overlaps the input rows `y0..y1` and columns `x0..x1`.
pub fn rect_concentration(net: &Network, maps: &[&SensitivityMap], rect: (usize, usize, usize, usize)) -> Result<Concentration> {
    let (y0, y1, x0, x1) = rect;
    let mut units: Vec<(f64, bool)> = Vec::new();
    for m in maps {
        let &[c, h, w] = m.shape() else {
            return Err(Error::Shape(format!("map {} is not rank 3", m.tensor_name())));
        };
        let mut overlap = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (a0, a1, b0, b1) = net.receptive_field(&m.checkpoint, y, x)?;
                overlap[y * w + x] = a0 < y1 && y0 < a1 && b0 < x1 && x0 < b1;
            }
        }
        for (i, &v) in m.values.iter().enumerate() {
            let v = if v.is_nan() { 0.0 } else { v.max(0.0) };
            units.push((v, overlap[i % (h * w)]));
        }
        debug_assert_eq!(m.values.len(), c * h * w);
    }
    if units.is_empty() {
        return Err(Error::InvalidArgument("no units to rank".into()));
    }
    let baseline = units.iter().filter(|u| u.1).count() as f64 / units.len() as f64;
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| units[b].0.total_cmp(&units[a].0).then(a.cmp(&b)));
    let top = &order[..(units.len() / 10).max(1)];
    let mass = crate::numeric::compensated_sum(top.iter().map(|&i| units[i].0));
    let inside = crate::numeric::compensated_sum(top.iter().filter(|&&i| units[i].1).map(|&i| units[i].0));
    if mass <= 0.0 || baseline == 0.0 {
        return Err(Error::VarianceUndefined("no sensitivity mass or no overlapping unit".into()));
    }
    Ok(Concentration {
        top_mass_fraction: inside / mass,
        baseline,
    })
}

/// Flattened activations of `checkpoint` for the given images (parallel,
/// order preserved).
pub fn checkpoint_features(net: &Network, images: &[&Image], checkpoint: &str) -> Result<Array2<f64>> {
    let (c, h, w) = net.checkpoint_shape(checkpoint)?;
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| {
            let t = net.run_segment(INPUT, checkpoint, img.data())?;
            Ok(t.iter().map(|&v| v as f64).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), c * h * w));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
    }
    Ok(out)
}

/// Fits the readout of `net` on the training partition, using the
/// activations at `feature_checkpoint` (the input of the final dense layer).
pub fn train_readout(net: &mut Network, data: &Dataset, feature_checkpoint: &str, lambda: f64) -> Result<()> {
    let idx = data.indices(crate::dataset::TRAIN);
    let images: Vec<&Image> = idx.iter().map(|&i| data.image(i)).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let feats = checkpoint_features(net, &images, feature_checkpoint)?;
    net.fit_readout(&feats, &labels, lambda)
}

/// TinyNet-A with random convolutions and a ridge readout fitted on `data`.
pub fn trained_tinynet(data: &Dataset, seed: u64) -> Result<Network> {
    let mut net = crate::convnet::tinynet_a(data.label_count(), seed)?;
    train_readout(&mut net, data, "pool", 1e-3)?;
    Ok(net)
}

/// Top-1 accuracy over the given image indices.
pub fn accuracy(net: &Network, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits: usize = indices
        .par_iter()
        .map(|&i| {
            let logits = net.forward(data.image(i).data())?;
            let top = crate::convnet::predict_topk(logits.as_slice().expect("contiguous"), 1)?[0];
            Ok(usize::from(top == data.label(i)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationSet;
    use crate::inputspace::{saltelli_plan, shapley_plan, InputSpaceModel};

    fn small() -> (Dataset, Network) {
        let data = Dataset::synthetic(0, 10, 8, 32).unwrap();
        let net = trained_tinynet(&data, 0).unwrap();
        (data, net)
    }

    #[test]
    fn streaming_equals_persisted() {
        let (data, net) = small();
        let space = InputSpaceModel::for_set(AugmentationSet::A1, 10, 32, 32).unwrap();
        let plan = saltelli_plan(&space, 8, 3).unwrap();
        let probe = Probe::Checkpoints(vec!["c3".into(), "logits".into()]);
        let ev = Evaluator::new(&net, &data, &probe).unwrap();
        let persisted = ev.estimate_from_outputs(&plan, &ev.evaluate_plan(&plan).unwrap()).unwrap();
        let streamed = ev.estimate_streaming(&plan, 3).unwrap();
        assert_eq!(persisted, streamed);
    }

    #[test]
    fn unaugmented_set_makes_transform_groups_inert() {
        let (data, net) = small();
        let space = InputSpaceModel::for_set(AugmentationSet::A0, 10, 32, 32).unwrap();
        let plan = saltelli_plan(&space, 8, 1).unwrap();
        let probe = Probe::Checkpoints(vec!["logits".into()]);
        let ev = Evaluator::new(&net, &data, &probe).unwrap();
        let est = ev.estimate_streaming(&plan, CHUNK_BLOCKS).unwrap();
        let inert: Vec<String> = est[0].inert_groups().iter().map(|&g| space.group_names()[g].clone()).collect();
        assert_eq!(inert, ["order", "erase", "sharpness", "rolling", "grayscale", "gaussian-blur"]);
    }

    #[test]
    fn shapley_pipeline_runs() {
        let (data, net) = small();
        let space = InputSpaceModel::for_set(AugmentationSet::A1, 10, 32, 32).unwrap();
        let plan = shapley_plan(&space, 2, 2, 3, 0).unwrap();
        let probe = Probe::Checkpoints(vec!["pool".into()]);
        let ev = Evaluator::new(&net, &data, &probe).unwrap();
        let est = ev.estimate_streaming(&plan, 5).unwrap();
        let Indices::Shapley(s) = &est[0].indices else { panic!() };
        for (e, dead) in s.efficiency().iter().zip(&s.dead) {
            if !dead {
                assert!((e.unwrap() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(est[0].maps(&space.group_names()).len(), 8);
    }

    #[test]
    fn rgb_segment_matches_full_network() {
        let (data, net) = small();
        let space = InputSpaceModel::for_set(AugmentationSet::A1, 10, 32, 32).unwrap();
        let plan = saltelli_plan(&space, 4, 0).unwrap();
        let full = Probe::Checkpoints(vec!["c1".into()]);
        let seg = Probe::Segment(Segment {
            from: INPUT.into(),
            to: "c1".into(),
            channel: None,
        });
        let a = Evaluator::new(&net, &data, &full).unwrap().estimate_streaming(&plan, 4).unwrap();
        let b = Evaluator::new(&net, &data, &seg).unwrap().estimate_streaming(&plan, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hsv_segments_resize_planes() {
        let (data, net) = small();
        let seg = Segment {
            from: "c1".into(),
            to: "c2".into(),
            channel: Some(HsvChannel::Value),
        };
        let x = seg.input(&net, data.image(0)).unwrap();
        assert_eq!(x.dim(), (8, 32, 32));
        let seg = Segment {
            from: "c2".into(),
            to: "c3".into(),
            channel: Some(HsvChannel::Hue),
        };
        let x = seg.input(&net, data.image(0)).unwrap();
        assert_eq!(x.dim(), (16, 16, 16));
        assert_eq!(net.run_segment("c2", "c3", &x).unwrap().dim(), (16, 16, 16));
    }

    #[test]
    fn builder_rejects_partial_blocks_and_short_input() {
        let (data, net) = small();
        let space = InputSpaceModel::for_set(AugmentationSet::A1, 10, 32, 32).unwrap();
        let plan = saltelli_plan(&space, 4, 0).unwrap();
        let probe = Probe::Checkpoints(vec!["logits".into()]);
        let ev = Evaluator::new(&net, &data, &probe).unwrap();
        let outs = ev.evaluate_rows(&plan, 0, plan.block_len() + 1).unwrap();
        assert!(ev.builder(&plan).unwrap().push_rows(&outs).is_err());
        let mut b = ev.builder(&plan).unwrap();
        b.push_rows(&ev.evaluate_rows(&plan, 0, plan.block_len()).unwrap()).unwrap();
        assert!(b.finish().is_err());
    }

    #[test]
    fn concentration_of_indicator_maps() {
        let (_, net) = small();
        let (c, h, w) = net.checkpoint_shape("c2").unwrap();
        let rect = crate::dataset::PLANTED_RECT;
        let mut inside = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&[c, h, w]));
        let mut overlapping = 0;
        for y in 0..h {
            for x in 0..w {
                let (a0, a1, b0, b1) = net.receptive_field("c2", y, x).unwrap();
                if a0 < rect.1 && rect.0 < a1 && b0 < rect.3 && rect.2 < b1 {
                    overlapping += 1;
                    inside.slice_mut(s![.., y, x]).fill(1.0);
                }
            }
        }
        let map = |values: ndarray::ArrayD<f64>| SensitivityMap {
            checkpoint: "c2".into(),
            kind: crate::estimators::SensitivityKind::SobolFirst,
            group: "erase".into(),
            total_variance: ndarray::ArrayD::ones(values.raw_dim()),
            dead: ndarray::ArrayD::from_elem(values.raw_dim(), false),
            values,
        };
        let hit = rect_concentration(&net, &[&map(inside.clone())], rect).unwrap();
        assert_eq!(hit.top_mass_fraction, 1.0);
        assert_eq!(hit.baseline, overlapping as f64 / (h * w) as f64);
        let miss = rect_concentration(&net, &[&map(inside.mapv(|v| 1.0 - v))], rect).unwrap();
        assert_eq!(miss.top_mass_fraction, 0.0);
        assert!(rect_concentration(&net, &[&map(inside.mapv(|_| 0.0))], rect).is_err());
    }

    #[test]
    fn readout_beats_chance() {
        let data = Dataset::synthetic(0, 10, 40, 32).unwrap();
        let net = trained_tinynet(&data, 0).unwrap();
        let acc = accuracy(&net, &data, &data.indices(crate::dataset::VALID)).unwrap();
        assert!(acc > 0.3, "validation accuracy {acc}");
    }
}
