//! Guided activation masking and the accuracy-feature matching tables.

use std::fmt::Write as _;

use ndarray::{Array3, ArrayD, Ix3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{Image, ParamDist, Transform, TransformKind};
use crate::convnet::{predict_topk, Network};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::SensitivityMap;
use crate::numeric::{quantile_nearest_rank, spearman};
use crate::rng::{stream, Streams};

pub const STUDY_ALPHAS: [f64; 3] = [0.0, 0.5, 1.5];
pub const STUDY_QUANTILES: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum MaskMode {
    Raw,
    Inverted,
    Threshold { alpha: f64, q: f64 },
}

impl MaskMode {
    pub fn name(&self) -> String {
        match self {
            MaskMode::Raw => "raw".into(),
            MaskMode::Inverted => "inverted".into(),
            MaskMode::Threshold { alpha, q } => format!("thr_a{alpha}_q{q}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let MaskMode::Threshold { alpha, q } = *self {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::Domain(format!("quantile {q} outside (0, 1)")));
            }
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::Domain(format!("gain {alpha} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Raw, inverted, then every (α, q) threshold pair: 17 variants.
    pub fn study_grid() -> Vec<MaskMode> {
        let mut grid = vec![MaskMode::Raw, MaskMode::Inverted];
        for &alpha in &STUDY_ALPHAS {
            for &q in &STUDY_QUANTILES {
                grid.push(MaskMode::Threshold { alpha, q });
            }
        }
        grid
    }
}

/// Mask values for one checkpoint from normalized sensitivity values.
///
/// Thresholding scales entries strictly above the checkpoint's nearest-rank
/// `q`-quantile by `alpha` and leaves the rest untouched.
pub fn build_mask(values: &ArrayD<f64>, mode: MaskMode) -> Result<ArrayD<f64>> {
    mode.validate()?;
    Ok(match mode {
        MaskMode::Raw => values.clone(),
        MaskMode::Inverted => values.mapv(|v| 1.0 - v),
        MaskMode::Threshold { alpha, q } => {
            if values.is_empty() {
                return Ok(values.clone());
            }
            let mut sorted: Vec<f64> = values.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let cut = quantile_nearest_rank(&sorted, q);
            values.mapv(|v| if v > cut { alpha * v } else { v })
        }
    })
}

/// Masks keyed by checkpoint, applied multiplicatively during inference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    pub masks: Vec<(String, Array3<f32>)>,
}

impl MaskSet {
    /// One mask per map (each map belongs to a different checkpoint).
    pub fn from_maps(net: &Network, maps: &[&SensitivityMap], mode: MaskMode) -> Result<Self> {
        let mut masks = Vec::with_capacity(maps.len());
        for map in maps {
            check_maskable(net, &map.checkpoint)?;
            let m = build_mask(&map.normalized(), mode)?;
            let m = m
                .mapv(|v| v as f32)
                .into_dimensionality::<Ix3>()
                .map_err(|_| Error::Shape(format!("map at `{}` is not a C×H×W tensor", map.checkpoint)))?;
            masks.push((map.checkpoint.clone(), m));
        }
        Ok(Self { masks })
    }

    pub fn ones(net: &Network, checkpoints: &[&str]) -> Result<Self> {
        let masks = checkpoints
            .iter()
            .map(|&c| {
                check_maskable(net, c)?;
                Ok((c.to_string(), Array3::ones(net.checkpoint_shape(c)?)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { masks })
    }
}

fn check_maskable(net: &Network, checkpoint: &str) -> Result<()> {
    let ck = net
        .checkpoint(checkpoint)
        .ok_or_else(|| Error::UnknownCheckpoint(checkpoint.into()))?;
    if ck.layer + 1 == net.layers().len() {
        return Err(Error::InvalidArgument(format!("classifying checkpoint `{checkpoint}` cannot be masked")));
    }
    Ok(())
}

/// Forward pass with activations multiplied elementwise by the masks.
pub fn masked_forward(net: &Network, x: &Array3<f32>, masks: &MaskSet) -> Result<ndarray::Array1<f32>> {
    net.forward_with_hook(x, &mut |name, t| {
        for (ck, m) in &masks.masks {
            if ck == name {
                if m.dim() != t.dim() {
                    return Err(Error::Shape(format!("mask {:?} vs activation {:?} at `{name}`", m.dim(), t.dim())));
                }
                *t *= m;
            }
        }
        Ok(())
    })
}

fn top1(net: &Network, x: &Array3<f32>, masks: &MaskSet) -> Result<usize> {
    let logits = masked_forward(net, x, masks)?;
    Ok(predict_topk(logits.as_slice().expect("contiguous"), 1)?[0])
}

/// Number of inputs whose top-1 prediction differs between `a` and `b`.
pub fn changed_predictions(net: &Network, inputs: &[Array3<f32>], a: &MaskSet, b: &MaskSet) -> Result<usize> {
    let flips = inputs
        .par_iter()
        .map(|x| Ok(usize::from(top1(net, x, a)? != top1(net, x, b)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(flips.into_iter().sum())
}

/// An input condition: the original images, or one augmentation with
/// parameters drawn from its sampling support (flags forced on).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    None,
    Augment(TransformKind),
}

impl Condition {
    pub fn name(&self) -> &'static str {
        match self {
            Condition::None => "none",
            Condition::Augment(k) => k.name(),
        }
    }

    /// Draws per image for this condition.
    pub fn draws(&self, repeats: usize) -> usize {
        match self {
            Condition::None => 1,
            Condition::Augment(_) => repeats.max(1),
        }
    }
}

/// Samples an active instance of `kind` from its support.
pub fn draw_transform(kind: TransformKind, rng: &mut impl Rng, height: usize, width: usize) -> Result<Transform> {
    let values: Vec<f64> = kind
        .params(height, width)
        .iter()
        .map(|p| match p.dist {
            ParamDist::Continuous { lo, hi } => lo + rng.random::<f64>() * (hi - lo),
            ParamDist::Discrete { lo, hi } => rng.random_range(lo..=hi) as f64,
            ParamDist::Flag => 1.0,
        })
        .collect();
    kind.build(&values)
}

/// Network inputs for a condition: `draws` per image, image-major.
pub fn condition_inputs(data: &Dataset, images: &[usize], cond: Condition, repeats: usize, seed: u64) -> Result<Vec<Array3<f32>>> {
    let streams = Streams::new(seed);
    let draws = cond.draws(repeats);
    let jobs: Vec<(usize, usize)> = images.iter().flat_map(|&i| (0..draws).map(move |r| (i, r))).collect();
    jobs.par_iter()
        .map(|&(i, r)| {
            let img: &Image = data.image(i);
            match cond {
                Condition::None => Ok(img.data().clone()),
                Condition::Augment(kind) => {
                    let ordinal = TransformKind::ALL.iter().position(|&k| k == kind).expect("known kind") as u64;
                    let mut rng = streams.at(stream::CONDITIONS, (ordinal << 40) | ((i as u64) << 8) | r as u64);
                    let t = draw_transform(kind, &mut rng, img.height(), img.width())?;
                    Ok(t.apply(img)?.into_data())
                }
            }
        })
        .collect()
}

/// Top-1 accuracies over a mask grid for one (condition, mask variable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedRunReport {
    pub condition: String,
    pub mask_variable: String,
    pub cells: Vec<(String, f64)>,
}

impl MaskedRunReport {
    pub fn features(&self) -> Vec<f64> {
        self.cells.iter().map(|(_, a)| *a).collect()
    }
}

/// Sensitivity maps of one SA variable at the masked checkpoints.
#[derive(Debug, Clone)]
pub struct MaskVariable<'a> {
    pub name: String,
    pub maps: Vec<&'a SensitivityMap>,
}

/// One report per (condition, mask variable), condition-major.
pub fn accuracy_features(
    net: &Network,
    data: &Dataset,
    images: &[usize],
    variables: &[MaskVariable],
    conditions: &[Condition],
    grid: &[MaskMode],
    repeats: usize,
    seed: u64,
) -> Result<Vec<MaskedRunReport>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mask_sets: Vec<Vec<MaskSet>> = variables
        .iter()
        .map(|v| grid.iter().map(|&m| MaskSet::from_maps(net, &v.maps, m)).collect())
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(conditions.len() * variables.len());
    for &cond in conditions {
        let inputs = condition_inputs(data, images, cond, repeats, seed)?;
        let labels: Vec<usize> = images
            .iter()
            .flat_map(|&i| std::iter::repeat_n(data.label(i), cond.draws(repeats)))
            .collect();
        for (v, sets) in variables.iter().zip(&mask_sets) {
            let cells = grid
                .iter()
                .zip(sets)
                .map(|(mode, set)| {
                    let hits = inputs
                        .par_iter()
                        .zip(&labels)
                        .map(|(x, &y)| Ok(usize::from(top1(net, x, set)? == y)))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .sum::<usize>();
                    Ok((mode.name(), hits as f64 / inputs.len() as f64))
                })
                .collect::<Result<Vec<_>>>()?;
            log::debug!("accuracy features: condition {} / variable {}", cond.name(), v.name);
            reports.push(MaskedRunReport {
                condition: cond.name().into(),
                mask_variable: v.name.clone(),
                cells,
            });
        }
    }
    Ok(reports)
}

/// Unmasked top-1 accuracy per condition.
pub fn baseline_accuracy(
    net: &Network,
    data: &Dataset,
    images: &[usize],
    conditions: &[Condition],
    repeats: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let none = MaskSet { masks: Vec::new() };
    conditions
        .iter()
        .map(|&cond| {
            let inputs = condition_inputs(data, images, cond, repeats, seed)?;
            let draws = cond.draws(repeats);
            let hits = inputs
                .par_iter()
                .enumerate()
                .map(|(j, x)| Ok(usize::from(top1(net, x, &none)? == data.label(images[j / draws]))))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            Ok((cond.name().to_string(), hits as f64 / inputs.len() as f64))
        })
        .collect()
}

/// A rectangular table with explicit undefined cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl LabeledMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<Option<f64>> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(self.values[r][c])
    }

    /// CSV with a leading label column; undefined cells read `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.values) {
            out.push_str(r);
            for v in row {
                match v {
                    Some(x) => write!(out, ",{x:.17e}").expect("string write"),
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Spearman correlation between the accuracy features of (none, v) and
/// (row augmentation, v) for every augmentation row and mask variable `v`.
pub fn match_correlation(reports: &[MaskedRunReport]) -> Result<LabeledMatrix> {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    for r in reports {
        if r.condition != "none" && !rows.contains(&r.condition) {
            rows.push(r.condition.clone());
        }
        if !cols.contains(&r.mask_variable) {
            cols.push(r.mask_variable.clone());
        }
    }
    let find = |cond: &str, var: &str| {
        reports
            .iter()
            .find(|r| r.condition == cond && r.mask_variable == var)
            .ok_or_else(|| Error::InvalidArgument(format!("missing report ({cond}, {var})")))
    };
    let mut values = Vec::with_capacity(rows.len());
    for row in &rows {
        let mut line = Vec::with_capacity(cols.len());
        for col in &cols {
            let base = find("none", col)?;
            let aug = find(row, col)?;
            if base.cells.len() != aug.cells.len() {
                return Err(Error::InvalidArgument(format!("incomplete grid for ({row}, {col})")));
            }
            line.push(spearman(&base.features(), &aug.features()));
        }
        values.push(line);
    }
    Ok(LabeledMatrix { rows, cols, values })
}

/// Reports as CSV: one row per (condition, variable), one column per cell.
pub fn reports_to_csv(reports: &[MaskedRunReport]) -> String {
    let mut out = String::from("condition,mask_variable");
    if let Some(first) = reports.first() {
        for (name, _) in &first.cells {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for r in reports {
        write!(out, "{},{}", r.condition, r.mask_variable).expect("string write");
        for (_, a) in &r.cells {
            write!(out, ",{a:.17e}").expect("string write");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::tinynet_a;
    use crate::estimators::SensitivityKind;
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::Rng;

    fn map(checkpoint: &str, values: ArrayD<f64>) -> SensitivityMap {
        let shape = values.shape().to_vec();
        SensitivityMap {
            checkpoint: checkpoint.into(),
            kind: SensitivityKind::SobolFirst,
            group: "g".into(),
            total_variance: ArrayD::ones(IxDyn(&shape)),
            dead: ArrayD::from_elem(IxDyn(&shape), false),
            values,
        }
    }

    #[test]
    fn grid_has_seventeen_variants() {
        let g = MaskMode::study_grid();
        assert_eq!(g.len(), 17);
        let mut names: Vec<String> = g.iter().map(MaskMode::name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 17);
    }

    #[test]
    fn quantile_domain() {
        let v = ArrayD::zeros(IxDyn(&[4]));
        for q in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(build_mask(&v, MaskMode::Threshold { alpha: 1.0, q }), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn threshold_example() {
        let v = ArrayD::from_shape_vec(IxDyn(&[5]), vec![0.1, 0.5, 0.2, 0.9, 0.3]).unwrap();
        let m = build_mask(&v, MaskMode::Threshold { alpha: 0.0, q: 0.6 }).unwrap();
        assert_eq!(m.as_slice().unwrap(), &[0.1, 0.0, 0.2, 0.0, 0.3]);
    }

    proptest! {
        #[test]
        fn unit_gain_is_raw_and_low_entries_untouched(
            vals in proptest::collection::vec(0.0f64..1.0, 1..64),
            alpha in 0.0f64..3.0,
            qi in 0usize..5,
        ) {
            let q = STUDY_QUANTILES[qi];
            let v = ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.clone()).unwrap();
            let unit = build_mask(&v, MaskMode::Threshold { alpha: 1.0, q }).unwrap();
            prop_assert_eq!(&unit, &build_mask(&v, MaskMode::Raw).unwrap());
            let m = build_mask(&v, MaskMode::Threshold { alpha, q }).unwrap();
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            let cut = quantile_nearest_rank(&sorted, q);
            for (a, b) in v.iter().zip(m.iter()) {
                if *a <= cut {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            let inv = build_mask(&build_mask(&v, MaskMode::Inverted).unwrap(), MaskMode::Inverted).unwrap();
            for (a, b) in v.iter().zip(inv.iter()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ones_masks_are_bit_exact() {
        let net = tinynet_a(10, 3).unwrap();
        let mut rng = Streams::new(0).at(0, 0);
        let x = Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f32>());
        let ones = MaskSet::ones(&net, &["c1", "c2", "c3", "pool"]).unwrap();
        let a = masked_forward(&net, &x, &ones).unwrap();
        let b = net.forward(&x).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn zero_mask_at_first_checkpoint_gives_constant_downstream() {
        let net = tinynet_a(10, 3).unwrap();
        let mut zero = MaskSet::ones(&net, &["c1"]).unwrap();
        zero.masks[0].1.fill(0.0);
        let mut rng = Streams::new(1).at(0, 0);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let x = Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f32>());
            let mut c2 = None;
            net.forward_with_hook(&x, &mut |name, t| {
                if name == "c1" {
                    *t *= &zero.masks[0].1;
                }
                if name == "c2" {
                    c2 = Some(t.clone());
                }
                Ok(())
            })
            .unwrap();
            outs.push(c2.unwrap());
        }
        assert_eq!(outs[0], outs[1]);
        let expected = net.run_segment("c1", "c2", &Array3::zeros((8, 32, 32))).unwrap();
        assert_eq!(outs[0], expected);
    }

    #[test]
    fn mask_errors() {
        let net = tinynet_a(10, 0).unwrap();
        let bad = map("c1", ArrayD::zeros(IxDyn(&[8, 4, 4])));
        let set = MaskSet::from_maps(&net, &[&bad], MaskMode::Raw).unwrap();
        assert!(matches!(masked_forward(&net, &Array3::zeros((3, 32, 32)), &set), Err(Error::Shape(_))));
        let logits = map("logits", ArrayD::zeros(IxDyn(&[10, 1, 1])));
        assert!(MaskSet::from_maps(&net, &[&logits], MaskMode::Raw).is_err());
    }

    #[test]
    fn match_correlation_examples() {
        let rep = |c: &str, v: &str, f: &[f64]| MaskedRunReport {
            condition: c.into(),
            mask_variable: v.into(),
            cells: f.iter().enumerate().map(|(i, &a)| (i.to_string(), a)).collect(),
        };
        let reports = vec![
            rep("none", "x", &[0.1, 0.2, 0.3]),
            rep("none", "y", &[0.1, 0.2, 0.3]),
            rep("erase", "x", &[0.2, 0.4, 0.6]),
            rep("erase", "y", &[0.3, 0.2, 0.1]),
            rep("hflip", "x", &[0.5, 0.5, 0.5]),
            rep("hflip", "y", &[0.1, 0.2, 0.3]),
        ];
        let m = match_correlation(&reports).unwrap();
        assert_eq!(m.rows, ["erase", "hflip"]);
        assert!((m.get("erase", "x").unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((m.get("erase", "y").unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.get("hflip", "x"), Some(None));
        assert!(m.to_csv().contains(",NA"));
        assert!(match_correlation(&reports[1..]).is_err());
    }

    fn desk_and_maps() -> (Dataset, Network, Vec<SensitivityMap>) {
        use crate::inputspace::{saltelli_plan, InputSpaceModel};
        use crate::pipeline::{trained_tinynet, Evaluator, Probe};
        let data = Dataset::synthetic(0, 10, 40, 32).unwrap();
        let net = trained_tinynet(&data, 0).unwrap();
        let space = InputSpaceModel::for_set(crate::augment::AugmentationSet::A1, 10, 32, 32).unwrap();
        let plan = saltelli_plan(&space, 8, 0).unwrap();
        let probe = Probe::Checkpoints(vec!["c1".into(), "c2".into(), "c3".into(), "pool".into()]);
        let est = Evaluator::new(&net, &data, &probe).unwrap().estimate_streaming(&plan, 8).unwrap();
        let maps = est
            .iter()
            .flat_map(|e| e.maps(&space.group_names()))
            .filter(|m| m.kind == SensitivityKind::SobolFirst && m.group == "erase")
            .collect();
        (data, net, maps)
    }

    #[test]
    fn identity_masks_reproduce_baseline_and_damage_is_monotone() {
        let (data, net, maps) = desk_and_maps();
        let images: Vec<usize> = data.indices(crate::dataset::VALID).into_iter().take(200).collect();
        let base = baseline_accuracy(&net, &data, &images, &[Condition::None], 3, 0).unwrap();
        assert_eq!(base[0].1, crate::pipeline::accuracy(&net, &data, &images).unwrap());

        let ones: Vec<SensitivityMap> = maps.iter().map(|m| map(&m.checkpoint, m.values.mapv(|_| 1.0))).collect();
        let var = MaskVariable {
            name: "ones".into(),
            maps: ones.iter().collect(),
        };
        let rep = accuracy_features(&net, &data, &images, &[var], &[Condition::None], &[MaskMode::Raw], 3, 0).unwrap();
        assert_eq!(rep[0].cells[0].1, base[0].1);

        let inputs: Vec<Array3<f32>> = images.iter().map(|&i| data.image(i).data().clone()).collect();
        let refs: Vec<&SensitivityMap> = maps.iter().collect();
        let unmasked = MaskSet { masks: Vec::new() };
        let mut last = 0;
        for &q in STUDY_QUANTILES.iter().rev() {
            let set = MaskSet::from_maps(&net, &refs, MaskMode::Threshold { alpha: 0.0, q }).unwrap();
            let changed = changed_predictions(&net, &inputs, &unmasked, &set).unwrap();
            if q == 0.9 {
                assert!(changed > 0);
            }
            assert!(changed >= last, "q = {q}: {changed} < {last}");
            last = changed;
        }
    }

    #[test]
    fn condition_draws_are_deterministic() {
        let data = Dataset::synthetic(0, 2, 4, 32).unwrap();
        let a = condition_inputs(&data, &[0, 1], Condition::Augment(TransformKind::Rolling), 3, 7).unwrap();
        let b = condition_inputs(&data, &[0, 1], Condition::Augment(TransformKind::Rolling), 3, 7).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_eq!(condition_inputs(&data, &[0, 1], Condition::None, 3, 7).unwrap().len(), 2);
    }
}
