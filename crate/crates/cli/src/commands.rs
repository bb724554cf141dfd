//! One function per subcommand.
//!
//! Each stage's key hashes the parameters it depends on together with the
//! keys of its upstream stages, so a finished stage is reused as is and a
//! changed parameter invalidates exactly the stages downstream of it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use augsens_core::augment::{AugmentationSet, Image, TransformKind};
use augsens_core::classsense::{bias_report, jaccard_reports_to_csv, mc_threshold, topk_sensitive, JaccardReport};
use augsens_core::convnet::tinynet_a;
use augsens_core::dataset::{Dataset, VALID};
use augsens_core::estimators::{SensitivityKind, SensitivityMap, DEAD_ABS, DEAD_REL};
use augsens_core::inputspace::{saltelli_plan, shapley_plan, Design, InputSpaceModel, SamplePlan};
use augsens_core::maskeval::{
    accuracy_features, baseline_accuracy, match_correlation, reports_to_csv, Condition, LabeledMatrix, MaskMode, MaskSet,
    MaskVariable,
};
use augsens_core::numeric::spearman;
use augsens_core::pipeline::{render, trained_tinynet, Estimate, Evaluator, HsvChannel, Indices, Probe, Segment, CHUNK_BLOCKS};
use augsens_core::statan::{
    average_linkage, corr_to_distance, cross_correlation, lda_confusion, spatial_corr_map, variable_correlation, CorrelationMatrix,
};
use augsens_core::{Container, Network};
use ndarray::{s, Array2, Array4, ArrayD, IxDyn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, PlanConfig};
use crate::error::{CliError, IoContext, Result};
use crate::store::{sha256_hex, stage_key, Manifest, StageWriter, Store, SCHEMA_VERSION};

pub const PLAN: &str = "plan";
pub const SAMPLE: &str = "sample";
pub const INFER: &str = "infer";
pub const ESTIMATE: &str = "estimate";
pub const MASK_EVAL: &str = "mask-eval";
pub const CLASS_SENSE: &str = "class-sense";
pub const SEGMENT: &str = "segment";
pub const REPORT: &str = "report";

/// Every stage in dependency order.
pub const STAGES: [&str; 8] = [PLAN, SAMPLE, INFER, ESTIMATE, MASK_EVAL, CLASS_SENSE, SEGMENT, REPORT];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stage: &'static str,
    pub key: String,
    pub dir: PathBuf,
    /// The stage had already been completed and was left untouched.
    pub reused: bool,
}

/// An emitted table and the layout it mirrors.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct Table {
    file: String,
    layout: &'static str,
    description: String,
}

/// Everything the later stages need from the plan stage.
struct Inputs {
    data: Dataset,
    net: Network,
    plan: SamplePlan,
}

/// Loaded estimate-stage maps.
struct Maps {
    maps: Vec<SensitivityMap>,
    /// Per checkpoint: mean (Sobol designs only) and variance.
    moments: BTreeMap<String, (Option<ArrayD<f64>>, ArrayD<f64>)>,
}

impl Maps {
    fn get(&self, checkpoint: &str, kind: SensitivityKind, group: &str) -> Option<&SensitivityMap> {
        self.maps
            .iter()
            .find(|m| m.checkpoint == checkpoint && m.kind == kind && m.group == group)
    }

    fn kinds(&self) -> Vec<SensitivityKind> {
        let mut k: Vec<SensitivityKind> = self.maps.iter().map(|m| m.kind).collect();
        k.sort();
        k.dedup();
        k
    }

    fn at(&self, checkpoint: &str, kind: SensitivityKind) -> Vec<&SensitivityMap> {
        self.maps.iter().filter(|m| m.checkpoint == checkpoint && m.kind == kind).collect()
    }
}

pub struct Session {
    cfg: ExperimentConfig,
    store: Store,
}

impl Session {
    pub fn new(cfg: ExperimentConfig, store: Store) -> Self {
        Self { cfg, store }
    }

    /// A session writing to the config's store root.
    pub fn from_config(cfg: ExperimentConfig) -> Self {
        let store = Store::new(cfg.store_root());
        Self { cfg, store }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn run(&self, stage: &str) -> Result<Outcome> {
        match stage {
            PLAN => self.plan(),
            SAMPLE => self.sample(),
            INFER => self.infer(),
            ESTIMATE => self.estimate(),
            MASK_EVAL => self.mask_eval(),
            CLASS_SENSE => self.class_sense(),
            SEGMENT => self.segment(),
            REPORT => self.report(),
            other => Err(CliError::Config(format!("unknown stage `{other}`"))),
        }
    }

    // ----- keys -----

    fn file_digest(path: &Option<PathBuf>) -> Result<Value> {
        Ok(match path {
            Some(p) => Value::String(sha256_hex(&std::fs::read(p).at(p)?)),
            None => Value::Null,
        })
    }

    /// `(key, upstream)` of a stage, derived from the config alone.
    fn key(&self, stage: &str) -> Result<(String, BTreeMap<String, String>)> {
        let c = &self.cfg;
        let mut up = BTreeMap::new();
        let params = match stage {
            PLAN => json!({
                "dataset": Self::file_digest(&c.dataset)?,
                "network": Self::file_digest(&c.network)?,
                "augmentation_set": c.augmentation_set,
                "scheme": c.scheme,
                "switch_probability": c.switch_probability,
                "plan": c.plan,
                "seed": c.seed,
            }),
            SAMPLE => {
                up.insert(PLAN.into(), self.key(PLAN)?.0);
                json!({ "persist": c.persist_activations })
            }
            INFER => {
                up.insert(SAMPLE.into(), self.key(SAMPLE)?.0);
                json!({ "checkpoints": c.checkpoints })
            }
            ESTIMATE => {
                up.insert(INFER.into(), self.key(INFER)?.0);
                json!({ "dead_abs": DEAD_ABS, "dead_rel": DEAD_REL })
            }
            MASK_EVAL => {
                up.insert(ESTIMATE.into(), self.key(ESTIMATE)?.0);
                json!({ "mask": c.mask })
            }
            CLASS_SENSE => {
                up.insert(ESTIMATE.into(), self.key(ESTIMATE)?.0);
                json!({ "class_sense": c.class_sense, "mask_checkpoints": c.mask.checkpoints })
            }
            SEGMENT => {
                up.insert(ESTIMATE.into(), self.key(ESTIMATE)?.0);
                json!({ "segment": c.segment })
            }
            REPORT => {
                up.insert(ESTIMATE.into(), self.key(ESTIMATE)?.0);
                for optional in [MASK_EVAL, CLASS_SENSE, SEGMENT] {
                    let (k, _) = self.key(optional)?;
                    if self.store.completed(optional, &k)?.is_some() {
                        up.insert(optional.into(), k);
                    }
                }
                json!({ "report": c.report })
            }
            other => return Err(CliError::Config(format!("unknown stage `{other}`"))),
        };
        Ok((stage_key(stage, &params, &up), up))
    }

    /// The manifest of a completed upstream stage, or a dependency error.
    fn require(&self, stage: &'static str, needs: &'static str) -> Result<Manifest> {
        let (key, _) = self.key(needs)?;
        self.store.completed(needs, &key)?.ok_or(CliError::MissingStage { stage, needs })
    }

    fn run_stage(
        &self,
        stage: &'static str,
        build: impl FnOnce(&mut StageWriter) -> Result<Value>,
    ) -> Result<Outcome> {
        let (key, upstream) = self.key(stage)?;
        let dir = self.store.stage_dir(stage, &key);
        if self.store.completed(stage, &key)?.is_some() {
            log::info!("{stage}: reusing {}", dir.display());
            return Ok(Outcome {
                stage,
                key,
                dir,
                reused: true,
            });
        }
        let mut w = self.store.begin(stage, &key, self.cfg.seed, upstream)?;
        let info = build(&mut w)?;
        w.commit(info)?;
        log::info!("{stage}: wrote {}", dir.display());
        Ok(Outcome {
            stage,
            key,
            dir,
            reused: false,
        })
    }

    // ----- shared loading -----

    fn space(&self, data: &Dataset) -> Result<InputSpaceModel> {
        let (_, h, w) = data.image_shape();
        let set = self.cfg.augmentation_set;
        let mut space =
            InputSpaceModel::augmentation(set.transforms(), data.class_count(), h, w, self.cfg.scheme, self.cfg.switch_probability)?;
        space.apply_transforms = set.applies_transforms();
        Ok(space)
    }

    fn fresh_network(&self, data: &Dataset) -> Result<Network> {
        Ok(match &self.cfg.network {
            None => trained_tinynet(data, self.cfg.seed)?,
            Some(p) => {
                let mut net = tinynet_a(data.label_count(), self.cfg.seed)?;
                net.load_weights(p)?;
                net
            }
        })
    }

    fn load_inputs(&self, m: &Manifest) -> Result<Inputs> {
        let data = Dataset::from_container(&self.store.read_container(m, "dataset.aswt")?)?;
        let mut net = tinynet_a(data.label_count(), self.cfg.seed)?;
        net.load_container(&self.store.read_container(m, "network.aswt")?)?;
        let rows = self.store.read_container(m, "plan.aswt")?.f64("rows")?;
        let rows: Array2<f64> = rows.into_dimensionality().map_err(|e| augsens_core::Error::Shape(e.to_string()))?;
        let design: Design = serde_json::from_value(m.info["design"].clone())?;
        let budget = rows.nrows();
        let plan = SamplePlan {
            space: self.space(&data)?,
            design,
            rows,
            seed: self.cfg.seed,
            budget,
        };
        Ok(Inputs { data, net, plan })
    }

    fn plan_inputs(&self, stage: &'static str) -> Result<Inputs> {
        let m = self.require(stage, PLAN)?;
        self.load_inputs(&m)
    }

    fn load_maps(&self, m: &Manifest) -> Result<Maps> {
        let c = self.store.read_container(m, "maps.aswt")?;
        let mut moments = BTreeMap::new();
        let mut dead = BTreeMap::new();
        for ck in &self.cfg.checkpoints {
            let mean = c.f64(&format!("{ck}/mean")).ok();
            moments.insert(ck.clone(), (mean, c.f64(&format!("{ck}/variance"))?));
            dead.insert(ck.clone(), c.f32(&format!("{ck}/dead"))?.mapv(|v| v != 0.0));
        }
        let mut maps = Vec::new();
        for name in c.names() {
            let parts: Vec<&str> = name.split('/').collect();
            let [ck, kind, group] = parts[..] else { continue };
            let (_, variance) = &moments[ck];
            maps.push(SensitivityMap {
                checkpoint: ck.into(),
                kind: SensitivityKind::parse(kind)?,
                group: group.into(),
                values: c.f64(name)?,
                total_variance: variance.clone(),
                dead: dead[ck].clone(),
            });
        }
        Ok(Maps { maps, moments })
    }

    fn transform_groups(&self) -> Vec<String> {
        self.cfg.augmentation_set.transforms().iter().map(|k| k.name().to_string()).collect()
    }

    /// Masked checkpoints: configured, or every estimated one but the last.
    fn mask_checkpoints(&self, net: &Network) -> Result<Vec<String>> {
        let classifying = net.checkpoint_names().last().cloned().unwrap_or_default();
        let list = match &self.cfg.mask.checkpoints {
            Some(l) => l.clone(),
            None => self.cfg.checkpoints.iter().filter(|c| **c != classifying).cloned().collect(),
        };
        if list.is_empty() {
            return Err(CliError::Config("no maskable checkpoint configured".into()));
        }
        if let Some(c) = list.iter().find(|c| !self.cfg.checkpoints.contains(c)) {
            return Err(CliError::Config(format!("mask checkpoint `{c}` has no estimated maps")));
        }
        Ok(list)
    }

    fn resolve_kinds(&self, requested: &[SensitivityKind], maps: &Maps) -> Result<Vec<SensitivityKind>> {
        let available = maps.kinds();
        if requested.is_empty() {
            return Ok(available);
        }
        if let Some(k) = requested.iter().find(|k| !available.contains(k)) {
            return Err(CliError::Config(format!("no `{}` maps were estimated", k.name())));
        }
        Ok(requested.to_vec())
    }

    fn mask_variable<'a>(&self, maps: &'a Maps, checkpoints: &[String], kind: SensitivityKind, group: &str) -> Result<MaskVariable<'a>> {
        let list = checkpoints
            .iter()
            .map(|ck| {
                maps.get(ck, kind, group)
                    .ok_or_else(|| CliError::Config(format!("missing {} map for `{group}` at `{ck}`", kind.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskVariable {
            name: group.into(),
            maps: list,
        })
    }

    // ----- stages -----

    pub fn plan(&self) -> Result<Outcome> {
        self.run_stage(PLAN, |w| {
            let data = match &self.cfg.dataset {
                None => Dataset::desk(self.cfg.seed)?,
                Some(p) => Dataset::from_container(&Container::load(p)?)?,
            };
            let net = self.fresh_network(&data)?;
            let space = self.space(&data)?;
            let plan = match self.cfg.plan {
                PlanConfig::Saltelli { n_base } => saltelli_plan(&space, n_base, self.cfg.seed)?,
                PlanConfig::Shapley { n_perm, n_outer, n_inner } => shapley_plan(&space, n_perm, n_outer, n_inner, self.cfg.seed)?,
            };
            for ck in &self.cfg.checkpoints {
                net.checkpoint_shape(ck)?;
            }
            let valid = data.indices(VALID);
            let acc = augsens_core::pipeline::accuracy(&net, &data, &valid)?;
            w.write_container("dataset.aswt", &data.to_container())?;
            w.write_container("network.aswt", &net.to_container())?;
            let mut c = Container::new();
            c.insert_f64("rows", plan.rows.clone().into_dyn());
            w.write_container("plan.aswt", &c)?;
            Ok(json!({
                "design": plan.design,
                "budget": plan.budget,
                "dim": space.dim(),
                "groups": space.group_names(),
                "images": data.len(),
                "label_count": data.label_count(),
                "validation_accuracy": acc,
            }))
        })
    }

    pub fn sample(&self) -> Result<Outcome> {
        let plan_m = self.require(SAMPLE, PLAN)?;
        self.run_stage(SAMPLE, |w| {
            if !self.cfg.persist_activations {
                return Ok(json!({ "persisted": false }));
            }
            let inp = self.load_inputs(&plan_m)?;
            let (ch, h, wd) = inp.data.image_shape();
            let chunks = chunk_ranges(&inp.plan);
            for (k, &(start, end)) in chunks.iter().enumerate() {
                let rendered: Vec<(usize, Image)> = (start..end)
                    .into_par_iter()
                    .map(|i| Ok(render(&inp.data, &inp.plan.realization(i)?)?))
                    .collect::<Result<_>>()?;
                let mut images = Array4::<f32>::zeros((end - start, ch, h, wd));
                for (r, (_, img)) in rendered.iter().enumerate() {
                    images.slice_mut(s![r, .., .., ..]).assign(img.data());
                }
                let ids = ndarray::Array1::from_iter(rendered.iter().map(|(id, _)| *id as f64));
                let mut c = Container::new();
                c.insert_f32("images", images.into_dyn());
                c.insert_f64("ids", ids.into_dyn());
                w.write_container(&chunk_name("samples", k), &c)?;
            }
            Ok(json!({ "persisted": true, "chunks": chunks.len(), "rows": inp.plan.len() }))
        })
    }

    pub fn infer(&self) -> Result<Outcome> {
        let sample_m = self.require(INFER, SAMPLE)?;
        self.run_stage(INFER, |w| {
            let inp = self.plan_inputs(INFER)?;
            let probe = Probe::Checkpoints(self.cfg.checkpoints.clone());
            let ev = Evaluator::new(&inp.net, &inp.data, &probe)?;
            let shapes: Vec<Vec<usize>> = ev.output_shapes()?.iter().map(|&(c, h, w)| vec![c, h, w]).collect();
            if !self.cfg.persist_activations {
                return Ok(json!({ "persisted": false, "checkpoints": self.cfg.checkpoints, "shapes": shapes }));
            }
            let chunks = chunk_ranges(&inp.plan);
            for k in 0..chunks.len() {
                let c = self.store.read_container(&sample_m, &chunk_name("samples", k))?;
                let images = c.f32("images")?;
                let outs: Vec<Vec<Vec<f64>>> = (0..images.shape()[0])
                    .into_par_iter()
                    .map(|r| {
                        let a = images.index_axis(ndarray::Axis(0), r).to_owned().into_dimensionality()
                            .map_err(|e| augsens_core::Error::Shape(e.to_string()))?;
                        Ok(ev.evaluate_image(&Image::rgb(a)?)?)
                    })
                    .collect::<Result<_>>()?;
                let mut out = Container::new();
                for (j, ck) in self.cfg.checkpoints.iter().enumerate() {
                    let units = outs.first().map_or(0, |o| o[j].len());
                    let m = Array2::from_shape_fn((outs.len(), units), |(r, u)| outs[r][j][u] as f32);
                    out.insert_f32(ck.as_str(), m.into_dyn());
                }
                w.write_container(&chunk_name("activations", k), &out)?;
            }
            Ok(json!({ "persisted": true, "chunks": chunks.len(), "checkpoints": self.cfg.checkpoints, "shapes": shapes }))
        })
    }

    pub fn estimate(&self) -> Result<Outcome> {
        let infer_m = self.require(ESTIMATE, INFER)?;
        self.run_stage(ESTIMATE, |w| {
            let inp = self.plan_inputs(ESTIMATE)?;
            let probe = Probe::Checkpoints(self.cfg.checkpoints.clone());
            let ev = Evaluator::new(&inp.net, &inp.data, &probe)?;
            let estimates = if self.cfg.persist_activations {
                let mut b = ev.builder(&inp.plan)?;
                for k in 0..chunk_ranges(&inp.plan).len() {
                    let c = self.store.read_container(&infer_m, &chunk_name("activations", k))?;
                    let outs = self
                        .cfg
                        .checkpoints
                        .iter()
                        .map(|ck| {
                            let a = c.f32(ck)?.mapv(f64::from);
                            Ok(a.into_dimensionality().map_err(|e| augsens_core::Error::Shape(e.to_string()))?)
                        })
                        .collect::<Result<Vec<Array2<f64>>>>()?;
                    b.push_rows(&outs)?;
                }
                b.finish()?
            } else {
                ev.estimate_streaming(&inp.plan, CHUNK_BLOCKS)?
            };
            let groups = inp.plan.space.group_names();
            let mut c = Container::new();
            let mut per_ck = Vec::new();
            for e in &estimates {
                write_estimate(&mut c, "", e, &groups);
                per_ck.push(estimate_info(e, &groups));
            }
            w.write_container("maps.aswt", &c)?;
            Ok(json!({
                "seed": self.cfg.seed,
                "budget": inp.plan.budget,
                "design": inp.plan.design,
                "groups": groups,
                "tolerances": { "dead_abs": DEAD_ABS, "dead_rel": DEAD_REL },
                "checkpoints": per_ck,
            }))
        })
    }

    pub fn mask_eval(&self) -> Result<Outcome> {
        let est_m = self.require(MASK_EVAL, ESTIMATE)?;
        self.run_stage(MASK_EVAL, |w| {
            let inp = self.plan_inputs(MASK_EVAL)?;
            let maps = self.load_maps(&est_m)?;
            let mc = &self.cfg.mask;
            let checkpoints = self.mask_checkpoints(&inp.net)?;
            let kinds = self.resolve_kinds(&mc.kinds, &maps)?;
            let images = eval_images(&inp.data, mc.images_per_class)?;
            let conditions = conditions(self.cfg.augmentation_set);
            let grid = MaskMode::study_grid();
            let mut tables = Vec::new();

            let base = baseline_accuracy(&inp.net, &inp.data, &images, &conditions, mc.repeats, self.cfg.seed)?;
            let mut csv = String::from("condition,accuracy\n");
            for (c, a) in &base {
                writeln!(csv, "{c},{a:.17e}").expect("string write");
            }
            w.write("baseline_accuracy.csv", csv.as_bytes())?;
            tables.push(table("baseline_accuracy.csv", "Table 1", "unmasked top-1 accuracy per input condition"));

            let mut matches = BTreeMap::new();
            for kind in &kinds {
                let variables = self
                    .transform_groups()
                    .iter()
                    .map(|g| self.mask_variable(&maps, &checkpoints, *kind, g))
                    .collect::<Result<Vec<_>>>()?;
                let reports = accuracy_features(&inp.net, &inp.data, &images, &variables, &conditions, &grid, mc.repeats, self.cfg.seed)?;
                let m = match_correlation(&reports)?;
                let features = format!("features_{}.csv", kind.name());
                let matched = format!("match_{}.csv", kind.name());
                w.write(&features, reports_to_csv(&reports).as_bytes())?;
                w.write(&matched, m.to_csv().as_bytes())?;
                w.write_json(&format!("reports_{}.json", kind.name()), &reports)?;
                tables.push(table(&features, "Figure 3 (features)", &format!("masked top-1 accuracy grid, {} masks", kind.name())));
                tables.push(table(&matched, "Figure 3", &format!("Spearman match of augmented vs original inputs, {} masks", kind.name())));
                matches.insert(kind.name(), m);
            }
            Ok(json!({
                "kinds": kinds,
                "checkpoints": checkpoints,
                "images": images.len(),
                "repeats": mc.repeats,
                "grid": grid.iter().map(MaskMode::name).collect::<Vec<_>>(),
                "baseline": base,
                "tables": tables,
            }))
        })
    }

    pub fn class_sense(&self) -> Result<Outcome> {
        let est_m = self.require(CLASS_SENSE, ESTIMATE)?;
        self.run_stage(CLASS_SENSE, |w| {
            let inp = self.plan_inputs(CLASS_SENSE)?;
            let cs = &self.cfg.class_sense;
            let classifying = inp.net.checkpoint_names().last().cloned().unwrap_or_default();
            if !self.cfg.checkpoints.contains(&classifying) {
                return Err(CliError::MissingClassifyingMap(classifying));
            }
            let maps = self.load_maps(&est_m)?;
            let mut kinds = self.resolve_kinds(&cs.kinds, &maps)?;
            kinds.retain(|k| *k != SensitivityKind::SobolTotal);
            let checkpoints = self.mask_checkpoints(&inp.net)?;
            let label_count = inp.data.label_count();
            if cs.top_k > label_count {
                return Err(CliError::Config(format!("top_k = {} exceeds {label_count} classes", cs.top_k)));
            }
            let th = mc_threshold(label_count, cs.top_k, cs.images_per_class, cs.trials, self.cfg.seed)?;
            log::info!("class-sense: τ = {:.6} (q1 {:.6}, q3 {:.6})", th.tau, th.q1, th.q3);
            let images = eval_images(&inp.data, cs.images_per_class)?;
            let grid = MaskMode::study_grid();
            let mut sensitive_csv = String::from("kind,group,rank,class,value\n");
            let mut reports: Vec<JaccardReport> = Vec::new();
            for kind in &kinds {
                for group in self.transform_groups() {
                    let map = maps
                        .get(&classifying, *kind, &group)
                        .ok_or(CliError::MissingClassifyingMap(classifying.clone()))?;
                    let top = topk_sensitive(map, cs.top_k)?;
                    let norm: Vec<f64> = map.normalized().iter().copied().collect();
                    for (rank, &cls) in top.iter().enumerate() {
                        writeln!(sensitive_csv, "{},{group},{},{cls},{:.17e}", kind.name(), rank + 1, norm[cls]).expect("string write");
                    }
                    let var = self.mask_variable(&maps, &checkpoints, *kind, &group)?;
                    let masks = grid
                        .iter()
                        .map(|&mode| Ok((mode, MaskSet::from_maps(&inp.net, &var.maps, mode)?)))
                        .collect::<Result<Vec<_>>>()?;
                    reports.push(bias_report(&inp.net, &inp.data, &images, &group, *kind, &top, &masks, th.tau)?);
                }
            }
            w.write("sensitive_classes.csv", sensitive_csv.as_bytes())?;
            w.write("jaccard.csv", jaccard_reports_to_csv(&reports).as_bytes())?;
            let threshold = json!({
                "classes": label_count,
                "top_k": cs.top_k,
                "samples_per_class": cs.images_per_class,
                "trials": cs.trials,
                "q1": th.q1,
                "q3": th.q3,
                "tau": th.tau,
            });
            w.write_json("threshold.json", &threshold)?;
            let tables = vec![
                table("sensitive_classes.csv", "Tables 2-4", "top-k sensitive classes at the classifying checkpoint"),
                table("jaccard.csv", "Table 5", "mean Jaccard of masked top-k predictions vs sensitive classes, with outlier flags"),
                table("threshold.json", "Appendix D", "null-model Jaccard quartiles and outlier fence"),
            ];
            let flagged: usize = reports.iter().map(|r| r.flags.iter().filter(|f| **f).count()).sum();
            Ok(json!({
                "kinds": kinds,
                "checkpoints": checkpoints,
                "images": images.len(),
                "threshold": threshold,
                "flagged_cells": flagged,
                "tables": tables,
            }))
        })
    }

    pub fn segment(&self) -> Result<Outcome> {
        let est_m = self.require(SEGMENT, ESTIMATE)?;
        self.run_stage(SEGMENT, |w| {
            let inp = self.plan_inputs(SEGMENT)?;
            let original = self.load_maps(&est_m)?;
            let sc = &self.cfg.segment;
            for seg in &sc.segments {
                if !self.cfg.checkpoints.contains(&seg.to) {
                    return Err(CliError::Config(format!("segment end `{}` has no estimated maps", seg.to)));
                }
            }
            let groups = inp.plan.space.group_names();
            let mut c = Container::new();
            let mut seg_maps: Vec<(String, Vec<SensitivityMap>)> = Vec::new();
            let mut levels = Vec::new();
            for seg in &sc.segments {
                levels.push(seg.to.clone());
                for &ch in &sc.channels {
                    let probe = Probe::Segment(Segment {
                        from: seg.from.clone(),
                        to: seg.to.clone(),
                        channel: Some(ch),
                    });
                    let ev = Evaluator::new(&inp.net, &inp.data, &probe)?;
                    let est = ev.estimate_streaming(&inp.plan, CHUNK_BLOCKS)?;
                    let prefix = format!("{}/{}-{}/", ch.name(), seg.from, seg.to);
                    write_estimate(&mut c, &prefix, &est[0], &groups);
                    seg_maps.push((row_label(ch, &seg.to), est[0].maps(&groups)));
                }
            }
            w.write_container("segment_maps.aswt", &c)?;

            let mut tables = Vec::new();
            let mut summary = BTreeMap::new();
            for kind in original.kinds() {
                let of = |maps: &[SensitivityMap]| -> Result<CorrelationMatrix> {
                    let v: Vec<&SensitivityMap> = maps.iter().filter(|m| m.kind == kind).collect();
                    Ok(variable_correlation(&v)?)
                };
                let seg_corr: Vec<(String, CorrelationMatrix)> =
                    seg_maps.iter().map(|(l, m)| Ok((l.clone(), of(m)?))).collect::<Result<_>>()?;
                let orig_corr: Vec<(String, CorrelationMatrix)> = self
                    .cfg
                    .checkpoints
                    .iter()
                    .map(|ck| Ok((ck.clone(), variable_correlation(&original.at(ck, kind))?)))
                    .collect::<Result<_>>()?;
                let within = LabeledMatrix {
                    rows: seg_corr.iter().map(|(l, _)| l.clone()).collect(),
                    cols: levels.clone(),
                    values: seg_corr
                        .iter()
                        .map(|(label, m)| {
                            let channel = label.split('/').next().unwrap_or_default();
                            levels
                                .iter()
                                .map(|lv| {
                                    let other = &seg_corr.iter().find(|(l, _)| *l == format!("{channel}/{lv}")).expect("level present").1;
                                    Ok(cross_correlation(m, other)?)
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<_>>()?,
                };
                let versus = LabeledMatrix {
                    rows: seg_corr.iter().map(|(l, _)| l.clone()).collect(),
                    cols: orig_corr.iter().map(|(l, _)| l.clone()).collect(),
                    values: seg_corr
                        .iter()
                        .map(|(_, m)| orig_corr.iter().map(|(_, o)| Ok(cross_correlation(m, o)?)).collect::<Result<Vec<_>>>())
                        .collect::<Result<_>>()?,
                };
                let direct = LabeledMatrix {
                    rows: seg_maps.iter().map(|(l, _)| l.clone()).collect(),
                    cols: groups.clone(),
                    values: seg_maps
                        .iter()
                        .map(|(label, ms)| {
                            let level = label.split('/').nth(1).unwrap_or_default();
                            groups
                                .iter()
                                .map(|g| {
                                    let a = ms.iter().find(|m| m.kind == kind && &m.group == g);
                                    let b = original.get(level, kind, g);
                                    match (a, b) {
                                        (Some(a), Some(b)) => map_correlation(a, b),
                                        _ => None,
                                    }
                                })
                                .collect()
                        })
                        .collect(),
                };
                for (name, layout, what, m) in [
                    ("segment_within", "Figure 4a", "cross-correlation of variable-correlation triangles between segment levels of one channel", &within),
                    ("segment_vs_original", "Figure 4b", "cross-correlation of variable-correlation triangles, segments vs original checkpoints", &versus),
                    ("segment_map_correlation", "Figure 4 (maps)", "Spearman correlation of segment maps with the original maps at the same checkpoint", &direct),
                ] {
                    let file = format!("{name}_{}.csv", kind.name());
                    w.write(&file, m.to_csv().as_bytes())?;
                    tables.push(table(&file, layout, &format!("{what}, {}", kind.name())));
                }
                summary.insert(kind.name(), channel_summary(&direct, &sc.channels));
            }
            for (kind, s) in &summary {
                log::info!("segment: mean map correlation per channel ({kind}): {s:?}");
            }
            Ok(json!({
                "segments": sc.segments,
                "channels": sc.channels,
                "channel_mean_map_correlation": summary,
                "tables": tables,
            }))
        })
    }

    pub fn report(&self) -> Result<Outcome> {
        let est_m = self.require(REPORT, ESTIMATE)?;
        let (_, upstream) = self.key(REPORT)?;
        self.run_stage(REPORT, |w| {
            let inp = self.plan_inputs(REPORT)?;
            let maps = self.load_maps(&est_m)?;
            let rc = &self.cfg.report;
            let groups = inp.plan.space.group_names();
            let mut tables: Vec<Table> = Vec::new();

            for (stage, key) in &upstream {
                if stage == ESTIMATE {
                    continue;
                }
                let m = self.store.completed(stage, key)?.ok_or(CliError::MissingStage { stage: REPORT, needs: ESTIMATE })?;
                let listed: Vec<Table> = serde_json::from_value::<Vec<TableIn>>(m.info["tables"].clone())?
                    .into_iter()
                    .map(|t| Table {
                        file: format!("{stage}/{}", t.file),
                        layout: leak_layout(&t.layout),
                        description: t.description,
                    })
                    .collect();
                for t in &listed {
                    let name = t.file.split_once('/').expect("prefixed").1;
                    let bytes = self.store.read(&m, name)?;
                    w.write(&t.file.replace('/', "__"), &bytes)?;
                }
                tables.extend(listed.into_iter().map(|mut t| {
                    t.file = t.file.replace('/', "__");
                    t
                }));
            }

            for ck in &self.cfg.checkpoints {
                let (mean, variance) = &maps.moments[ck];
                let file = format!("variance_{ck}.csv");
                w.write(&file, variance_csv(mean.as_ref(), variance, &maps, ck).as_bytes())?;
                tables.push(table(&file, "Figure 2", &format!("per-unit mean, variance and coefficient of variation at {ck}")));

                if let Some(mean) = mean {
                    let cov = coefficient_of_variation(mean, variance);
                    if cov.shape()[0] >= 3 {
                        let mut csv = String::from("kind,group,y,x,rho\n");
                        for m in maps.maps.iter().filter(|m| m.checkpoint == *ck) {
                            let rho = spatial_corr_map(&m.values, &cov)?;
                            for ((y, x), v) in rho.indexed_iter() {
                                writeln!(csv, "{},{},{y},{x},{}", m.kind.name(), m.group, fmt_opt(*v)).expect("string write");
                            }
                        }
                        let file = format!("spatial_corr_{ck}.csv");
                        w.write(&file, csv.as_bytes())?;
                        tables.push(table(&file, "Figure 2 (spatial)", &format!("per-pixel sensitivity vs CoV correlation at {ck}")));
                    }
                }

                for kind in maps.kinds() {
                    let at = maps.at(ck, kind);
                    let corr = variable_correlation(&at)?;
                    let file = format!("unit_corr_{ck}_{}.csv", kind.name());
                    w.write(&file, corr.to_csv().as_bytes())?;
                    tables.push(table(&file, "Appendix C (input)", &format!("unit-wise Spearman between SA variables at {ck}, {}", kind.name())));
                    match average_linkage(&corr_to_distance(&corr), &corr.labels) {
                        Ok(d) => {
                            let file = format!("dendrogram_{ck}_{}.csv", kind.name());
                            w.write(&file, d.to_csv().as_bytes())?;
                            tables.push(table(&file, "Appendix C", &format!("average-linkage merges at {ck}, {}", kind.name())));
                        }
                        Err(e) => log::warn!("report: no dendrogram at {ck} ({}): {e}", kind.name()),
                    }
                    let shape = at.first().map(|m| m.shape().to_vec()).unwrap_or_default();
                    if shape.len() == 3 && shape[1] * shape[2] >= 2 && shape[0] >= rc.lda_folds {
                        let (c, h, wd) = (shape[0], shape[1], shape[2]);
                        let mut x = Array2::<f64>::zeros((at.len() * c, h * wd));
                        let mut y = Vec::with_capacity(at.len() * c);
                        for (g, m) in at.iter().enumerate() {
                            let norm = m.normalized();
                            for k in 0..c {
                                let plane = norm.slice(s![k, .., ..]);
                                x.row_mut(g * c + k).assign(&ndarray::Array1::from_iter(plane.iter().copied()));
                                y.push(g);
                            }
                        }
                        let names: Vec<String> = at.iter().map(|m| m.group.clone()).collect();
                        let cm = lda_confusion(x.view(), &y, &names, rc.lda_folds, rc.lda_repeats, self.cfg.seed)?;
                        let file = format!("lda_{ck}_{}.csv", kind.name());
                        w.write(&file, cm.to_csv().as_bytes())?;
                        tables.push(table(&file, "Appendix B", &format!("cross-validated LDA confusion of SA variables from channel maps at {ck}, {}", kind.name())));
                    }
                }
            }
            let index = json!({
                "schema_version": SCHEMA_VERSION,
                "groups": groups,
                "upstream": upstream,
                "tables": tables,
            });
            w.write_json("index.json", &index)?;
            Ok(json!({ "tables": tables.len() }))
        })
    }
}

#[derive(serde::Deserialize)]
struct TableIn {
    file: String,
    layout: String,
    description: String,
}

const LAYOUTS: [&str; 14] = [
    "Table 1",
    "Figure 3 (features)",
    "Figure 3",
    "Tables 2-4",
    "Table 5",
    "Appendix D",
    "Figure 4a",
    "Figure 4b",
    "Figure 4 (maps)",
    "Figure 2",
    "Figure 2 (spatial)",
    "Appendix C (input)",
    "Appendix C",
    "Appendix B",
];

fn leak_layout(s: &str) -> &'static str {
    LAYOUTS.iter().find(|l| **l == s).copied().unwrap_or("unknown")
}

fn table(file: &str, layout: &'static str, description: &str) -> Table {
    debug_assert!(LAYOUTS.contains(&layout));
    Table {
        file: file.into(),
        layout,
        description: description.into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.17e}"))
}

fn row_label(ch: HsvChannel, level: &str) -> String {
    format!("{}/{level}", ch.name())
}

fn chunk_name(prefix: &str, k: usize) -> String {
    format!("{prefix}-{k:05}.aswt")
}

/// Row ranges of the persisted chunks: whole estimator blocks.
fn chunk_ranges(plan: &SamplePlan) -> Vec<(usize, usize)> {
    let chunk = plan.block_len() * CHUNK_BLOCKS;
    (0..plan.len()).step_by(chunk).map(|s| (s, (s + chunk).min(plan.len()))).collect()
}

/// `per_class` validation images of every class, spread over the class.
pub fn eval_images(data: &Dataset, per_class: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for c in 0..data.class_count() {
        let mut last = None;
        for k in 0..per_class {
            let i = data.select(c, VALID, k as f64 / per_class as f64)?;
            if last != Some(i) {
                out.push(i);
                last = Some(i);
            }
        }
    }
    Ok(out)
}

fn conditions(set: AugmentationSet) -> Vec<Condition> {
    std::iter::once(Condition::None)
        .chain(set.transforms().iter().map(|&k: &TransformKind| Condition::Augment(k)))
        .collect()
}

fn write_estimate(c: &mut Container, prefix: &str, e: &Estimate, groups: &[String]) {
    let shape = IxDyn(&e.shape);
    for m in e.maps(groups) {
        c.insert_f64(format!("{prefix}{}", m.tensor_name()), m.values);
    }
    let ck = &e.checkpoint;
    let (variance, mean) = match &e.indices {
        Indices::Sobol(s) => (s.variance.clone(), Some(s.mean.clone())),
        Indices::Shapley(s) => (s.total_variance.clone(), None),
    };
    c.insert_f64(format!("{prefix}{ck}/variance"), ArrayD::from_shape_vec(shape.clone(), variance).expect("unit count"));
    if let Some(mean) = mean {
        c.insert_f64(format!("{prefix}{ck}/mean"), ArrayD::from_shape_vec(shape.clone(), mean).expect("unit count"));
    }
    let dead: Vec<f32> = e.dead().iter().map(|&d| f32::from(u8::from(d))).collect();
    c.insert_f32(format!("{prefix}{ck}/dead"), ArrayD::from_shape_vec(shape, dead).expect("unit count"));
}

fn estimate_info(e: &Estimate, groups: &[String]) -> Value {
    let dead = e.dead().iter().filter(|d| **d).count();
    let inert: Vec<&String> = e.inert_groups().iter().map(|&g| &groups[g]).collect();
    let mut info = json!({
        "name": e.checkpoint,
        "shape": e.shape,
        "units": e.dead().len(),
        "dead_units": dead,
        "inert_groups": inert,
    });
    if let Indices::Shapley(s) = &e.indices {
        let eff: Vec<f64> = s.efficiency().into_iter().flatten().collect();
        let ok = eff.iter().filter(|r| (*r - 1.0).abs() <= 0.02).count();
        info["efficiency_within_2pct"] = json!(if eff.is_empty() { Value::Null } else { json!(ok as f64 / eff.len() as f64) });
    }
    info
}

fn coefficient_of_variation(mean: &ArrayD<f64>, variance: &ArrayD<f64>) -> ArrayD<f64> {
    ndarray::Zip::from(mean)
        .and(variance)
        .map_collect(|&m, &v| if m == 0.0 { f64::NAN } else { v.max(0.0).sqrt() / m.abs() })
}

fn variance_csv(mean: Option<&ArrayD<f64>>, variance: &ArrayD<f64>, maps: &Maps, ck: &str) -> String {
    let dead = maps.maps.iter().find(|m| m.checkpoint == ck).map(|m| m.dead.clone());
    let mut out = String::from("channel,y,x,mean,variance,cov,dead\n");
    for (idx, &v) in variance.indexed_iter() {
        let (c, y, x) = (idx[0], idx[1], idx[2]);
        let m = mean.map(|m| m[&idx]);
        let cov = m.and_then(|m| (m != 0.0).then(|| v.max(0.0).sqrt() / m.abs()));
        let d = dead.as_ref().is_some_and(|d| d[&idx]);
        writeln!(out, "{c},{y},{x},{},{v:.17e},{},{d}", fmt_opt(m), fmt_opt(cov)).expect("string write");
    }
    out
}

/// Spearman correlation of two maps over units alive in both.
fn map_correlation(a: &SensitivityMap, b: &SensitivityMap) -> Option<f64> {
    if a.shape() != b.shape() {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .values
        .iter()
        .zip(b.values.iter())
        .zip(a.dead.iter().zip(b.dead.iter()))
        .filter(|(_, (da, db))| !**da && !**db)
        .map(|((p, q), _)| (*p, *q))
        .unzip();
    if x.len() < 3 {
        None
    } else {
        spearman(&x, &y)
    }
}

/// Mean defined entry of each channel's rows.
fn channel_summary(m: &LabeledMatrix, channels: &[HsvChannel]) -> BTreeMap<String, Option<f64>> {
    channels
        .iter()
        .map(|ch| {
            let vals: Vec<f64> = m
                .rows
                .iter()
                .zip(&m.values)
                .filter(|(r, _)| r.starts_with(&format!("{}/", ch.name())))
                .flat_map(|(_, row)| row.iter().flatten().copied())
                .collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (ch.name().to_string(), mean)
        })
        .collect()
}
