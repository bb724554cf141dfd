//! The probabilistic model of the augmented input space and its sample plans.
//!
//! Every scalar variable owns one coordinate of the unit hypercube. A row
//! `u ∈ [0,1)^D` decodes deterministically into a [`Realization`]: the class,
//! the partition, the application order of the transforms and one
//! parameterized [`Transform`] per augmentation.

mod direction_numbers;
mod plan;
mod sobol;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use plan::{budget, saltelli_plan, shapley_plan, BudgetKind, Design, SamplePlan};
pub use sobol::{sobol_sequence, SobolSequence, MAX_DIM};

use crate::augment::{AugmentationSet, ParamDist, Transform, TransformKind};
use crate::error::{Error, Result};
use crate::numeric::factorial;
use crate::rng::{stream, Streams};

/// Largest transform count whose order variable is representable.
pub const MAX_TRANSFORMS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum VariableKind {
    ContinuousUniform { lo: f64, hi: f64 },
    DiscreteUniform { lo: i64, hi: i64 },
    Categorical { k: u64 },
    Switch { threshold: f64 },
}

impl VariableKind {
    /// Maps a hypercube coordinate onto the support.
    pub fn decode(&self, u: f64) -> f64 {
        match *self {
            VariableKind::ContinuousUniform { lo, hi } => lo + u * (hi - lo),
            VariableKind::DiscreteUniform { lo, hi } => {
                let span = (hi - lo + 1) as f64;
                lo as f64 + (u * span).floor().clamp(0.0, span - 1.0)
            }
            VariableKind::Categorical { k } => categorical(u, k) as f64,
            VariableKind::Switch { threshold } => {
                if u > threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn contains(&self, x: f64) -> bool {
        match *self {
            VariableKind::ContinuousUniform { lo, hi } => (lo..=hi).contains(&x),
            VariableKind::DiscreteUniform { lo, hi } => x.fract() == 0.0 && (lo as f64..=hi as f64).contains(&x),
            VariableKind::Categorical { k } => x.fract() == 0.0 && x >= 0.0 && x < k as f64,
            VariableKind::Switch { .. } => x == 0.0 || x == 1.0,
        }
    }
}

/// `floor(u·K)` clamped to `K − 1`.
#[inline]
pub fn categorical(u: f64, k: u64) -> u64 {
    ((u * k as f64).floor().max(0.0) as u64).min(k - 1)
}

/// What a variable means to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case")]
pub enum VariableRole {
    Class,
    Partition,
    Order,
    Param { transform: usize, slot: usize },
    Switch { transform: usize },
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    /// Value that makes the owning transform a no-op.
    pub default_value: f64,
    pub role: VariableRole,
}

impl VariableSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpace(format!("variable `{}`: {msg}", self.name)));
        match self.kind {
            VariableKind::ContinuousUniform { lo, hi } if !(lo < hi) => return bad(format!("bounds {lo} >= {hi}")),
            VariableKind::DiscreteUniform { lo, hi } if lo > hi => return bad(format!("bounds {lo} > {hi}")),
            VariableKind::Categorical { k } if k < 1 => return bad("empty support".into()),
            VariableKind::Switch { threshold } if !(threshold > 0.0 && threshold < 1.0) => {
                return bad(format!("threshold {threshold} outside (0, 1)"))
            }
            _ => {}
        }
        // Transform parameters may rest on an identity point mass outside the
        // slab (e.g. a zero-size erase rectangle); the spike-and-slab model
        // places its off-state there.
        let param = matches!(self.role, VariableRole::Param { .. });
        if !param && !self.kind.contains(self.default_value) {
            return bad(format!("default {} outside support", self.default_value));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableGroup {
    pub name: String,
    pub member_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Independent variables, every transform always applied.
    #[serde(rename = "scheme1")]
    Independent,
    /// Spike-and-slab: a switch per transform gates its parameters.
    #[serde(rename = "scheme2")]
    SpikeSlab,
}

/// A decoded row of the hypercube.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    /// Decoded value of every variable, in variable order.
    pub values: Vec<f64>,
    pub class: usize,
    /// Uniform in `[0, 1)`, independent of `class`; selects the instance.
    pub instance: f64,
    pub partition: usize,
    /// Application order as indices into `transforms`.
    pub order: Vec<usize>,
    pub transforms: Vec<Transform>,
    pub switches: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpaceModel {
    pub variables: Vec<VariableSpec>,
    pub groups: Vec<VariableGroup>,
    pub transforms: Vec<TransformKind>,
    pub class_count: usize,
    pub scheme: Scheme,
    /// When false every transform decodes to its identity (original data).
    pub apply_transforms: bool,
}

impl InputSpaceModel {
    /// Augmentation space over `transforms` for images of the given size.
    ///
    /// Groups: `class`, `partition`, `order`, then one group per transform
    /// holding its switch (scheme 2) and its parameters.
    pub fn augmentation(
        transforms: &[TransformKind],
        class_count: usize,
        height: usize,
        width: usize,
        scheme: Scheme,
        switch_threshold: f64,
    ) -> Result<Self> {
        let d = transforms.len();
        if d == 0 {
            return Err(Error::InvalidSpace("at least one transform is required".into()));
        }
        if d > MAX_TRANSFORMS {
            return Err(Error::InvalidSpace(format!("{d} transforms exceed the supported {MAX_TRANSFORMS}")));
        }
        let mut seen = transforms.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != d {
            return Err(Error::InvalidSpace("duplicate transform".into()));
        }
        let mut variables = vec![
            VariableSpec {
                name: "class".into(),
                kind: VariableKind::Categorical { k: class_count as u64 },
                default_value: 0.0,
                role: VariableRole::Class,
            },
            VariableSpec {
                name: "partition".into(),
                kind: VariableKind::Categorical { k: 2 },
                default_value: 0.0,
                role: VariableRole::Partition,
            },
            VariableSpec {
                name: "order".into(),
                kind: VariableKind::Categorical {
                    k: factorial(d) as u64,
                },
                default_value: 0.0,
                role: VariableRole::Order,
            },
        ];
        let mut groups: Vec<VariableGroup> = ["class", "partition", "order"]
            .iter()
            .enumerate()
            .map(|(i, n)| VariableGroup {
                name: (*n).into(),
                member_indices: vec![i],
            })
            .collect();
        for (t, kind) in transforms.iter().enumerate() {
            let mut members = Vec::new();
            if scheme == Scheme::SpikeSlab {
                members.push(variables.len());
                variables.push(VariableSpec {
                    name: format!("{}.switch", kind.name()),
                    kind: VariableKind::Switch {
                        threshold: switch_threshold,
                    },
                    default_value: 0.0,
                    role: VariableRole::Switch { transform: t },
                });
            }
            for (slot, p) in kind.params(height, width).into_iter().enumerate() {
                let vk = match p.dist {
                    ParamDist::Continuous { lo, hi } => VariableKind::ContinuousUniform { lo, hi },
                    ParamDist::Discrete { lo, hi } => VariableKind::DiscreteUniform { lo, hi },
                    ParamDist::Flag => VariableKind::Categorical { k: 2 },
                };
                members.push(variables.len());
                variables.push(VariableSpec {
                    name: format!("{}.{}", kind.name(), p.name),
                    kind: vk,
                    default_value: p.identity,
                    role: VariableRole::Param { transform: t, slot },
                });
            }
            groups.push(VariableGroup {
                name: kind.name().into(),
                member_indices: members,
            });
        }
        let space = Self {
            variables,
            groups,
            transforms: transforms.to_vec(),
            class_count,
            scheme,
            apply_transforms: true,
        };
        space.validate()?;
        Ok(space)
    }

    /// Space for one of the fixed augmentation sets under scheme 1.
    pub fn for_set(set: AugmentationSet, class_count: usize, height: usize, width: usize) -> Result<Self> {
        let mut space = Self::augmentation(set.transforms(), class_count, height, width, Scheme::Independent, 0.5)?;
        space.apply_transforms = set.applies_transforms();
        Ok(space)
    }

    /// A space of free variables without augmentation semantics, used to
    /// study plain test functions.
    pub fn abstract_space(variables: Vec<VariableSpec>, groups: Option<Vec<VariableGroup>>) -> Result<Self> {
        let groups = groups.unwrap_or_else(|| {
            variables
                .iter()
                .enumerate()
                .map(|(i, v)| VariableGroup {
                    name: v.name.clone(),
                    member_indices: vec![i],
                })
                .collect()
        });
        let space = Self {
            variables,
            groups,
            transforms: Vec::new(),
            class_count: 0,
            scheme: Scheme::Independent,
            apply_transforms: false,
        };
        space.validate()?;
        Ok(space)
    }

    /// `d` independent uniform variables on `[0, 1]`, one group each.
    pub fn unit_cube(d: usize) -> Result<Self> {
        Self::abstract_space(
            (0..d)
                .map(|i| VariableSpec {
                    name: format!("x{}", i + 1),
                    kind: VariableKind::ContinuousUniform { lo: 0.0, hi: 1.0 },
                    default_value: 0.0,
                    role: VariableRole::Free,
                })
                .collect(),
            None,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::InvalidSpace("no variables".into()));
        }
        for v in &self.variables {
            v.validate()?;
        }
        let mut owner = vec![None; self.variables.len()];
        for (g, group) in self.groups.iter().enumerate() {
            if group.member_indices.is_empty() {
                return Err(Error::InvalidSpace(format!("group `{}` is empty", group.name)));
            }
            for &i in &group.member_indices {
                match owner.get_mut(i) {
                    None => return Err(Error::InvalidSpace(format!("group `{}` names variable {i}", group.name))),
                    Some(Some(_)) => return Err(Error::InvalidSpace(format!("variable {i} is in two groups"))),
                    Some(slot) => *slot = Some(g),
                }
            }
        }
        if owner.iter().any(Option::is_none) {
            return Err(Error::InvalidSpace("groups do not cover every variable".into()));
        }
        if self.transforms.is_empty() {
            return Ok(());
        }

        let count = |pred: &dyn Fn(&VariableSpec) -> bool| self.variables.iter().filter(|v| pred(v)).count();
        let d = self.transforms.len();
        let switches = count(&|v| matches!(v.kind, VariableKind::Switch { .. }));
        match self.scheme {
            Scheme::Independent if switches != 0 => {
                return Err(Error::InvalidSpace("scheme 1 admits no switch variables".into()))
            }
            Scheme::SpikeSlab if switches != d => {
                return Err(Error::InvalidSpace(format!("scheme 2 needs {d} switches, found {switches}")))
            }
            _ => {}
        }
        let cat_role = |role: VariableRole, k: u64| {
            count(&|v| v.role == role && v.kind == VariableKind::Categorical { k })
        };
        let expected = [
            (VariableRole::Order, factorial(d) as u64, "order"),
            (VariableRole::Class, self.class_count as u64, "class"),
            (VariableRole::Partition, 2, "partition"),
        ];
        for (role, k, name) in expected {
            if cat_role(role, k) != 1 {
                return Err(Error::InvalidSpace(format!("expected exactly one {name} variable of cardinality {k}")));
            }
            let idx = self.variables.iter().position(|v| v.role == role).unwrap();
            let g = owner[idx].unwrap();
            if self.groups[g].member_indices.len() != 1 {
                return Err(Error::InvalidSpace(format!("{name} variable must form a singleton group")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Group owning each variable.
    pub fn group_of_variables(&self) -> Vec<usize> {
        let mut owner = vec![0; self.variables.len()];
        for (g, group) in self.groups.iter().enumerate() {
            for &i in &group.member_indices {
                owner[i] = g;
            }
        }
        owner
    }

    /// Decodes a hypercube row.
    pub fn decode(&self, u: &[f64]) -> Result<Realization> {
        if u.len() != self.dim() {
            return Err(Error::Arity {
                expected: self.dim(),
                got: u.len(),
            });
        }
        let d = self.transforms.len();
        let mut values: Vec<f64> = self.variables.iter().zip(u).map(|(v, &x)| v.kind.decode(x)).collect();
        let mut class = 0;
        let mut instance = 0.0;
        let mut partition = 0;
        let mut order: Vec<usize> = (0..d).collect();
        let mut switches = vec![true; d];
        let mut params: Vec<Vec<f64>> = self
            .transforms
            .iter()
            .map(|k| k.params(1, 1).iter().map(|p| p.identity).collect())
            .collect();

        for (i, v) in self.variables.iter().enumerate() {
            match v.role {
                VariableRole::Class => {
                    class = values[i] as usize;
                    let scaled = u[i] * self.class_count as f64;
                    instance = (scaled - scaled.floor()).clamp(0.0, 1.0 - f64::EPSILON);
                }
                VariableRole::Partition => partition = values[i] as usize,
                VariableRole::Order => order = lehmer_decode(values[i] as u128, d),
                VariableRole::Switch { transform } => switches[transform] = values[i] == 1.0,
                _ => {}
            }
        }
        for (i, v) in self.variables.iter().enumerate() {
            if let VariableRole::Param { transform, slot } = v.role {
                if switches[transform] && self.apply_transforms {
                    params[transform][slot] = values[i];
                } else {
                    values[i] = v.default_value;
                    params[transform][slot] = v.default_value;
                }
            }
        }
        let transforms = self
            .transforms
            .iter()
            .zip(&params)
            .map(|(k, p)| k.build(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Realization {
            values,
            class,
            instance,
            partition,
            order,
            transforms,
            switches,
        })
    }

    /// Scheme-1 decoding of a single hypercube row.
    pub fn scheme1_draw(&self, u: &[f64]) -> Result<Realization> {
        self.decode(u)
    }

    /// Independent spike-and-slab draw number `index` from the seeded stream.
    pub fn scheme2_draw(&self, streams: &Streams, index: u64) -> Result<Realization> {
        if self.scheme != Scheme::SpikeSlab {
            return Err(Error::InvalidSpace("scheme2_draw needs a spike-and-slab space".into()));
        }
        let mut rng = streams.at(stream::SCHEME2, index);
        let u: Vec<f64> = (0..self.dim()).map(|_| rng.random::<f64>()).collect();
        self.decode(&u)
    }
}

/// Lexicographic rank of a permutation of `0..d`.
pub fn lehmer_encode(perm: &[usize]) -> u128 {
    let d = perm.len();
    let mut rank = 0u128;
    for i in 0..d {
        let smaller = perm[i + 1..].iter().filter(|&&x| x < perm[i]).count();
        rank += smaller as u128 * factorial(d - 1 - i);
    }
    rank
}

/// Permutation of `0..d` with the given lexicographic rank.
pub fn lehmer_decode(mut rank: u128, d: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..d).collect();
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let f = factorial(d - 1 - i);
        let digit = (rank / f) as usize;
        rank %= f;
        out.push(pool.remove(digit.min(pool.len() - 1)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::TransformKind as K;

    fn a1() -> InputSpaceModel {
        InputSpaceModel::for_set(AugmentationSet::A1, 10, 32, 32).unwrap()
    }

    fn uniform_rows(space: &InputSpaceModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let s = Streams::new(seed);
        (0..n)
            .map(|i| {
                let mut rng = s.at(stream::MISC, i as u64);
                (0..space.dim()).map(|_| rng.random::<f64>()).collect()
            })
            .collect()
    }

    #[test]
    fn lehmer_is_a_bijection_up_to_six() {
        for d in 0..=6 {
            let n = factorial(d);
            let mut seen = std::collections::HashSet::new();
            for r in 0..n {
                let p = lehmer_decode(r, d);
                assert_eq!(lehmer_encode(&p), r);
                assert!(seen.insert(p));
            }
        }
        assert_eq!(lehmer_decode(0, 3), vec![0, 1, 2]);
        assert_eq!(lehmer_decode(5, 3), vec![2, 1, 0]);
    }

    #[test]
    fn origin_decodes_to_lower_bounds() {
        let space = a1();
        let r = space.decode(&vec![0.0; space.dim()]).unwrap();
        assert_eq!(r.class, 0);
        assert_eq!(r.partition, 0);
        assert_eq!(r.order, vec![0, 1, 2, 3, 4]);
        for (v, x) in space.variables.iter().zip(&r.values) {
            match v.kind {
                VariableKind::ContinuousUniform { lo, .. } => assert_eq!(*x, lo),
                VariableKind::DiscreteUniform { lo, .. } => assert_eq!(*x, lo as f64),
                _ => assert_eq!(*x, 0.0),
            }
        }
    }

    #[test]
    fn decoding_is_total_at_the_upper_edge() {
        let space = a1();
        let r = space.decode(&vec![1.0; space.dim()]).unwrap();
        assert_eq!(r.class, 9);
        assert_eq!(r.order, vec![4, 3, 2, 1, 0]);
        assert!(r.instance < 1.0);
    }

    #[test]
    fn permutation_frequencies_are_uniform() {
        let space = InputSpaceModel::augmentation(&[K::Hflip, K::Grayscale, K::Erase], 2, 8, 8, Scheme::Independent, 0.5).unwrap();
        let n = 60_000;
        let mut counts = std::collections::HashMap::new();
        for u in uniform_rows(&space, n, 3) {
            *counts.entry(space.decode(&u).unwrap().order).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - n as f64 * p).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn categorical_marginals_are_uniform() {
        let space = a1();
        let n = 100_000;
        let rows = uniform_rows(&space, n, 4);
        let mut train = 0usize;
        let mut classes = [0usize; 10];
        for u in &rows {
            let r = space.decode(u).unwrap();
            train += (r.partition == 0) as usize;
            classes[r.class] += 1;
        }
        let frac = train as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01);
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for c in classes {
            assert!((c as f64 - n as f64 * 0.1).abs() < 3.0 * sd + 1.0);
        }
    }

    #[test]
    fn scheme2_switch_frequency_and_point_mass() {
        let space = InputSpaceModel::augmentation(AugmentationSet::A1.transforms(), 10, 32, 32, Scheme::SpikeSlab, 0.5).unwrap();
        let s = Streams::new(9);
        let n = 100_000;
        let mut on = vec![0usize; 5];
        for i in 0..n {
            let r = space.scheme2_draw(&s, i as u64).unwrap();
            for (t, &sw) in r.switches.iter().enumerate() {
                if sw {
                    on[t] += 1;
                } else {
                    assert_eq!(r.transforms[t], space.transforms[t].identity());
                }
            }
        }
        let sd = (n as f64 * 0.25).sqrt();
        for c in on {
            assert!((c as f64 - n as f64 * 0.5).abs() < 3.0 * sd);
        }
    }

    #[test]
    fn scheme2_high_threshold_is_mostly_identity() {
        let space = InputSpaceModel::augmentation(AugmentationSet::A1.transforms(), 10, 32, 32, Scheme::SpikeSlab, 0.99).unwrap();
        let s = Streams::new(10);
        let n = 20_000;
        let identity = (0..n)
            .filter(|&i| {
                let r = space.scheme2_draw(&s, i as u64).unwrap();
                r.transforms.iter().all(|t| t.is_identity())
            })
            .count();
        assert!(identity as f64 / n as f64 >= 0.94, "{identity}");
    }

    #[test]
    fn invariants_are_enforced() {
        let mut space = a1();
        space.groups.pop();
        assert!(space.validate().is_err());
        let mut space = a1();
        space.variables[1].kind = VariableKind::Categorical { k: 3 };
        assert!(space.validate().is_err());
        let bad = VariableSpec {
            name: "x".into(),
            kind: VariableKind::ContinuousUniform { lo: 1.0, hi: 1.0 },
            default_value: 1.0,
            role: VariableRole::Free,
        };
        assert!(bad.validate().is_err());
        let sw = VariableSpec {
            name: "s".into(),
            kind: VariableKind::Switch { threshold: 1.0 },
            default_value: 0.0,
            role: VariableRole::Free,
        };
        assert!(sw.validate().is_err());
    }

    #[test]
    fn a1_has_eight_groups_and_a0_is_inert() {
        assert_eq!(a1().n_groups(), 8);
        let a0 = InputSpaceModel::for_set(AugmentationSet::A0, 10, 32, 32).unwrap();
        for u in uniform_rows(&a0, 50, 1) {
            let r = a0.decode(&u).unwrap();
            assert!(r.transforms.iter().all(|t| t.is_identity()));
        }
    }
}
