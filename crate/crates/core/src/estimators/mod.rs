//! Sensitivity estimators.
//!
//! Model outputs arrive as a matrix `rows × units`: one row per plan row, one
//! column per scalar output (a checkpoint unit). Both Monte-Carlo estimators
//! are streaming: they consume one design block at a time, so activations
//! never have to be held in memory for the whole plan.

mod oracle;
mod saltelli;
mod shapley;

use ndarray::{ArrayD, ArrayView2, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use oracle::{exact_oracle, shapley_weight, subset_shapley_exact, OracleDecomposition, ShapleyExact, TabulatedFunction};
pub use saltelli::{sobol_estimate, SaltelliAccumulator, SobolIndices};
pub use shapley::{shapley_estimate, ShapleyAccumulator, ShapleyEffects};

use crate::error::{Error, Result};
use crate::inputspace::SamplePlan;
use crate::numeric::CompensatedSum;

/// Units whose variance does not exceed `DEAD_ABS + DEAD_REL·mean²` are dead.
pub const DEAD_ABS: f64 = 1e-20;
pub const DEAD_REL: f64 = 1e-12;

#[inline]
pub(crate) fn is_dead(variance: f64, mean: f64) -> bool {
    !(variance > DEAD_ABS + DEAD_REL * mean * mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityKind {
    SobolFirst,
    SobolTotal,
    Shapley,
}

impl SensitivityKind {
    pub fn name(self) -> &'static str {
        match self {
            SensitivityKind::SobolFirst => "sobol-first",
            SensitivityKind::SobolTotal => "sobol-total",
            SensitivityKind::Shapley => "shapley",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sobol-first" => Ok(SensitivityKind::SobolFirst),
            "sobol-total" => Ok(SensitivityKind::SobolTotal),
            "shapley" => Ok(SensitivityKind::Shapley),
            other => Err(Error::InvalidArgument(format!("unknown sensitivity kind `{other}`"))),
        }
    }
}

/// Per-unit values of one sensitivity kind for one group at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub checkpoint: String,
    pub kind: SensitivityKind,
    pub group: String,
    /// Shaped like the checkpoint tensor.
    pub values: ArrayD<f64>,
    pub total_variance: ArrayD<f64>,
    pub dead: ArrayD<bool>,
}

impl SensitivityMap {
    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    /// Name under which the map is stored.
    pub fn tensor_name(&self) -> String {
        format!("{}/{}/{}", self.checkpoint, self.kind.name(), self.group)
    }

    /// Values in `[0, 1]` usable as a multiplicative mask: Shapley effects
    /// are divided by the unit's total variance, everything is clipped.
    pub fn normalized(&self) -> ArrayD<f64> {
        let mut out = self.values.clone();
        if self.kind == SensitivityKind::Shapley {
            ndarray::Zip::from(&mut out)
                .and(&self.total_variance)
                .and(&self.dead)
                .for_each(|v, &t, &d| *v = if d || t <= 0.0 { 0.0 } else { *v / t });
        }
        out.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        out
    }
}

/// Mean, unbiased variance and coefficient of variation of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub mean: f64,
    pub variance: f64,
    /// `√variance / |mean|`, undefined when the mean is zero.
    pub cov: Option<f64>,
}

impl VarianceStats {
    pub fn from_moments(mean: f64, variance: f64) -> Self {
        let variance = variance.max(0.0);
        let cov = if mean == 0.0 { None } else { Some(variance.sqrt() / mean.abs()) };
        Self { mean, variance, cov }
    }

    pub fn is_dead(&self) -> bool {
        is_dead(self.variance, self.mean)
    }
}

/// Running per-unit mean and variance with a per-unit shift.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    units: Vec<UnitMoments>,
    count: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct UnitMoments {
    shift: f64,
    sum: CompensatedSum,
    sum_sq: CompensatedSum,
}

impl MomentAccumulator {
    pub fn new(n_units: usize) -> Self {
        Self {
            units: vec![UnitMoments::default(); n_units],
            count: 0,
        }
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds every row of `samples` (`rows × units`).
    pub fn push(&mut self, samples: ArrayView2<f64>) -> Result<()> {
        if samples.ncols() != self.n_units() {
            return Err(Error::Arity {
                expected: self.n_units(),
                got: samples.ncols(),
            });
        }
        if samples.nrows() == 0 {
            return Ok(());
        }
        let first = self.count == 0;
        self.units.par_iter_mut().enumerate().for_each(|(u, m)| {
            let col = samples.column(u);
            if first {
                m.shift = col[0];
            }
            for &v in col {
                let x = v - m.shift;
                m.sum.add(x);
                m.sum_sq.add(x * x);
            }
        });
        self.count += samples.nrows();
        Ok(())
    }

    pub fn finish(&self) -> Result<Vec<VarianceStats>> {
        if self.count < 2 {
            return Err(Error::VarianceUndefined(format!("{} samples", self.count)));
        }
        let n = self.count as f64;
        Ok(self
            .units
            .iter()
            .map(|m| {
                let mean = m.sum.value() / n;
                let var = (m.sum_sq.value() - n * mean * mean) / (n - 1.0);
                VarianceStats::from_moments(mean + m.shift, var)
            })
            .collect())
    }
}

/// Per-unit statistics of `samples × units` activations.
pub fn variance_cov(activations: ArrayView2<f64>) -> Result<Vec<VarianceStats>> {
    if activations.nrows() < 2 {
        return Err(Error::VarianceUndefined(format!("{} samples", activations.nrows())));
    }
    let mut acc = MomentAccumulator::new(activations.ncols());
    acc.push(activations)?;
    acc.finish()
}

/// A plan together with its model outputs.
#[derive(Debug, Clone, Copy)]
pub struct EvaluatedPlan<'a> {
    pub plan: &'a SamplePlan,
    pub outputs: ArrayView2<'a, f64>,
}

impl<'a> EvaluatedPlan<'a> {
    pub fn new(plan: &'a SamplePlan, outputs: ArrayView2<'a, f64>) -> Result<Self> {
        if outputs.nrows() != plan.budget {
            return Err(Error::Arity {
                expected: plan.budget,
                got: outputs.nrows(),
            });
        }
        Ok(Self { plan, outputs })
    }
}

pub(crate) fn reshape(values: Vec<f64>, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), values).expect("unit count matches checkpoint shape")
}

pub(crate) fn reshape_bool(values: Vec<bool>, shape: &[usize]) -> ArrayD<bool> {
    ArrayD::from_shape_vec(IxDyn(shape), values).expect("unit count matches checkpoint shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_sample_statistics() {
        let s = variance_cov(array![[1.0], [3.0]].view()).unwrap();
        assert_eq!(s[0].mean, 2.0);
        assert_eq!(s[0].variance, 2.0);
        assert!((s[0].cov.unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_units() {
        let s = variance_cov(array![[0.0, 4.0], [0.0, 4.0], [0.0, 4.0]].view()).unwrap();
        assert_eq!(s[0].variance, 0.0);
        assert_eq!(s[0].cov, None);
        assert_eq!(s[1].cov, Some(0.0));
        assert!(s[0].is_dead() && s[1].is_dead());
    }

    #[test]
    fn needs_two_samples() {
        assert!(variance_cov(array![[1.0]].view()).is_err());
    }

    #[test]
    fn shifted_accumulation_is_stable() {
        let base = 1e9;
        let data = ndarray::Array2::from_shape_fn((1000, 1), |(i, _)| base + (i % 7) as f64);
        let s = variance_cov(data.view()).unwrap();
        let plain: Vec<f64> = (0..1000).map(|i| (i % 7) as f64).collect();
        assert!((s[0].variance - crate::numeric::sample_variance(&plain)).abs() < 1e-9);
    }
}
