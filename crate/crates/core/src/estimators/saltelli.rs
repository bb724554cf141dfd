use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::{is_dead, reshape, reshape_bool, EvaluatedPlan, SensitivityKind, SensitivityMap};
use crate::error::{Error, Result};
use crate::inputspace::Design;
use crate::numeric::CompensatedSum;

/// First-order and total indices of every group for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolIndices {
    /// `groups × units`.
    pub first: Array2<f64>,
    pub total: Array2<f64>,
    pub mean: Vec<f64>,
    /// Variance over the `A ∪ B` rows.
    pub variance: Vec<f64>,
    pub dead: Vec<bool>,
    pub n_base: usize,
}

impl SobolIndices {
    pub fn n_groups(&self) -> usize {
        self.first.nrows()
    }

    pub fn n_units(&self) -> usize {
        self.first.ncols()
    }

    /// Splits into one first-order and one total map per group.
    pub fn to_maps(&self, checkpoint: &str, shape: &[usize], groups: &[String]) -> Vec<(SensitivityMap, SensitivityMap)> {
        let tv = reshape(self.variance.clone(), shape);
        let dead = reshape_bool(self.dead.clone(), shape);
        groups
            .iter()
            .enumerate()
            .map(|(g, name)| {
                let map = |kind, values: Vec<f64>| SensitivityMap {
                    checkpoint: checkpoint.to_string(),
                    kind,
                    group: name.clone(),
                    values: reshape(values, shape),
                    total_variance: tv.clone(),
                    dead: dead.clone(),
                };
                (
                    map(SensitivityKind::SobolFirst, self.first.row(g).to_vec()),
                    map(SensitivityKind::SobolTotal, self.total.row(g).to_vec()),
                )
            })
            .collect()
    }
}

/// Per-unit sums over the Saltelli blocks seen so far.
///
/// With `f` shifted by the unit's first `A` value and `μ` the `A ∪ B` mean:
///
/// ```text
/// S_g   = mean[(f(B) − μ)(f(AB_g) − f(A))] / V
/// S_g^T = mean[(f(A) − f(AB_g))²] / (2V)
/// ```
///
/// and the same with the roles of `A` and `B` exchanged (`BA_g`). Reported
/// values average the two.
#[derive(Debug, Clone)]
pub struct SaltelliAccumulator {
    n_groups: usize,
    n_units: usize,
    /// Per unit: shift, then `2 + 6·groups` sums.
    shift: Vec<f64>,
    sums: Vec<CompensatedSum>,
    blocks: usize,
}

const SUM_Y: usize = 0;
const SUM_Y2: usize = 1;

impl SaltelliAccumulator {
    pub fn new(n_groups: usize, n_units: usize) -> Self {
        let stride = 2 + 6 * n_groups;
        Self {
            n_groups,
            n_units,
            shift: vec![0.0; n_units],
            sums: vec![CompensatedSum::new(); n_units * stride],
            blocks: 0,
        }
    }

    fn stride(&self) -> usize {
        2 + 6 * self.n_groups
    }

    pub fn block_len(&self) -> usize {
        2 * self.n_groups + 2
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Adds one block `A_j, AB_1..G, BA_1..G, B_j` (`rows × units`).
    pub fn push_block(&mut self, block: ArrayView2<f64>) -> Result<()> {
        if block.nrows() != self.block_len() || block.ncols() != self.n_units {
            return Err(Error::Shape(format!(
                "Saltelli block must be {}x{}, got {}x{}",
                self.block_len(),
                self.n_units,
                block.nrows(),
                block.ncols()
            )));
        }
        let g = self.n_groups;
        let stride = self.stride();
        let first = self.blocks == 0;
        self.sums
            .par_chunks_mut(stride)
            .zip(self.shift.par_iter_mut())
            .enumerate()
            .for_each(|(u, (s, shift))| {
                let col = block.column(u);
                if first {
                    *shift = col[0];
                }
                let ya = col[0] - *shift;
                let yb = col[2 * g + 1] - *shift;
                s[SUM_Y].add(ya);
                s[SUM_Y].add(yb);
                s[SUM_Y2].add(ya * ya);
                s[SUM_Y2].add(yb * yb);
                for k in 0..g {
                    let yab = col[1 + k] - *shift;
                    let yba = col[1 + g + k] - *shift;
                    let d_ab = yab - ya;
                    let d_ba = yba - yb;
                    let t = &mut s[2 + 6 * k..2 + 6 * k + 6];
                    t[0].add(yb * d_ab);
                    t[1].add(d_ab);
                    t[2].add(d_ab * d_ab);
                    t[3].add(ya * d_ba);
                    t[4].add(d_ba);
                    t[5].add(d_ba * d_ba);
                }
            });
        self.blocks += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<SobolIndices> {
        let n = self.blocks;
        if n < 2 {
            return Err(Error::VarianceUndefined(format!("{n} Saltelli blocks")));
        }
        let (g, stride) = (self.n_groups, self.stride());
        let nf = n as f64;
        let mut first = Array2::zeros((g, self.n_units));
        let mut total = Array2::zeros((g, self.n_units));
        let mut mean = vec![0.0; self.n_units];
        let mut variance = vec![0.0; self.n_units];
        let mut dead = vec![false; self.n_units];
        for u in 0..self.n_units {
            let s = &self.sums[u * stride..(u + 1) * stride];
            let m = s[SUM_Y].value() / (2.0 * nf);
            let v = ((s[SUM_Y2].value() - 2.0 * nf * m * m) / (2.0 * nf - 1.0)).max(0.0);
            mean[u] = m + self.shift[u];
            variance[u] = v;
            dead[u] = is_dead(v, mean[u]);
            if dead[u] {
                continue;
            }
            for k in 0..g {
                let t = &s[2 + 6 * k..2 + 6 * k + 6];
                let s_ab = (t[0].value() - m * t[1].value()) / nf / v;
                let s_ba = (t[3].value() - m * t[4].value()) / nf / v;
                let st_ab = t[2].value() / (2.0 * nf * v);
                let st_ba = t[5].value() / (2.0 * nf * v);
                first[[k, u]] = 0.5 * (s_ab + s_ba);
                total[[k, u]] = 0.5 * (st_ab + st_ba);
            }
        }
        Ok(SobolIndices {
            first,
            total,
            mean,
            variance,
            dead,
            n_base: n,
        })
    }
}

/// First-order and total Sobol indices of every group.
pub fn sobol_estimate(ev: &EvaluatedPlan) -> Result<SobolIndices> {
    let Design::Saltelli { n_groups, .. } = ev.plan.design else {
        return Err(Error::InvalidArgument("sobol_estimate needs a Saltelli plan".into()));
    };
    let mut acc = SaltelliAccumulator::new(n_groups, ev.outputs.ncols());
    let len = acc.block_len();
    for b in 0..ev.outputs.nrows() / len {
        acc.push_block(ev.outputs.slice(ndarray::s![b * len..(b + 1) * len, ..]))?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputspace::{saltelli_plan, InputSpaceModel, SamplePlan, VariableKind, VariableRole, VariableSpec};
    use ndarray::Array2;

    fn evaluate(plan: &SamplePlan, f: impl Fn(&[f64]) -> Vec<f64>) -> Array2<f64> {
        let first = f(&plan.realization(0).unwrap().values);
        let mut out = Array2::zeros((plan.len(), first.len()));
        for i in 0..plan.len() {
            let y = f(&plan.realization(i).unwrap().values);
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&y[..]));
        }
        out
    }

    #[test]
    fn single_variable_dependence() {
        let space = InputSpaceModel::unit_cube(2).unwrap();
        let plan = saltelli_plan(&space, 1 << 14, 1).unwrap();
        let out = evaluate(&plan, |x| vec![x[0]]);
        let s = sobol_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        assert!((s.first[[0, 0]] - 1.0).abs() <= 0.02);
        assert!(s.first[[1, 0]].abs() <= 0.02);
        assert!(s.total[[1, 0]].abs() <= 0.02);
        assert!((s.total[[0, 0]] - 1.0).abs() <= 0.02);
    }

    #[test]
    fn pure_interaction() {
        let vars = (0..2)
            .map(|i| VariableSpec {
                name: format!("s{i}"),
                kind: VariableKind::Categorical { k: 2 },
                default_value: 0.0,
                role: VariableRole::Free,
            })
            .collect();
        let space = InputSpaceModel::abstract_space(vars, None).unwrap();
        let plan = saltelli_plan(&space, 1 << 12, 2).unwrap();
        let out = evaluate(&plan, |x| vec![(2.0 * x[0] - 1.0) * (2.0 * x[1] - 1.0)]);
        let s = sobol_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        for g in 0..2 {
            assert!(s.first[[g, 0]].abs() < 0.03, "{}", s.first[[g, 0]]);
            assert!((s.total[[g, 0]] - 1.0).abs() < 0.03, "{}", s.total[[g, 0]]);
        }
    }

    #[test]
    fn g_function_matches_analytic_indices() {
        let a = [0.0, 1.0, 4.5, 9.0];
        // V_i = 1 / (3 (1 + a_i)^2), V = Π(1 + V_i) − 1.
        let vi: Vec<f64> = a.iter().map(|ai| 1.0 / (3.0 * (1.0 + ai) * (1.0 + ai))).collect();
        let v = vi.iter().map(|x| 1.0 + x).product::<f64>() - 1.0;
        let space = InputSpaceModel::unit_cube(4).unwrap();
        let plan = saltelli_plan(&space, 1 << 14, 3).unwrap();
        let out = evaluate(&plan, |x| {
            vec![x.iter().zip(&a).map(|(xi, ai)| ((4.0 * xi - 2.0).abs() + ai) / (1.0 + ai)).product()]
        });
        let s = sobol_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        for i in 0..4 {
            let exact = vi[i] / v;
            assert!((s.first[[i, 0]] - exact).abs() < 0.02, "S{i}: {} vs {exact}", s.first[[i, 0]]);
            let exact_t = vi[i] * vi.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| 1.0 + x).product::<f64>() / v;
            assert!((s.total[[i, 0]] - exact_t).abs() < 0.02, "ST{i}: {} vs {exact_t}", s.total[[i, 0]]);
        }
    }

    #[test]
    fn affine_rescaling_leaves_indices_unchanged() {
        let space = InputSpaceModel::unit_cube(3).unwrap();
        let plan = saltelli_plan(&space, 256, 4).unwrap();
        let f = |x: &[f64]| x[0] + 2.0 * x[1] * x[1] + x[0] * x[2];
        let out = evaluate(&plan, |x| vec![f(x), 3.5 * f(x) - 7.0]);
        let s = sobol_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        for g in 0..3 {
            assert!((s.first[[g, 0]] - s.first[[g, 1]]).abs() < 1e-9);
            assert!((s.total[[g, 0]] - s.total[[g, 1]]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_units_are_dead() {
        let space = InputSpaceModel::unit_cube(2).unwrap();
        let plan = saltelli_plan(&space, 8, 4).unwrap();
        let out = evaluate(&plan, |x| vec![3.0, x[0]]);
        let s = sobol_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        assert_eq!(s.dead, vec![true, false]);
        assert_eq!(s.first[[0, 0]], 0.0);
        assert_eq!(s.total[[1, 0]], 0.0);
    }
}
