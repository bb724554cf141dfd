use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::{is_dead, reshape, reshape_bool, EvaluatedPlan, SensitivityKind, SensitivityMap};
use crate::error::{Error, Result};
use crate::inputspace::Design;
use crate::numeric::CompensatedSum;

/// Shapley effects of every group for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyEffects {
    /// `groups × units`, in variance units.
    pub values: Array2<f64>,
    /// Cost of the full group set averaged over permutations; the effects of
    /// a unit sum to this value.
    pub total_variance: Vec<f64>,
    pub dead: Vec<bool>,
    pub n_permutations: usize,
}

impl ShapleyEffects {
    pub fn to_maps(&self, checkpoint: &str, shape: &[usize], groups: &[String]) -> Vec<SensitivityMap> {
        let tv = reshape(self.total_variance.clone(), shape);
        let dead = reshape_bool(self.dead.clone(), shape);
        groups
            .iter()
            .enumerate()
            .map(|(g, name)| SensitivityMap {
                checkpoint: checkpoint.to_string(),
                kind: SensitivityKind::Shapley,
                group: name.clone(),
                values: reshape(self.values.row(g).to_vec(), shape),
                total_variance: tv.clone(),
                dead: dead.clone(),
            })
            .collect()
    }

    /// `Σ_g v_g / total_variance` per unit; `None` for dead units.
    pub fn efficiency(&self) -> Vec<Option<f64>> {
        (0..self.values.ncols())
            .map(|u| {
                if self.dead[u] {
                    None
                } else {
                    Some(self.values.column(u).sum() / self.total_variance[u])
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
struct UnitState {
    previous: f64,
    total: CompensatedSum,
    mean: CompensatedSum,
    count: usize,
}

/// Streams the blocks of a Shapley plan in row order.
///
/// A block holds the `n_outer · n_inner` rows of one (permutation, prefix)
/// pair. The cost `c(J) = E[Var(f | x_{−J})]` is the mean over outer draws
/// of the unbiased inner variance; `c(∅) = 0`.
#[derive(Debug, Clone)]
pub struct ShapleyAccumulator {
    permutations: Vec<Vec<usize>>,
    n_groups: usize,
    n_outer: usize,
    n_inner: usize,
    n_units: usize,
    state: Vec<UnitState>,
    /// `units × groups` running sums of marginal contributions.
    contributions: Vec<CompensatedSum>,
    blocks: usize,
}

impl ShapleyAccumulator {
    pub fn new(permutations: Vec<Vec<usize>>, n_groups: usize, n_outer: usize, n_inner: usize, n_units: usize) -> Result<Self> {
        if n_inner < 2 {
            return Err(Error::VarianceUndefined(format!("{n_inner} inner draws")));
        }
        Ok(Self {
            permutations,
            n_groups,
            n_outer,
            n_inner,
            n_units,
            state: vec![UnitState::default(); n_units],
            contributions: vec![CompensatedSum::new(); n_units * n_groups],
            blocks: 0,
        })
    }

    pub fn block_len(&self) -> usize {
        self.n_outer * self.n_inner
    }

    pub fn expected_blocks(&self) -> usize {
        self.permutations.len() * self.n_groups
    }

    pub fn push_block(&mut self, block: ArrayView2<f64>) -> Result<()> {
        if block.nrows() != self.block_len() || block.ncols() != self.n_units {
            return Err(Error::Shape(format!(
                "Shapley block must be {}x{}, got {}x{}",
                self.block_len(),
                self.n_units,
                block.nrows(),
                block.ncols()
            )));
        }
        if self.blocks >= self.expected_blocks() {
            return Err(Error::InvalidArgument("more Shapley blocks than the plan holds".into()));
        }
        let p = self.blocks / self.n_groups;
        let j = self.blocks % self.n_groups;
        let player = self.permutations[p][j];
        let last = j + 1 == self.n_groups;
        let (g, n_outer, n_inner) = (self.n_groups, self.n_outer, self.n_inner);
        self.state
            .par_iter_mut()
            .zip(self.contributions.par_chunks_mut(g))
            .enumerate()
            .for_each(|(u, (st, contrib))| {
                let col = block.column(u);
                let mut cost = CompensatedSum::new();
                for o in 0..n_outer {
                    let inner = col.slice(ndarray::s![o * n_inner..(o + 1) * n_inner]);
                    let m = inner.iter().sum::<f64>() / n_inner as f64;
                    let var = inner.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (n_inner - 1) as f64;
                    cost.add(var);
                    if last {
                        st.mean.add(m);
                        st.count += 1;
                    }
                }
                let c = cost.value() / n_outer as f64;
                contrib[player].add(c - st.previous);
                st.previous = c;
                if last {
                    st.total.add(c);
                    st.previous = 0.0;
                }
            });
        self.blocks += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<ShapleyEffects> {
        if self.blocks != self.expected_blocks() {
            return Err(Error::InvalidArgument(format!(
                "Shapley plan incomplete: {} of {} blocks",
                self.blocks,
                self.expected_blocks()
            )));
        }
        let n_p = self.permutations.len() as f64;
        let g = self.n_groups;
        let mut values = Array2::zeros((g, self.n_units));
        let mut total_variance = vec![0.0; self.n_units];
        let mut dead = vec![false; self.n_units];
        for u in 0..self.n_units {
            let st = &self.state[u];
            let tv = st.total.value() / n_p;
            let mean = st.mean.value() / st.count.max(1) as f64;
            total_variance[u] = tv.max(0.0);
            dead[u] = is_dead(tv, mean);
            if dead[u] {
                continue;
            }
            for k in 0..g {
                values[[k, u]] = self.contributions[u * g + k].value() / n_p;
            }
        }
        Ok(ShapleyEffects {
            values,
            total_variance,
            dead,
            n_permutations: self.permutations.len(),
        })
    }
}

/// Shapley effects with the total-effect cost from an evaluated permutation plan.
pub fn shapley_estimate(ev: &EvaluatedPlan) -> Result<ShapleyEffects> {
    let Design::Shapley {
        permutations,
        n_groups,
        n_outer,
        n_inner,
        ..
    } = &ev.plan.design
    else {
        return Err(Error::InvalidArgument("shapley_estimate needs a Shapley plan".into()));
    };
    let mut acc = ShapleyAccumulator::new(permutations.clone(), *n_groups, *n_outer, *n_inner, ev.outputs.ncols())?;
    let len = acc.block_len();
    for b in 0..acc.expected_blocks() {
        acc.push_block(ev.outputs.slice(ndarray::s![b * len..(b + 1) * len, ..]))?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputspace::{shapley_plan, InputSpaceModel, SamplePlan};
    use crate::rng::Streams;
    use rand::Rng;

    fn evaluate(plan: &SamplePlan, f: impl Fn(&[f64]) -> f64) -> Array2<f64> {
        Array2::from_shape_fn((plan.len(), 1), |(i, _)| f(&plan.realization(i).unwrap().values))
    }

    #[test]
    fn additive_model_splits_variance_equally() {
        let space = InputSpaceModel::unit_cube(4).unwrap();
        let plan = shapley_plan(&space, 24, 64, 8, 1).unwrap();
        let out = evaluate(&plan, |x| x.iter().sum());
        let s = shapley_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        let v = 4.0 / 12.0;
        for g in 0..4 {
            let rel = (s.values[[g, 0]] - v / 4.0).abs() / (v / 4.0);
            assert!(rel <= 0.05, "group {g}: {}", s.values[[g, 0]]);
        }
    }

    #[test]
    fn single_player_takes_everything() {
        let space = InputSpaceModel::unit_cube(1).unwrap();
        let plan = shapley_plan(&space, 3, 5, 4, 2).unwrap();
        let out = evaluate(&plan, |x| x[0] * x[0]);
        let s = shapley_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        assert!((s.values[[0, 0]] - s.total_variance[0]).abs() <= 1e-15 * s.total_variance[0].max(1.0));
    }

    #[test]
    fn efficiency_on_random_quadratics() {
        let space = InputSpaceModel::unit_cube(5).unwrap();
        let plan = shapley_plan(&space, 30, 8, 4, 3).unwrap();
        let mut rng = Streams::new(77).at(0, 0);
        let coef: Vec<Vec<f64>> = (0..10).map(|_| (0..20).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect();
        let out = Array2::from_shape_fn((plan.len(), 10), |(i, k)| {
            let x = plan.realization(i).unwrap().values;
            let c = &coef[k];
            (0..5).map(|a| c[a] * x[a]).sum::<f64>() + (0..5).map(|a| c[5 + a] * x[a] * x[(a + 1) % 5]).sum::<f64>()
        });
        let s = shapley_estimate(&EvaluatedPlan::new(&plan, out.view()).unwrap()).unwrap();
        for e in s.efficiency() {
            let e = e.unwrap();
            assert!((e - 1.0).abs() <= 0.02, "{e}");
        }
    }

    #[test]
    fn incomplete_plans_are_rejected() {
        let mut acc = ShapleyAccumulator::new(vec![vec![0, 1]], 2, 1, 2, 1).unwrap();
        acc.push_block(Array2::zeros((2, 1)).view()).unwrap();
        assert!(acc.finish().is_err());
        assert!(ShapleyAccumulator::new(vec![vec![0]], 1, 1, 1, 1).is_err());
    }
}
