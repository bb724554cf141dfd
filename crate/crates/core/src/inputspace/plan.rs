use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sobol::{to_unit, SobolSequence, MAX_DIM};
use super::{lehmer_decode, InputSpaceModel, Realization, Scheme};
use crate::error::{Error, Result};
use crate::numeric::factorial;
use crate::rng::{stream, Streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Design {
    /// Rows come in blocks of `2G + 2`, one block per base point `j`:
    /// `A_j, AB_1j .. AB_Gj, BA_1j .. BA_Gj, B_j`.
    Saltelli { n_base: usize, n_groups: usize },
    /// Row `((p·G + j)·n_outer + o)·n_inner + i` belongs to permutation `p`,
    /// prefix length `j + 1`, outer draw `o` and inner draw `i`.
    Shapley {
        permutations: Vec<Vec<usize>>,
        n_groups: usize,
        n_outer: usize,
        n_inner: usize,
        exhaustive: bool,
    },
}

/// An immutable, fully materialized sampling design.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub space: InputSpaceModel,
    pub design: Design,
    /// Unit-hypercube coordinates, one row per model evaluation.
    pub rows: Array2<f64>,
    pub seed: u64,
    pub budget: usize,
}

impl SamplePlan {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn realization(&self, i: usize) -> Result<Realization> {
        let row = self.rows.row(i);
        self.space.decode(row.as_slice().expect("plan rows are contiguous"))
    }

    /// Number of consecutive rows an estimator consumes at once.
    pub fn block_len(&self) -> usize {
        match &self.design {
            Design::Saltelli { n_groups, .. } => 2 * n_groups + 2,
            Design::Shapley { n_outer, n_inner, .. } => n_outer * n_inner,
        }
    }

    pub fn n_groups(&self) -> usize {
        match &self.design {
            Design::Saltelli { n_groups, .. } | Design::Shapley { n_groups, .. } => *n_groups,
        }
    }
}

/// Parameters of the closed-form sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetKind {
    Saltelli {
        n: u64,
        d: u64,
    },
    Shapley {
        n_perm: u64,
        d: u64,
        n_outer: u64,
        n_inner: u64,
    },
    Screening {
        n_aug: u64,
        n_aug_theta: u64,
        m_inner: u64,
        k: u64,
        n_classes: u64,
    },
}

pub fn budget(kind: BudgetKind) -> u64 {
    match kind {
        BudgetKind::Saltelli { n, d } => n * (2 * d + 2),
        BudgetKind::Shapley {
            n_perm,
            d,
            n_outer,
            n_inner,
        } => n_perm * d * n_outer * n_inner,
        BudgetKind::Screening {
            n_aug,
            n_aug_theta,
            m_inner,
            k,
            n_classes,
        } => (1 + n_aug + m_inner * n_aug_theta) * k * n_classes,
    }
}

/// Saltelli design over the groups of `space`.
///
/// `A` and `B` are the two halves of a `2D`-dimensional Sobol point, digitally
/// shifted by a seed-derived XOR mask. Besides the `AB_g` matrices the plan
/// carries `BA_g` (columns of group `g` in `B` taken from `A`), which lets the
/// estimator use both halves symmetrically within the same budget.
pub fn saltelli_plan(space: &InputSpaceModel, n_base: usize, seed: u64) -> Result<SamplePlan> {
    if n_base == 0 || !n_base.is_power_of_two() {
        return Err(Error::InvalidBudget(format!("n_base = {n_base} is not a power of two")));
    }
    if space.scheme != Scheme::Independent {
        return Err(Error::InvalidSpace("Saltelli designs need the independent scheme".into()));
    }
    let d = space.dim();
    let g = space.n_groups();
    if 2 * d > MAX_DIM {
        return Err(Error::UnsupportedDimension { dim: 2 * d, max: MAX_DIM });
    }
    let seq = SobolSequence::new(2 * d)?;
    let streams = Streams::new(seed);
    let shift: Vec<u32> = (0..2 * d)
        .map(|c| streams.at(stream::SALTELLI_SHIFT, c as u64).random::<u32>())
        .collect();

    let block = 2 * g + 2;
    let mut rows = Array2::zeros((n_base * block, d));
    for j in 0..n_base {
        let bits = seq.point_bits((n_base + j) as u64);
        let point: Vec<f64> = bits.iter().zip(&shift).map(|(&b, &s)| to_unit(b ^ s)).collect();
        let (a, b) = point.split_at(d);
        let base = j * block;
        rows.row_mut(base).assign(&ArrayView1::from(a));
        rows.row_mut(base + block - 1).assign(&ArrayView1::from(b));
        for (gi, group) in space.groups.iter().enumerate() {
            let mut ab = a.to_vec();
            let mut ba = b.to_vec();
            for &c in &group.member_indices {
                ab[c] = b[c];
                ba[c] = a[c];
            }
            rows.row_mut(base + 1 + gi).assign(&ArrayView1::from(&ab[..]));
            rows.row_mut(base + 1 + g + gi).assign(&ArrayView1::from(&ba[..]));
        }
    }
    let budget = budget(BudgetKind::Saltelli {
        n: n_base as u64,
        d: g as u64,
    }) as usize;
    debug_assert_eq!(budget, rows.nrows());
    Ok(SamplePlan {
        space: space.clone(),
        design: Design::Saltelli { n_base, n_groups: g },
        rows,
        seed,
        budget,
    })
}

/// Permutation design for Shapley effects with the total-effect cost.
///
/// For permutation `π` and prefix `J = {π_1..π_j}` the complement of `J` is
/// held at an outer draw while the groups in `J` take fresh inner draws. Outer
/// and inner vectors are shared across the prefixes of one permutation.
/// With `n_perm ≥ G!` every permutation is enumerated once in lexicographic
/// order.
pub fn shapley_plan(space: &InputSpaceModel, n_perm: usize, n_outer: usize, n_inner: usize, seed: u64) -> Result<SamplePlan> {
    if n_inner < 2 {
        return Err(Error::VarianceUndefined(format!(
            "conditional variance needs at least 2 inner draws, got {n_inner}"
        )));
    }
    if n_perm == 0 || n_outer == 0 {
        return Err(Error::InvalidBudget("n_perm and n_outer must be positive".into()));
    }
    let g = space.n_groups();
    let d = space.dim();
    let streams = Streams::new(seed);
    let exhaustive = g <= 30 && n_perm as u128 >= factorial(g);
    let permutations: Vec<Vec<usize>> = if exhaustive {
        (0..factorial(g)).map(|r| lehmer_decode(r, g)).collect()
    } else {
        (0..n_perm)
            .map(|p| {
                let mut perm: Vec<usize> = (0..g).collect();
                perm.shuffle(&mut streams.at(stream::SHAPLEY_PERMUTATIONS, p as u64));
                perm
            })
            .collect()
    };
    let n_p = permutations.len();
    let total = n_p
        .checked_mul(g)
        .and_then(|x| x.checked_mul(n_outer))
        .and_then(|x| x.checked_mul(n_inner))
        .ok_or_else(|| Error::TooLarge("Shapley budget overflows".into()))?;
    let owner = space.group_of_variables();
    let mut rows = Array2::zeros((total, d));
    for (p, perm) in permutations.iter().enumerate() {
        for o in 0..n_outer {
            let mut rng = streams.at(stream::SHAPLEY_OUTER, (p * n_outer + o) as u64);
            let outer: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let inner: Vec<Vec<f64>> = (0..n_inner)
                .map(|i| {
                    let mut rng = streams.at(stream::SHAPLEY_INNER, ((p * n_outer + o) * n_inner + i) as u64);
                    (0..d).map(|_| rng.random::<f64>()).collect()
                })
                .collect();
            let mut in_prefix = vec![false; g];
            for (j, &grp) in perm.iter().enumerate() {
                in_prefix[grp] = true;
                for (i, z) in inner.iter().enumerate() {
                    let r = ((p * g + j) * n_outer + o) * n_inner + i;
                    let mut row = rows.row_mut(r);
                    for c in 0..d {
                        row[c] = if in_prefix[owner[c]] { z[c] } else { outer[c] };
                    }
                }
            }
        }
    }
    let budget = budget(BudgetKind::Shapley {
        n_perm: n_p as u64,
        d: g as u64,
        n_outer: n_outer as u64,
        n_inner: n_inner as u64,
    }) as usize;
    Ok(SamplePlan {
        space: space.clone(),
        design: Design::Shapley {
            permutations,
            n_groups: g,
            n_outer,
            n_inner,
            exhaustive,
        },
        rows,
        seed,
        budget,
    })
}
