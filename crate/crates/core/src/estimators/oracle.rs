use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::factorial;
use crate::inputspace::lehmer_decode;

/// Largest grid the exact computations accept.
const MAX_CELLS: usize = 1 << 20;

/// A function on a finite product grid with independent uniform marginals.
///
/// `values` is row-major over `levels` (last variable fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedFunction {
    pub levels: Vec<usize>,
    pub values: Vec<f64>,
}

impl TabulatedFunction {
    pub fn new(levels: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|&k| k == 0) {
            return Err(Error::InvalidArgument("every variable needs at least one level".into()));
        }
        let cells = levels.iter().try_fold(1usize, |acc, &k| acc.checked_mul(k));
        match cells {
            Some(c) if c == values.len() => Ok(Self { levels, values }),
            Some(c) => Err(Error::Arity {
                expected: c,
                got: values.len(),
            }),
            None => Err(Error::TooLarge("grid size overflows".into())),
        }
    }

    pub fn from_fn(levels: Vec<usize>, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let cells: usize = levels.iter().product();
        if cells > MAX_CELLS {
            return Err(Error::TooLarge(format!("{cells} grid cells")));
        }
        let mut values = Vec::with_capacity(cells);
        let mut idx = vec![0; levels.len()];
        for _ in 0..cells {
            values.push(f(&idx));
            for k in (0..levels.len()).rev() {
                idx[k] += 1;
                if idx[k] < levels[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Self::new(levels, values)
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: &[usize]) -> usize {
        x.iter().zip(&self.levels).fold(0, |acc, (&xi, &k)| acc * k + xi)
    }

    pub fn eval(&self, x: &[usize]) -> f64 {
        self.values[self.index(x)]
    }

    /// Grid coordinates of every cell, in storage order.
    fn coordinates(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0; self.dim()];
        for _ in 0..self.len() {
            out.push(idx.clone());
            for k in (0..self.dim()).rev() {
                idx[k] += 1;
                if idx[k] < self.levels[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }

    /// Key of a cell restricted to the variables in `mask`.
    fn key(x: &[usize], mask: u32) -> Vec<usize> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| if mask >> i & 1 == 1 { v } else { usize::MAX })
            .collect()
    }

    /// `E[f | x_mask]` evaluated at every cell.
    fn conditional_mean(&self, coords: &[Vec<usize>], mask: u32) -> Vec<f64> {
        let mut acc: HashMap<Vec<usize>, (f64, usize)> = HashMap::new();
        for (x, &v) in coords.iter().zip(&self.values) {
            let e = acc.entry(Self::key(x, mask)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        coords
            .iter()
            .map(|x| {
                let (s, n) = acc[&Self::key(x, mask)];
                s / n as f64
            })
            .collect()
    }

    /// Total-effect cost `c_T(α) = E[Var(f | x_{−α})]` by direct enumeration.
    pub fn total_cost(&self, alpha: u32) -> f64 {
        let coords = self.coordinates();
        let full = (1u32 << self.dim()) - 1;
        let rest = full & !alpha;
        let mut groups: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
        for (x, &v) in coords.iter().zip(&self.values) {
            groups.entry(Self::key(x, rest)).or_default().push(v);
        }
        let mut total = 0.0;
        for vals in groups.values() {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            total += var * vals.len() as f64;
        }
        total / self.len() as f64
    }
}

/// Full functional ANOVA decomposition of a tabulated function.
#[derive(Debug, Clone)]
pub struct OracleDecomposition {
    pub dim: usize,
    pub mean: f64,
    pub variance: f64,
    /// `components[mask]` is `f_α` at every cell, `α` encoded as a bit mask.
    pub components: Vec<Vec<f64>>,
    /// `partial[mask] = V_α`; `partial[0] = 0`.
    pub partial: Vec<f64>,
    /// True when the function is constant.
    pub degenerate: bool,
}

impl OracleDecomposition {
    /// `S_α = V_α / V`.
    pub fn index(&self, mask: u32) -> f64 {
        if self.degenerate {
            0.0
        } else {
            self.partial[mask as usize] / self.variance
        }
    }

    /// `S_α^T`: variance share of every term containing `α`.
    pub fn total_index(&self, mask: u32) -> f64 {
        if self.degenerate || mask == 0 {
            return 0.0;
        }
        let s: f64 = (1..self.partial.len() as u32)
            .filter(|b| b & mask == mask)
            .map(|b| self.partial[b as usize])
            .sum();
        (s / self.variance).min(1.0)
    }

    pub fn first_order(&self, i: usize) -> f64 {
        self.index(1 << i)
    }

    pub fn total(&self, i: usize) -> f64 {
        self.total_index(1 << i)
    }
}

/// Decomposes `f` into `f_∅ + Σ f_α` with `f_α` from the recursive
/// conditional-expectation formula.
pub fn exact_oracle(f: &TabulatedFunction) -> Result<OracleDecomposition> {
    let d = f.dim();
    if d > 6 || f.len() > MAX_CELLS {
        return Err(Error::TooLarge(format!("exact decomposition of {d} variables, {} cells", f.len())));
    }
    let coords = f.coordinates();
    let n = f.len() as f64;
    let n_sub = 1usize << d;
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n_sub);
    for mask in 0..n_sub as u32 {
        let mut comp = f.conditional_mean(&coords, mask);
        // Every proper subset has a smaller mask and is already known.
        let mut sub = mask;
        while sub != 0 {
            sub = (sub - 1) & mask;
            let c = &components[sub as usize];
            comp.iter_mut().zip(c).for_each(|(a, b)| *a -= b);
            if sub == 0 {
                break;
            }
        }
        components.push(comp);
    }
    let mean = components[0][0];
    let variance = f.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let partial: Vec<f64> = components
        .iter()
        .enumerate()
        .map(|(m, c)| if m == 0 { 0.0 } else { c.iter().map(|v| v * v).sum::<f64>() / n })
        .collect();
    let degenerate = !(variance > 1e-300);
    Ok(OracleDecomposition {
        dim: d,
        mean,
        variance,
        components,
        partial,
        degenerate,
    })
}

/// Exact Shapley effects in both the subset-sum and the permutation form.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyExact {
    pub subset_form: Vec<f64>,
    pub permutation_form: Vec<f64>,
    pub variance: f64,
}

/// `w_α = (d − |α| − 1)!·|α|!/d!`.
pub fn shapley_weight(d: usize, size: usize) -> f64 {
    factorial(d - size - 1) as f64 * factorial(size) as f64 / factorial(d) as f64
}

pub fn subset_shapley_exact(f: &TabulatedFunction) -> Result<ShapleyExact> {
    let d = f.dim();
    if d > 5 || f.len() > MAX_CELLS {
        return Err(Error::TooLarge(format!("exact Shapley effects of {d} variables, {} cells", f.len())));
    }
    let n_sub = 1usize << d;
    let cost: Vec<f64> = (0..n_sub as u32).map(|m| if m == 0 { 0.0 } else { f.total_cost(m) }).collect();

    let mut subset_form = vec![0.0; d];
    for (i, v) in subset_form.iter_mut().enumerate() {
        for alpha in 0..n_sub as u32 {
            if alpha >> i & 1 == 1 {
                continue;
            }
            let w = shapley_weight(d, alpha.count_ones() as usize);
            *v += w * (cost[(alpha | 1 << i) as usize] - cost[alpha as usize]);
        }
    }

    let n_perm = factorial(d);
    let mut permutation_form = vec![0.0; d];
    for r in 0..n_perm {
        let mut prefix = 0u32;
        for i in lehmer_decode(r, d) {
            let next = prefix | 1 << i;
            permutation_form[i] += cost[next as usize] - cost[prefix as usize];
            prefix = next;
        }
    }
    permutation_form.iter_mut().for_each(|v| *v /= n_perm as f64);

    Ok(ShapleyExact {
        subset_form,
        permutation_form,
        variance: cost[n_sub - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use rand::Rng;

    fn random_function(seed: u64, d: usize) -> TabulatedFunction {
        let mut rng = Streams::new(seed).at(0, 0);
        let levels: Vec<usize> = (0..d).map(|_| rng.random_range(2..=3)).collect();
        let cells: usize = levels.iter().product();
        let values = (0..cells).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        TabulatedFunction::new(levels, values).unwrap()
    }

    #[test]
    fn decomposition_is_complete_and_orthogonal() {
        for seed in 0..20 {
            let f = random_function(seed, 1 + (seed as usize % 4));
            let o = exact_oracle(&f).unwrap();
            let sum: f64 = o.partial.iter().sum();
            assert!((sum - o.variance).abs() < 1e-10);
            for cell in 0..f.len() {
                let recon: f64 = o.components.iter().map(|c| c[cell]).sum();
                assert!((recon - f.values[cell]).abs() < 1e-10);
            }
            for c in &o.components[1..] {
                assert!((c.iter().sum::<f64>() / c.len() as f64).abs() < 1e-10);
            }
            for m in 1..o.partial.len() as u32 {
                let (s, st) = (o.index(m), o.total_index(m));
                assert!(0.0 <= s && s <= st && st <= 1.0, "{s} {st}");
            }
        }
    }

    #[test]
    fn constant_function_is_degenerate() {
        let f = TabulatedFunction::from_fn(vec![3, 2], |_| 1.5).unwrap();
        let o = exact_oracle(&f).unwrap();
        assert!(o.degenerate);
        assert_eq!(o.variance, 0.0);
        assert_eq!(o.first_order(0), 0.0);
        assert_eq!(o.total(1), 0.0);
    }

    #[test]
    fn pure_interaction_oracle() {
        let f = TabulatedFunction::from_fn(vec![2, 2], |x| (2.0 * x[0] as f64 - 1.0) * (2.0 * x[1] as f64 - 1.0)).unwrap();
        let o = exact_oracle(&f).unwrap();
        assert!(o.first_order(0).abs() < 1e-15 && o.first_order(1).abs() < 1e-15);
        assert!((o.total(0) - 1.0).abs() < 1e-15 && (o.total(1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shapley_weights_sum_to_one() {
        for d in 1..=6 {
            for i in 0..d {
                let mut s = 0.0;
                for alpha in 0..1u32 << d {
                    if alpha >> i & 1 == 0 {
                        s += shapley_weight(d, alpha.count_ones() as usize);
                    }
                }
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subset_and_permutation_forms_agree() {
        for seed in 0..10 {
            let f = random_function(100 + seed, 4);
            let s = subset_shapley_exact(&f).unwrap();
            for i in 0..4 {
                assert!((s.subset_form[i] - s.permutation_form[i]).abs() < 1e-10);
            }
            let sum: f64 = s.subset_form.iter().sum();
            assert!((sum - s.variance).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_set_costs_nothing() {
        let f = random_function(5, 3);
        assert_eq!(f.total_cost(0), 0.0);
        let o = exact_oracle(&f).unwrap();
        assert!((f.total_cost(0b111) - o.variance).abs() < 1e-12);
    }

    #[test]
    fn large_spaces_are_refused() {
        let f = TabulatedFunction::from_fn(vec![2; 6], |x| x[0] as f64).unwrap();
        assert!(matches!(subset_shapley_exact(&f), Err(Error::TooLarge(_))));
    }
}
