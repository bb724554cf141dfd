//! Correlation matrices, clustering and discriminant analysis over maps.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayD, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::SensitivityMap;
use crate::numeric::spearman;
use crate::rng::{stream, Streams};

/// Shrinkage toward the scaled identity used by [`lda_confusion`].
pub const LDA_SHRINKAGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    /// `None` marks an undefined correlation (a constant column).
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable");
        for l in &self.labels {
            write!(out, ",{l}").expect("string write");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(l);
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

/// Spearman correlations between the columns of `features` (units ×
/// variables).
pub fn spearman_matrix(features: ArrayView2<f64>, labels: &[String]) -> Result<CorrelationMatrix> {
    let (units, vars) = features.dim();
    if units < 3 {
        return Err(Error::InvalidArgument(format!("{units} units; at least 3 are required")));
    }
    if labels.len() != vars {
        return Err(Error::Arity {
            expected: vars,
            got: labels.len(),
        });
    }
    let cols: Vec<Vec<f64>> = (0..vars).map(|j| features.column(j).to_vec()).collect();
    let mut values = vec![vec![None; vars]; vars];
    for i in 0..vars {
        for j in i..vars {
            let r = spearman(&cols[i], &cols[j]).map(|r| if i == j { 1.0 } else { r });
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        labels: labels.to_vec(),
        values,
    })
}

/// Unit-wise Spearman correlations between the maps of several SA variables
/// at one checkpoint; units dead in any map are left out.
pub fn variable_correlation(maps: &[&SensitivityMap]) -> Result<CorrelationMatrix> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no maps".into()))?;
    if maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::Shape("maps differ in shape".into()));
    }
    let dead: Vec<Vec<bool>> = maps.iter().map(|m| m.dead.iter().copied().collect()).collect();
    let values: Vec<Vec<f64>> = maps.iter().map(|m| m.values.iter().copied().collect()).collect();
    let alive: Vec<usize> = (0..first.values.len()).filter(|&u| dead.iter().all(|d| !d[u])).collect();
    let labels: Vec<String> = maps.iter().map(|m| m.group.clone()).collect();
    if alive.len() < 3 {
        return Ok(CorrelationMatrix {
            values: vec![vec![None; maps.len()]; maps.len()],
            labels,
        });
    }
    let features = Array2::from_shape_fn((alive.len(), maps.len()), |(r, j)| values[j][alive[r]]);
    spearman_matrix(features.view(), &labels)
}

/// Spearman correlation between the strict upper triangles of two
/// correlation matrices over the same variables, using the entries defined
/// in both.
pub fn cross_correlation(a: &CorrelationMatrix, b: &CorrelationMatrix) -> Result<Option<f64>> {
    if a.labels != b.labels {
        return Err(Error::InvalidArgument("matrices are over different variables".into()));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            if let (Some(p), Some(q)) = (a.values[i][j], b.values[i][j]) {
                x.push(p);
                y.push(q);
            }
        }
    }
    Ok(if x.len() < 3 { None } else { spearman(&x, &y) })
}

/// Per-pixel Spearman correlation across channels between a sensitivity
/// map and a coefficient-of-variation map, both `C×H×W`.
pub fn spatial_corr_map(sens: &ArrayD<f64>, cov: &ArrayD<f64>) -> Result<Array2<Option<f64>>> {
    if sens.shape() != cov.shape() || sens.ndim() != 3 {
        return Err(Error::Shape(format!("{:?} vs {:?}", sens.shape(), cov.shape())));
    }
    let (c, h, w) = (sens.shape()[0], sens.shape()[1], sens.shape()[2]);
    if c < 3 {
        return Err(Error::InvalidArgument(format!("{c} channels; at least 3 are required")));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let a: Vec<f64> = (0..c).map(|k| sens[[k, y, x]]).collect();
        let b: Vec<f64> = (0..c).map(|k| cov[[k, y, x]]).collect();
        spearman(&a, &b)
    }))
}

/// `d = √(1 − |ρ|)`; undefined correlations stay undefined.
pub fn corr_to_distance(m: &CorrelationMatrix) -> Vec<Vec<Option<f64>>> {
    m.values
        .iter()
        .map(|row| row.iter().map(|v| v.map(|r| (1.0 - r.abs()).max(0.0).sqrt())).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Cluster ids: leaves are `0..n`, the `i`-th merge creates `n + i`.
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,a,b,height,size\n");
        for (i, m) in self.merges.iter().enumerate() {
            writeln!(out, "{i},{},{},{:.17e},{}", m.a, m.b, m.height, m.size).expect("string write");
        }
        out
    }

    /// Leaf members of cluster `id`.
    pub fn members(&self, id: usize) -> Vec<usize> {
        let n = self.labels.len();
        if id < n {
            return vec![id];
        }
        let m = self.merges[id - n];
        let mut out = self.members(m.a);
        out.extend(self.members(m.b));
        out.sort_unstable();
        out
    }
}

/// Average-linkage agglomerative clustering.
///
/// Undefined distances are excluded pairwise: the distance of two clusters
/// is the mean over their defined leaf pairs. Ties merge the pair with the
/// lowest cluster positions first.
pub fn average_linkage(dist: &[Vec<Option<f64>>], labels: &[String]) -> Result<Dendrogram> {
    let n = dist.len();
    if labels.len() != n || dist.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("distance matrix must be square and labelled".into()));
    }
    if n > 1 && !(0..n).any(|i| (0..n).any(|j| i != j && dist[i][j].is_some())) {
        return Err(Error::InvalidArgument("every distance is undefined".into()));
    }
    // Active clusters with their ids, and pairwise sums/counts of defined leaf distances.
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut sum: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist[i][j].unwrap_or(0.0)).collect()).collect();
    let mut cnt: Vec<Vec<usize>> = (0..n).map(|i| (0..n).map(|j| usize::from(dist[i][j].is_some())).collect()).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while ids.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if cnt[i][j] == 0 {
                    continue;
                }
                let d = sum[i][j] / cnt[i][j] as f64;
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (height, i, j) =
            best.ok_or_else(|| Error::InvalidArgument("remaining clusters share no defined distance".into()))?;
        merges.push(Merge {
            a: ids[i],
            b: ids[j],
            height,
            size: sizes[i] + sizes[j],
        });
        for k in 0..ids.len() {
            sum[i][k] += sum[j][k];
            cnt[i][k] += cnt[j][k];
            sum[k][i] = sum[i][k];
            cnt[k][i] = cnt[i][k];
        }
        ids[i] = n + merges.len() - 1;
        sizes[i] += sizes[j];
        ids.remove(j);
        sizes.remove(j);
        sum.remove(j);
        cnt.remove(j);
        for row in sum.iter_mut() {
            row.remove(j);
        }
        for row in cnt.iter_mut() {
            row.remove(j);
        }
    }
    Ok(Dendrogram {
        labels: labels.to_vec(),
        merges,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[true][predicted]`, averaged over repeats; each repeat
    /// classifies every sample exactly once.
    pub counts: Array2<f64>,
    pub folds: usize,
    pub repeats: usize,
}

impl ConfusionMatrix {
    pub fn rates(&self) -> Array2<f64> {
        let mut r = self.counts.clone();
        for mut row in r.axis_iter_mut(Axis(0)) {
            let s: f64 = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        r
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.counts.sum();
        if total == 0.0 {
            return 0.0;
        }
        self.counts.diag().sum() / total
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            write!(out, ",{l}").expect("string write");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(self.counts.outer_iter()) {
            out.push_str(l);
            for v in row {
                write!(out, ",{v:.17e}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// A fitted linear discriminant.
#[derive(Debug, Clone)]
pub struct Lda {
    /// `classes × p` rows of `Σ⁻¹ μ_c`.
    coef: DMatrix<f64>,
    intercept: DVector<f64>,
    /// Shrinkage actually used.
    pub shrinkage: f64,
}

impl Lda {
    /// Pooled-covariance LDA with shrinkage `λ` toward `(tr Σ / p)·I`;
    /// `λ` grows tenfold until the covariance factorizes.
    pub fn fit(x: ArrayView2<f64>, y: &[usize], classes: usize, shrinkage: f64) -> Result<Self> {
        let (n, p) = x.dim();
        if n != y.len() {
            return Err(Error::Arity { expected: n, got: y.len() });
        }
        let mut counts = vec![0usize; classes];
        let mut means = DMatrix::<f64>::zeros(classes, p);
        for (row, &c) in x.outer_iter().zip(y) {
            if c >= classes {
                return Err(Error::InvalidArgument(format!("label {c} ≥ {classes}")));
            }
            counts[c] += 1;
            for j in 0..p {
                means[(c, j)] += row[j];
            }
        }
        for c in 0..classes {
            if counts[c] > 0 {
                for j in 0..p {
                    means[(c, j)] /= counts[c] as f64;
                }
            }
        }
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for (row, &c) in x.outer_iter().zip(y) {
            let d = DVector::from_fn(p, |j, _| row[j] - means[(c, j)]);
            cov.ger(1.0, &d, &d, 1.0);
        }
        let present = counts.iter().filter(|&&k| k > 0).count();
        cov /= (n.saturating_sub(present)).max(1) as f64;
        let scale = cov.trace() / p as f64;
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut lambda = shrinkage;
        let chol = loop {
            let mut s = cov.scale(1.0 - lambda);
            for j in 0..p {
                s[(j, j)] += lambda * scale;
            }
            if let Some(ch) = s.cholesky() {
                break ch;
            }
            if lambda >= 1.0 {
                return Err(Error::InvalidArgument("covariance does not factorize".into()));
            }
            lambda = (lambda * 10.0).min(1.0);
            log::debug!("LDA shrinkage raised to {lambda}");
        };
        let n_total: f64 = counts.iter().sum::<usize>() as f64;
        let mut coef = DMatrix::<f64>::zeros(classes, p);
        let mut intercept = DVector::<f64>::from_element(classes, f64::NEG_INFINITY);
        for c in 0..classes {
            if counts[c] == 0 {
                continue;
            }
            let mu = means.row(c).transpose();
            let w = chol.solve(&mu);
            intercept[c] = -0.5 * mu.dot(&w) + (counts[c] as f64 / n_total).ln();
            coef.set_row(c, &w.transpose());
        }
        Ok(Self {
            coef,
            intercept,
            shrinkage: lambda,
        })
    }

    /// Highest discriminant score, ties to the lower class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let v = DVector::from_column_slice(x);
        let scores = &self.coef * v + &self.intercept;
        let mut best = 0;
        for c in 1..scores.len() {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        best
    }
}

/// Stratified `folds`-fold cross-validated LDA, repeated `repeats` times
/// with per-repeat shuffles; counts are averaged over repeats.
pub fn lda_confusion(
    features: ArrayView2<f64>,
    labels: &[usize],
    names: &[String],
    folds: usize,
    repeats: usize,
    seed: u64,
) -> Result<ConfusionMatrix> {
    let classes = names.len();
    if classes < 2 {
        return Err(Error::InvalidArgument("at least two classes are required".into()));
    }
    if folds < 2 || repeats == 0 {
        return Err(Error::InvalidArgument("need folds ≥ 2 and repeats ≥ 1".into()));
    }
    if labels.len() != features.nrows() {
        return Err(Error::Arity {
            expected: features.nrows(),
            got: labels.len(),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} ≥ {classes}")))?
            .push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.len() < folds) {
        return Err(Error::InvalidArgument(format!("class {c} has fewer than {folds} samples")));
    }
    let streams = Streams::new(seed);
    let per_repeat: Vec<Array2<f64>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = streams.at(stream::LDA_FOLDS, r as u64);
            let mut fold_of = vec![0usize; labels.len()];
            for members in &by_class {
                let mut m = members.clone();
                m.shuffle(&mut rng);
                for (pos, &i) in m.iter().enumerate() {
                    fold_of[i] = pos % folds;
                }
            }
            let mut counts = Array2::<f64>::zeros((classes, classes));
            for f in 0..folds {
                let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
                let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
                let xt = features.select(Axis(0), &train);
                let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
                let model = Lda::fit(xt.view(), &yt, classes, LDA_SHRINKAGE)?;
                for &i in &test {
                    let row = features.row(i).to_vec();
                    counts[[labels[i], model.predict(&row)]] += 1.0;
                }
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;
    let mut counts = Array2::<f64>::zeros((classes, classes));
    for c in &per_repeat {
        counts += c;
    }
    counts /= repeats as f64;
    Ok(ConfusionMatrix {
        labels: names.to_vec(),
        counts,
        folds,
        repeats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, IxDyn};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    fn smap(group: &str, values: Vec<f64>, dead: Vec<bool>) -> SensitivityMap {
        let n = values.len();
        SensitivityMap {
            checkpoint: "c".into(),
            kind: crate::estimators::SensitivityKind::SobolFirst,
            group: group.into(),
            values: ArrayD::from_shape_vec(IxDyn(&[n, 1, 1]), values).unwrap(),
            total_variance: ArrayD::ones(IxDyn(&[n, 1, 1])),
            dead: ArrayD::from_shape_vec(IxDyn(&[n, 1, 1]), dead).unwrap(),
        }
    }

    #[test]
    fn variable_correlation_skips_dead_units() {
        let live = vec![false, false, false, false, true];
        let a = smap("a", vec![0.1, 0.2, 0.3, 0.4, 9.0], live.clone());
        let b = smap("b", vec![0.4, 0.3, 0.2, 0.1, 9.0], live.clone());
        let c = smap("c", vec![0.5, 0.5, 0.5, 0.5, 0.0], live);
        let m = variable_correlation(&[&a, &b, &c]).unwrap();
        assert!((m.get(0, 1).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.get(0, 2), None);
        assert_eq!(m.get(2, 2), None);
        let all_dead = smap("a", vec![0.0; 5], vec![true; 5]);
        let m = variable_correlation(&[&all_dead, &all_dead]).unwrap();
        assert!(m.values.iter().flatten().all(Option::is_none));
    }

    #[test]
    fn cross_correlation_of_triangles() {
        let mat = |v: [f64; 6]| {
            let mut values = vec![vec![Some(1.0); 4]; 4];
            let mut k = 0;
            for i in 0..4 {
                for j in i + 1..4 {
                    values[i][j] = Some(v[k]);
                    values[j][i] = Some(v[k]);
                    k += 1;
                }
            }
            CorrelationMatrix { labels: names(4), values }
        };
        let a = mat([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let b = mat([0.6, 0.5, 0.4, 0.3, 0.2, 0.1]);
        assert!((cross_correlation(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((cross_correlation(&a, &b).unwrap().unwrap() + 1.0).abs() < 1e-12);
        let undefined = CorrelationMatrix {
            labels: names(4),
            values: vec![vec![None; 4]; 4],
        };
        assert_eq!(cross_correlation(&a, &undefined).unwrap(), None);
        let other = CorrelationMatrix {
            labels: names(3),
            values: vec![vec![None; 3]; 3],
        };
        assert!(cross_correlation(&a, &other).is_err());
    }

    #[test]
    fn spearman_matrix_examples() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let f = Array2::from_shape_fn((10, 4), |(i, j)| match j {
            0 => x[i],
            1 => x[i].exp(),
            2 => -x[i].powi(3),
            _ => 7.0,
        });
        let m = spearman_matrix(f.view(), &names(4)).unwrap();
        assert!((m.get(0, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((m.get(0, 2).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.get(0, 3), None);
        assert_eq!(m.get(3, 3), None);
        assert!(m.to_csv().contains("NA"));
        assert!(spearman_matrix(f.slice(ndarray::s![..2, ..]), &names(4)).is_err());
    }

    #[test]
    fn distance_examples() {
        let m = CorrelationMatrix {
            labels: names(4),
            values: vec![vec![Some(1.0), Some(0.0), Some(-1.0), None]; 4],
        };
        let d = corr_to_distance(&m);
        assert_eq!(d[0], vec![Some(0.0), Some(1.0), Some(0.0), None]);
    }

    #[test]
    fn nearest_pair_merges_first() {
        let rho = [[1.0, 0.99, 0.01], [0.99, 1.0, 0.02], [0.01, 0.02, 1.0]];
        let m = CorrelationMatrix {
            labels: names(3),
            values: rho.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect(),
        };
        let dg = average_linkage(&corr_to_distance(&m), &m.labels).unwrap();
        assert_eq!((dg.merges[0].a, dg.merges[0].b), (0, 1));
        assert_eq!(dg.members(4), vec![0, 1, 2]);
    }

    /// Direct average over all leaf pairs, re-evaluated after every merge.
    fn brute_force_heights(d: &[Vec<f64>]) -> Vec<f64> {
        let mut clusters: Vec<Vec<usize>> = (0..d.len()).map(|i| vec![i]).collect();
        let mut heights = Vec::new();
        while clusters.len() > 1 {
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut s = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            s += d[a][b];
                        }
                    }
                    let avg = s / (clusters[i].len() * clusters[j].len()) as f64;
                    if avg < best.0 {
                        best = (avg, i, j);
                    }
                }
            }
            heights.push(best.0);
            let moved = clusters.remove(best.2);
            clusters[best.1].extend(moved);
        }
        heights
    }

    proptest! {
        #[test]
        fn linkage_matches_brute_force(seed in 0u64..1000) {
            let mut rng = Streams::new(seed).at(0, 0);
            let n = 6;
            let mut d = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = rng.random::<f64>();
                    d[i][j] = v;
                    d[j][i] = v;
                }
            }
            let opt: Vec<Vec<Option<f64>>> = d.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
            let dg = average_linkage(&opt, &names(n)).unwrap();
            let reference = brute_force_heights(&d);
            for (m, h) in dg.merges.iter().zip(&reference) {
                prop_assert!((m.height - h).abs() <= 1e-12);
            }
            prop_assert!(dg.merges.windows(2).all(|w| w[0].height <= w[1].height));
        }
    }

    #[test]
    fn undefined_pairs_are_excluded() {
        let mut d = vec![vec![Some(0.5); 3]; 3];
        d[0][1] = None;
        d[1][0] = None;
        let dg = average_linkage(&d, &names(3)).unwrap();
        assert_eq!(dg.merges.len(), 2);
        assert_eq!(dg.merges[1].height, 0.5);
        assert!(average_linkage(&vec![vec![None; 3]; 3], &names(3)).is_err());
    }

    #[test]
    fn spatial_map_examples() {
        let mut rng = Streams::new(2).at(0, 0);
        let a = Array3::from_shape_fn((5, 3, 3), |_| rng.random::<f64>()).into_dyn();
        let same = spatial_corr_map(&a, &a).unwrap();
        assert!(same.iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
        let inv = spatial_corr_map(&a, &a.mapv(|v| 1.0 - v)).unwrap();
        assert!(inv.iter().all(|v| (v.unwrap() + 1.0).abs() < 1e-12));
        let flat = ArrayD::from_elem(IxDyn(&[5, 3, 3]), 0.5);
        assert!(spatial_corr_map(&a, &flat).unwrap().iter().all(Option::is_none));
    }

    #[test]
    fn center_surround_is_recovered() {
        let (c, h, w) = (16, 21, 21);
        let mut rng = Streams::new(4).at(0, 0);
        let cov = Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>());
        let mut sens = Array3::<f64>::zeros((c, h, w));
        let mut sign = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let r = (((y as f64 - 10.0).powi(2) + (x as f64 - 10.0).powi(2)) as f64).sqrt();
                let s = if r < 5.0 { 1.0 } else { -1.0 };
                sign[[y, x]] = s;
                for k in 0..c {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    sens[[k, y, x]] = s * cov[[k, y, x]] + 0.05 * noise;
                }
            }
        }
        let map = spatial_corr_map(&sens.into_dyn(), &cov.into_dyn()).unwrap();
        let agree = map.iter().zip(sign.iter()).filter(|(m, s)| m.is_some_and(|v| v * **s > 0.0)).count();
        assert!(agree as f64 >= 0.95 * (h * w) as f64);
    }

    fn gaussian_classes(seed: u64, per_class: usize, sep: f64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = Streams::new(seed).at(0, 0);
        let p = 4;
        let mut x = Array2::zeros((2 * per_class, p));
        let mut y = Vec::new();
        for i in 0..2 * per_class {
            let c = i / per_class;
            y.push(c);
            for j in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[[i, j]] = z + if j == 0 { if c == 0 { -sep } else { sep } } else { 0.0 };
            }
        }
        (x, y)
    }

    #[test]
    fn lda_separates_distant_classes_and_is_deterministic() {
        let (x, y) = gaussian_classes(0, 50, 5.0);
        let cm = lda_confusion(x.view(), &y, &names(2), 5, 20, 1).unwrap();
        assert!(cm.accuracy() >= 0.99);
        for row in cm.rates().outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert_eq!(cm, lda_confusion(x.view(), &y, &names(2), 5, 20, 1).unwrap());
    }

    #[test]
    fn lda_on_identical_classes_is_near_chance() {
        let (x, y) = gaussian_classes(1, 100, 0.0);
        let cm = lda_confusion(x.view(), &y, &names(2), 5, 10, 2).unwrap();
        let sd = (0.25f64 / 200.0).sqrt();
        assert!((cm.accuracy() - 0.5).abs() < 3.0 * sd + 0.02, "{}", cm.accuracy());
    }

    #[test]
    fn lda_shrinkage_handles_singular_covariance() {
        let x = Array2::from_shape_fn((20, 30), |(i, j)| if j == 0 { (i / 10) as f64 } else { 0.0 });
        let y: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let model = Lda::fit(x.view(), &y, 2, LDA_SHRINKAGE).unwrap();
        assert_eq!(model.predict(&x.row(0).to_vec()), 0);
        assert_eq!(model.predict(&x.row(15).to_vec()), 1);
        assert!(lda_confusion(x.view(), &y, &names(2), 11, 1, 0).is_err());
    }
}
