//! Single-class sensitivity: sensitive-class ranking, Jaccard matching and
//! the hypergeometric null threshold.

use std::fmt::Write as _;

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convnet::{predict_topk, Network};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{SensitivityKind, SensitivityMap};
use crate::maskeval::{masked_forward, MaskMode, MaskSet};
use crate::numeric::quantile_linear;
use crate::rng::{stream, Streams};

/// Default number of null-model trials.
pub const DEFAULT_TRIALS: usize = 1_000_000;

/// The `k` classes with the largest normalized sensitivity, descending,
/// ties to the lower index.
pub fn topk_sensitive(map: &SensitivityMap, k: usize) -> Result<Vec<usize>> {
    let values: Vec<f64> = map.normalized().iter().copied().collect();
    if k > values.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} classes", values.len())));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// |A ∩ B| / |A ∪ B|; two empty sets give 1.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Probability that two independent uniformly chosen `n`-subsets of `N`
/// classes share exactly `k` elements.
pub fn hypergeometric_pmf(big_n: usize, n: usize, k: usize) -> f64 {
    if n > big_n || k > n || 2 * n > big_n + k {
        return 0.0;
    }
    if 2 * n > big_n {
        // p(0) vanishes, so the ratio recursion cannot start.
        let c = |a: usize, b: usize| crate::numeric::binomial(a, b) as f64;
        return c(n, k) * c(big_n - n, n - k) / c(big_n, n);
    }
    // p(0) = C(N−n, n) / C(N, n), then the ratio p(k+1)/p(k).
    let mut p = 1.0f64;
    for i in 0..n {
        p *= (big_n - n - i) as f64 / (big_n - i) as f64;
    }
    for j in 0..k {
        p *= ((n - j) * (n - j)) as f64 / ((j + 1) * (big_n - 2 * n + j + 1)) as f64;
    }
    p
}

/// Jaccard index of two `n`-sets sharing `k` elements: `k / (2n − k)`.
pub fn overlap_jaccard(n: usize, k: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    k as f64 / (2 * n - k) as f64
}

/// Null-model expectation of one Jaccard draw.
pub fn null_mean_jaccard(big_n: usize, n: usize) -> f64 {
    (0..=n).map(|k| hypergeometric_pmf(big_n, n, k) * overlap_jaccard(n, k)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub q1: f64,
    pub q3: f64,
    pub tau: f64,
}

/// Means of `s·N` null Jaccard draws, one per trial, in trial order.
///
/// Each trial draws the overlap counts multinomially (sequential binomials)
/// from the hypergeometric pmf, on its own counter-based stream.
pub fn null_trial_means(big_n: usize, n: usize, s: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 || n > big_n {
        return Err(Error::InvalidArgument(format!("need 1 ≤ n ≤ N, got n = {n}, N = {big_n}")));
    }
    let draws = (s * big_n) as u64;
    if draws == 0 {
        return Err(Error::InvalidArgument("s·N must be positive".into()));
    }
    let pmf: Vec<f64> = (0..=n).map(|k| hypergeometric_pmf(big_n, n, k)).collect();
    let streams = Streams::new(seed);
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = streams.at(stream::JACCARD_TRIALS, t as u64);
            let mut left = draws;
            let mut mass = 1.0;
            let mut sum = 0.0;
            // k = 0 contributes nothing; sample the rarer high overlaps first.
            for k in (1..=n).rev() {
                if left == 0 || mass <= 0.0 {
                    break;
                }
                let p = (pmf[k] / mass).clamp(0.0, 1.0);
                let c = Binomial::new(left, p).expect("valid binomial").sample(&mut rng);
                sum += c as f64 * overlap_jaccard(n, k);
                left -= c;
                mass -= pmf[k];
            }
            sum / draws as f64
        })
        .collect())
}

/// Interquartile outlier fence `τ = q3 + 1.5·(q3 − q1)` of the null means.
pub fn mc_threshold(big_n: usize, n: usize, s: usize, trials: usize, seed: u64) -> Result<Threshold> {
    if trials < 4 {
        return Err(Error::InvalidArgument("at least 4 trials are required".into()));
    }
    let mut means = null_trial_means(big_n, n, s, trials, seed)?;
    means.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&means, 0.25);
    let q3 = quantile_linear(&means, 0.75);
    Ok(Threshold {
        q1,
        q3,
        tau: q3 + 1.5 * (q3 - q1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub augmentation: String,
    pub kind: SensitivityKind,
    pub sensitive: Vec<usize>,
    /// Mean Jaccard per mask grid cell.
    pub cells: Vec<(String, f64)>,
    pub tau: f64,
    pub flags: Vec<bool>,
}

/// Mean Jaccard between each image's top-`k` masked prediction and the
/// sensitive classes, per mask; cells strictly above `tau` are flagged.
pub fn bias_report(
    net: &Network,
    data: &Dataset,
    images: &[usize],
    augmentation: &str,
    kind: SensitivityKind,
    sensitive: &[usize],
    masks: &[(MaskMode, MaskSet)],
    tau: f64,
) -> Result<JaccardReport> {
    if kind == SensitivityKind::SobolTotal {
        return Err(Error::InvalidArgument("total Sobol maps are not used for class matching".into()));
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = sensitive.len();
    let mut cells = Vec::with_capacity(masks.len());
    for (mode, set) in masks {
        let js = images
            .par_iter()
            .map(|&i| {
                let logits = masked_forward(net, data.image(i).data(), set)?;
                let top = predict_topk(logits.as_slice().expect("contiguous"), k)?;
                Ok(jaccard(&top, sensitive))
            })
            .collect::<Result<Vec<f64>>>()?;
        cells.push((mode.name(), crate::numeric::compensated_sum(js.iter().copied()) / js.len() as f64));
    }
    let flags = cells.iter().map(|(_, m)| *m > tau).collect();
    Ok(JaccardReport {
        augmentation: augmentation.into(),
        kind,
        sensitive: sensitive.to_vec(),
        cells,
        tau,
        flags,
    })
}

/// One CSV row per report: the mean per cell followed by its flag.
pub fn jaccard_reports_to_csv(reports: &[JaccardReport]) -> String {
    let mut out = String::from("augmentation,kind,tau");
    if let Some(first) = reports.first() {
        for (name, _) in &first.cells {
            write!(out, ",{name},{name}_flag").expect("string write");
        }
    }
    out.push('\n');
    for r in reports {
        write!(out, "{},{},{:.17e}", r.augmentation, r.kind.name(), r.tau).expect("string write");
        for ((_, m), f) in r.cells.iter().zip(&r.flags) {
            write!(out, ",{m:.17e},{f}").expect("string write");
        }
        out.push('\n');
    }
    out
}
