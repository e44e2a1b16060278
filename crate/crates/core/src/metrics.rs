//! Evaluation statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix, RngStream};

/// ROC AUC as the Mann–Whitney U statistic over `n_pos · n_neg`, with
/// average ranks for ties. `labels[i]` is true for the positive (Fake) class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Fraction correct, predicting Fake when `score >= threshold`.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// `1 − AUC_last / AUC_first`; negative when a task improved.
pub fn forgetting_rate(auc_first: f64, auc_last: f64) -> Result<f64> {
    if auc_first == 0.0 {
        return Err(Error::ZeroFirstAuc);
    }
    // exact subtraction first, so a single rounding remains
    Ok((auc_first - auc_last) / auc_first)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median of pooled pairwise distances.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    /// V-statistic; [`mmd`] returns its square root.
    Biased,
    /// U-statistic; [`mmd`] returns the signed squared value.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
    pub estimator: MmdEstimator,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            estimator: MmdEstimator::Biased,
        }
    }
}

/// Median of pairwise Euclidean distances over the pooled rows; 1.0 when
/// every distance is zero.
pub fn median_heuristic(a: &Matrix, b: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let mut d2 = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d2.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    let mid = d2.len() / 2;
    let (_, m, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    let med = m.sqrt();
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn kernel_mean(a: &Matrix, b: &Matrix, gamma: f64, skip_diag: bool) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, x) in a.iter_rows().enumerate() {
        for (j, y) in b.iter_rows().enumerate() {
            if skip_diag && i == j {
                continue;
            }
            sum += (-gamma * sq_dist(x, y)).exp();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Gaussian-kernel maximum mean discrepancy between two row sets.
pub fn mmd(a: &Matrix, b: &Matrix, cfg: &MmdConfig) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptyFeatureSet);
    }
    if a.cols() != b.cols() {
        return Err(Error::shape(a.cols(), b.cols()));
    }
    let sigma = match cfg.bandwidth {
        Bandwidth::Median => median_heuristic(a, b),
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => {
            return Err(Error::Config {
                key: "mmd.bandwidth".into(),
                message: format!("fixed bandwidth must be positive, got {s}"),
            })
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    match cfg.estimator {
        MmdEstimator::Biased => {
            let v = kernel_mean(a, a, gamma, false) + kernel_mean(b, b, gamma, false) - 2.0 * kernel_mean(a, b, gamma, false);
            Ok(v.max(0.0).sqrt())
        }
        MmdEstimator::Unbiased => {
            if a.rows() < 2 || b.rows() < 2 {
                return Err(Error::EmptyFeatureSet);
            }
            Ok(kernel_mean(a, a, gamma, true) + kernel_mean(b, b, gamma, true) - 2.0 * kernel_mean(a, b, gamma, false))
        }
    }
}

/// Permutation null distribution of [`mmd`] with the bandwidth fixed to
/// the observed pooled median.
pub fn mmd_permutation_null(a: &Matrix, b: &Matrix, permutations: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    let cfg = MmdConfig {
        bandwidth: Bandwidth::Fixed(median_heuristic(a, b)),
        estimator: MmdEstimator::Biased,
    };
    let pooled: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let mut out = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        let perm = rng.permutation(pooled.len());
        let (pa, pb) = perm.split_at(a.rows());
        let ma = Matrix::from_rows(&pa.iter().map(|&i| pooled[i]).collect::<Vec<_>>())?;
        let mb = Matrix::from_rows(&pb.iter().map(|&i| pooled[i]).collect::<Vec<_>>())?;
        out.push(mmd(&ma, &mb, &cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSeparation {
    pub silhouette: f64,
    /// `(domain_a, domain_b, distance between centroids)`, `a < b`.
    pub centroid_distances: Vec<(u32, u32, f64)>,
    pub excluded_domains: Vec<u32>,
}

/// Mean silhouette over domain labels plus pairwise centroid distances.
/// Singleton domains are dropped.
pub fn domain_separation(features: &Matrix, labels: &[u32]) -> Result<DomainSeparation> {
    if labels.len() != features.rows() {
        return Err(Error::shape(features.rows(), labels.len()));
    }
    let mut domains: Vec<u32> = labels.to_vec();
    domains.sort_unstable();
    domains.dedup();
    let members = |dom: u32| -> Vec<usize> { (0..labels.len()).filter(|&i| labels[i] == dom).collect() };
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for &dom in &domains {
        if members(dom).len() < 2 {
            log::warn!("domain {dom} has a single member; excluded from silhouette");
            excluded.push(dom);
        } else {
            kept.push(dom);
        }
    }
    if kept.len() < 2 {
        return Err(Error::InvalidSpec("domain separation needs at least two domains with two members".into()));
    }
    let groups: Vec<Vec<usize>> = kept.iter().map(|&d| members(d)).collect();
    let dist = |i: usize, j: usize| sq_dist(features.row(i), features.row(j)).sqrt();
    let mut total = 0.0;
    let mut count = 0usize;
    for (gi, g) in groups.iter().enumerate() {
        for &i in g {
            let a = g.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).sum::<f64>() / (g.len() - 1) as f64;
            let b = groups
                .iter()
                .enumerate()
                .filter(|(gj, _)| *gj != gi)
                .map(|(_, h)| h.iter().map(|&j| dist(i, j)).sum::<f64>() / h.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            total += if m > 0.0 { (b - a) / m } else { 0.0 };
            count += 1;
        }
    }
    let centroids: Vec<Vec<f64>> = groups.iter().map(|g| features.select_rows(g).column_means()).collect();
    let mut centroid_distances = Vec::new();
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            centroid_distances.push((kept[i], kept[j], sq_dist(&centroids[i], &centroids[j]).sqrt()));
        }
    }
    Ok(DomainSeparation {
        silhouette: total / count as f64,
        centroid_distances,
        excluded_domains: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 0.0);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn accuracy_examples() {
        let l = [false, true];
        assert_eq!(accuracy(&[0.1, 0.9], &l, 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.1], &l, 0.5).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.5], &[true], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(forgetting_rate(0.8, 0.8).unwrap(), 0.0);
        assert_eq!(forgetting_rate(0.9, 0.45).unwrap(), 0.5);
        // correctly rounded value of 1 − 0.88/0.8 over the two doubles
        assert_eq!(forgetting_rate(0.8, 0.88).unwrap(), -0.09999999999999995);
        assert!(matches!(forgetting_rate(0.0, 0.5), Err(Error::ZeroFirstAuc)));
    }

    #[test]
    fn mmd_examples() {
        let a = Matrix::from_rows(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]).unwrap();
        assert!(mmd(&a, &a, &MmdConfig::default()).unwrap() < 1e-12);
        let p = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(mmd(&p, &p, &MmdConfig::default()).unwrap(), 0.0);
        let q = Matrix::from_rows(&[[1000.0, 1.0]]).unwrap();
        let cfg = MmdConfig {
            bandwidth: Bandwidth::Fixed(1.0),
            estimator: MmdEstimator::Biased,
        };
        assert!((mmd(&p, &q, &cfg).unwrap() - 2f64.sqrt()).abs() < 1e-6);
        assert!(mmd(&p, &Matrix::zeros(1, 3), &cfg).is_err());
    }

    #[test]
    fn mmd_is_symmetric() {
        let mut rng = RngStream::new(3);
        let a = Matrix::from_vec(7, 3, (0..21).map(|_| rng.normal()).collect()).unwrap();
        let b = Matrix::from_vec(5, 3, (0..15).map(|_| rng.normal() + 0.5).collect()).unwrap();
        for est in [MmdEstimator::Biased, MmdEstimator::Unbiased] {
            let cfg = MmdConfig { bandwidth: Bandwidth::Median, estimator: est };
            let ab = mmd(&a, &b, &cfg).unwrap();
            let ba = mmd(&b, &a, &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn silhouette_separated_and_degenerate() {
        let f = Matrix::from_rows(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [10.0, 10.0], [10.1, 10.0], [10.0, 10.1]]).unwrap();
        let s = domain_separation(&f, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!(s.silhouette > 0.5);
        assert_eq!(s.centroid_distances.len(), 1);

        let same = Matrix::from_rows(&[[1.0, 1.0]; 4]).unwrap();
        assert!(domain_separation(&same, &[0, 0, 1, 1]).unwrap().silhouette <= 0.0);

        // relabel rows inside a domain: unchanged
        let s2 = domain_separation(&f.select_rows(&[2, 0, 1, 5, 3, 4]), &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((s.silhouette - s2.silhouette).abs() < 1e-12);

        let with_singleton = domain_separation(&f, &[0, 0, 0, 1, 1, 2]).unwrap();
        assert_eq!(with_singleton.excluded_domains, vec![2]);
    }

    proptest::proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(scores in proptest::collection::vec(-3.0f64..3.0, 4..30), seed in 0u64..1000) {
            let mut rng = RngStream::new(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.uniform() < 0.5).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            proptest::prop_assert_eq!(a, auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn forgetting_is_scale_free(first in 0.1f64..1.0, last in 0.0f64..1.0, s in 0.1f64..10.0) {
            let a = forgetting_rate(first, last).unwrap();
            let b = forgetting_rate(first * s, last * s).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
