//! Replay-set selection.
//!
//! Sparse uniform replay (SUR) sorts a domain's features by distance to the
//! domain centroid, cuts that order into `n_r / 2` contiguous segments, and
//! keeps two samples per segment: the one whose feature is most stable
//! under grid shuffling, and the one whose direction from the centroid is
//! least similar to the stable pick. The baselines used for comparison
//! (center, center + hard, random, random-uniform) live here as well.
//!
//! Ties are always broken by the lowest original row index.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{stack_inputs, FrozenBackbone};
use crate::error::{Error, Result};
use crate::heads::TaskHead;
use crate::numerics::{cosine_similarity, dot, Matrix, RngStream};
use crate::taskgen::{grid_shuffle, Class, DomainLabel, GridShape, Sample, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStrategy {
    Sur,
    Center,
    CenterHard,
    Random,
    RandomUniform,
}

impl ReplayStrategy {
    pub const ALL: [ReplayStrategy; 5] = [
        ReplayStrategy::Sur,
        ReplayStrategy::Center,
        ReplayStrategy::CenterHard,
        ReplayStrategy::Random,
        ReplayStrategy::RandomUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReplayStrategy::Sur => "sur",
            ReplayStrategy::Center => "center",
            ReplayStrategy::CenterHard => "center_hard",
            ReplayStrategy::Random => "random",
            ReplayStrategy::RandomUniform => "random_uniform",
        }
    }
}

impl fmt::Display for ReplayStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReplayStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config {
                key: "strategy".into(),
                message: format!("unknown replay strategy `{s}`"),
            })
    }
}

pub fn compute_centroid(features: &Matrix) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::EmptyFeatureSet);
    }
    Ok(features.column_means())
}

pub fn compute_magnitudes(features: &Matrix, c: &[f64]) -> Result<Vec<f64>> {
    if features.cols() != c.len() {
        return Err(Error::shape(features.cols(), c.len()));
    }
    Ok(features
        .iter_rows()
        .map(|r| r.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .collect())
}

/// Unit directions from the centroid. Rows that coincide with the centroid
/// are returned as zero rows together with their indices.
pub fn angularity_with_degenerate(features: &Matrix, c: &[f64]) -> Result<(Matrix, Vec<usize>)> {
    let mags = compute_magnitudes(features, c)?;
    let mut out = Matrix::zeros(features.rows(), features.cols());
    let mut degenerate = Vec::new();
    for (i, (r, &m)) in features.iter_rows().zip(&mags).enumerate() {
        if m == 0.0 {
            degenerate.push(i);
            continue;
        }
        for (o, (x, y)) in out.row_mut(i).iter_mut().zip(r.iter().zip(c)) {
            *o = (x - y) / m;
        }
    }
    Ok((out, degenerate))
}

pub fn compute_angularity(features: &Matrix, c: &[f64]) -> Result<Matrix> {
    let (a, degenerate) = angularity_with_degenerate(features, c)?;
    match degenerate.first() {
        Some(&row) => Err(Error::DegenerateRow { row }),
        None => Ok(a),
    }
}

/// Cosine similarity between each sample's feature and the feature of a
/// grid-shuffled copy, averaged over `draws` shuffles. Zero-norm features
/// get stability −1 so they are never the most stable pick.
pub fn compute_stability(
    frozen: &FrozenBackbone,
    samples: &[&Sample],
    shape: GridShape,
    draws: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let draws = draws.max(1);
    let base = frozen.forward(&stack_inputs(samples)?)?;
    let mut acc = vec![0.0; samples.len()];
    let mut dead = vec![false; samples.len()];
    for _ in 0..draws {
        let shuffled: Vec<Sample> = samples.iter().map(|s| grid_shuffle(s, shape, rng)).collect();
        let refs: Vec<&Sample> = shuffled.iter().collect();
        let f_shuf = frozen.forward(&stack_inputs(&refs)?)?;
        for i in 0..samples.len() {
            match cosine_similarity(base.row(i), f_shuf.row(i)) {
                Ok(s) => acc[i] += s,
                Err(Error::ZeroNormVector) => dead[i] = true,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(acc
        .into_iter()
        .zip(dead)
        .enumerate()
        .map(|(i, (s, d))| {
            if d {
                log::warn!("sample {} has a zero-norm feature; stability set to -1", samples[i].id);
                -1.0
            } else {
                s / draws as f64
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurDiagnostics {
    pub centroid: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub angularity: Matrix,
    pub stability: Vec<f64>,
    /// Row indices sorted by ascending magnitude.
    pub order: Vec<usize>,
    /// Segment ranges into `order`.
    pub segments: Vec<Range<usize>>,
    pub degenerate: Vec<usize>,
    pub backfilled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected row indices, in pick order.
    pub indices: Vec<usize>,
    pub diagnostics: Option<SurDiagnostics>,
}

/// Split `n` items into `k` contiguous near-equal segments; the first
/// `n mod k` segments get one extra item.
pub fn segment_ranges(n: usize, k: usize) -> Vec<Range<usize>> {
    let base = n / k;
    let rem = n % k;
    let mut start = 0;
    (0..k)
        .map(|s| {
            let len = base + usize::from(s < rem);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn by_value_then_index(vals: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b))
}

fn magnitude_order(magnitudes: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(by_value_then_index(magnitudes));
    order
}

fn check_replay_size(n: usize, n_r: usize, need_even: bool) -> Result<()> {
    if need_even && !n_r.is_multiple_of(2) {
        return Err(Error::OddReplaySize(n_r));
    }
    if n_r > n {
        return Err(Error::ReplayTooLarge { n_r, n });
    }
    if n_r == 0 {
        return Err(Error::InvalidSpec("replay size must be positive".into()));
    }
    Ok(())
}

/// Sparse uniform replay selection for one domain.
pub fn select_sur(features: &Matrix, stability: &[f64], n_r: usize) -> Result<Selection> {
    let n = features.rows();
    check_replay_size(n, n_r, true)?;
    if stability.len() != n {
        return Err(Error::shape(n, stability.len()));
    }
    let centroid = compute_centroid(features)?;
    let magnitudes = compute_magnitudes(features, &centroid)?;
    let (angularity, degenerate) = angularity_with_degenerate(features, &centroid)?;
    if !degenerate.is_empty() {
        log::warn!("{} rows coincide with the centroid and are excluded from angular picks", degenerate.len());
    }
    let is_degenerate = |i: usize| degenerate.binary_search(&i).is_ok();
    let order = magnitude_order(&magnitudes);
    let segments = segment_ranges(n, n_r / 2);

    let mut picked = vec![false; n];
    let mut indices = Vec::with_capacity(n_r);
    for seg in &segments {
        let members = &order[seg.clone()];
        // most stable, lowest index on ties
        let stable = *members
            .iter()
            .max_by(|&&a, &&b| stability[a].total_cmp(&stability[b]).then(b.cmp(&a)))
            .expect("segments are nonempty");
        picked[stable] = true;
        indices.push(stable);

        let mut best: Option<(usize, f64)> = None;
        for &j in members {
            if j == stable || is_degenerate(j) {
                continue;
            }
            let sim = if is_degenerate(stable) {
                0.0
            } else {
                dot(angularity.row(stable), angularity.row(j))
            };
            let better = match best {
                None => true,
                Some((bj, bs)) => sim < bs || (sim == bs && j < bj),
            };
            if better {
                best = Some((j, sim));
            }
        }
        if let Some((j, _)) = best {
            picked[j] = true;
            indices.push(j);
        }
    }

    let backfilled = n_r - indices.len();
    if backfilled > 0 {
        log::warn!("SUR segments yielded {} picks; backfilling {backfilled} by stability", indices.len());
        let mut rest: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
        rest.sort_by(|&a, &b| stability[b].total_cmp(&stability[a]).then(a.cmp(&b)));
        indices.extend(rest.into_iter().take(backfilled));
    }

    Ok(Selection {
        indices,
        diagnostics: Some(SurDiagnostics {
            centroid,
            magnitudes,
            angularity,
            stability: stability.to_vec(),
            order,
            segments,
            degenerate,
            backfilled,
        }),
    })
}

/// Baseline replay strategies. `head` is required for `CenterHard`.
pub fn baseline_select(
    strategy: ReplayStrategy,
    features: &Matrix,
    head: Option<&TaskHead>,
    n_r: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let n = features.rows();
    match strategy {
        ReplayStrategy::Sur => Err(Error::InvalidSpec("SUR is not a baseline; use select_sur".into())),
        ReplayStrategy::Random => {
            check_replay_size(n, n_r, false)?;
            let mut idx = rng.sample_distinct(n, n_r);
            idx.sort_unstable();
            Ok(idx)
        }
        ReplayStrategy::Center => {
            check_replay_size(n, n_r, true)?;
            let c = compute_centroid(features)?;
            let mags = compute_magnitudes(features, &c)?;
            Ok(magnitude_order(&mags).into_iter().take(n_r).collect())
        }
        ReplayStrategy::CenterHard => {
            check_replay_size(n, n_r, true)?;
            let head = head.ok_or(Error::MissingHead(0))?;
            let c = compute_centroid(features)?;
            let mags = compute_magnitudes(features, &c)?;
            let mut picked = vec![false; n];
            let mut out: Vec<usize> = magnitude_order(&mags).into_iter().take(n_r / 2).collect();
            out.iter().for_each(|&i| picked[i] = true);
            let margins = features
                .iter_rows()
                .map(|f| head.logit(f).map(f64::abs))
                .collect::<Result<Vec<f64>>>()?;
            let mut by_conf: Vec<usize> = (0..n).collect();
            by_conf.sort_by(by_value_then_index(&margins));
            out.extend(by_conf.into_iter().filter(|&i| !picked[i]).take(n_r - n_r / 2));
            Ok(out)
        }
        ReplayStrategy::RandomUniform => {
            check_replay_size(n, n_r, true)?;
            let c = compute_centroid(features)?;
            let mags = compute_magnitudes(features, &c)?;
            let order = magnitude_order(&mags);
            let mut out = Vec::with_capacity(n_r);
            for seg in segment_ranges(n, n_r / 2) {
                let members = &order[seg];
                for k in rng.sample_distinct(members.len(), 2) {
                    out.push(members[k]);
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub sample: Sample,
    /// Feature of `sample` under the builder task's frozen backbone.
    pub cached_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayDomain {
    pub label: DomainLabel,
    /// Centroid of the full domain under the builder's frozen backbone.
    pub build_centroid: Vec<f64>,
    pub entries: Vec<ReplayEntry>,
}

impl ReplayDomain {
    pub fn cached_features(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.entries.iter().map(|e| e.cached_feature.as_slice()).collect();
        Matrix::from_rows(&rows).expect("cached features share one width")
    }

    pub fn samples(&self) -> Vec<&Sample> {
        self.entries.iter().map(|e| &e.sample).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySet {
    pub builder_task_id: u32,
    pub strategy: ReplayStrategy,
    pub domains: Vec<ReplayDomain>,
}

impl ReplaySet {
    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self, class: Class) -> Option<&ReplayDomain> {
        self.domains.iter().find(|d| d.label.class == class)
    }

    /// Hash of every stored bit; used to check replay immutability.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.builder_task_id.to_le_bytes());
        for d in &self.domains {
            h.update(d.label.id().to_le_bytes());
            for v in &d.build_centroid {
                h.update(v.to_bits().to_le_bytes());
            }
            for e in &d.entries {
                h.update(e.sample.id.to_le_bytes());
                for v in e.sample.values.iter().chain(&e.cached_feature) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuildOptions {
    pub n_r: usize,
    pub strategy: ReplayStrategy,
    pub stability_draws: usize,
}

/// Pick replay indices for one domain with any strategy.
pub fn select_domain(
    strategy: ReplayStrategy,
    features: &Matrix,
    samples: &[&Sample],
    frozen: &FrozenBackbone,
    shape: GridShape,
    head: Option<&TaskHead>,
    n_r: usize,
    stability_draws: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let n = features.rows();
    if n_r >= n {
        if n_r > n {
            log::warn!("domain has {n} samples, fewer than replay size {n_r}; keeping all");
        }
        return Ok((0..n).collect());
    }
    match strategy {
        ReplayStrategy::Sur => {
            let s = compute_stability(frozen, samples, shape, stability_draws, &mut rng.split("stability"))?;
            Ok(select_sur(features, &s, n_r)?.indices)
        }
        other => baseline_select(other, features, head, n_r, &mut rng.split("baseline")),
    }
}

/// Build the replay set for a finished task, one selection per domain.
pub fn build_replay_set(
    task: &TaskDataset,
    frozen: &FrozenBackbone,
    head: Option<&TaskHead>,
    opts: &ReplayBuildOptions,
    rng: &RngStream,
) -> Result<ReplaySet> {
    let mut domains = Vec::with_capacity(2);
    for class in [Class::Real, Class::Fake] {
        let samples = task.train_domain(class);
        let features = frozen.forward(&stack_inputs(&samples)?)?;
        let mut drng = rng.split(&format!("replay/t{}/{class}", task.task_id));
        let idx = select_domain(
            opts.strategy,
            &features,
            &samples,
            frozen,
            task.shape,
            head,
            opts.n_r,
            opts.stability_draws,
            &mut drng,
        )?;
        domains.push(ReplayDomain {
            label: DomainLabel::new(task.task_id, class),
            build_centroid: compute_centroid(&features)?,
            entries: idx
                .into_iter()
                .map(|i| ReplayEntry {
                    sample: samples[i].clone(),
                    cached_feature: features.row(i).to_vec(),
                })
                .collect(),
        });
    }
    Ok(ReplaySet {
        builder_task_id: task.task_id,
        strategy: opts.strategy,
        domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(compute_centroid(&m(&[[1.0, 0.0], [3.0, 0.0]])).unwrap(), vec![2.0, 0.0]);
        assert_eq!(compute_centroid(&m(&[[4.0, -1.0]])).unwrap(), vec![4.0, -1.0]);
        let c = compute_centroid(&m(&[[1.0, 1.0], [-1.0, -1.0], [2.0, 0.0], [-2.0, 0.0]])).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
        assert!(matches!(compute_centroid(&Matrix::zeros(0, 2)), Err(Error::EmptyFeatureSet)));
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(compute_magnitudes(&m(&[[2.0, 0.0]]), &[0.0, 0.0]).unwrap(), vec![2.0]);
        assert_eq!(compute_magnitudes(&m(&[[1.0, 1.0], [3.0, 4.0]]), &[1.0, 1.0]).unwrap()[0], 0.0);
        assert_eq!(compute_magnitudes(&m(&[[3.0, 4.0]]), &[0.0, 0.0]).unwrap(), vec![5.0]);
        assert!(compute_magnitudes(&m(&[[3.0, 4.0]]), &[0.0]).is_err());
    }

    #[test]
    fn angularity_examples() {
        assert_eq!(compute_angularity(&m(&[[2.0, 0.0]]), &[0.0, 0.0]).unwrap().row(0), &[1.0, 0.0]);
        assert_eq!(compute_angularity(&m(&[[0.0, 5.0]]), &[0.0, 1.0]).unwrap().row(0), &[0.0, 1.0]);
        assert!(matches!(
            compute_angularity(&m(&[[2.0, 0.0], [0.0, 1.0]]), &[0.0, 1.0]),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn segments_partition() {
        assert_eq!(segment_ranges(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(segment_ranges(4, 2), vec![0..2, 2..4]);
    }

    #[test]
    fn sur_four_points_on_a_line() {
        // distances from centroid 0: 3, 1, 1, 3; ties → lower index first
        let f = m(&[[-3.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [3.0, 0.0]]);
        let sel = select_sur(&f, &[0.5; 4], 4).unwrap();
        assert_eq!(sel.indices, vec![1, 2, 0, 3]);
    }

    #[test]
    fn sur_rejects_bad_sizes() {
        let f = m(&[[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]]);
        assert!(matches!(select_sur(&f, &[0.0; 3], 3), Err(Error::OddReplaySize(3))));
        assert!(matches!(select_sur(&f, &[0.0; 3], 4), Err(Error::ReplayTooLarge { n_r: 4, n: 3 })));
    }

    #[test]
    fn sur_backfills_when_segment_members_are_degenerate() {
        // centroid is (0,0); rows 1 and 2 sit on it
        let f = m(&[[-1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]);
        let sel = select_sur(&f, &[0.1, 0.9, 0.8, 0.2], 4).unwrap();
        let d = sel.diagnostics.unwrap();
        assert_eq!(d.degenerate, vec![1, 2]);
        assert_eq!(d.backfilled, 1);
        assert_eq!(sel.indices.len(), 4);
        let mut s = sel.indices.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
    }

    #[test]
    fn center_and_random_baselines() {
        let f = m(&[[3.0, 0.0], [0.0, 0.0], [2.0, 0.0], [1.0, 0.0]]);
        // centroid (1.5, 0): distances 1.5, 1.5, 0.5, 0.5
        let mut rng = RngStream::new(1);
        assert_eq!(baseline_select(ReplayStrategy::Center, &f, None, 2, &mut rng).unwrap(), vec![2, 3]);
        let a = baseline_select(ReplayStrategy::Random, &f, None, 3, &mut RngStream::new(5)).unwrap();
        let b = baseline_select(ReplayStrategy::Random, &f, None, 3, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            baseline_select(ReplayStrategy::CenterHard, &f, None, 2, &mut rng),
            Err(Error::MissingHead(_))
        ));
    }

    #[test]
    fn center_hard_hand_instance() {
        // centroid (0,0); distances 1, 2, 1.5, 3, 0.5, 1
        let f = m(&[[1.0, 0.0], [0.0, 2.0], [-1.5, 0.0], [0.0, -3.0], [0.5, 0.0], [0.0, 1.0]]);
        assert_eq!(compute_centroid(&f).unwrap(), vec![0.0, 0.0]);
        let head = TaskHead {
            task_id: 1,
            w: vec![0.0, 1.0],
            b: 0.5,
            frozen: true,
        };
        // nearest two: row 4 (0.5), then rows 0 and 5 tie at 1 → row 0
        // |logit| = 0.5, 2.5, 0.5, 2.5, 0.5, 1.5 → skip 0 and 4, take 2 then 5
        let idx = baseline_select(ReplayStrategy::CenterHard, &f, Some(&head), 4, &mut RngStream::new(0)).unwrap();
        assert_eq!(idx, vec![4, 0, 2, 5]);
    }

    #[test]
    fn random_uniform_picks_two_per_segment() {
        let rows: Vec<[f64; 2]> = (0..12).map(|i| [i as f64, 0.0]).collect();
        let f = m(&rows);
        let idx = baseline_select(ReplayStrategy::RandomUniform, &f, None, 6, &mut RngStream::new(2)).unwrap();
        assert_eq!(idx.len(), 6);
        let mut s = idx.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 6);
    }
}
