//! Training losses with analytic gradients.
//!
//! All gradients are taken with respect to feature rows (and, for the
//! detection loss, the trainable head). The trainer pushes the feature
//! gradients through the backbone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{logistic, HeadBank};
use crate::numerics::{dot, norm, Matrix, RngStream};
use crate::taskgen::DomainLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsoDenominator {
    /// Only samples from other domains, as in the printed objective.
    NegativesOnly,
    /// Every other sample (standard supervised-contrastive form).
    AllOthers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidSource {
    /// Mean of the domain's replay features under the live extractor,
    /// refreshed once per epoch.
    EpochRefresh,
    /// Centroid stored when the replay set was built.
    BuildTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub mu_dis: f64,
    pub mu_det: f64,
    pub normalize_features: bool,
    pub denominator: IsoDenominator,
    /// Refilled features per previous domain per batch; `None` matches the
    /// domain's replay count in the batch.
    pub refill_count: Option<usize>,
    pub centroid_source: CentroidSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            mu_dis: 1.0,
            mu_det: 0.1,
            normalize_features: true,
            denominator: IsoDenominator::NegativesOnly,
            refill_count: None,
            centroid_source: CentroidSource::EpochRefresh,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config {
                key: "loss.temperature".into(),
                message: "must be positive".into(),
            });
        }
        if !(self.mu_dis >= 0.0) || !(self.mu_det >= 0.0) {
            return Err(Error::Config {
                key: "loss.mu_dis/mu_det".into(),
                message: "trade-offs must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refill {
    pub alpha: f64,
    pub beta: f64,
}

impl Refill {
    pub fn draw(rng: &mut RngStream) -> Self {
        let alpha = rng.uniform();
        let beta = rng.uniform();
        Self { alpha, beta }
    }

    /// Convex weights on `(f1, f2, c)`.
    pub fn weights(self) -> [f64; 3] {
        [self.beta * self.alpha, self.beta * (1.0 - self.alpha), 1.0 - self.beta]
    }

    pub fn apply(self, f1: &[f64], f2: &[f64], c: &[f64]) -> Vec<f64> {
        let Refill { alpha, beta } = self;
        f1.iter()
            .zip(f2)
            .zip(c)
            .map(|((a, b), c)| beta * (alpha * a + (1.0 - alpha) * b) + (1.0 - beta) * c)
            .collect()
    }
}

/// Latent mixup of two replay features and their domain centroid.
pub fn refill(
    f1: (&[f64], DomainLabel),
    f2: (&[f64], DomainLabel),
    c: (&[f64], DomainLabel),
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Refill)> {
    if f1.1 != f2.1 || f1.1 != c.1 {
        return Err(Error::DomainMismatch);
    }
    if f1.0.len() != f2.0.len() || f1.0.len() != c.0.len() {
        return Err(Error::shape(f1.0.len(), format!("{}/{}", f2.0.len(), c.0.len())));
    }
    let r = Refill::draw(rng);
    Ok((r.apply(f1.0, f2.0, c.0), r))
}

/// A re-filled point mixed from batch rows `a` and `b` and a fixed centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct RefillPoint {
    pub a: usize,
    pub b: usize,
    pub mix: Refill,
    pub centroid: Vec<f64>,
    pub label: u32,
}

/// Isolation loss over batch rows plus re-filled points. The gradient is
/// taken with respect to the batch rows only; each re-filled point passes
/// its gradient back to its two source rows.
pub fn isolation_with_refills(
    features: &Matrix,
    labels: &[u32],
    refills: &[RefillPoint],
    cfg: &LossConfig,
) -> Result<(f64, Matrix)> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    let mut rows: Vec<Vec<f64>> = features.iter_rows().map(|r| r.to_vec()).collect();
    let mut all_labels = labels.to_vec();
    for r in refills {
        if r.a >= n || r.b >= n {
            return Err(Error::shape(n, r.a.max(r.b)));
        }
        rows.push(r.mix.apply(features.row(r.a), features.row(r.b), &r.centroid));
        all_labels.push(r.label);
    }
    let out = isolation_loss(&Matrix::from_rows(&rows)?, &all_labels, cfg)?;
    let mut grad = Matrix::zeros(n, features.cols());
    for i in 0..n {
        grad.row_mut(i).copy_from_slice(out.grad.row(i));
    }
    for (q, r) in refills.iter().enumerate() {
        let [wa, wb, _] = r.mix.weights();
        let g = out.grad.row(n + q);
        for (o, v) in grad.row_mut(r.a).iter_mut().zip(g) {
            *o += wa * v;
        }
        for (o, v) in grad.row_mut(r.b).iter_mut().zip(g) {
            *o += wb * v;
        }
    }
    Ok((out.loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsoOutput {
    pub loss: f64,
    pub grad: Matrix,
    pub anchors: usize,
    pub skipped_anchors: usize,
}

/// Isolation (supervised-contrastive) loss over domain labels.
///
/// For anchor `i` with same-domain positives `P(i)` and denominator set
/// `D(i)`: `ℓ_i = −mean_{j∈P(i)} s_ij + log Σ_{k∈D(i)} exp(s_ik)` where
/// `s_ik = z_i·z_k / τ`. Anchors without positives or without any
/// denominator term are skipped. The loss is the mean over used anchors.
pub fn isolation_loss(features: &Matrix, labels: &[u32], cfg: &LossConfig) -> Result<IsoOutput> {
    let n = features.rows();
    let d = features.cols();
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    let tau = cfg.temperature;
    let mut z = features.clone();
    let mut norms = vec![1.0; n];
    if cfg.normalize_features {
        for i in 0..n {
            let nv = norm(features.row(i));
            if nv == 0.0 {
                return Err(Error::ZeroNormVector);
            }
            norms[i] = nv;
            z.row_mut(i).iter_mut().for_each(|v| *v /= nv);
        }
    }
    let sims = z.matmul_t(&z)?;
    let mut gz = Matrix::zeros(n, d);
    let mut total = 0.0;
    let mut anchors = 0;
    let mut skipped = 0;
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let denom: Vec<usize> = match cfg.denominator {
            IsoDenominator::NegativesOnly => (0..n).filter(|&k| labels[k] != labels[i]).collect(),
            IsoDenominator::AllOthers => (0..n).filter(|&k| k != i).collect(),
        };
        if positives.is_empty() || denom.is_empty() {
            skipped += 1;
            continue;
        }
        anchors += 1;
        let s = |k: usize| sims.get(i, k) / tau;
        let max = denom.iter().map(|&k| s(k)).fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = denom.iter().map(|&k| (s(k) - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let pos_mean = positives.iter().map(|&j| s(j)).sum::<f64>() / positives.len() as f64;
        total += lse - pos_mean;

        weights.iter_mut().for_each(|w| *w = 0.0);
        let inv_p = 1.0 / positives.len() as f64;
        for &j in &positives {
            weights[j] -= inv_p;
        }
        for &k in &denom {
            weights[k] += (s(k) - lse).exp();
        }
        // dℓ_i/dz_i = Σ_k w_k z_k / τ ; dℓ_i/dz_k = w_k z_i / τ
        let zi = z.row(i).to_vec();
        for k in 0..n {
            let w = weights[k];
            if w == 0.0 {
                continue;
            }
            let zk = z.row(k).to_vec();
            for (g, v) in gz.row_mut(i).iter_mut().zip(&zk) {
                *g += w * v / tau;
            }
            for (g, v) in gz.row_mut(k).iter_mut().zip(&zi) {
                *g += w * v / tau;
            }
        }
    }
    if anchors == 0 {
        if n > 0 {
            log::warn!("isolation loss has no usable anchor ({skipped} skipped)");
        }
        return Ok(IsoOutput {
            loss: 0.0,
            grad: Matrix::zeros(n, d),
            anchors,
            skipped_anchors: skipped,
        });
    }
    let scale = 1.0 / anchors as f64;
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let g: Vec<f64> = gz.row(i).iter().map(|v| v * scale).collect();
        let out = grad.row_mut(i);
        if cfg.normalize_features {
            let zi = z.row(i);
            let proj = dot(&g, zi);
            for ((o, gv), zv) in out.iter_mut().zip(&g).zip(zi) {
                *o = (gv - proj * zv) / norms[i];
            }
        } else {
            out.copy_from_slice(&g);
        }
    }
    Ok(IsoOutput {
        loss: total * scale,
        grad,
        anchors,
        skipped_anchors: skipped,
    })
}

/// Sum over groups of the mean squared difference between current and
/// frozen features; `groups` assigns each row to a previous task.
pub fn distillation_loss(current: &Matrix, frozen: &Matrix, groups: &[u32]) -> Result<(f64, Matrix)> {
    if current.rows() != frozen.rows() || current.cols() != frozen.cols() {
        return Err(Error::shape(
            format!("{}x{}", current.rows(), current.cols()),
            format!("{}x{}", frozen.rows(), frozen.cols()),
        ));
    }
    if groups.len() != current.rows() {
        return Err(Error::shape(current.rows(), groups.len()));
    }
    let mut grad = Matrix::zeros(current.rows(), current.cols());
    if current.rows() == 0 {
        return Ok((0.0, grad));
    }
    let mut ids: Vec<u32> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut total = 0.0;
    for g in ids {
        let rows: Vec<usize> = (0..groups.len()).filter(|&r| groups[r] == g).collect();
        let count = (rows.len() * current.cols()) as f64;
        let mut sum = 0.0;
        for &r in &rows {
            let diff: Vec<f64> = current.row(r).iter().zip(frozen.row(r)).map(|(a, b)| a - b).collect();
            sum += dot(&diff, &diff);
            for (o, dv) in grad.row_mut(r).iter_mut().zip(&diff) {
                *o = 2.0 * dv / count;
            }
        }
        total += sum / count;
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetOutput {
    pub loss: f64,
    pub feature_grad: Matrix,
    /// Gradient for the newest head as `[w..., b]`.
    pub head_grad: Vec<f64>,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Sum over tasks of the mean binary cross-entropy of each task's rows
/// under that task's head. Only the newest head receives a gradient.
pub fn detection_loss(bank: &HeadBank, features: &Matrix, task_ids: &[u32], targets: &[f64]) -> Result<DetOutput> {
    let n = features.rows();
    if task_ids.len() != n || targets.len() != n {
        return Err(Error::shape(n, format!("{}/{}", task_ids.len(), targets.len())));
    }
    let newest = bank.newest()?;
    let d = newest.w.len();
    if features.cols() != d {
        return Err(Error::shape(d, features.cols()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &t in task_ids {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let mut loss = 0.0;
    let mut feature_grad = Matrix::zeros(n, d);
    let mut head_grad = vec![0.0; d + 1];
    for i in 0..n {
        let head = bank.head(task_ids[i])?;
        let f = features.row(i);
        let z = head.logit(f)?;
        let y = targets[i];
        let scale = 1.0 / counts[&task_ids[i]] as f64;
        loss += scale * (softplus(z) - y * z);
        let dz = scale * (logistic(z) - y);
        for (g, w) in feature_grad.row_mut(i).iter_mut().zip(&head.w) {
            *g = dz * w;
        }
        if head.task_id == newest.task_id {
            for (g, fv) in head_grad.iter_mut().zip(f) {
                *g += dz * fv;
            }
            head_grad[d] += dz;
        }
    }
    Ok(DetOutput {
        loss,
        feature_grad,
        head_grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub iso: (f64, Matrix),
    pub dis: (f64, Matrix),
    pub det: DetOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_iso: f64,
    pub l_dis: f64,
    pub l_det: f64,
    pub l_overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub values: LossValues,
    pub feature_grad: Matrix,
    pub head_grad: Vec<f64>,
}

/// `L = L_iso + μ₁·L_dis + μ₂·L_det`, with the same combination of gradients.
pub fn overall_loss(cfg: &LossConfig, parts: &LossParts) -> Result<LossBreakdown> {
    let (l_iso, g_iso) = &parts.iso;
    let (l_dis, g_dis) = &parts.dis;
    let det = &parts.det;
    for g in [g_dis, &det.feature_grad] {
        if g.rows() != g_iso.rows() || g.cols() != g_iso.cols() {
            return Err(Error::shape(
                format!("{}x{}", g_iso.rows(), g_iso.cols()),
                format!("{}x{}", g.rows(), g.cols()),
            ));
        }
    }
    let mut feature_grad = g_iso.clone();
    for ((o, a), b) in feature_grad
        .as_mut_slice()
        .iter_mut()
        .zip(g_dis.as_slice())
        .zip(det.feature_grad.as_slice())
    {
        *o += cfg.mu_dis * a + cfg.mu_det * b;
    }
    let head_grad = det.head_grad.iter().map(|g| cfg.mu_det * g).collect();
    Ok(LossBreakdown {
        values: LossValues {
            l_iso: *l_iso,
            l_dis: *l_dis,
            l_det: det.loss,
            l_overall: l_iso + cfg.mu_dis * l_dis + cfg.mu_det * det.loss,
        },
        feature_grad,
        head_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::TaskHead;
    use crate::taskgen::Class;

    #[test]
    fn refill_endpoints() {
        let f1 = [2.0, 0.0];
        let f2 = [0.0, 2.0];
        let c = [0.0, 0.0];
        assert_eq!(Refill { alpha: 1.0, beta: 1.0 }.apply(&f1, &f2, &c), vec![2.0, 0.0]);
        assert_eq!(Refill { alpha: 0.3, beta: 0.0 }.apply(&f1, &f2, &[7.0, -1.0]), vec![7.0, -1.0]);
        assert_eq!(Refill { alpha: 0.5, beta: 0.5 }.apply(&f1, &f2, &c), vec![0.5, 0.5]);
    }

    #[test]
    fn refill_checks_domains() {
        let a = DomainLabel::new(1, Class::Real);
        let b = DomainLabel::new(1, Class::Fake);
        let mut rng = RngStream::new(0);
        let f = [1.0, 2.0];
        assert!(matches!(refill((&f, a), (&f, b), (&f, a), &mut rng), Err(Error::DomainMismatch)));
        let (out, r) = refill((&f, a), (&f, a), (&[0.0, 0.0], a), &mut rng).unwrap();
        assert!((out[0] - r.beta).abs() < 1e-15);
    }

    #[test]
    fn isolation_single_domain_is_zero() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let out = isolation_loss(&f, &[3, 3], &LossConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.anchors, 0);
    }

    #[test]
    fn isolation_skips_singletons() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]).unwrap();
        let out = isolation_loss(&f, &[0, 0, 1], &LossConfig::default()).unwrap();
        assert_eq!(out.anchors, 2);
        assert_eq!(out.skipped_anchors, 1);
        assert!(out.grad.row(2).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn distillation_examples() {
        let a = Matrix::from_rows(&[[3.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0]]).unwrap();
        let (l, g) = distillation_loss(&a, &b, &[1]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.row(0), &[4.0]);
        let (l, _) = distillation_loss(&a, &a, &[1]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = distillation_loss(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3), &[]).unwrap();
        assert_eq!(l, 0.0);
    }

    fn bank2() -> HeadBank {
        HeadBank::from_heads(vec![
            TaskHead { task_id: 1, w: vec![1.0, -1.0], b: 0.2, frozen: true },
            TaskHead { task_id: 2, w: vec![0.5, 0.5], b: -0.1, frozen: false },
        ])
        .unwrap()
    }

    #[test]
    fn detection_at_zero_logit_is_ln2() {
        let bank = HeadBank::from_heads(vec![TaskHead { task_id: 1, w: vec![0.0, 0.0], b: 0.0, frozen: false }]).unwrap();
        let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [0.0, 1.0]]).unwrap();
        let out = detection_loss(&bank, &f, &[1, 1, 1], &[1.0, 0.0, 1.0]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn detection_saturates_to_zero() {
        let bank = HeadBank::from_heads(vec![TaskHead { task_id: 1, w: vec![100.0], b: 0.0, frozen: false }]).unwrap();
        let f = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        let out = detection_loss(&bank, &f, &[1, 1], &[1.0, 0.0]).unwrap();
        assert!(out.loss < 1e-40);
    }

    #[test]
    fn detection_unknown_task() {
        let f = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(detection_loss(&bank2(), &f, &[3], &[1.0]), Err(Error::MissingHead(3))));
    }

    #[test]
    fn detection_grad_flows_only_to_newest_head() {
        let f = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let only_old = detection_loss(&bank2(), &f, &[1, 1], &[1.0, 0.0]).unwrap();
        assert!(only_old.head_grad.iter().all(|&g| g == 0.0));
        assert!(only_old.feature_grad.as_slice().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn overall_combination() {
        let z = Matrix::zeros(1, 1);
        let parts = LossParts {
            iso: (2.0, z.clone()),
            dis: (1.0, z.clone()),
            det: DetOutput { loss: 3.0, feature_grad: z.clone(), head_grad: vec![0.0, 0.0] },
        };
        let out = overall_loss(&LossConfig::default(), &parts).unwrap();
        assert!((out.values.l_overall - 3.3).abs() < 1e-15);
        let cfg = LossConfig { mu_dis: 0.0, mu_det: 0.0, ..Default::default() };
        assert_eq!(overall_loss(&cfg, &parts).unwrap().values.l_overall, 2.0);
    }
}
