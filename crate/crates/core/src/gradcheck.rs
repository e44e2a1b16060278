//! Finite-difference checks of every analytic gradient.

use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::heads::{HeadBank, HeadInit};
use crate::losses::{
    detection_loss, distillation_loss, isolation_loss, isolation_with_refills, overall_loss, IsoDenominator, LossConfig,
    LossParts, Refill, RefillPoint,
};
use crate::numerics::{finite_diff_grad, Matrix, RngStream};

pub const COMPONENTS: [&str; 6] = [
    "backbone",
    "isolation_loss",
    "refill_isolation",
    "distillation_loss",
    "detection_loss",
    "overall_loss",
];

pub const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Perturb the analytic gradient of this component (harness self-test).
    pub fault: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub component: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-4)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn domain_labels(rng: &mut RngStream, n: usize, domains: u32) -> Vec<u32> {
    // every domain gets at least two members
    let mut labels: Vec<u32> = (0..n).map(|i| (i as u32 / 2) % domains).collect();
    rng.shuffle(&mut labels);
    labels
}

fn random_loss_cfg(rng: &mut RngStream, k: usize) -> LossConfig {
    LossConfig {
        temperature: rng.uniform_range(0.2, 1.0),
        normalize_features: k.is_multiple_of(2),
        denominator: if k % 3 == 2 {
            IsoDenominator::AllOthers
        } else {
            IsoDenominator::NegativesOnly
        },
        ..LossConfig::default()
    }
}

fn maybe_fault(component: &str, opts: &GradcheckOptions, g: &mut [f64]) {
    if opts.fault.as_deref() == Some(component) {
        if let Some(x) = g.first_mut() {
            *x += 1e-2 * (1.0 + x.abs());
        }
    }
}

fn flat(m: &Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn check_backbone(rng: &mut RngStream, opts: &GradcheckOptions) -> Result<f64> {
    let cfg = BackboneConfig {
        hidden: vec![5, 4],
        feature_dim: 3,
    };
    let net = Backbone::new(6, &cfg, rng)?;
    let x = random_matrix(rng, 4, 6, 1.0);
    let up = random_matrix(rng, 4, 3, 1.0);
    let cache = net.forward_cached(&x)?;
    let mut analytic = net.backward(&cache, &up)?;
    maybe_fault("backbone", opts, &mut analytic);
    let dims = net.dims().to_vec();
    let acts = net.activations().to_vec();
    let numeric = finite_diff_grad(
        |p| {
            let n = Backbone::from_parts(dims.clone(), acts.clone(), p.to_vec()).expect("parts");
            let f = n.forward(&x).expect("forward");
            f.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
        },
        net.params(),
        STEP,
    )?;
    Ok(rel_err(&analytic, &numeric))
}

fn check_isolation(rng: &mut RngStream, k: usize, opts: &GradcheckOptions) -> Result<f64> {
    let cfg = random_loss_cfg(rng, k);
    let f = random_matrix(rng, 8, 4, 1.0);
    let labels = domain_labels(rng, 8, 3);
    let out = isolation_loss(&f, &labels, &cfg)?;
    let mut analytic = flat(&out.grad);
    maybe_fault("isolation_loss", opts, &mut analytic);
    let numeric = finite_diff_grad(
        |x| {
            let m = Matrix::from_vec(8, 4, x.to_vec()).expect("shape");
            isolation_loss(&m, &labels, &cfg).expect("iso").loss
        },
        f.as_slice(),
        STEP,
    )?;
    Ok(rel_err(&analytic, &numeric))
}

fn check_refill_isolation(rng: &mut RngStream, k: usize, opts: &GradcheckOptions) -> Result<f64> {
    let cfg = random_loss_cfg(rng, k);
    let f = random_matrix(rng, 8, 3, 1.0);
    let labels = domain_labels(rng, 8, 3);
    let mut refills = Vec::new();
    for _ in 0..4 {
        let a = rng.below(8);
        let same: Vec<usize> = (0..8).filter(|&j| labels[j] == labels[a]).collect();
        let b = same[rng.below(same.len())];
        refills.push(RefillPoint {
            a,
            b,
            mix: Refill::draw(rng),
            centroid: (0..3).map(|_| rng.normal()).collect(),
            label: labels[a],
        });
    }
    let (_, g) = isolation_with_refills(&f, &labels, &refills, &cfg)?;
    let mut analytic = flat(&g);
    maybe_fault("refill_isolation", opts, &mut analytic);
    let numeric = finite_diff_grad(
        |x| {
            let m = Matrix::from_vec(8, 3, x.to_vec()).expect("shape");
            isolation_with_refills(&m, &labels, &refills, &cfg).expect("iso").0
        },
        f.as_slice(),
        STEP,
    )?;
    Ok(rel_err(&analytic, &numeric))
}

fn check_distillation(rng: &mut RngStream, opts: &GradcheckOptions) -> Result<f64> {
    let cur = random_matrix(rng, 6, 3, 1.0);
    let frozen = random_matrix(rng, 6, 3, 1.0);
    let groups = vec![1, 1, 2, 2, 2, 3];
    let (_, g) = distillation_loss(&cur, &frozen, &groups)?;
    let mut analytic = flat(&g);
    maybe_fault("distillation_loss", opts, &mut analytic);
    let numeric = finite_diff_grad(
        |x| {
            let m = Matrix::from_vec(6, 3, x.to_vec()).expect("shape");
            distillation_loss(&m, &frozen, &groups).expect("dis").0
        },
        cur.as_slice(),
        STEP,
    )?;
    Ok(rel_err(&analytic, &numeric))
}

fn two_head_bank(rng: &mut RngStream, d: usize) -> Result<HeadBank> {
    let mut bank = HeadBank::new();
    bank.spawn_head(1, d, HeadInit::ColdRandom, rng)?;
    bank.spawn_head(2, d, HeadInit::ColdRandom, rng)?;
    Ok(bank)
}

fn with_newest(bank: &HeadBank, p: &[f64]) -> HeadBank {
    let mut b = bank.clone();
    b.newest_mut().expect("head").set_params(p).expect("params");
    b
}

fn check_detection(rng: &mut RngStream, opts: &GradcheckOptions) -> Result<f64> {
    let bank = two_head_bank(rng, 3)?;
    let f = random_matrix(rng, 6, 3, 1.0);
    let tasks = vec![1, 2, 2, 1, 2, 2];
    let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let out = detection_loss(&bank, &f, &tasks, &targets)?;
    let mut analytic = flat(&out.feature_grad);
    analytic.extend_from_slice(&out.head_grad);
    maybe_fault("detection_loss", opts, &mut analytic);
    let mut x0 = f.as_slice().to_vec();
    x0.extend(bank.newest()?.params());
    let numeric = finite_diff_grad(
        |x| {
            let m = Matrix::from_vec(6, 3, x[..18].to_vec()).expect("shape");
            detection_loss(&with_newest(&bank, &x[18..]), &m, &tasks, &targets)
                .expect("det")
                .loss
        },
        &x0,
        STEP,
    )?;
    Ok(rel_err(&analytic, &numeric))
}

fn check_overall(rng: &mut RngStream, k: usize, opts: &GradcheckOptions) -> Result<f64> {
    let cfg = random_loss_cfg(rng, k);
    let bank = two_head_bank(rng, 3)?;
    let f = random_matrix(rng, 8, 3, 1.0);
    let labels = domain_labels(rng, 8, 3);
    let tasks: Vec<u32> = labels.iter().map(|&l| if l == 0 { 1 } else { 2 }).collect();
    let targets: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let replay_rows: Vec<usize> = (0..8).filter(|&i| tasks[i] == 1).collect();
    let frozen = random_matrix(rng, replay_rows.len(), 3, 1.0);
    let groups = vec![1; replay_rows.len()];

    let eval = |x: &[f64], p: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let m = Matrix::from_vec(8, 3, x.to_vec())?;
        let b = with_newest(&bank, p);
        let iso = isolation_loss(&m, &labels, &cfg)?;
        let (l_dis, g_sub) = distillation_loss(&m.select_rows(&replay_rows), &frozen, &groups)?;
        let mut g_dis = Matrix::zeros(8, 3);
        for (q, &i) in replay_rows.iter().enumerate() {
            g_dis.row_mut(i).copy_from_slice(g_sub.row(q));
        }
        let det = detection_loss(&b, &m, &tasks, &targets)?;
        let total = overall_loss(
            &cfg,
            &LossParts {
                iso: (iso.loss, iso.grad),
                dis: (l_dis, g_dis),
                det,
            },
        )?;
        Ok((total.values.l_overall, flat(&total.feature_grad), total.head_grad))
    };
    let p0 = bank.newest()?.params();
    let (_, gf, gh) = eval(f.as_slice(), &p0)?;
    let mut analytic = gf;
    analytic.extend(gh);
    maybe_fault("overall_loss", opts, &mut analytic);
    let mut x0 = f.as_slice().to_vec();
    x0.extend(p0);
    let numeric = finite_diff_grad(|x| eval(&x[..24], &x[24..]).expect("overall").0, &x0, STEP)?;
    Ok(rel_err(&analytic, &numeric))
}

/// Run every suite; each result covers `opts.instances` random instances.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<SuiteResult>> {
    let instances = opts.instances.max(1);
    let root = RngStream::new(opts.seed).split("gradcheck");
    let mut out = Vec::new();
    for component in COMPONENTS {
        let mut rng = root.split(component);
        let mut worst: f64 = 0.0;
        for k in 0..instances {
            let e = match component {
                "backbone" => check_backbone(&mut rng, opts)?,
                "isolation_loss" => check_isolation(&mut rng, k, opts)?,
                "refill_isolation" => check_refill_isolation(&mut rng, k, opts)?,
                "distillation_loss" => check_distillation(&mut rng, opts)?,
                "detection_loss" => check_detection(&mut rng, opts)?,
                "overall_loss" => check_overall(&mut rng, k, opts)?,
                _ => unreachable!(),
            };
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        out.push(SuiteResult {
            component,
            instances,
            max_rel_err: worst,
            passed: worst < REL_TOL,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors_tiny_values() {
        assert_eq!(rel_err(&[0.0], &[1e-9]), 1e-5);
        assert_eq!(rel_err(&[2.0], &[1.0]), 0.5);
    }

    #[test]
    fn fault_is_detected_and_named() {
        let opts = GradcheckOptions {
            instances: 2,
            seed: 3,
            fault: Some("isolation_loss".into()),
        };
        let res = run_all(&opts).unwrap();
        let failed: Vec<_> = res.iter().filter(|r| !r.passed).map(|r| r.component).collect();
        assert_eq!(failed, vec!["isolation_loss"]);
    }
}
