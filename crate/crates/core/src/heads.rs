//! Per-task linear real/fake heads.
//!
//! Each head is a single logit `w·f + b`; the probability of Fake is the
//! logistic of that logit. Only the newest head in a [`HeadBank`] is
//! trainable. Alignment rotates the newest normal toward the previous one
//! while keeping its length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, norm, RngStream};

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task_id: u32,
    pub w: Vec<f64>,
    pub b: f64,
    pub frozen: bool,
}

impl TaskHead {
    pub fn logit(&self, f: &[f64]) -> Result<f64> {
        if f.len() != self.w.len() {
            return Err(Error::shape(self.w.len(), f.len()));
        }
        Ok(dot(&self.w, f) + self.b)
    }

    pub fn prob_fake(&self, f: &[f64]) -> Result<f64> {
        self.logit(f).map(logistic)
    }

    /// `[w..., b]`, the layout used by the head optimizer.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.w.clone();
        p.push(self.b);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::State(format!("head {} is frozen", self.task_id)));
        }
        if p.len() != self.w.len() + 1 {
            return Err(Error::shape(self.w.len() + 1, p.len()));
        }
        let d = self.w.len();
        self.w.copy_from_slice(&p[..d]);
        self.b = p[d];
        Ok(())
    }
}

/// One decision-alignment step on a boundary normal:
/// `θ_new ← ‖θ_new‖ · normalize((1−γ)θ̃_new + γθ̃_prev)`.
pub fn align_step(theta_new: &[f64], theta_prev: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if theta_new.len() != theta_prev.len() {
        return Err(Error::shape(theta_new.len(), theta_prev.len()));
    }
    let scale = norm(theta_new);
    let u_new = l2_normalize(theta_new)?;
    let u_prev = l2_normalize(theta_prev)?;
    let mixed: Vec<f64> = u_new
        .iter()
        .zip(&u_prev)
        .map(|(a, b)| (1.0 - gamma) * a + gamma * b)
        .collect();
    let m = norm(&mixed);
    if m < 1e-12 {
        return Err(Error::AntipodalDegenerate);
    }
    Ok(mixed.iter().map(|x| scale * (x / m)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Copy the previous head's parameters.
    WarmStart,
    ColdRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceAveraging {
    Probability,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadBank {
    heads: Vec<TaskHead>,
}

impl HeadBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_heads(heads: Vec<TaskHead>) -> Result<Self> {
        for (i, h) in heads.iter().enumerate() {
            if h.task_id != i as u32 + 1 {
                return Err(Error::NonSequentialTask {
                    expected: i as u32 + 1,
                    got: h.task_id,
                });
            }
            if h.frozen != (i + 1 < heads.len()) {
                return Err(Error::State("only the newest head may be unfrozen".into()));
            }
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn head(&self, task_id: u32) -> Result<&TaskHead> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.heads.get(i as usize))
            .ok_or(Error::MissingHead(task_id))
    }

    pub fn newest(&self) -> Result<&TaskHead> {
        self.heads.last().ok_or(Error::EmptyBank)
    }

    pub fn newest_mut(&mut self) -> Result<&mut TaskHead> {
        self.heads.last_mut().ok_or(Error::EmptyBank)
    }

    /// Freeze the current newest head and append a trainable head for `task_id`.
    pub fn spawn_head(&mut self, task_id: u32, feature_dim: usize, init: HeadInit, rng: &mut RngStream) -> Result<()> {
        let expected = self.heads.len() as u32 + 1;
        if task_id != expected {
            return Err(Error::NonSequentialTask {
                expected,
                got: task_id,
            });
        }
        let head = match (self.heads.last(), init) {
            (Some(prev), HeadInit::WarmStart) => TaskHead {
                task_id,
                w: prev.w.clone(),
                b: prev.b,
                frozen: false,
            },
            _ => random_head(task_id, feature_dim, rng),
        };
        if let Some(prev) = self.heads.last_mut() {
            prev.frozen = true;
        }
        self.heads.push(head);
        Ok(())
    }

    /// Align the newest normal toward the previous head's normal and average
    /// the biases with the same rate. No-op with fewer than two heads.
    pub fn align_newest(&mut self, gamma: f64) -> Result<()> {
        let n = self.heads.len();
        if n < 2 {
            return Ok(());
        }
        let (prev, newest) = self.heads.split_at_mut(n - 1);
        let prev = &prev[n - 2];
        let newest = &mut newest[0];
        let w = align_step(&newest.w, &prev.w, gamma)?;
        newest.w = w;
        newest.b = (1.0 - gamma) * newest.b + gamma * prev.b;
        Ok(())
    }

    /// Mean over all heads of the Fake output. The per-head values are
    /// summed in sorted order so the result does not depend on head order.
    pub fn infer_average(&self, f: &[f64], mode: InferenceAveraging) -> Result<f64> {
        if self.heads.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut vals = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let z = h.logit(f)?;
            vals.push(match mode {
                InferenceAveraging::Probability => logistic(z),
                InferenceAveraging::Logit => z,
            });
        }
        vals.sort_by(f64::total_cmp);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        Ok(match mode {
            InferenceAveraging::Probability => mean,
            InferenceAveraging::Logit => logistic(mean),
        })
    }
}

fn random_head(task_id: u32, d: usize, rng: &mut RngStream) -> TaskHead {
    let limit = (6.0 / (d + 1) as f64).sqrt();
    loop {
        let w: Vec<f64> = (0..d).map(|_| rng.uniform_range(-limit, limit)).collect();
        if norm(&w) > 0.0 {
            return TaskHead {
                task_id,
                w,
                b: 0.0,
                frozen: false,
            };
        }
    }
}
