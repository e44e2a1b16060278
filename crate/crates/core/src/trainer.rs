//! Incremental training protocol.
//!
//! Training on task `t+1` mixes the new task's samples with samples drawn
//! from every stored replay set, computes the combined objective (isolation
//! with re-filled latent points, distillation against the frozen previous
//! extractor, per-task detection), takes one Adam step, then one decision
//! alignment step on the newest head. After the last epoch the replay set
//! for the task is built and the backbone is snapshotted.
//!
//! Every random choice inside a step is drawn from a stream named after the
//! task and the step index, so a run can be stopped after any step and
//! resumed bit-identically from a checkpoint.

use serde::{Deserialize, Serialize};

use crate::backbone::{stack_inputs, Adam, Backbone, BackboneConfig, FrozenBackbone};
use crate::error::{Error, Result};
use crate::heads::{HeadBank, HeadInit, InferenceAveraging};
use crate::losses::{
    detection_loss, distillation_loss, isolation_with_refills, overall_loss, CentroidSource, DetOutput, LossConfig,
    LossParts, LossValues, Refill, RefillPoint,
};
use crate::metrics::{accuracy, auc, domain_separation, mmd, MmdConfig};
use crate::numerics::{angle_between, Matrix, RngStream};
use crate::sur::{build_replay_set, compute_centroid, ReplayBuildOptions, ReplaySet, ReplayStrategy};
use crate::taskgen::{Class, DomainLabel, Sample, TaskDataset};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_ida: bool,
    pub disable_iso: bool,
    pub disable_dr: bool,
    /// Plain sequential fine-tuning: detection loss only, no replay.
    pub disable_all: bool,
}

impl AblationFlags {
    pub fn full() -> Self {
        Self::default()
    }

    /// Alignment, isolation and re-filling all off; replay, distillation
    /// and per-task detection stay on.
    pub fn without_all_components() -> Self {
        Self {
            disable_ida: true,
            disable_iso: true,
            disable_dr: true,
            disable_all: false,
        }
    }

    pub fn lower_bound() -> Self {
        Self {
            disable_all: true,
            ..Self::default()
        }
    }

    pub fn uses_replay(&self) -> bool {
        !self.disable_all
    }

    pub fn uses_iso(&self) -> bool {
        !self.disable_all && !self.disable_iso
    }

    pub fn uses_refill(&self) -> bool {
        self.uses_iso() && !self.disable_dr
    }

    pub fn uses_alignment(&self) -> bool {
        !self.disable_all && !self.disable_ida
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Alignment rate.
    pub gamma: f64,
    /// Replay entries per domain.
    pub n_r: usize,
    pub strategy: ReplayStrategy,
    /// Fraction of each batch filled from replay sets once any exist.
    pub replay_share: f64,
    pub stability_draws: usize,
    pub head_init: HeadInit,
    pub averaging: InferenceAveraging,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 2e-4,
            gamma: 1e-3,
            n_r: 64,
            strategy: ReplayStrategy::Sur,
            replay_share: 0.5,
            stability_draws: 1,
            head_init: HeadInit::ColdRandom,
            averaging: InferenceAveraging::Probability,
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            ablation: AblationFlags::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                message: message.to_string(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must be in (0, 1)");
        }
        if self.batch_size < 4 {
            return bad("batch_size", "must be >= 4");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.n_r < 2 {
            return bad("n_r", "must be >= 2");
        }
        if !self.n_r.is_multiple_of(2) && self.strategy != ReplayStrategy::Random {
            return bad("n_r", "must be even for segment-based strategies");
        }
        if !(self.replay_share > 0.0 && self.replay_share < 1.0) {
            return bad("replay_share", "must be in (0, 1)");
        }
        if self.backbone.feature_dim == 0 {
            return bad("backbone.feature_dim", "must be positive");
        }
        self.loss.validate()
    }

    /// Loss weights actually used: plain fine-tuning optimizes the
    /// detection loss alone.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        if self.ablation.disable_all {
            l.mu_dis = 0.0;
            l.mu_det = 1.0;
        }
        l
    }
}

/// Everything that persists between tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementState {
    pub backbone: Backbone,
    /// Snapshot taken at the end of the last finished task.
    pub frozen: Option<FrozenBackbone>,
    pub bank: HeadBank,
    pub replay: Vec<ReplaySet>,
    pub tasks_done: u32,
    pub backbone_opt: Adam,
    pub head_opt: Adam,
}

impl IncrementState {
    pub fn new(input_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = RngStream::new(cfg.seed).split("train").split("backbone-init");
        let backbone = Backbone::new(input_dim, &cfg.backbone, &mut rng)?;
        let n = backbone.num_params();
        Ok(Self {
            backbone,
            frozen: None,
            bank: HeadBank::new(),
            replay: Vec::new(),
            tasks_done: 0,
            backbone_opt: Adam::new(n),
            head_opt: Adam::new(cfg.backbone.feature_dim + 1),
        })
    }

    pub fn features(&self, samples: &[&Sample]) -> Result<Matrix> {
        self.backbone.forward(&stack_inputs(samples)?)
    }

    /// Averaged Fake probability for each sample.
    pub fn scores(&self, samples: &[&Sample], mode: InferenceAveraging) -> Result<Vec<f64>> {
        let f = self.features(samples)?;
        f.iter_rows().map(|r| self.bank.infer_average(r, mode)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stratum {
    set: usize,
    domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchRow {
    set_domain_entry: Option<(usize, usize, usize)>,
    new_index: Option<usize>,
}

/// In-flight training of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSession {
    pub task_id: u32,
    pub step: usize,
    pub total_steps: usize,
    pub batches_per_epoch: usize,
    pub new_per_batch: usize,
    pub replay_slots: usize,
    /// Refill centroids per `[replay set][domain]`.
    pub centroids: Vec<Vec<Vec<f64>>>,
    pub centroid_epoch: Option<usize>,
    /// Frozen-extractor features of every replay entry, `[set][domain]`.
    distill_targets: Vec<Vec<Matrix>>,
    strata: Vec<Stratum>,
    perm_cache: Option<(usize, Vec<usize>)>,
}

impl TaskSession {
    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    fn build(state: &IncrementState, task: &TaskDataset, cfg: &TrainConfig) -> Result<Self> {
        let t_prev = state.replay.len();
        let use_replay = cfg.ablation.uses_replay() && t_prev > 0;
        let replay_slots = if use_replay {
            let want = (cfg.batch_size as f64 * cfg.replay_share).round() as usize;
            want.clamp(1, cfg.batch_size - 2)
        } else {
            0
        };
        let new_per_batch = cfg.batch_size - replay_slots;
        let batches_per_epoch = task.train.len() / new_per_batch;
        if batches_per_epoch == 0 {
            return Err(Error::InvalidSpec(format!(
                "task {} has {} training samples, fewer than one batch ({new_per_batch})",
                task.task_id,
                task.train.len()
            )));
        }
        // interleave classes so that any t consecutive strata cover every task
        let mut strata = Vec::new();
        if use_replay {
            let n_dom = state.replay.iter().map(|r| r.domains.len()).max().unwrap_or(0);
            for domain in 0..n_dom {
                for (set, r) in state.replay.iter().enumerate() {
                    if domain < r.domains.len() && !r.domains[domain].entries.is_empty() {
                        strata.push(Stratum { set, domain });
                    }
                }
            }
        }
        let mut distill_targets = Vec::new();
        if use_replay {
            let frozen = state
                .frozen
                .as_ref()
                .ok_or_else(|| Error::State("replay sets exist but no frozen snapshot".into()))?;
            for r in &state.replay {
                let mut per_dom = Vec::new();
                for d in &r.domains {
                    per_dom.push(frozen.forward(&stack_inputs(&d.samples())?)?);
                }
                distill_targets.push(per_dom);
            }
        }
        Ok(Self {
            task_id: task.task_id,
            step: 0,
            total_steps: batches_per_epoch * cfg.epochs,
            batches_per_epoch,
            new_per_batch,
            replay_slots,
            centroids: Vec::new(),
            centroid_epoch: None,
            distill_targets,
            strata,
            perm_cache: None,
        })
    }

    fn epoch_perm(&mut self, epoch: usize, n: usize, root: &RngStream) -> &[usize] {
        if self.perm_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = root.split(&format!("t{}/epoch{epoch}", self.task_id));
            self.perm_cache = Some((epoch, rng.permutation(n)));
        }
        &self.perm_cache.as_ref().unwrap().1
    }
}

pub fn train_root(cfg: &TrainConfig) -> RngStream {
    RngStream::new(cfg.seed).split("train")
}

/// Spawn the task head, reset optimizers and prepare the step schedule.
pub fn begin_task(state: &mut IncrementState, task: &TaskDataset, cfg: &TrainConfig) -> Result<TaskSession> {
    cfg.validate()?;
    let expected = state.tasks_done + 1;
    if task.task_id != expected {
        return Err(Error::NonSequentialTask {
            expected,
            got: task.task_id,
        });
    }
    if task.shape.input_dim() != state.backbone.input_dim() {
        return Err(Error::shape(state.backbone.input_dim(), task.shape.input_dim()));
    }
    let mut rng = train_root(cfg).split(&format!("t{}/head", task.task_id));
    let init = if state.bank.is_empty() {
        HeadInit::ColdRandom
    } else {
        cfg.head_init
    };
    state.bank.spawn_head(task.task_id, cfg.backbone.feature_dim, init, &mut rng)?;
    state.backbone_opt = Adam::new(state.backbone.num_params());
    state.head_opt = Adam::new(cfg.backbone.feature_dim + 1);
    TaskSession::build(state, task, cfg)
}

/// Rebuild a session for a task that was interrupted after `step` steps.
pub fn resume_task(
    state: &IncrementState,
    task: &TaskDataset,
    cfg: &TrainConfig,
    step: usize,
    centroids: Vec<Vec<Vec<f64>>>,
    centroid_epoch: Option<usize>,
) -> Result<TaskSession> {
    if state.bank.newest()?.task_id != task.task_id || state.tasks_done + 1 != task.task_id {
        return Err(Error::State(format!("state does not hold an open session for task {}", task.task_id)));
    }
    let mut s = TaskSession::build(state, task, cfg)?;
    s.step = step;
    s.centroids = centroids;
    s.centroid_epoch = centroid_epoch;
    Ok(s)
}

fn refresh_centroids(state: &IncrementState, session: &mut TaskSession, cfg: &TrainConfig) -> Result<()> {
    session.centroids = state
        .replay
        .iter()
        .map(|r| {
            r.domains
                .iter()
                .map(|d| match cfg.loss.centroid_source {
                    CentroidSource::BuildTime => Ok(d.build_centroid.clone()),
                    CentroidSource::EpochRefresh => compute_centroid(&state.features(&d.samples())?),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

/// One optimizer step (plus alignment) of the open task.
pub fn train_step(
    state: &mut IncrementState,
    session: &mut TaskSession,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<LossValues> {
    if session.is_done() {
        return Err(Error::State("task session already finished".into()));
    }
    let root = train_root(cfg);
    let flags = &cfg.ablation;
    let step = session.step;
    let epoch = step / session.batches_per_epoch;
    let b = step % session.batches_per_epoch;

    if flags.uses_refill() && !session.strata.is_empty() && session.centroid_epoch != Some(epoch) {
        refresh_centroids(state, session, cfg)?;
        session.centroid_epoch = Some(epoch);
    }

    let mut rng = root.split(&format!("t{}/step{step}", task.task_id));
    let k = session.new_per_batch;
    let mut rows: Vec<BatchRow> = session.epoch_perm(epoch, task.train.len(), &root)[b * k..(b + 1) * k]
        .iter()
        .map(|&i| BatchRow {
            set_domain_entry: None,
            new_index: Some(i),
        })
        .collect();
    if !session.strata.is_empty() {
        let n_strata = session.strata.len();
        let offset = (step * session.replay_slots) % n_strata;
        for q in 0..session.replay_slots {
            let st = session.strata[(offset + q) % n_strata];
            let entries = state.replay[st.set].domains[st.domain].entries.len();
            rows.push(BatchRow {
                set_domain_entry: Some((st.set, st.domain, rng.below(entries))),
                new_index: None,
            });
        }
    }

    let sample_of = |r: &BatchRow| -> &Sample {
        match (r.new_index, r.set_domain_entry) {
            (Some(i), _) => &task.train[i],
            (None, Some((s, d, e))) => &state.replay[s].domains[d].entries[e].sample,
            _ => unreachable!(),
        }
    };
    let samples: Vec<&Sample> = rows.iter().map(sample_of).collect();
    let n = samples.len();
    let dim = cfg.backbone.feature_dim;
    let cache = state.backbone.forward_cached(&stack_inputs(&samples)?)?;
    let feats = cache.output().clone();

    // isolation with re-filled latent points
    let mut g_iso = Matrix::zeros(n, dim);
    let mut l_iso = 0.0;
    if flags.uses_iso() {
        let labels: Vec<u32> = samples.iter().map(|s| s.domain().id()).collect();
        let mut refills = Vec::new();
        if flags.uses_refill() {
            for st in &session.strata {
                let members: Vec<usize> = (0..n)
                    .filter(|&i| matches!(rows[i].set_domain_entry, Some((s, d, _)) if s == st.set && d == st.domain))
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let count = cfg.loss.refill_count.unwrap_or(members.len());
                let centroid = &session.centroids[st.set][st.domain];
                let label = state.replay[st.set].domains[st.domain].label.id();
                for _ in 0..count {
                    let a = members[rng.below(members.len())];
                    let b = members[rng.below(members.len())];
                    refills.push(RefillPoint {
                        a,
                        b,
                        mix: Refill::draw(&mut rng),
                        centroid: centroid.clone(),
                        label,
                    });
                }
            }
        }
        let (l, g) = isolation_with_refills(&feats, &labels, &refills, &cfg.loss)?;
        l_iso = l;
        g_iso = g;
    }

    // distillation on replay rows
    let mut g_dis = Matrix::zeros(n, dim);
    let mut l_dis = 0.0;
    let replay_rows: Vec<usize> = (0..n).filter(|&i| rows[i].set_domain_entry.is_some()).collect();
    if !replay_rows.is_empty() {
        let current = feats.select_rows(&replay_rows);
        let mut frozen = Matrix::zeros(replay_rows.len(), dim);
        let mut groups = Vec::with_capacity(replay_rows.len());
        for (q, &i) in replay_rows.iter().enumerate() {
            let (s, d, e) = rows[i].set_domain_entry.unwrap();
            frozen.row_mut(q).copy_from_slice(session.distill_targets[s][d].row(e));
            groups.push(samples[i].task_id);
        }
        let (l, g) = distillation_loss(&current, &frozen, &groups)?;
        l_dis = l;
        for (q, &i) in replay_rows.iter().enumerate() {
            g_dis.row_mut(i).copy_from_slice(g.row(q));
        }
    }

    let task_ids: Vec<u32> = samples.iter().map(|s| s.task_id).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.class.as_label()).collect();
    let det: DetOutput = detection_loss(&state.bank, &feats, &task_ids, &targets)?;

    let loss_cfg = cfg.effective_loss();
    let total = overall_loss(
        &loss_cfg,
        &LossParts {
            iso: (l_iso, g_iso),
            dis: (l_dis, g_dis),
            det,
        },
    )?;

    let grads = state.backbone.backward(&cache, &total.feature_grad)?;
    state.backbone_opt.step(state.backbone.params_mut(), &grads, cfg.lr)?;
    let head = state.bank.newest_mut()?;
    let mut hp = head.params();
    state.head_opt.step(&mut hp, &total.head_grad, cfg.lr)?;
    head.set_params(&hp)?;

    if flags.uses_alignment() && state.bank.len() >= 2 {
        match state.bank.align_newest(cfg.gamma) {
            Ok(()) => {}
            Err(Error::AntipodalDegenerate) => log::warn!("alignment skipped at step {step}: antipodal normals"),
            Err(e) => return Err(e),
        }
    }
    session.step += 1;
    Ok(total.values)
}

/// Snapshot the backbone and store the replay set of the finished task.
pub fn finish_task(state: &mut IncrementState, session: &TaskSession, task: &TaskDataset, cfg: &TrainConfig) -> Result<()> {
    if !session.is_done() {
        return Err(Error::State(format!(
            "task {} finished after {} of {} steps",
            task.task_id, session.step, session.total_steps
        )));
    }
    let snapshot = state.backbone.snapshot();
    let rng = train_root(cfg).split(&format!("t{}/replay", task.task_id));
    let opts = ReplayBuildOptions {
        n_r: cfg.n_r,
        strategy: cfg.strategy,
        stability_draws: cfg.stability_draws,
    };
    let set = build_replay_set(task, &snapshot, Some(state.bank.newest()?), &opts, &rng)?;
    state.replay.push(set);
    state.frozen = Some(snapshot);
    state.tasks_done = task.task_id;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub task: u32,
    pub step: usize,
    #[serde(flatten)]
    pub values: LossValues,
}

fn train_task(state: &mut IncrementState, task: &TaskDataset, cfg: &TrainConfig, trace: &mut Vec<TraceRow>) -> Result<()> {
    let mut session = begin_task(state, task, cfg)?;
    while !session.is_done() {
        let step = session.step;
        let values = train_step(state, &mut session, task, cfg)?;
        trace.push(TraceRow {
            task: task.task_id,
            step,
            values,
        });
    }
    finish_task(state, &session, task, cfg)
}

/// Train task 1 on an empty state.
pub fn train_first_task(state: &mut IncrementState, task: &TaskDataset, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    if state.tasks_done != 0 {
        return Err(Error::State("first task requires an empty state".into()));
    }
    let mut trace = Vec::new();
    train_task(state, task, cfg, &mut trace)?;
    Ok(trace)
}

/// Train task `t+1` with replay from tasks `1..=t`.
pub fn train_increment(state: &mut IncrementState, task: &TaskDataset, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    if state.tasks_done == 0 {
        return Err(Error::State("increment requires a trained first task".into()));
    }
    let mut trace = Vec::new();
    train_task(state, task, cfg, &mut trace)?;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub auc: f64,
    pub acc: f64,
}

pub fn evaluate_task(state: &IncrementState, task: &TaskDataset, mode: InferenceAveraging) -> Result<TaskEval> {
    let samples: Vec<&Sample> = task.eval.iter().collect();
    let scores = state.scores(&samples, mode)?;
    let labels: Vec<bool> = task.eval.iter().map(|s| s.class.is_fake()).collect();
    Ok(TaskEval {
        auc: auc(&scores, &labels)?,
        acc: accuracy(&scores, &labels, 0.5)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdRow {
    pub task: u32,
    pub domain: Class,
    pub strategy: ReplayStrategy,
    pub mmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRow {
    pub after_task: u32,
    /// AUC on tasks `1..=after_task`.
    pub auc: Vec<f64>,
    pub acc: Vec<f64>,
    /// Silhouette of eval features over domain labels of all seen tasks.
    pub silhouette: f64,
    /// Angle between the newest and previous head normals (radians).
    pub head_angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub task: u32,
    pub class: Class,
    pub domain: u32,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub after_task: u32,
    pub points: Vec<FeaturePoint>,
}

/// Accumulated results of a protocol run; checkpointable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub increments: Vec<IncrementRow>,
    pub mmd: Vec<MmdRow>,
    pub trace: Vec<TraceRow>,
    pub dumps: Vec<FeatureDump>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub dump_features: bool,
}

/// Evaluate all seen tasks, audit the newest replay set and record the row.
pub fn record_increment(
    state: &IncrementState,
    stream: &[TaskDataset],
    cfg: &TrainConfig,
    opts: &RunOptions,
    progress: &mut Progress,
) -> Result<()> {
    let t = state.tasks_done as usize;
    let seen = &stream[..t];
    let mut auc_row = Vec::with_capacity(t);
    let mut acc_row = Vec::with_capacity(t);
    for task in seen {
        let e = evaluate_task(state, task, cfg.averaging)?;
        auc_row.push(e.auc);
        acc_row.push(e.acc);
    }

    let eval_samples: Vec<&Sample> = seen.iter().flat_map(|d| d.eval.iter()).collect();
    let eval_feats = state.features(&eval_samples)?;
    let labels: Vec<u32> = eval_samples.iter().map(|s| s.domain().id()).collect();
    let silhouette = domain_separation(&eval_feats, &labels)?.silhouette;

    let head_angle = if state.bank.len() >= 2 {
        let h = state.bank.heads();
        Some(angle_between(&h[h.len() - 1].w, &h[h.len() - 2].w)?)
    } else {
        None
    };

    let task = &stream[t - 1];
    let set = state.replay.last().ok_or_else(|| Error::State("no replay set after task".into()))?;
    let frozen = state.frozen.as_ref().ok_or_else(|| Error::State("no snapshot after task".into()))?;
    for dom in &set.domains {
        let full = frozen.forward(&stack_inputs(&task.train_domain(dom.label.class))?)?;
        progress.mmd.push(MmdRow {
            task: dom.label.task_id,
            domain: dom.label.class,
            strategy: set.strategy,
            mmd: mmd(&dom.cached_features(), &full, &MmdConfig::default())?,
        });
    }

    if opts.dump_features {
        progress.dumps.push(FeatureDump {
            after_task: t as u32,
            points: eval_samples
                .iter()
                .zip(eval_feats.iter_rows())
                .map(|(s, f)| FeaturePoint {
                    task: s.task_id,
                    class: s.class,
                    domain: s.domain().id(),
                    feature: f.to_vec(),
                })
                .collect(),
        });
    }

    progress.increments.push(IncrementRow {
        after_task: t as u32,
        auc: auc_row,
        acc: acc_row,
        silhouette,
        head_angle,
    });
    Ok(())
}

/// Resumable protocol driver.
#[derive(Debug, Clone)]
pub struct ProtocolRunner {
    pub stream: Vec<TaskDataset>,
    pub cfg: TrainConfig,
    pub opts: RunOptions,
    pub state: IncrementState,
    pub session: Option<TaskSession>,
    pub progress: Progress,
}

impl ProtocolRunner {
    pub fn new(stream: Vec<TaskDataset>, cfg: TrainConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let first = stream.first().ok_or_else(|| Error::InvalidSpec("empty task stream".into()))?;
        let state = IncrementState::new(first.shape.input_dim(), &cfg)?;
        Ok(Self {
            stream,
            cfg,
            opts,
            state,
            session: None,
            progress: Progress::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.session.is_none() && self.state.tasks_done as usize == self.stream.len()
    }

    /// Advance by one training step, finishing and recording a task when
    /// its last step completes. Returns false once the stream is exhausted.
    pub fn advance(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let idx = self.state.tasks_done as usize;
        if self.session.is_none() {
            self.session = Some(begin_task(&mut self.state, &self.stream[idx], &self.cfg)?);
        }
        let task = &self.stream[idx];
        let session = self.session.as_mut().unwrap();
        let step = session.step;
        let values = train_step(&mut self.state, session, task, &self.cfg)?;
        self.progress.trace.push(TraceRow {
            task: task.task_id,
            step,
            values,
        });
        if session.is_done() {
            let session = self.session.take().unwrap();
            finish_task(&mut self.state, &session, task, &self.cfg)?;
            record_increment(&self.state, &self.stream, &self.cfg, &self.opts, &mut self.progress)?;
        }
        Ok(true)
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while self.advance()? {}
        Ok(())
    }
}

/// Angle (radians) between each increment's newest head and its predecessor.
pub fn head_angles(bank: &HeadBank) -> Result<Vec<f64>> {
    bank.heads()
        .windows(2)
        .map(|w| angle_between(&w[1].w, &w[0].w))
        .collect()
}

/// Domains of `stream[..t]`, useful for isolation diagnostics.
pub fn seen_domains(t: usize) -> Vec<DomainLabel> {
    (1..=t as u32)
        .flat_map(|task| [DomainLabel::new(task, Class::Real), DomainLabel::new(task, Class::Fake)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_stream, ProtocolSpec};

    fn tiny_spec() -> ProtocolSpec {
        ProtocolSpec {
            tasks: 2,
            train_per_task: 64,
            eval_per_task: 32,
            seed: 1,
            ..Default::default()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            n_r: 8,
            lr: 1e-3,
            backbone: BackboneConfig {
                hidden: vec![8],
                feature_dim: 4,
            },
            ..Default::default()
        }
    }

    #[test]
    fn first_task_builds_two_domains() {
        let stream = generate_stream(&tiny_spec()).unwrap();
        let cfg = tiny_cfg();
        let mut state = IncrementState::new(128, &cfg).unwrap();
        let trace = train_first_task(&mut state, &stream[0], &cfg).unwrap();
        assert_eq!(trace.len(), 4);
        assert_eq!(state.replay[0].len(), 16);
        assert!(state.frozen.is_some());
        assert!(trace.iter().all(|r| r.values.l_dis == 0.0));
    }

    #[test]
    fn increments_must_be_sequential() {
        let stream = generate_stream(&tiny_spec()).unwrap();
        let cfg = tiny_cfg();
        let mut state = IncrementState::new(128, &cfg).unwrap();
        assert!(train_increment(&mut state, &stream[1], &cfg).is_err());
        assert!(matches!(begin_task(&mut state, &stream[1], &cfg), Err(Error::NonSequentialTask { .. })));
    }

    #[test]
    fn disable_all_trains_detection_only() {
        let stream = generate_stream(&tiny_spec()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.ablation = AblationFlags::lower_bound();
        let mut state = IncrementState::new(128, &cfg).unwrap();
        let mut trace = train_first_task(&mut state, &stream[0], &cfg).unwrap();
        trace.extend(train_increment(&mut state, &stream[1], &cfg).unwrap());
        for r in &trace {
            assert_eq!(r.values.l_iso, 0.0);
            assert_eq!(r.values.l_dis, 0.0);
            assert_eq!(r.values.l_overall, r.values.l_det);
        }
    }

    #[test]
    fn batches_cover_every_task() {
        let spec = ProtocolSpec {
            tasks: 3,
            ..tiny_spec()
        };
        let stream = generate_stream(&spec).unwrap();
        let cfg = tiny_cfg();
        let mut state = IncrementState::new(128, &cfg).unwrap();
        train_first_task(&mut state, &stream[0], &cfg).unwrap();
        train_increment(&mut state, &stream[1], &cfg).unwrap();
        let session = begin_task(&mut state, &stream[2], &cfg).unwrap();
        // batch 16 >= 4·3: the replay slots must reach both previous tasks
        assert_eq!(session.replay_slots, 8);
        let tasks: std::collections::HashSet<usize> = session
            .strata
            .iter()
            .cycle()
            .skip(5)
            .take(session.replay_slots)
            .map(|s| s.set)
            .collect();
        assert_eq!(tasks.len(), 2);
    }
}
