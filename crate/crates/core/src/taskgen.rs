//! Synthetic incremental task streams.
//!
//! A sample is a `g × g` grid of `m`-dimensional blocks. Real samples draw
//! every block from `N(content mean, noise² I)`. Fake samples are drawn the
//! same way and then get the task's cue vector `cue_scale · v_t` added to
//! every block, so the real/fake signal is local to each block and survives
//! any permutation of the grid.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Real,
    Fake,
}

impl Class {
    pub fn is_fake(self) -> bool {
        self == Class::Fake
    }

    pub fn as_label(self) -> f64 {
        match self {
            Class::Real => 0.0,
            Class::Fake => 1.0,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::Real => "real",
            Class::Fake => "fake",
        })
    }
}

/// `(task, class)` pair; each one is its own isolation domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainLabel {
    pub task_id: u32,
    pub class: Class,
}

impl DomainLabel {
    pub fn new(task_id: u32, class: Class) -> Self {
        Self { task_id, class }
    }

    /// Unique integer code: `2(t−1)` for real, `2(t−1)+1` for fake.
    pub fn id(self) -> u32 {
        2 * (self.task_id - 1) + u32::from(self.class.is_fake())
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}-{}", self.task_id, self.class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub g: usize,
    pub m: usize,
}

impl GridShape {
    pub fn cells(self) -> usize {
        self.g * self.g
    }

    pub fn input_dim(self) -> usize {
        self.g * self.g * self.m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub task_id: u32,
    pub class: Class,
    /// Blocks in row-major grid order, each `m` values long.
    pub values: Vec<f64>,
}

impl Sample {
    pub fn domain(&self) -> DomainLabel {
        DomainLabel::new(self.task_id, self.class)
    }

    pub fn block(&self, shape: GridShape, cell: usize) -> &[f64] {
        &self.values[cell * shape.m..(cell + 1) * shape.m]
    }

    /// Mean over grid cells, an `m`-vector.
    pub fn mean_block(&self, shape: GridShape) -> Vec<f64> {
        let mut acc = vec![0.0; shape.m];
        for c in 0..shape.cells() {
            for (a, v) in acc.iter_mut().zip(self.block(shape, c)) {
                *a += v;
            }
        }
        let n = shape.cells() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Permute the grid cells uniformly at random. Block contents, label and id
/// are untouched.
pub fn grid_shuffle(x: &Sample, shape: GridShape, rng: &mut RngStream) -> Sample {
    let perm = rng.permutation(shape.cells());
    permute_blocks(x, shape, &perm)
}

/// Output cell `i` receives input cell `perm[i]`.
pub fn permute_blocks(x: &Sample, shape: GridShape, perm: &[usize]) -> Sample {
    let mut values = Vec::with_capacity(x.values.len());
    for &src in perm {
        values.extend_from_slice(x.block(shape, src));
    }
    Sample {
        values,
        ..x.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Real and fake content both change per task.
    DatasetIncremental,
    /// One shared real distribution; only the fake cue changes per task.
    ForgeryTypeIncremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    pub tasks: usize,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    pub grid: usize,
    pub block_dim: usize,
    pub cue_scale: f64,
    /// Std of the entries of each content mean.
    pub content_scale: f64,
    pub noise_scale: f64,
    /// Number of content modes per task; every sample picks one uniformly.
    pub lobes: usize,
    pub max_cue_cosine: f64,
    pub seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::ForgeryTypeIncremental,
            tasks: 4,
            train_per_task: 2000,
            eval_per_task: 500,
            grid: 4,
            block_dim: 8,
            cue_scale: 0.8,
            content_scale: 1.0,
            noise_scale: 1.0,
            lobes: 1,
            max_cue_cosine: 0.3,
            seed: 0,
        }
    }
}

impl ProtocolSpec {
    pub fn shape(&self) -> GridShape {
        GridShape {
            g: self.grid,
            m: self.block_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.tasks < 1 {
            return bad("tasks must be >= 1");
        }
        if self.grid < 2 {
            return bad("grid must be >= 2");
        }
        if self.block_dim < 1 {
            return bad("block_dim must be >= 1");
        }
        if self.train_per_task < 4 || self.eval_per_task < 2 {
            return bad("each split needs both classes");
        }
        if self.lobes < 1 {
            return bad("lobes must be >= 1");
        }
        if !(self.noise_scale >= 0.0 && self.content_scale >= 0.0 && self.cue_scale >= 0.0) {
            return bad("scales must be nonnegative");
        }
        if !(self.max_cue_cosine > 0.0 && self.max_cue_cosine <= 1.0) {
            return bad("max_cue_cosine must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGeneration {
    /// One content mean per lobe, each `g·g·m` long.
    pub content_means: Vec<Vec<f64>>,
    /// Unit cue vector, `m` long.
    pub cue: Vec<f64>,
    pub cue_scale: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: u32,
    pub shape: GridShape,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub generation: TaskGeneration,
}

impl TaskDataset {
    pub fn train_domain(&self, class: Class) -> Vec<&Sample> {
        self.train.iter().filter(|s| s.class == class).collect()
    }

    pub fn eval_labels(&self) -> Vec<f64> {
        self.eval.iter().map(|s| s.class.as_label()).collect()
    }
}

fn draw_mean(len: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..len).map(|_| scale * rng.normal()).collect()
}

fn draw_cues(spec: &ProtocolSpec, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    const MAX_ATTEMPTS: usize = 10_000;
    let mut cues: Vec<Vec<f64>> = Vec::with_capacity(spec.tasks);
    let mut attempts = 0;
    while cues.len() < spec.tasks {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::InvalidSpec(format!(
                "cannot draw {} cue vectors in {} dims with pairwise |cos| < {}",
                spec.tasks, spec.block_dim, spec.max_cue_cosine
            )));
        }
        let raw: Vec<f64> = (0..spec.block_dim).map(|_| rng.normal()).collect();
        let Ok(v) = l2_normalize(&raw) else { continue };
        if cues.iter().all(|c| dot(c, &v).abs() < spec.max_cue_cosine) {
            cues.push(v);
        }
    }
    Ok(cues)
}

fn draw_sample(id: u64, task_id: u32, class: Class, gen: &TaskGeneration, shape: GridShape, rng: &mut RngStream) -> Sample {
    let lobe = if gen.content_means.len() > 1 {
        rng.below(gen.content_means.len())
    } else {
        0
    };
    let mean = &gen.content_means[lobe];
    let mut values: Vec<f64> = mean.iter().map(|mu| mu + gen.noise_scale * rng.normal()).collect();
    if class.is_fake() {
        for cell in 0..shape.cells() {
            let block = &mut values[cell * shape.m..(cell + 1) * shape.m];
            for (v, c) in block.iter_mut().zip(&gen.cue) {
                *v += gen.cue_scale * c;
            }
        }
    }
    Sample {
        id,
        task_id,
        class,
        values,
    }
}

/// Generate the full stream. Equal specs give bit-identical streams.
pub fn generate_stream(spec: &ProtocolSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let shape = spec.shape();
    let root = RngStream::new(spec.seed).split("stream");
    let cues = draw_cues(spec, &mut root.split("cues"))?;
    let shared_means: Vec<Vec<f64>> = {
        let mut rng = root.split("shared-real");
        (0..spec.lobes)
            .map(|_| draw_mean(shape.input_dim(), spec.content_scale, &mut rng))
            .collect()
    };
    let mut out = Vec::with_capacity(spec.tasks);
    for (t, cue) in cues.into_iter().enumerate() {
        let task_id = t as u32 + 1;
        let task_rng = root.split(&format!("task{task_id}"));
        let content_means = match spec.mode {
            ProtocolMode::ForgeryTypeIncremental => shared_means.clone(),
            ProtocolMode::DatasetIncremental => {
                let mut rng = task_rng.split("real-mean");
                (0..spec.lobes)
                    .map(|_| draw_mean(shape.input_dim(), spec.content_scale, &mut rng))
                    .collect()
            }
        };
        let generation = TaskGeneration {
            content_means,
            cue,
            cue_scale: spec.cue_scale,
            noise_scale: spec.noise_scale,
        };
        let mut next_id = u64::from(task_id) << 32;
        let mut split = |n: usize, label: &str| {
            let mut rng = task_rng.split(label);
            (0..n)
                .map(|i| {
                    let class = if i % 2 == 0 { Class::Real } else { Class::Fake };
                    let s = draw_sample(next_id, task_id, class, &generation, shape, &mut rng);
                    next_id += 1;
                    s
                })
                .collect::<Vec<_>>()
        };
        let train = split(spec.train_per_task, "train");
        let eval = split(spec.eval_per_task, "eval");
        out.push(TaskDataset {
            task_id,
            shape,
            train,
            eval,
            generation,
        });
    }
    Ok(out)
}

/// SHA-256 over every sample's id, labels and value bits, hex encoded.
pub fn stream_digest(stream: &[TaskDataset]) -> String {
    let mut h = Sha256::new();
    for task in stream {
        for s in task.train.iter().chain(&task.eval) {
            h.update(s.id.to_le_bytes());
            h.update(s.task_id.to_le_bytes());
            h.update([u8::from(s.class.is_fake())]);
            for v in &s.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// CSV layout: `sample_id,task_id,split,class,domain,v0..v{D-1}` with
/// `class` as `real`/`fake` and `domain` the integer domain code.
pub fn write_stream_csv<W: Write>(stream: &[TaskDataset], mut w: W) -> Result<()> {
    let dim = stream.first().map_or(0, |t| t.shape.input_dim());
    write!(w, "sample_id,task_id,split,class,domain")?;
    for i in 0..dim {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for task in stream {
        for (split, samples) in [("train", &task.train), ("eval", &task.eval)] {
            for s in samples {
                write!(w, "{},{},{},{},{}", s.id, s.task_id, split, s.class, s.domain().id())?;
                for v in &s.values {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: ProtocolMode, tasks: usize) -> ProtocolSpec {
        ProtocolSpec {
            mode,
            tasks,
            train_per_task: 40,
            eval_per_task: 20,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn forgery_type_mode_shares_real_mean() {
        let s = generate_stream(&small(ProtocolMode::ForgeryTypeIncremental, 2)).unwrap();
        assert_eq!(s[0].generation.content_means, s[1].generation.content_means);
        assert_ne!(s[0].generation.cue, s[1].generation.cue);
    }

    #[test]
    fn dataset_mode_draws_fresh_means() {
        let s = generate_stream(&small(ProtocolMode::DatasetIncremental, 2)).unwrap();
        assert_ne!(s[0].generation.content_means, s[1].generation.content_means);
    }

    #[test]
    fn cues_are_unit_and_dissimilar() {
        let s = generate_stream(&small(ProtocolMode::ForgeryTypeIncremental, 4)).unwrap();
        for (i, a) in s.iter().enumerate() {
            assert!((dot(&a.generation.cue, &a.generation.cue) - 1.0).abs() < 1e-12);
            for b in &s[i + 1..] {
                assert!(dot(&a.generation.cue, &b.generation.cue).abs() < 0.3);
            }
        }
    }

    #[test]
    fn splits_are_balanced_and_disjoint() {
        let s = generate_stream(&small(ProtocolMode::DatasetIncremental, 3)).unwrap();
        let mut ids = std::collections::HashSet::new();
        for t in &s {
            for split in [&t.train, &t.eval] {
                assert!(split.iter().any(|x| x.class == Class::Real));
                assert!(split.iter().any(|x| x.class == Class::Fake));
            }
            for x in t.train.iter().chain(&t.eval) {
                assert!(ids.insert(x.id));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(ProtocolMode::DatasetIncremental, 2);
        let a = generate_stream(&spec).unwrap();
        let b = generate_stream(&spec).unwrap();
        assert_eq!(stream_digest(&a), stream_digest(&b));
        assert_eq!(a[1].train, b[1].train);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small(ProtocolMode::DatasetIncremental, 2);
        spec.grid = 1;
        assert!(matches!(generate_stream(&spec), Err(Error::InvalidSpec(_))));
        let mut spec = small(ProtocolMode::DatasetIncremental, 2);
        spec.tasks = 0;
        assert!(generate_stream(&spec).is_err());
    }

    #[test]
    fn domain_ids_are_injective() {
        let mut seen = std::collections::HashSet::new();
        for t in 1..=10 {
            for c in [Class::Real, Class::Fake] {
                assert!(seen.insert(DomainLabel::new(t, c).id()));
            }
        }
    }

    #[test]
    fn identity_permutation_is_noop() {
        let shape = GridShape { g: 2, m: 3 };
        let x = Sample {
            id: 1,
            task_id: 1,
            class: Class::Fake,
            values: (0..12).map(f64::from).collect(),
        };
        assert_eq!(permute_blocks(&x, shape, &[0, 1, 2, 3]), x);
    }

    #[test]
    fn shuffle_preserves_blocks_and_mean() {
        let shape = GridShape { g: 4, m: 8 };
        let s = generate_stream(&small(ProtocolMode::DatasetIncremental, 1)).unwrap();
        let mut rng = RngStream::new(1);
        for x in s[0].train.iter().take(10) {
            let y = grid_shuffle(x, shape, &mut rng);
            assert_eq!((y.id, y.class, y.task_id), (x.id, x.class, x.task_id));
            let mut bx: Vec<Vec<u64>> = (0..16).map(|c| x.block(shape, c).iter().map(|v| v.to_bits()).collect()).collect();
            let mut by: Vec<Vec<u64>> = (0..16).map(|c| y.block(shape, c).iter().map(|v| v.to_bits()).collect()).collect();
            bx.sort();
            by.sort();
            assert_eq!(bx, by);
            // the mean block of a permutation agrees up to summation order
            for (a, b) in x.mean_block(shape).iter().zip(y.mean_block(shape)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let s = generate_stream(&small(ProtocolMode::DatasetIncremental, 2)).unwrap();
        let mut buf = Vec::new();
        write_stream_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 60);
        assert_eq!(lines[0].split(',').count(), 5 + 128);
        assert!(lines[1].starts_with("4294967296,1,train,real,0,"));
    }
}
