//! Binary checkpoints of a protocol run.
//!
//! Layout: magic `BRKLCKPT`, format version (u32 LE), then tagged sections
//! (4-byte tag, u64 LE payload length, payload), then a SHA-256 digest of
//! everything before it. Floats are stored as little-endian f64 bits.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{Adam, Backbone};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadBank, TaskHead};
use crate::numerics::RngState;
use crate::report::write_atomic;
use crate::sur::{ReplayDomain, ReplayEntry, ReplaySet, ReplayStrategy};
use crate::taskgen::{generate_stream, stream_digest, Class, DomainLabel, Sample};
use crate::trainer::{resume_task, train_root, IncrementState, Progress, ProtocolRunner};

pub const MAGIC: &[u8; 8] = b"BRKLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptFile("unexpected end of section".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 * 8 + 64 {
            return Err(Error::CorruptFile(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::CorruptFile("invalid utf-8".into()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptFile("trailing bytes in section".into()));
        }
        Ok(())
    }
}

fn put_backbone(e: &mut Enc, b: &Backbone) {
    e.len(b.dims().len());
    for &d in b.dims() {
        e.len(d);
    }
    e.bytes(&b.activation_tags());
    e.f64s(b.params());
}

fn get_backbone(d: &mut Dec) -> Result<Backbone> {
    let n = d.len()?;
    let dims = (0..n).map(|_| d.len()).collect::<Result<Vec<_>>>()?;
    let acts = Backbone::activations_from_tags(d.bytes()?).ok_or_else(|| Error::CorruptFile("bad activation tag".into()))?;
    Backbone::from_parts(dims, acts, d.f64s()?)
}

fn put_adam(e: &mut Enc, a: &Adam) {
    e.f64(a.beta1);
    e.f64(a.beta2);
    e.f64(a.eps);
    e.u64(a.t);
    e.f64s(&a.m);
    e.f64s(&a.v);
}

fn get_adam(d: &mut Dec) -> Result<Adam> {
    let beta1 = d.f64()?;
    let beta2 = d.f64()?;
    let eps = d.f64()?;
    let t = d.u64()?;
    let m = d.f64s()?;
    let v = d.f64s()?;
    let mut a = Adam::new(m.len());
    a.beta1 = beta1;
    a.beta2 = beta2;
    a.eps = eps;
    a.t = t;
    a.m = m;
    a.v = v;
    Ok(a)
}

fn class_tag(c: Class) -> u8 {
    u8::from(c.is_fake())
}

fn tag_class(t: u8) -> Result<Class> {
    match t {
        0 => Ok(Class::Real),
        1 => Ok(Class::Fake),
        _ => Err(Error::CorruptFile(format!("bad class tag {t}"))),
    }
}

fn put_replay(e: &mut Enc, r: &ReplaySet) {
    e.u32(r.builder_task_id);
    e.str(r.strategy.name());
    e.len(r.domains.len());
    for dom in &r.domains {
        e.u32(dom.label.task_id);
        e.u8(class_tag(dom.label.class));
        e.f64s(&dom.build_centroid);
        e.len(dom.entries.len());
        for en in &dom.entries {
            e.u64(en.sample.id);
            e.u32(en.sample.task_id);
            e.u8(class_tag(en.sample.class));
            e.f64s(&en.sample.values);
            e.f64s(&en.cached_feature);
        }
    }
}

fn get_replay(d: &mut Dec) -> Result<ReplaySet> {
    let builder_task_id = d.u32()?;
    let strategy: ReplayStrategy = d.str()?.parse().map_err(|_| Error::CorruptFile("bad strategy".into()))?;
    let nd = d.len()?;
    let mut domains = Vec::with_capacity(nd);
    for _ in 0..nd {
        let label = DomainLabel::new(d.u32()?, tag_class(d.u8()?)?);
        let build_centroid = d.f64s()?;
        let ne = d.len()?;
        let mut entries = Vec::with_capacity(ne);
        for _ in 0..ne {
            let sample = Sample {
                id: d.u64()?,
                task_id: d.u32()?,
                class: tag_class(d.u8()?)?,
                values: d.f64s()?,
            };
            entries.push(ReplayEntry {
                sample,
                cached_feature: d.f64s()?,
            });
        }
        domains.push(ReplayDomain {
            label,
            build_centroid,
            entries,
        });
    }
    Ok(ReplaySet {
        builder_task_id,
        strategy,
        domains,
    })
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], e: Enc) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(e.0.len() as u64).to_le_bytes());
    out.extend_from_slice(&e.0);
}

/// Serialize a runner paused between steps.
pub fn encode(runner: &ProtocolRunner, config: &RunConfig) -> Result<Vec<u8>> {
    let st = &runner.state;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let mut e = Enc::default();
    e.str(&config.to_toml_string());
    section(&mut out, b"CONF", e);

    let mut e = Enc::default();
    e.str(&stream_digest(&runner.stream));
    section(&mut out, b"STRM", e);

    let mut e = Enc::default();
    let rng: RngState = train_root(&runner.cfg).state();
    e.0.extend_from_slice(&rng.key);
    e.0.extend_from_slice(&rng.word_pos.to_le_bytes());
    section(&mut out, b"RNGS", e);

    let mut e = Enc::default();
    e.u32(st.tasks_done);
    put_backbone(&mut e, &st.backbone);
    section(&mut out, b"BKBN", e);

    let mut e = Enc::default();
    match &st.frozen {
        Some(f) => {
            e.u8(1);
            put_backbone(&mut e, f.inner());
        }
        None => e.u8(0),
    }
    section(&mut out, b"FRZN", e);

    let mut e = Enc::default();
    put_adam(&mut e, &st.backbone_opt);
    put_adam(&mut e, &st.head_opt);
    section(&mut out, b"OPTM", e);

    let mut e = Enc::default();
    e.len(st.bank.len());
    for h in st.bank.heads() {
        e.u32(h.task_id);
        e.u8(u8::from(h.frozen));
        e.f64(h.b);
        e.f64s(&h.w);
    }
    section(&mut out, b"HEAD", e);

    let mut e = Enc::default();
    e.len(st.replay.len());
    for r in &st.replay {
        put_replay(&mut e, r);
    }
    section(&mut out, b"RPLY", e);

    let mut e = Enc::default();
    match &runner.session {
        Some(s) => {
            e.u8(1);
            e.u64(s.step as u64);
            match s.centroid_epoch {
                Some(ep) => {
                    e.u8(1);
                    e.u64(ep as u64);
                }
                None => e.u8(0),
            }
            e.len(s.centroids.len());
            for set in &s.centroids {
                e.len(set.len());
                for c in set {
                    e.f64s(c);
                }
            }
        }
        None => e.u8(0),
    }
    section(&mut out, b"SESS", e);

    let mut e = Enc::default();
    e.str(&serde_json::to_string(&runner.progress)?);
    section(&mut out, b"PROG", e);

    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Inverse of [`encode`]: regenerates the task stream from the embedded
/// config and checks it against the recorded digest.
pub fn decode(bytes: &[u8]) -> Result<(ProtocolRunner, RunConfig)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptFile("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::CorruptFile("truncated checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest[..] != trailer[..] {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }

    let mut sections = std::collections::BTreeMap::new();
    let mut pos = 12;
    while pos < body.len() {
        if body.len() - pos < 12 {
            return Err(Error::CorruptFile("truncated section header".into()));
        }
        let tag: [u8; 4] = body[pos..pos + 4].try_into().unwrap();
        let len = u64::from_le_bytes(body[pos + 4..pos + 12].try_into().unwrap()) as usize;
        pos += 12;
        if body.len() - pos < len {
            return Err(Error::CorruptFile("truncated section".into()));
        }
        sections.insert(tag, &body[pos..pos + len]);
        pos += len;
    }
    let get = |tag: &[u8; 4]| -> Result<Dec> {
        sections
            .get(tag)
            .map(|b| Dec::new(b))
            .ok_or_else(|| Error::CorruptFile(format!("missing section {}", String::from_utf8_lossy(tag))))
    };

    let mut d = get(b"CONF")?;
    let config = RunConfig::from_toml_str(&d.str()?)?;
    d.finish()?;

    let stream = generate_stream(&config.protocol)?;
    let mut d = get(b"STRM")?;
    let recorded = d.str()?;
    d.finish()?;
    if recorded != stream_digest(&stream) {
        return Err(Error::State("regenerated task stream differs from the checkpointed one".into()));
    }

    let mut runner = ProtocolRunner::new(stream, config.train.clone(), config.run_options())?;

    let mut d = get(b"RNGS")?;
    let key: [u8; 32] = d.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(d.take(16)?.try_into().unwrap());
    d.finish()?;
    if (RngState { key, word_pos }) != train_root(&runner.cfg).state() {
        return Err(Error::State("checkpoint RNG root does not match its config".into()));
    }

    let mut d = get(b"BKBN")?;
    let tasks_done = d.u32()?;
    let backbone = get_backbone(&mut d)?;
    d.finish()?;

    let mut d = get(b"FRZN")?;
    let frozen = match d.u8()? {
        0 => None,
        _ => Some(get_backbone(&mut d)?.snapshot()),
    };
    d.finish()?;

    let mut d = get(b"OPTM")?;
    let backbone_opt = get_adam(&mut d)?;
    let head_opt = get_adam(&mut d)?;
    d.finish()?;

    let mut d = get(b"HEAD")?;
    let nh = d.len()?;
    let mut heads = Vec::with_capacity(nh);
    for _ in 0..nh {
        let task_id = d.u32()?;
        let frozen = d.u8()? != 0;
        let b = d.f64()?;
        let w = d.f64s()?;
        heads.push(TaskHead { task_id, w, b, frozen });
    }
    d.finish()?;
    let bank = HeadBank::from_heads(heads)?;

    let mut d = get(b"RPLY")?;
    let nr = d.len()?;
    let replay = (0..nr).map(|_| get_replay(&mut d)).collect::<Result<Vec<_>>>()?;
    d.finish()?;

    runner.state = IncrementState {
        backbone,
        frozen,
        bank,
        replay,
        tasks_done,
        backbone_opt,
        head_opt,
    };

    let mut d = get(b"SESS")?;
    if d.u8()? != 0 {
        let step = d.u64()? as usize;
        let centroid_epoch = match d.u8()? {
            0 => None,
            _ => Some(d.u64()? as usize),
        };
        let ns = d.len()?;
        let mut centroids = Vec::with_capacity(ns);
        for _ in 0..ns {
            let nd = d.len()?;
            centroids.push((0..nd).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?);
        }
        let idx = runner.state.tasks_done as usize;
        let task = runner
            .stream
            .get(idx)
            .ok_or_else(|| Error::CorruptFile("open session past the end of the stream".into()))?;
        runner.session = Some(resume_task(&runner.state, task, &runner.cfg, step, centroids, centroid_epoch)?);
    }
    d.finish()?;

    let mut d = get(b"PROG")?;
    let progress: Progress = serde_json::from_str(&d.str()?)?;
    d.finish()?;
    runner.progress = progress;

    Ok((runner, config))
}

pub fn save(path: &Path, runner: &ProtocolRunner, config: &RunConfig) -> Result<()> {
    write_atomic(path, &encode(runner, config)?)
}

pub fn load(path: &Path) -> Result<(ProtocolRunner, RunConfig)> {
    decode(&std::fs::read(path)?)
}

