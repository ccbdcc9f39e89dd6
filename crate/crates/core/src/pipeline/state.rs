//! Scenario checkpoint: the whole learner state after some number of tasks.
//!
//! ```text
//! "PPST" | version u32 | sections... | "SHA2" | sha256 of all prior bytes
//! section = tag [4]u8 | payload length u64 | payload
//! ```
//!
//! Sections appear in a fixed order: CONF (JSON learner config, selection,
//! seed), BKBN (backbone checkpoint bytes), CMAP, LAYT, POOL, CLSP, CLSL,
//! KEYS, PRTF, PRTL. Prototype entries are class u32, task u32, D × f64.
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::learner::{PrePrompt, Selection, StageReport, TaskKeys};
use super::{LabelClassifier, LearnerConfig, PromptClassifier, TaskLayout};
use crate::backbone::checkpoint;
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::harness::ClassMap;
use crate::head::LinearHead;
use crate::prompting::{Prompt, PromptMode, PromptPool};
use crate::translation::PrototypeStore;

pub const STATE_MAGIC: &[u8; 4] = b"PPST";
pub const STATE_VERSION: u32 = 1;
const TAGS: [&[u8; 4]; 10] = [
    b"CONF", b"BKBN", b"CMAP", b"LAYT", b"POOL", b"CLSP", b"CLSL", b"KEYS", b"PRTF", b"PRTL",
];

#[derive(Serialize, Deserialize)]
struct Header {
    config: LearnerConfig,
    selection: Selection,
    seed: u64,
}

fn head_bytes(w: &mut ByteWriter, head: &LinearHead) {
    w.matrix(head.weight());
    w.count(head.bias().len());
    w.f64s(head.bias());
}

fn read_head(r: &mut ByteReader<'_>) -> Result<LinearHead> {
    let weight = r.matrix("head weight")?;
    let n = r.count("head bias")?;
    let bias = r.f64s(n, "head bias")?;
    LinearHead::from_parts(weight, bias)
}

fn store_bytes(w: &mut ByteWriter, store: &PrototypeStore, dim: usize) {
    w.count(store.len());
    w.count(dim);
    for p in store.entries() {
        w.count(p.class);
        w.count(p.task);
        w.f64s(&p.mean);
    }
}

fn read_store(r: &mut ByteReader<'_>) -> Result<PrototypeStore> {
    let n = r.count("prototype count")?;
    let dim = r.count("prototype dim")?;
    let mut store = PrototypeStore::new();
    for _ in 0..n {
        let at = r.offset() as u64;
        let class = r.count("prototype class")?;
        let task = r.count("prototype task")?;
        let mean = r.f64s(dim, "prototype mean")?;
        store
            .insert(class, task, mean)
            .map_err(|e| Error::parse(at, e.to_string()))?;
    }
    Ok(store)
}

fn counts(w: &mut ByteWriter, v: impl ExactSizeIterator<Item = usize>) {
    w.count(v.len());
    for x in v {
        w.count(x);
    }
}

fn read_counts(r: &mut ByteReader<'_>, what: &str) -> Result<Vec<usize>> {
    let n = r.count(what)?;
    (0..n).map(|_| r.count(what)).collect()
}

pub fn encode_state(model: &PrePrompt) -> Result<Vec<u8>> {
    let dim = model.backbone.config.embed_dim;
    let mut sections: Vec<Vec<u8>> = Vec::with_capacity(TAGS.len());
    let header = Header {
        config: model.config.clone(),
        selection: model.selection,
        seed: model.seed,
    };
    sections.push(serde_json::to_vec(&header)?);
    sections.push(checkpoint::encode(&model.backbone));

    let mut w = ByteWriter::default();
    w.count(model.classes.len());
    for &l in model.classes.labels() {
        w.u32(l);
    }
    sections.push(w.buf);

    let mut w = ByteWriter::default();
    counts(&mut w, model.layout.sizes().iter().copied());
    sections.push(w.buf);

    let pool = &model.pool;
    let mut w = ByteWriter::default();
    w.u32(match pool.mode() {
        PromptMode::Prompt => 0,
        PromptMode::Prefix => 1,
    });
    w.count(pool.length());
    w.count(pool.embed_dim());
    w.count(pool.depth());
    counts(&mut w, pool.layers().iter().copied());
    w.count(pool.completed());
    w.count(pool.len());
    for p in pool.prompts() {
        for b in p.blocks() {
            w.matrix(b);
        }
    }
    sections.push(w.buf);

    let mut w = ByteWriter::default();
    head_bytes(&mut w, &model.prompt_classifier.head);
    counts(&mut w, model.prompt_classifier.class_task().iter().copied());
    sections.push(w.buf);

    let mut w = ByteWriter::default();
    head_bytes(&mut w, &model.label_classifier.head);
    sections.push(w.buf);

    let mut w = ByteWriter::default();
    w.count(model.keys.keys.len());
    w.count(dim);
    for k in &model.keys.keys {
        w.f64s(k);
    }
    sections.push(w.buf);

    for store in [&model.free_prototypes, &model.label_prototypes] {
        let mut w = ByteWriter::default();
        store_bytes(&mut w, store, dim);
        sections.push(w.buf);
    }

    let mut out = ByteWriter::default();
    out.bytes(STATE_MAGIC);
    out.u32(STATE_VERSION);
    for (tag, payload) in TAGS.iter().zip(&sections) {
        out.bytes(*tag);
        out.u64(payload.len() as u64);
        out.bytes(payload);
    }
    let digest = Sha256::digest(&out.buf);
    out.bytes(b"SHA2");
    out.bytes(&digest);
    Ok(out.buf)
}

fn section<'a>(r: &mut ByteReader<'a>, tag: &[u8; 4]) -> Result<(u64, &'a [u8])> {
    let at = r.offset() as u64;
    let got = r.take(4, "section tag")?;
    if got != tag {
        return Err(Error::parse(
            at,
            format!(
                "expected section {}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            ),
        ));
    }
    let len = r.u64("section length")?;
    let start = r.offset() as u64;
    let len = usize::try_from(len).map_err(|_| Error::parse(at + 4, "section too long"))?;
    Ok((start, r.take(len, "section payload")?))
}

/// Wraps a payload reader so offsets in errors are file offsets.
fn within<T>(start: u64, payload: &[u8], f: impl FnOnce(&mut ByteReader<'_>) -> Result<T>) -> Result<T> {
    let mut r = ByteReader::new(payload);
    let v = f(&mut r).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset: offset + start,
            message,
        },
        other => Error::parse(start + r.offset() as u64, other.to_string()),
    })?;
    if r.remaining() != 0 {
        return Err(Error::parse(start + r.offset() as u64, "unread bytes in section"));
    }
    Ok(v)
}

pub fn decode_state(bytes: &[u8]) -> Result<PrePrompt> {
    if bytes.len() < 4 + 4 + 4 + 32 {
        return Err(Error::parse(0, "state file is truncated"));
    }
    if &bytes[..4] != STATE_MAGIC {
        return Err(Error::parse(0, "bad state magic"));
    }
    let body_end = bytes.len() - 36;
    if &bytes[body_end..body_end + 4] != b"SHA2" || Sha256::digest(&bytes[..body_end])[..] != bytes[body_end + 4..] {
        return Err(Error::parse(body_end as u64, "state digest mismatch"));
    }
    let mut r = ByteReader::new(&bytes[..body_end]);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != STATE_VERSION {
        return Err(Error::parse(4, format!("unsupported state version {version}")));
    }
    let mut s = Vec::with_capacity(TAGS.len());
    for tag in TAGS {
        s.push(section(&mut r, tag)?);
    }
    if r.remaining() != 0 {
        return Err(Error::parse(r.offset() as u64, "unknown trailing section"));
    }

    let header: Header = serde_json::from_slice(s[0].1)
        .map_err(|e| Error::parse(s[0].0, format!("bad header: {e}")))?;
    let backbone = checkpoint::decode(s[1].1).map_err(|e| match e {
        Error::Parse { offset, message } => Error::parse(offset + s[1].0, message),
        other => other,
    })?;
    let mut model = PrePrompt::with_selection(Arc::new(backbone), &header.config, header.selection, header.seed)
        .map_err(|e| Error::parse(s[0].0, e.to_string()))?;
    let dim = model.backbone.config.embed_dim;

    let labels = within(s[2].0, s[2].1, |r| {
        let n = r.count("class count")?;
        (0..n).map(|_| r.u32("class label")).collect::<Result<Vec<u32>>>()
    })?;
    model.classes = ClassMap::default();
    model.classes.extend(&labels).map_err(|e| Error::parse(s[2].0, e.to_string()))?;

    let sizes = within(s[3].0, s[3].1, |r| read_counts(r, "task size"))?;
    model.layout = TaskLayout::default();
    for n in sizes {
        model.layout.push(n).map_err(|e| Error::parse(s[3].0, e.to_string()))?;
    }

    model.pool = within(s[4].0, s[4].1, |r| {
        let mode = match r.u32("prompt mode")? {
            0 => PromptMode::Prompt,
            1 => PromptMode::Prefix,
            m => return Err(Error::parse(0, format!("unknown prompt mode {m}"))),
        };
        let length = r.count("prompt length")?;
        let embed_dim = r.count("embed dim")?;
        let depth = r.count("depth")?;
        let layers = read_counts(r, "prompted layer")?;
        let completed = r.count("completed")?;
        let n = r.count("prompt count")?;
        let mut pool = PromptPool::new(mode, length, layers, embed_dim, depth)?;
        if completed > n {
            return Err(Error::parse(0, "more completed prompts than prompts"));
        }
        for t in 0..n {
            let blocks = (0..pool.layers().len())
                .map(|_| r.matrix("prompt block"))
                .collect::<Result<_>>()?;
            pool.push_restored(Prompt::from_blocks(t, blocks), t < completed)?;
        }
        Ok(pool)
    })?;

    model.prompt_classifier = within(s[5].0, s[5].1, |r| {
        let head = read_head(r)?;
        let class_task = read_counts(r, "class task")?;
        PromptClassifier::from_parts(head, class_task)
    })?;
    model.label_classifier = LabelClassifier {
        head: within(s[6].0, s[6].1, read_head)?,
    };
    model.keys = within(s[7].0, s[7].1, |r| {
        let n = r.count("key count")?;
        let d = r.count("key dim")?;
        Ok(TaskKeys {
            keys: (0..n).map(|_| r.f64s(d, "key")).collect::<Result<_>>()?,
        })
    })?;
    model.free_prototypes = within(s[8].0, s[8].1, read_store)?;
    model.label_prototypes = within(s[9].0, s[9].1, read_store)?;
    model.reports = vec![(StageReport::default(), StageReport::default()); model.pool.len()];

    // cross-section consistency
    let tasks = model.layout.num_tasks();
    let classes = model.layout.num_classes();
    let consistent = model.classes.len() == classes
        && model.pool.len() == tasks
        && model.label_classifier.classes() == classes
        && model.label_classifier.head.dim() == dim
        && model.pool.embed_dim() == dim
        && model.pool.depth() == model.backbone.config.depth
        && match model.selection {
            Selection::Predictive => model.prompt_classifier.classes() == classes,
            Selection::KeyCorrelation => model.keys.keys.len() == tasks,
        }
        && model.label_prototypes.len() <= classes
        && model.free_prototypes.len() <= classes;
    if !consistent {
        return Err(Error::parse(8, "state sections disagree on task or class counts"));
    }
    Ok(model)
}

pub fn save_state(model: &PrePrompt, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_state(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<PrePrompt> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}
