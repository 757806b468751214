//! Binary containers for soft models, collapsed models and optimizer state.
//!
//! Every container is `magic | body | crc32(magic | body)` with all integers
//! and floats little-endian. A body starts with a length-prefixed JSON block.
//!
//! Soft (`RDLG1`): config JSON, embedding `f64 × V·d`, then for each layer in
//! group order N, K, L, P, M: `in_dim u64`, `width u64`, `conn_a u32 × w`,
//! `conn_b u32 × w`, `logits f64 × 16w`.
//!
//! Collapsed (`RDLGC1`): config JSON, embedding bits packed row-major
//! (LSB first), then per layer `in_dim`, `width`, gate bytes, `conn_a`, `conn_b`.
//!
//! Optimizer (`RDLGT1`): state JSON, then first and second moments as one
//! flat `f64` array each.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Group, ModelConfig};
use crate::error::{Error, Result};
use crate::gate::GateKind;
use crate::inference::CollapsedModel;
use crate::layer::{CollapsedLogicLayer, SoftLogicLayer, GATES};
use crate::model::{Embedding, LayerGroup, Seq2SeqModel};
use crate::train::{AdamW, OptimizerConfig, PlateauScheduler, SchedulerConfig};

pub const SOFT_MAGIC: &[u8] = b"RDLG1";
pub const COLLAPSED_MAGIC: &[u8] = b"RDLGC1";
pub const STATE_MAGIC: &[u8] = b"RDLGT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Soft,
    Collapsed,
    TrainState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8]) -> Self {
        Writer(magic.to_vec())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32s(&mut self, v: &[u32]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
    fn json<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let s = serde_json::to_vec(v)?;
        self.u64(s.len() as u64);
        self.bytes(&s);
        Ok(())
    }
    fn finish(mut self, path: &Path) -> Result<()> {
        let crc = crc32fast::hash(&self.0);
        self.0.extend_from_slice(&crc.to_le_bytes());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &self.0).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, limit: usize) -> Result<usize> {
        let v = self.u64()?;
        if v > limit as u64 {
            return Err(Error::Corrupt(format!("length {v} exceeds the remaining data")));
        }
        Ok(v as usize)
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let n = self.len(self.buf.len())?;
        Ok(serde_json::from_slice(self.take(n)?)?)
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Reads a file, checks magic and checksum, and returns the body.
fn open(path: &Path, magic: &[u8]) -> Result<Vec<u8>> {
    let mut data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < magic.len() + 4 || &data[..magic.len()] != magic {
        return Err(Error::Corrupt(format!(
            "{}: not a {} container",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let split = data.len() - 4;
    let stored = u32::from_le_bytes(data[split..].try_into().unwrap());
    let computed = crc32fast::hash(&data[..split]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    data.truncate(split);
    data.drain(..magic.len());
    Ok(data)
}

/// Identifies a container by its magic bytes.
pub fn container_kind(path: &Path) -> Result<ContainerKind> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    // the collapsed magic extends the soft one, so test it first
    if data.starts_with(COLLAPSED_MAGIC) {
        Ok(ContainerKind::Collapsed)
    } else if data.starts_with(STATE_MAGIC) {
        Ok(ContainerKind::TrainState)
    } else if data.starts_with(SOFT_MAGIC) {
        Ok(ContainerKind::Soft)
    } else {
        Err(Error::Corrupt(format!("{}: unknown container", path.display())))
    }
}

pub fn save_model(model: &Seq2SeqModel, path: &Path) -> Result<()> {
    let mut w = Writer::new(SOFT_MAGIC);
    w.json(model.config())?;
    w.f64s(model.embedding().weights());
    for g in model.groups() {
        for l in g.layers() {
            w.u64(l.in_dim() as u64);
            w.u64(l.width() as u64);
            w.u32s(l.conn_a());
            w.u32s(l.conn_b());
            w.f64s(l.logits());
        }
    }
    w.finish(path)
}

pub fn load_model(path: &Path) -> Result<Seq2SeqModel> {
    let body = open(path, SOFT_MAGIC)?;
    let mut r = Reader { buf: &body, pos: 0 };
    let config: ModelConfig = r.json()?;
    config.validate()?;
    let (v, d) = (config.vocab_size, config.emb_dim);
    let embedding = Embedding::from_weights(v, d, r.f64s(v * d)?)?;
    let mut groups = Vec::with_capacity(5);
    for g in Group::ALL {
        let mut layers = Vec::new();
        for _ in 0..config.sizes(g).len() {
            let in_dim = r.len(body.len())?;
            let width = r.len(body.len())?;
            let conn_a = r.u32s(width)?;
            let conn_b = r.u32s(width)?;
            let logits = r.f64s(width * GATES)?;
            layers.push(SoftLogicLayer::from_parts(in_dim, conn_a, conn_b, logits)?);
        }
        groups.push(LayerGroup::new(layers));
    }
    r.done()?;
    Seq2SeqModel::from_parts(config, embedding, groups)
}

pub fn save_collapsed(model: &CollapsedModel, path: &Path) -> Result<()> {
    let mut w = Writer::new(COLLAPSED_MAGIC);
    w.json(model.config())?;
    let packed: Vec<u8> = model
        .embedding_bits()
        .chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i)))
        .collect();
    w.bytes(&packed);
    for layers in model.groups() {
        for l in layers {
            w.u64(l.in_dim() as u64);
            w.u64(l.width() as u64);
            w.bytes(&l.gates().iter().map(|g| g.index()).collect::<Vec<u8>>());
            w.u32s(l.conn_a());
            w.u32s(l.conn_b());
        }
    }
    w.finish(path)
}

pub fn load_collapsed(path: &Path) -> Result<CollapsedModel> {
    let body = open(path, COLLAPSED_MAGIC)?;
    let mut r = Reader { buf: &body, pos: 0 };
    let config: ModelConfig = r.json()?;
    config.validate()?;
    let n_bits = config.vocab_size * config.emb_dim;
    let packed = r.take(n_bits.div_ceil(8))?;
    let embedding: Vec<bool> = (0..n_bits).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    let mut groups = Vec::with_capacity(5);
    for g in Group::ALL {
        let mut layers = Vec::new();
        for _ in 0..config.sizes(g).len() {
            let in_dim = r.len(body.len())?;
            let width = r.len(body.len())?;
            let gates = r
                .take(width)?
                .iter()
                .map(|&b| GateKind::from_index(b).ok_or_else(|| Error::Corrupt(format!("gate index {b}"))))
                .collect::<Result<Vec<_>>>()?;
            let conn_a = r.u32s(width)?;
            let conn_b = r.u32s(width)?;
            layers.push(CollapsedLogicLayer::from_parts(in_dim, conn_a, conn_b, gates)?);
        }
        groups.push(layers);
    }
    r.done()?;
    CollapsedModel::from_parts(config, embedding, groups)
}

/// Optimizer and scheduler state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamW,
    pub scheduler: PlateauScheduler,
    /// Step of the last validation, used to count scheduler patience.
    pub last_eval_step: u64,
    /// Training loss accumulated since the last validation.
    pub loss_sum: f64,
    pub loss_count: u64,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    last_eval_step: u64,
    loss_sum: f64,
    loss_count: u64,
    lr: f64,
    t: u64,
    optimizer: OptimizerConfig,
    scheduler: SchedulerConfig,
    /// `None` until the first validation.
    best: Option<f64>,
    steps_since_improve: u64,
    shapes: Vec<usize>,
}

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let opt = &state.optimizer;
    let mut w = Writer::new(STATE_MAGIC);
    w.json(&StateHeader {
        step: state.step,
        last_eval_step: state.last_eval_step,
        loss_sum: state.loss_sum,
        loss_count: state.loss_count,
        lr: opt.lr,
        t: opt.t,
        optimizer: opt.config.clone(),
        scheduler: state.scheduler.config.clone(),
        best: Some(state.scheduler.best).filter(|b| b.is_finite()),
        steps_since_improve: state.scheduler.steps_since_improve,
        shapes: opt.m.iter().map(Vec::len).collect(),
    })?;
    opt.m.iter().for_each(|m| w.f64s(m));
    opt.v.iter().for_each(|v| w.f64s(v));
    w.finish(path)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let body = open(path, STATE_MAGIC)?;
    let mut r = Reader { buf: &body, pos: 0 };
    let h: StateHeader = r.json()?;
    let read_all = |r: &mut Reader| -> Result<Vec<Vec<f64>>> { h.shapes.iter().map(|&n| r.f64s(n)).collect() };
    let m = read_all(&mut r)?;
    let v = read_all(&mut r)?;
    r.done()?;
    Ok(TrainState {
        step: h.step,
        last_eval_step: h.last_eval_step,
        loss_sum: h.loss_sum,
        loss_count: h.loss_count,
        optimizer: AdamW {
            config: h.optimizer,
            lr: h.lr,
            t: h.t,
            m,
            v,
        },
        scheduler: PlateauScheduler {
            config: h.scheduler,
            best: h.best.unwrap_or(f64::INFINITY),
            steps_since_improve: h.steps_since_improve,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::collapse_model;
    use crate::model::tests::tiny_config;

    #[test]
    fn soft_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdlg");
        let model = Seq2SeqModel::new(tiny_config()).unwrap();
        save_model(&model, &path).unwrap();
        assert_eq!(container_kind(&path).unwrap(), ContainerKind::Soft);
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        let src = vec![vec![1, 4, 5]];
        assert_eq!(back.forward_eval(&src, &src).unwrap(), model.forward_eval(&src, &src).unwrap());
    }

    #[test]
    fn collapsed_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdlgc");
        let cm = collapse_model(&Seq2SeqModel::new(tiny_config()).unwrap());
        save_collapsed(&cm, &path).unwrap();
        assert_eq!(container_kind(&path).unwrap(), ContainerKind::Collapsed);
        assert_eq!(load_collapsed(&path).unwrap(), cm);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdlg");
        save_model(&Seq2SeqModel::new(tiny_config()).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checksum { .. })));
        std::fs::write(&path, b"RDLG1").unwrap();
        assert!(load_model(&path).is_err());
        assert!(load_collapsed(&path).is_err());
    }

    #[test]
    fn train_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.state");
        let mut opt = AdamW::new(OptimizerConfig::default(), &[3, 2]);
        let mut a = [1.0, 2.0, 3.0];
        let mut b = [4.0, 5.0];
        opt.step(vec![&mut a, &mut b], vec![&[0.1, 0.2, 0.3], &[-1.0, 1.0]]).unwrap();
        let mut scheduler = PlateauScheduler::new(SchedulerConfig::default());
        let fresh = TrainState {
            step: 0,
            optimizer: AdamW::new(OptimizerConfig::default(), &[1]),
            scheduler: scheduler.clone(),
            last_eval_step: 0,
            loss_sum: 0.0,
            loss_count: 0,
        };
        save_train_state(&fresh, &path).unwrap();
        assert_eq!(load_train_state(&path).unwrap(), fresh);
        scheduler.update(1.5, 10, 0.05);
        let state = TrainState {
            step: 17,
            optimizer: opt,
            scheduler,
            last_eval_step: 10,
            loss_sum: 3.25,
            loss_count: 7,
        };
        save_train_state(&state, &path).unwrap();
        assert_eq!(load_train_state(&path).unwrap(), state);
    }
}
