//! Versioned binary checkpoints of the full training state.
//!
//! All integers and floats are little-endian; `f64` values are stored as
//! their IEEE-754 bit patterns, so a save/load round trip is bit-exact.
//!
//! ```text
//! magic          8 bytes   "SSLCKPT\0"
//! version        u32       1
//! config         u64 n, then n bytes of UTF-8 run config text
//! step           u64       index of the next step to run
//! rng seed       32 bytes  ChaCha8 key
//! rng stream     u64
//! rng word pos   u128
//! student        tensor list
//! teacher        tensor list
//! adam t         u64
//! adam m         tensor list
//! adam v         tensor list
//! center         u64 k, then k f64
//! queue          u64 capacity, u64 len, u64 d, u64 K,
//!                then len entries of d f64 (embedding) + K f64 (assignment)
//! digest         32 bytes  SHA-256 of every preceding byte
//!
//! tensor list    u32 count, then per tensor:
//!                u32 name length, name bytes, u64 rows, u64 cols,
//!                rows*cols f64 in row-major order
//! ```
//!
//! The prototype bank is the `prototypes` tensor of each parameter list
//! plus the center; its mode is part of the config text.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::encoder::{ModelPair, ParamSet};
use crate::error::{Error, Result};
use crate::objective::{ObjectQueue, QueueEntry};
use crate::optim::AdamW;
use crate::semantic::ProbDist;
use crate::train::{schedules_for, Trainer};

pub const MAGIC: &[u8; 8] = b"SSLCKPT\0";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn tensors(&mut self, names: &[String], ts: &[Array2<f64>]) {
        self.u32(ts.len() as u32);
        for (n, t) in names.iter().zip(ts) {
            self.u32(n.len() as u32);
            self.bytes(n.as_bytes());
            self.u64(t.nrows() as u64);
            self.u64(t.ncols() as u64);
            self.f64s(t.iter());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows usize"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn tensors(&mut self) -> Result<(Vec<String>, Vec<Array2<f64>>)> {
        let n = self.u32()? as usize;
        let mut names = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            let (r, c) = (self.len()?, self.len()?);
            let data = self.f64s(r.checked_mul(c).ok_or_else(|| bad("tensor size overflow"))?)?;
            names.push(name.to_string());
            ts.push(Array2::from_shape_vec((r, c), data).unwrap());
        }
        Ok((names, ts))
    }
}

impl Trainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION);
        let text = self.config.to_text();
        w.u64(text.len() as u64);
        w.bytes(text.as_bytes());
        w.u64(self.step as u64);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());
        let names = self.pair.student.names();
        w.tensors(names, self.pair.student.tensors());
        w.tensors(names, self.pair.teacher.tensors());
        w.u64(self.optimizer.t);
        w.tensors(names, &self.optimizer.m);
        w.tensors(names, &self.optimizer.v);
        w.u64(self.center.len() as u64);
        w.f64s(self.center.iter());
        let q = &self.queue;
        let first = q.entries().next();
        w.u64(q.capacity() as u64);
        w.u64(q.len() as u64);
        w.u64(first.map_or(0, |e| e.embedding.len()) as u64);
        w.u64(first.map_or(0, |e| e.assignment.len()) as u64);
        for e in q.entries() {
            w.f64s(e.embedding.iter());
            w.f64s(e.assignment.probs().iter());
        }
        let digest = Sha256::digest(&w.0);
        w.bytes(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Trainer> {
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = RunConfig::parse(text)?;
        let step = r.len()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let (names, student) = r.tensors()?;
        let (tnames, teacher) = r.tensors()?;
        if tnames != names {
            return Err(bad("teacher tensor names differ from student"));
        }
        let student = ParamSet::new(names.clone(), student)?;
        let teacher = ParamSet::new(names, teacher)?;
        let pair = ModelPair::from_parts(student, teacher, schedules_for(&config))?;
        let t = r.u64()?;
        let (_, m) = r.tensors()?;
        let (_, v) = r.tensors()?;
        let shapes_ok = |ts: &[Array2<f64>]| {
            ts.len() == pair.student.len() && ts.iter().zip(pair.student.tensors()).all(|(a, b)| a.dim() == b.dim())
        };
        if !shapes_ok(&m) || !shapes_ok(&v) {
            return Err(bad("optimizer state does not match parameters"));
        }
        let mut optimizer = AdamW::new(&pair.student);
        optimizer.t = t;
        optimizer.m = m;
        optimizer.v = v;
        let k = r.len()?;
        let center = Array1::from(r.f64s(k)?);

        let mut queue = ObjectQueue::new(r.len()?)?;
        let (len, d, kq) = (r.len()?, r.len()?, r.len()?);
        for _ in 0..len {
            let embedding = Array1::from(r.f64s(d)?);
            let assignment = ProbDist::new(Array1::from(r.f64s(kq)?))?;
            queue.push(QueueEntry { embedding, assignment })?;
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Trainer {
            config,
            pair,
            center,
            optimizer,
            queue,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Trainer> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Trainer::from_bytes(&buf)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect())
}
