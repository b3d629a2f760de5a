//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic, format version, scalar tag, config
//! fingerprint, model kind, config JSON, iteration, named tensors, and
//! optionally the optimiser moments in tensor order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{GaitError, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed::fnv1a;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GAITCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const LATEST_FILE: &str = "latest";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:07}.bin")
}

#[derive(Clone, Debug)]
pub struct Moments<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> Moments<F> {
    pub fn from_optimizer(opt: &AdamW<F>) -> Self {
        Self {
            step: opt.step,
            m: opt.m.clone(),
            v: opt.v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub kind: String,
    pub config_json: String,
    pub iteration: u64,
    pub params: ParamStore<F>,
    pub moments: Option<Moments<F>>,
}

pub fn config_fingerprint(config_json: &str) -> u64 {
    fnv1a(config_json.as_bytes())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<F: Scalar>(&mut self, v: &[F]) {
        for x in v {
            if F::TAG == 4 {
                self.0.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
            } else {
                self.0.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> GaitError {
        GaitError::Parse {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(self.err("truncated checkpoint"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
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
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
    fn values<F: Scalar>(&mut self, n: usize, tag: u8) -> Result<Vec<F>> {
        let width = tag as usize;
        let raw = self.take(n.checked_mul(width).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(raw
            .chunks(width)
            .map(|c| {
                if tag == 4 {
                    F::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    F::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect())
    }
}

impl<F: Scalar> Checkpoint<F> {
    pub fn fingerprint(&self) -> u64 {
        config_fingerprint(&self.config_json)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(F::TAG);
        w.u64(self.fingerprint());
        w.str(&self.kind);
        w.str(&self.config_json);
        w.u64(self.iteration);
        w.u32(self.params.len() as u32);
        for e in self.params.entries() {
            w.str(&e.name);
            w.u32(e.value.shape().len() as u32);
            for &d in e.value.shape() {
                w.u64(d as u64);
            }
            w.values(e.value.data());
        }
        match &self.moments {
            Some(mo) => {
                w.u8(1);
                w.u64(mo.step);
                for (m, v) in mo.m.iter().zip(&mo.v) {
                    w.values(m);
                    w.values(v);
                }
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let tag = r.u8()?;
        if tag != 4 && tag != 8 {
            return Err(r.err(format!("unknown scalar tag {tag}")));
        }
        let fingerprint = r.u64()?;
        let kind = r.str()?;
        let config_json = r.str()?;
        if config_fingerprint(&config_json) != fingerprint {
            return Err(GaitError::Checkpoint("config fingerprint does not match".into()));
        }
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.values(n, tag)?;
            params.insert(&name, Tensor::from_vec(&shape, data)?)?;
        }
        let moments = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for e in params.entries() {
                    m.push(r.values(e.value.numel(), tag)?);
                    v.push(r.values(e.value.numel(), tag)?);
                }
                Some(Moments { step, m, v })
            }
            f => return Err(r.err(format!("bad moments flag {f}"))),
        };
        if !r.buf.is_empty() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            kind,
            config_json,
            iteration,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| GaitError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| GaitError::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| GaitError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| GaitError::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}

/// Point `dir/latest` at a checkpoint file in the same directory.
pub fn write_latest(dir: &Path, file_name: &str) -> Result<()> {
    let path = dir.join(LATEST_FILE);
    fs::write(&path, format!("{file_name}\n")).map_err(|e| GaitError::io(path, e))
}

/// The checkpoint named by `dir/latest`, if any.
pub fn read_latest(dir: &Path) -> Result<Option<PathBuf>> {
    let path = dir.join(LATEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(&path).map_err(|e| GaitError::io(&path, e))?;
    let target = dir.join(name.trim());
    if !target.is_file() {
        return Err(GaitError::Checkpoint(format!(
            "latest points at missing file {}",
            target.display()
        )));
    }
    Ok(Some(target))
}
