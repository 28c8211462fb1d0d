//! Binary checkpoints: little-endian, magic "CSEG", versioned, config
//! embedded as length-prefixed text, tensors stored as
//! (rank, dims..., f32 row-major). Canonical layout, so
//! save -> load -> save is byte-identical.

use std::path::Path;

use crate::backbone::{Backbone, OptimizerState, Param};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prototype::PrototypeBank;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const VERSION: u32 = 1;

pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    pub epoch: u32,
    pub backbone: Backbone<T>,
    pub bank: PrototypeBank<T>,
    pub optimizer: OptimizerState<T>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor<T: Scalar>(&mut self, shape: &[usize], data: &[T]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for &v in data {
            self.buf.extend_from_slice(&(Scalar::to_f64(v) as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("truncated checkpoint".into()));
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
    fn tensor<T: Scalar>(&mut self) -> Result<(Vec<usize>, Vec<T>)> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Data("implausible tensor rank".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let bytes = self.take(4)?;
            data.push(T::from_f64(f32::from_le_bytes(bytes.try_into().unwrap()) as f64));
        }
        Ok((shape, data))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let cfg = self.config.to_text();
        w.u32(cfg.len() as u32);
        w.buf.extend_from_slice(cfg.as_bytes());
        w.u32(self.epoch);

        let params = self.backbone.params();
        w.u32(params.len() as u32);
        for p in &params {
            w.tensor(&p.shape, &p.value);
        }
        w.tensor(
            &[self.bank.num_classes, self.bank.per_class, self.bank.feature_dim],
            &self.bank.data,
        );
        w.u32(self.bank.update_counts.len() as u32);
        for &c in &self.bank.update_counts {
            w.u64(c);
        }
        let buffers = self.optimizer.buffers();
        w.u32(buffers.len() as u32);
        for (buf, p) in buffers.iter().zip(&params) {
            w.tensor(&p.shape, buf);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint<T>> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", version)));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Data("config block is not utf-8".into()))?;
        let config = RunConfig::from_text(cfg_text)?;
        config.validate()?;
        let epoch = r.u32()?;

        let mut backbone = Backbone::<T>::init(config.seed, config.feature_dim);
        let n_params = r.u32()? as usize;
        if n_params != backbone.params().len() {
            return Err(Error::Data("backbone parameter count mismatch".into()));
        }
        let mut loaded: Vec<(Vec<usize>, Vec<T>)> = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            loaded.push(r.tensor()?);
        }
        for (p, (shape, value)) in backbone.params_mut().into_iter().zip(loaded) {
            if p.shape != shape {
                return Err(Error::Data(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    p.shape, shape
                )));
            }
            p.value = value;
        }

        let (bshape, bdata) = r.tensor::<T>()?;
        let m = config.effective_per_class();
        if bshape != [config.num_classes, m, config.feature_dim] {
            return Err(Error::Data("prototype bank shape mismatch".into()));
        }
        let mut bank = PrototypeBank::<T>::init(
            config.num_classes,
            m,
            config.feature_dim,
            config.seed,
            T::from_f64(config.momentum),
        );
        bank.data = bdata;
        let n_counts = r.u32()? as usize;
        if n_counts != bank.update_counts.len() {
            return Err(Error::Data("update count length mismatch".into()));
        }
        for c in bank.update_counts.iter_mut() {
            *c = r.u64()?;
        }

        let mut optimizer = OptimizerState::new(
            &backbone,
            T::from_f64(config.lr),
            T::from_f64(config.weight_decay),
        );
        let n_buf = r.u32()? as usize;
        if n_buf != optimizer.buffers().len() {
            return Err(Error::Data("optimizer buffer count mismatch".into()));
        }
        let shapes: Vec<Vec<usize>> =
            backbone.params().iter().map(|p| p.shape.clone()).collect();
        for (i, buf) in optimizer.buffers_mut().iter_mut().enumerate() {
            let (shape, data) = r.tensor::<T>()?;
            if shape != shapes[i] {
                return Err(Error::Data("optimizer buffer shape mismatch".into()));
            }
            *buf = data;
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config, epoch, backbone, bank, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint<T>> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

// keeps Param used in the public signature story (params are stored via
// shape/value pairs)
#[allow(dead_code)]
fn _shape_of<T: Scalar>(p: &Param<T>) -> &[usize] {
    &p.shape
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> Checkpoint<f32> {
        let mut config = RunConfig {
            dataset: "/tmp/x".into(),
            num_classes: 3,
            per_class: 2,
            feature_dim: 8,
            ..RunConfig::default()
        };
        config.seed = 11;
        let backbone = Backbone::<f32>::init(config.seed, config.feature_dim);
        let mut bank = PrototypeBank::<f32>::init(3, 2, 8, config.seed, 0.999);
        bank.update_counts[2] = 41;
        let mut optimizer = OptimizerState::new(&backbone, 0.01, 1e-4);
        optimizer.buffers_mut()[0][0] = 0.25;
        Checkpoint { config, epoch: 5, backbone, bank, optimizer }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = toy_checkpoint();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch, 5);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.bank.data, ck.bank.data);
        assert_eq!(back.bank.update_counts, ck.bank.update_counts);
        for (a, b) in back.backbone.params().iter().zip(ck.backbone.params()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.shape, b.shape);
        }
        assert_eq!(back.optimizer.buffers(), ck.optimizer.buffers());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.ckpt");
        let ck = toy_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let ck = toy_checkpoint();
        let bytes = ck.to_bytes();
        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Data(_))));
        // bad version
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Data(_))));
        // truncation
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        // trailing garbage
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }
}
