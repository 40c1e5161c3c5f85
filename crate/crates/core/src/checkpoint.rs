//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"QRLCKPT1"
//! u32  format version
//! u8   model kind tag
//! u32  metadata length, then UTF-8 `key=value` lines
//! u32  entry count
//! per entry:  u32 name length, name, u32 rank, u64 dims[rank], u8 dtype
//! per entry:  raw values in manifest order
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::ParamStore;
use crate::error::{ensure, Error, Result};
use crate::optim::Adam;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"QRLCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Generator,
    Estimator,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Generator => 0,
            ModelKind::Estimator => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Generator),
            1 => Ok(ModelKind::Estimator),
            t => Err(Error::Checkpoint(format!("unknown model kind tag {t}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Generator => "generator",
            ModelKind::Estimator => "estimator",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    fn from_typed<F: Real>(t: &Tensor<F>) -> Self {
        match F::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Typed view; errors if the stored dtype differs from `F`.
    pub fn typed<F: Real>(&self) -> Result<Tensor<F>> {
        ensure!(
            self.dtype() == F::DTYPE,
            Checkpoint,
            "dtype mismatch: stored {:?}, requested {:?}",
            self.dtype(),
            F::DTYPE
        );
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }

    fn write_values(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind) -> Self {
        Checkpoint { kind, meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))?;
        raw.parse().map_err(|_| Error::Checkpoint(format!("bad value for metadata key {key}: {raw}")))
    }

    pub fn add_tensor<F: Real>(&mut self, name: &str, t: &Tensor<F>) {
        self.tensors.push((name.to_string(), AnyTensor::from_typed(t)));
    }

    pub fn add_store<F: Real>(&mut self, prefix: &str, store: &ParamStore<F>) {
        for (name, t) in store.iter() {
            self.add_tensor(&format!("{prefix}{name}"), t);
        }
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?
            .1
            .typed()
    }

    /// Overwrites every parameter of `store` with the entry named
    /// `prefix + name`; shapes must match exactly.
    pub fn load_store<F: Real>(&self, prefix: &str, store: &mut ParamStore<F>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.tensor::<F>(&name)?;
            ensure!(
                t.shape() == store.get(id).shape(),
                Checkpoint,
                "{name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            );
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    /// Stores Adam moments as `opt.m/<param>` and `opt.v/<param>` with the
    /// step count and hyper-parameters in the metadata.
    pub fn add_adam<F: Real>(&mut self, opt: &Adam<F>, store: &ParamStore<F>) {
        self.set_meta("opt.step", opt.step);
        self.set_meta("opt.lr", opt.lr);
        self.set_meta("opt.beta1", opt.beta1);
        self.set_meta("opt.beta2", opt.beta2);
        self.set_meta("opt.eps", opt.eps);
        for (k, id) in store.ids().enumerate() {
            let name = store.name(id).to_string();
            self.add_tensor(&format!("opt.m/{name}"), &opt.m[k]);
            self.add_tensor(&format!("opt.v/{name}"), &opt.v[k]);
        }
    }

    /// Optimizer state saved by [`Checkpoint::add_adam`], if any.
    pub fn adam<F: Real>(&self, store: &ParamStore<F>) -> Result<Option<Adam<F>>> {
        if !self.meta.contains_key("opt.step") {
            return Ok(None);
        }
        let mut opt = Adam::new(store, self.meta("opt.lr")?);
        opt.step = self.meta("opt.step")?;
        opt.beta1 = self.meta("opt.beta1")?;
        opt.beta2 = self.meta("opt.beta2")?;
        opt.eps = self.meta("opt.eps")?;
        for (k, id) in store.ids().enumerate() {
            let name = store.name(id);
            for (slot, prefix) in [(&mut opt.m[k], "opt.m/"), (&mut opt.v[k], "opt.v/")] {
                let t = self.tensor::<F>(&format!("{prefix}{name}"))?;
                ensure!(t.shape() == store.get(id).shape(), Checkpoint, "{prefix}{name}: shape mismatch");
                *slot = t;
            }
        }
        Ok(Some(opt))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        ensure!(self.kind == kind, Checkpoint, "expected a {kind} checkpoint, found a {} checkpoint", self.kind);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.dtype().tag());
        }
        for (_, t) in &self.tensors {
            t.write_values(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(8)? == MAGIC, Checkpoint, "not a checkpoint (bad magic)");
        let version = r.u32()?;
        ensure!(version == FORMAT_VERSION, Checkpoint, "unsupported format version {version}");
        let kind = ModelKind::from_tag(r.u8()?)?;
        let meta_len = r.u32()? as usize;
        let meta_text =
            std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = DType::from_tag(r.u8()?)?;
            manifest.push((name, shape, dtype));
        }
        let mut tensors = Vec::with_capacity(n);
        for (name, shape, dtype) in manifest {
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size())?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            tensors.push((name, t));
        }
        ensure!(r.pos == bytes.len(), Checkpoint, "{} trailing bytes", bytes.len() - r.pos);
        Ok(Checkpoint { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.bytes.len(), Checkpoint, "truncated checkpoint");
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kind_mismatch_is_reported() {
        let c = Checkpoint::new(ModelKind::Estimator);
        assert!(c.expect_kind(ModelKind::Generator).is_err());
        assert!(c.expect_kind(ModelKind::Estimator).is_ok());
    }

    #[test]
    fn adam_state_round_trips() {
        use crate::autodiff::Gradients;
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![0.5f32, -1.0]));
        store.add("b", Tensor::new(vec![1, 2], vec![2.0f32, 3.0]).unwrap());
        let mut opt = Adam::new(&store, 0.01);
        let mut g = Gradients::zeros_like(&store);
        for id in store.ids().collect::<Vec<_>>() {
            g.get_mut(id).fill(0.3);
        }
        opt.step(&mut store, &g).unwrap();
        let mut c = Checkpoint::new(ModelKind::Generator);
        assert!(c.adam(&store).unwrap().is_none());
        c.add_adam(&opt, &store);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap().adam(&store).unwrap().unwrap();
        assert_eq!(
            (back.step, back.lr, back.beta1, back.beta2, back.eps),
            (opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps)
        );
        assert_eq!(back.m, opt.m);
        assert_eq!(back.v, opt.v);
    }

    #[test]
    fn bad_magic_and_truncation_fail() {
        let mut c = Checkpoint::new(ModelKind::Generator);
        c.add_tensor("w", &Tensor::vector(vec![1.0f32, 2.0]));
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut wrong_version = bytes;
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
    }

    #[test]
    fn header_layout_is_stable() {
        let mut c = Checkpoint::new(ModelKind::Generator);
        c.add_tensor("a", &Tensor::scalar(1.5f32));
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"QRLCKPT1");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(b[12], 0);
        // empty metadata, one entry named "a", rank 1, dim 1, f32, then 1.5f32
        assert_eq!(&b[13..17], &0u32.to_le_bytes());
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[b.len() - 4..], &1.5f32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            a in proptest::collection::vec(any::<f32>(), 0..40),
            b in proptest::collection::vec(-1e300f64..1e300, 1..10),
            key in "[a-z]{1,8}",
            val in "[ -~&&[^=]]{0,12}",
        ) {
            let mut c = Checkpoint::new(ModelKind::Estimator);
            c.set_meta(&key, &val);
            c.add_tensor("x.a", &Tensor::vector(a.clone()));
            c.add_tensor("x.b", &Tensor::new(vec![1, b.len()], b.clone()).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let ra: Tensor<f32> = back.tensor("x.a").unwrap();
            prop_assert!(ra.data().iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
            let rb: Tensor<f64> = back.tensor("x.b").unwrap();
            prop_assert_eq!(rb.data(), &b[..]);
            prop_assert_eq!(back.meta.get(&key), Some(&val));
        }
    }
}
