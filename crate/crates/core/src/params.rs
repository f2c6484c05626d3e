//! Named parameter storage and the binary `RXFW` weight format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RXFW" | version u32 | count u32 |
//!   count × ( name_len u16 | name utf-8 | rank u8 | dims u32×rank | f32×numel )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const WEIGHT_MAGIC: &[u8; 4] = b"RXFW";
pub const WEIGHT_VERSION: u32 = 1;

/// Ordered map from hierarchical names (`igt.enc0.igab0.attn.proj`) to tensors.
/// Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every tensor on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Serializes as `RXFW`; values are stored as 32-bit floats.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        w.write_all(&u32::try_from(self.len()).map_err(|_| Error::usage("too many tensors"))?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::usage(format!("parameter name too long: {name}")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::usage("rank exceeds 255"))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::usage("dimension exceeds u32"))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut reader = FieldReader { inner: r };
        let magic: [u8; 4] = reader.bytes("magic")?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::corrupt("magic", format!("expected RXFW, found {magic:?}")));
        }
        let version = u32::from_le_bytes(reader.bytes("version")?);
        if version != WEIGHT_VERSION {
            return Err(Error::corrupt("version", format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(reader.bytes("tensor count")?);
        let mut store = ParameterStore::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(reader.bytes(&format!("tensor {i} name length"))?);
            let raw = reader.vec(name_len as usize, &format!("tensor {i} name"))?;
            let name = String::from_utf8(raw)
                .map_err(|_| Error::corrupt(format!("tensor {i} name"), "not valid UTF-8"))?;
            let [rank] = reader.bytes::<1>(&format!("{name} rank"))?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(reader.bytes(&format!("{name} dims"))?) as usize);
            }
            let n: usize = shape.iter().product();
            if rank == 0 || n == 0 {
                return Err(Error::corrupt(format!("{name} dims"), format!("invalid shape {shape:?}")));
            }
            let raw = reader.vec(n * 4, &format!("{name} data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::corrupt(format!("{name} dims"), e.to_string()))?;
            store
                .insert(name.clone(), tensor)
                .map_err(|_| Error::corrupt(format!("{name} name"), "duplicate tensor name"))?;
        }
        let mut trailing = [0u8; 1];
        if reader.inner.read(&mut trailing)? != 0 {
            return Err(Error::corrupt("trailer", "unexpected bytes after last tensor"));
        }
        Ok(store)
    }
}

struct FieldReader<'a, R> {
    inner: &'a mut R,
}

impl<R: Read> FieldReader<'_, R> {
    fn bytes<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::corrupt(field, "truncated"))?;
        Ok(buf)
    }

    fn vec(&mut self, n: usize, field: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.inner.take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::corrupt(field, format!("truncated: {} of {n} bytes", buf.len())));
        }
        Ok(buf)
    }
}

/// A [`ParameterStore`] recorded on a tape: the same names, mapped to tape variables.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Pairs names with variables already on a tape.
    pub fn from_vars<S: Into<String>>(names: impl IntoIterator<Item = S>, vars: &[Var]) -> Self {
        Bound { vars: names.into_iter().map(Into::into).zip(vars.iter().copied()).collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients for every bound parameter, in store order.
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.values().map(|&v| grads.take(v)).collect()
    }
}

/// Uniform `U(−1/√fan_in, 1/√fan_in)` initialization.
pub fn uniform_fan_in<T: Real, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("a.weight", Tensor::from_fn(vec![2, 3], |i| i[0] as f32 - 0.5 * i[1] as f32)).unwrap();
        s.insert("a.bias", Tensor::full(vec![3], f32::MIN_POSITIVE)).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(s.insert("a.bias", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RXFW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..14], &8u16.to_le_bytes());
        assert_eq!(&buf[14..22], b"a.weight");
        assert_eq!(buf[22], 2);
    }

    #[test]
    fn corrupt_fields_are_named() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = ParameterStore::<f32>::read_from(&mut bad.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Corrupt { ref field, .. } if field == "magic"));
        let mut bad = buf.clone();
        bad[4] = 9;
        let err = ParameterStore::<f32>::read_from(&mut bad.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Corrupt { ref field, .. } if field == "version"));
        let truncated = &buf[..buf.len() - 3];
        let err = ParameterStore::<f32>::read_from(&mut &truncated[..]).unwrap_err();
        assert!(matches!(err, Error::Corrupt { ref field, .. } if field == "a.bias data"));
    }
}
