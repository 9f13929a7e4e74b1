//! The `ULCK` tensor checkpoint format.
//!
//! Layout (little-endian): magic `ULCK`, version `u16 = 1`, entry count `u32`, then per
//! entry: name length `u16`, UTF-8 name, rank `u8`, `rank × u32` dims, and the `f32` data.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::TensorF;
use crate::io::{read_exact_array, FormatError};

pub const MAGIC: &[u8; 4] = b"ULCK";
pub const VERSION: u16 = 1;

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, TensorF)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: TensorF) {
        self.entries.push((name.into(), t));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f32) {
        self.push(name, TensorF::scalar(v));
    }

    pub fn get(&self, name: &str) -> Option<&TensorF> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&TensorF, FormatError> {
        self.get(name).ok_or_else(|| FormatError::Missing(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f32, FormatError> {
        let t = self.require(name)?;
        t.data().first().copied().ok_or_else(|| FormatError::Missing(name.to_string()))
    }

    /// Every parameter plus `<name>.m1`/`<name>.m2` moments, with `prefix` prepended.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for id in store.ids() {
            let name = format!("{prefix}{}", store.name(id));
            let (m1, m2) = store.moments(id);
            self.push(name.clone(), store.get(id).clone());
            self.push(format!("{name}.m1"), m1.clone());
            self.push(format!("{name}.m2"), m2.clone());
        }
        self.push_scalar(format!("{prefix}step"), store.step() as f32);
    }

    /// Restores values and moments of a store built with the same architecture.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<(), FormatError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let value = self.require(&name)?.clone();
            let m1 = self.require(&format!("{name}.m1"))?.clone();
            let m2 = self.require(&format!("{name}.m2"))?.clone();
            store.set(id, value).map_err(|e| FormatError::Invalid(e.to_string()))?;
            store.set_optimizer_state(id, m1, m2).map_err(|e| FormatError::Invalid(e.to_string()))?;
        }
        store.set_step(self.scalar(&format!("{prefix}step"))? as u64);
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), FormatError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| FormatError::Invalid(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| FormatError::Invalid("rank > 255".into()))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| FormatError::Invalid("dimension > u32".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, FormatError> {
        let magic: [u8; 4] = read_exact_array(&mut r)?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic { expected: "ULCK" });
        }
        let version = u16::from_le_bytes(read_exact_array(&mut r)?);
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        let count = u32::from_le_bytes(read_exact_array(&mut r)?);
        let mut out = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_exact_array(&mut r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| FormatError::Invalid("entry name is not UTF-8".into()))?;
            let [rank] = read_exact_array::<1>(&mut r)?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_exact_array(&mut r)?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = TensorF::from_vec(&shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
            out.push(name, t);
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), FormatError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FormatError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{adam_step, AdamConfig};
    use rand::SeedableRng;

    #[test]
    fn header_bytes_are_exact() {
        let mut ck = Checkpoint::new();
        ck.push("ab", TensorF::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut want = b"ULCK".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1f32.to_le_bytes());
        want.extend_from_slice(&(-2f32).to_le_bytes());
        assert_eq!(buf, want);
        assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), ck);
    }

    #[test]
    fn store_roundtrip_keeps_moments_and_step() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f32>::new();
        let id = ps.add_normal("layer.w", &[3, 4], 1.0, &mut rng).unwrap();
        let mut g = ps.zero_grads();
        g.get_mut(id).fill(0.5);
        adam_step(&mut ps, &g, &AdamConfig::default()).unwrap();
        let mut ck = Checkpoint::new();
        ck.push_store("enc.", &ps);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert!(back.get("enc.layer.w.m1").is_some());
        let mut fresh = ParamStore::<f32>::new();
        fresh.add_zeros("layer.w", &[3, 4]).unwrap();
        back.load_store("enc.", &mut fresh).unwrap();
        assert_eq!(fresh.flatten(), ps.flatten());
        assert_eq!(fresh.moments(id), ps.moments(id));
        assert_eq!(fresh.step(), 1);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOPE\x01\x00\x00\x00\x00\x00"[..]),
            Err(FormatError::BadMagic { .. })
        ));
    }
}
