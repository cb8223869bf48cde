//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "S2UTCKPT" | u32 version | [u8; 32] sha256(config) | u32 len | config (utf-8)
//! u32 entries | per entry: u16 name_len, name, u8 ndim, u64 dims…, u64 offset
//! f64 data, entries back to back; offsets count bytes from the data start
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, S2utModel};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"S2UTCKPT";
pub const VERSION: u32 = 1;

/// Named tensors plus the configuration text they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: Vec<(String, Tensor)>,
}

pub fn config_digest(config: &str) -> [u8; 32] {
    Sha256::digest(config.as_bytes()).into()
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config));
        out.extend_from_slice(&u32_len(self.config.len())?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&u32_len(self.entries.len())?.to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("entry name too long: {name}")))?;
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| Error::Checkpoint(format!("entry {name} has too many dimensions")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
        for (_, t) in &self.entries {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config text is not utf-8".into()))?
            .to_string();
        if config_digest(&config) != digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            manifest.push((name, shape, offset));
        }
        let data = &bytes[r.pos..];
        let mut expected = 0u64;
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, shape, offset) in manifest {
            if offset != expected {
                return Err(Error::Checkpoint(format!(
                    "entry {name} has offset {offset}, expected {expected}"
                )));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry {name} is too large")))?;
            let start = offset as usize;
            let end = start
                .checked_add(8 * n)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| Error::Checkpoint(format!("entry {name} runs past the end of the file")))?;
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
            entries.push((name, t));
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
        }
        Ok(Self { config, entries })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit the format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub const PARAM_PREFIX: &str = "param/";

impl S2utModel {
    /// Parameters as checkpoint entries, in registration order.
    pub fn param_entries(&self) -> Vec<(String, Tensor)> {
        self.params()
            .ids()
            .map(|id| {
                (
                    format!("{PARAM_PREFIX}{}", self.params().name(id)),
                    self.params().tensor(id).clone(),
                )
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config().to_toml(),
            entries: self.param_entries(),
        }
    }

    /// Rebuilds a model from the `param/` entries of a checkpoint whose
    /// config text is a model configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_toml(&ck.config)?;
        Self::from_entries(cfg, ck)
    }

    pub fn from_entries(cfg: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in &ck.entries {
            if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
                store.add(p, t.clone())?;
            }
        }
        Self::from_params(cfg, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "a = 1\n".into(),
            entries: vec![
                (
                    "x".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                ("y".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
                ("empty".into(), Tensor::new(vec![0, 4], vec![]).unwrap()),
            ],
        }
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        for ((na, ta), (nb, tb)) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8 + 4 + 32 + 4] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("digest")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let cfg = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            enc_dim: 8,
            dec_dim: 8,
            heads: 2,
            ctc_layer: 1,
            aux_enc_taps: vec![1, 2],
            mtp_variant: super::super::MtpVariant::DeepseekV3,
            mtp_n: 3,
            ..ModelConfig::default()
        };
        let model = S2utModel::new(cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = S2utModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        for id in model.params().ids() {
            let a = model.params().tensor(id).data();
            let b = back.params().tensor(id).data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let first = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }
}
