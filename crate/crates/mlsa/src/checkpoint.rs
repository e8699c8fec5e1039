//! Binary checkpoint container.
//!
//! ```text
//! "MLSA" | version u16 | meta_len u32 | meta (UTF-8 key=value lines)
//! | count u32 | count × (name_len u16 | name | rank u8 | dims u32×rank | f32×numel)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use mlsa_core::corpus::Schema;
use mlsa_core::energy::{EnergyModel, LatentClassifier};
use mlsa_core::nn::Parameters;
use mlsa_core::samplers::GanPrior;
use mlsa_core::vae::{VaeConfig, VaeModel};
use mlsa_core::{Rng, Tensor};

use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"MLSA";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Vae,
    Energy,
    Gan,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Vae => "vae",
            Kind::Energy => "energy",
            Kind::Gan => "gan",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(Kind::Vae),
            "energy" => Some(Kind::Energy),
            "gan" => Some(Kind::Gan),
            _ => None,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

/// Decoding failure with the byte offset where it was detected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatError {
    pub offset: usize,
    pub msg: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn err(&self, at: usize, msg: impl Into<String>) -> FormatError {
        FormatError { offset: at, msg: msg.into() }
    }
}

impl Checkpoint {
    pub fn new(kind: Kind) -> Self {
        Self { kind, meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = format!("kind={}\n", self.kind);
        for (k, v) in &self.meta {
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for d in t.dims() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err(0, "bad magic, not an MLSA checkpoint"));
        }
        let at = r.pos;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.err(at, format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let at = r.pos;
        let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| r.err(at, "metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| r.err(at, format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let kind_str = meta.remove("kind").ok_or_else(|| r.err(at, "metadata lacks `kind`"))?;
        let kind = Kind::parse(&kind_str).ok_or_else(|| r.err(at, format!("unknown kind `{kind_str}`")))?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.err(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8("tensor rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("tensor dims")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| r.err(at, format!("tensor `{name}` dims {dims:?} overflow")))?;
            let data_at = r.pos;
            let raw = r.take(numel * 4, &format!("data of tensor `{name}`"))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(dims, data).map_err(|e| r.err(data_at, format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    /// Read `path` and require `expected` kind.
    pub fn load(path: &Path, expected: Kind) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let ck = Self::from_bytes(&bytes)
            .map_err(|e| CliError::Checkpoint { path: path.to_path_buf(), offset: e.offset, msg: e.msg })?;
        if ck.kind != expected {
            return Err(CliError::Validation(format!(
                "{}: expected a {expected} checkpoint, found {}",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }

    fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| CliError::Validation(format!("{} checkpoint lacks metadata `{key}`", self.kind)))?;
        raw.parse().map_err(|_| CliError::Validation(format!("bad metadata `{key}={raw}`")))
    }

    fn meta_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        let raw: String = self.meta_value(key)?;
        raw.split(',')
            .map(|s| s.parse().map_err(|_| CliError::Validation(format!("bad metadata `{key}={raw}`"))))
            .collect()
    }

    fn from_params(kind: Kind, model: &impl Parameters) -> Self {
        let mut ck = Self::new(kind);
        ck.tensors = model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        ck
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn schema_meta(ck: Checkpoint, schema: &Schema, latent_dim: usize, config_hash: &str) -> Checkpoint {
    ck.with_meta("latent_dim", latent_dim)
        .with_meta("vocab", schema.vocab_size)
        .with_meta("max_len", schema.max_len)
        .with_meta("N", schema.aspects())
        .with_meta("attrs", join(&schema.attrs_per_aspect))
        .with_meta("config_hash", config_hash)
}

fn schema_of(ck: &Checkpoint) -> Result<Schema, CliError> {
    Ok(Schema {
        attrs_per_aspect: ck.meta_list("attrs")?,
        vocab_size: ck.meta_value("vocab")?,
        max_len: ck.meta_value("max_len")?,
    })
}

pub fn vae_checkpoint(model: &VaeModel, config_hash: &str) -> Checkpoint {
    let ck = Checkpoint::from_params(Kind::Vae, model)
        .with_meta("embed_dim", model.config.embed_dim)
        .with_meta("hidden", model.config.hidden);
    schema_meta(ck, &model.schema, model.latent_dim(), config_hash)
}

pub fn vae_from(ck: &Checkpoint) -> Result<VaeModel, CliError> {
    let config = VaeConfig {
        latent_dim: ck.meta_value("latent_dim")?,
        embed_dim: ck.meta_value("embed_dim")?,
        hidden: ck.meta_value("hidden")?,
    };
    let mut model = VaeModel::new(schema_of(ck)?, config, &mut Rng::new(0))?;
    model.load_named(&ck.tensors)?;
    Ok(model)
}

pub fn energy_checkpoint(model: &EnergyModel, schema: &Schema, hidden: Option<usize>, config_hash: &str) -> Checkpoint {
    let ck = Checkpoint::from_params(Kind::Energy, model).with_meta("hidden", hidden.unwrap_or(0));
    schema_meta(ck, schema, model.latent_dim, config_hash)
}

pub fn energy_from(ck: &Checkpoint) -> Result<EnergyModel, CliError> {
    let d: usize = ck.meta_value("latent_dim")?;
    let hidden: usize = ck.meta_value("hidden")?;
    let schema = schema_of(ck)?;
    let mut rng = Rng::new(0);
    let mut model = EnergyModel {
        latent_dim: d,
        classifiers: schema
            .attrs_per_aspect
            .iter()
            .map(|k| LatentClassifier::new(d, *k, (hidden > 0).then_some(hidden), &mut rng))
            .collect(),
    };
    model.load_named(&ck.tensors)?;
    Ok(model)
}

pub fn gan_checkpoint(model: &GanPrior, schema: &Schema, config_hash: &str) -> Checkpoint {
    let ck = Checkpoint::from_params(Kind::Gan, model).with_meta("hidden", model.discriminator.layers[0].outputs());
    schema_meta(ck, schema, model.latent_dim(), config_hash)
}

pub fn gan_from(ck: &Checkpoint) -> Result<GanPrior, CliError> {
    let mut model = GanPrior::new(ck.meta_value("latent_dim")?, ck.meta_value("hidden")?, &mut Rng::new(0));
    model.load_named(&ck.tensors)?;
    Ok(model)
}

/// The schema recorded in a checkpoint, for compatibility checks.
pub fn checkpoint_schema(ck: &Checkpoint) -> Result<Schema, CliError> {
    schema_of(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(Kind::Gan).with_meta("latent_dim", 2);
        ck.tensors.push(("a".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap()));
        ck.tensors.push(("b".into(), Tensor::scalar(0.1)));
        ck
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.kind, ck.kind);
        assert_eq!(back.meta, ck.meta);
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.dims(), tb.dims());
            let ba: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn corruption_reports_offset() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err().offset, 0);

        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        let e = Checkpoint::from_bytes(cut).unwrap_err();
        assert!(e.msg.contains("truncated"), "{e:?}");
        // the last tensor is a scalar whose data starts 4 bytes before the end
        assert_eq!(e.offset, bytes.len() - 4);

        let mut extra = sample().to_bytes();
        extra.push(0);
        assert_eq!(Checkpoint::from_bytes(&extra).unwrap_err().offset, extra.len() - 1);
    }

    #[test]
    fn models_roundtrip() {
        let schema = Schema { attrs_per_aspect: vec![2, 3], vocab_size: 12, max_len: 4 };
        let mut rng = Rng::new(3);
        let vae = VaeModel::new(schema.clone(), VaeConfig { latent_dim: 3, embed_dim: 4, hidden: 5 }, &mut rng).unwrap();
        let back = vae_from(&Checkpoint::from_bytes(&vae_checkpoint(&vae, "h").to_bytes()).unwrap()).unwrap();
        assert_eq!(back, vae);

        let energy = EnergyModel {
            latent_dim: 3,
            classifiers: vec![LatentClassifier::new(3, 2, Some(4), &mut rng), LatentClassifier::new(3, 3, Some(4), &mut rng)],
        };
        let ck = energy_checkpoint(&energy, &schema, Some(4), "h");
        assert_eq!(energy_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap(), energy);

        let gan = GanPrior::new(3, 6, &mut rng);
        let ck = gan_checkpoint(&gan, &schema, "h");
        assert_eq!(gan_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap(), gan);
    }
}
