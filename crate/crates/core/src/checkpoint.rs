//! Binary tensor container.
//!
//! ```text
//! "SBNK" | version u16 | count u32 | entry*
//! entry: name_len u16 | name | dtype u8 | rank u8 | dims u32*rank | payload
//! ```
//!
//! Integers are little-endian. dtype 0 is f32 data, dtype 1 is UTF-8 text
//! stored as rank 1 with the byte length as its only dim.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::FeatureExtractor;
use crate::net::{ConvNorm, DecoderParams, EncoderParams, FilterBank, ModelConfig, StyleBankModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SBNK";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_UTF8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<(String, Payload)>,
}

impl Container {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.entries.push((
            name.into(),
            Payload::F32 {
                dims: t.dims().to_vec(),
                data: t.data().to_vec(),
            },
        ));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.entries.push((name.into(), Payload::Text(text.into())));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, payload) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, dims, bytes): (u8, Vec<usize>, Vec<u8>) = match payload {
                Payload::F32 { dims, data } => {
                    if dims.iter().product::<usize>() != data.len() {
                        return Err(Error::Checkpoint(format!("{name}: dims {dims:?} vs {} values", data.len())));
                    }
                    (DTYPE_F32, dims.clone(), data.iter().flat_map(|v| v.to_le_bytes()).collect())
                }
                Payload::Text(s) => (DTYPE_UTF8, vec![s.len()], s.as_bytes().to_vec()),
            };
            let rank = u8::try_from(dims.len()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
            out.push(dtype);
            out.push(rank);
            for d in dims {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dim too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let elems = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
            let payload = match dtype {
                DTYPE_F32 => {
                    let size = elems.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?;
                    let raw = r.take(size)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    Payload::F32 { dims, data }
                }
                DTYPE_UTF8 => {
                    if rank != 1 {
                        return Err(Error::Checkpoint(format!("{name}: text entry must have rank 1")));
                    }
                    let text = std::str::from_utf8(r.take(elems)?)
                        .map_err(|_| Error::Checkpoint(format!("{name}: invalid UTF-8")))?;
                    Payload::Text(text.to_string())
                }
                other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
            };
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
            entries.push((name, payload));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("bad path {}", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
        let result = (|| {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        })();
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
        Ok(result?)
    }

    fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        match self.get(name) {
            Some(Payload::F32 { dims, data }) => {
                let dims: [usize; 4] = dims
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Checkpoint(format!("{name}: expected rank 4, got {dims:?}")))?;
                Tensor::new(dims, data.clone())
            }
            Some(Payload::Text(_)) => Err(Error::Checkpoint(format!("{name}: expected tensor, found text"))),
            None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    #[serde(flatten)]
    config: ModelConfig,
    styles: Vec<String>,
}

const META: &str = "meta/config";

/// Serializes a model, plus the extractor it was trained with if given.
pub fn model_to_container(model: &StyleBankModel<f32>, extractor: Option<&FeatureExtractor<f32>>) -> Result<Container> {
    let mut c = Container::default();
    let meta = Meta {
        config: model.config(),
        styles: model.bank_names().into_iter().map(String::from).collect(),
    };
    c.push_text(META, serde_json::to_string(&meta)?);
    for (name, t) in model.autoencoder_params() {
        c.push_tensor(name, t);
    }
    for b in model.banks() {
        c.push_tensor(format!("bank/{}/kernel", b.name), &b.kernel);
    }
    if let Some(ex) = extractor {
        for (name, t) in ex.named_params() {
            c.push_tensor(name, t);
        }
    }
    Ok(c)
}

/// Rebuilds a model, rejecting anything that disagrees with `meta/config`.
pub fn model_from_container(c: &Container) -> Result<StyleBankModel<f32>> {
    let meta: Meta = match c.get(META) {
        Some(Payload::Text(s)) => serde_json::from_str(s)?,
        _ => return Err(Error::Checkpoint(format!("missing `{META}`"))),
    };
    let config = meta.config;
    config.validate()?;
    let layer = |prefix: &str| -> Result<ConvNorm<f32>> {
        Ok(ConvNorm {
            kernel: c.tensor(&format!("{prefix}/kernel"))?,
            scale: c.tensor(&format!("{prefix}/scale"))?,
            shift: c.tensor(&format!("{prefix}/shift"))?,
        })
    };
    let encoder = EncoderParams {
        layers: [layer("encoder/conv1")?, layer("encoder/conv2")?, layer("encoder/conv3")?],
    };
    let decoder = DecoderParams {
        up: [layer("decoder/up1")?, layer("decoder/up2")?],
        out_kernel: c.tensor("decoder/out/kernel")?,
        out_bias: c.tensor("decoder/out/bias")?,
    };
    let banks = meta
        .styles
        .iter()
        .map(|s| FilterBank::new(s.clone(), c.tensor(&format!("bank/{s}/kernel"))?))
        .collect::<Result<Vec<_>>>()?;
    let model = StyleBankModel::from_parts(config, encoder, decoder, banks)
        .map_err(|e| Error::Checkpoint(format!("inconsistent with meta/config: {e}")))?;

    let known = model_to_container(&model, None)?;
    for (name, _) in &c.entries {
        if known.get(name).is_none() && !name.starts_with("extractor/") {
            return Err(Error::Checkpoint(format!("unexpected entry `{name}`")));
        }
    }
    Ok(model)
}

/// The extractor stored alongside a model, if any.
pub fn extractor_from_container(c: &Container) -> Result<Option<FeatureExtractor<f32>>> {
    let mut tensors = Vec::new();
    for (name, p) in &c.entries {
        if !name.starts_with("extractor/") {
            continue;
        }
        match p {
            // Biases are accepted in any rank and reshaped to [1, C, 1, 1].
            Payload::F32 { dims, data } if name.ends_with("/bias") => {
                let t = Tensor::new([1, data.len(), 1, 1], data.clone())
                    .map_err(|_| Error::Checkpoint(format!("{name}: dims {dims:?}")))?;
                tensors.push((name.as_str(), t));
            }
            Payload::F32 { .. } => tensors.push((name.as_str(), c.tensor(name)?)),
            Payload::Text(_) => return Err(Error::Checkpoint(format!("{name}: expected tensor"))),
        }
    }
    if tensors.is_empty() {
        return Ok(None);
    }
    FeatureExtractor::from_named(tensors.iter().map(|(n, t)| (*n, t))).map(Some)
}

pub fn save_model(path: &Path, model: &StyleBankModel<f32>, extractor: Option<&FeatureExtractor<f32>>) -> Result<()> {
    model_to_container(model, extractor)?.write(path)
}

pub fn load_model(path: &Path) -> Result<StyleBankModel<f32>> {
    model_from_container(&Container::read(path)?)
}

/// SHA-256 over the encoder and decoder parameters, names included. Hex encoded.
pub fn autoencoder_digest(model: &StyleBankModel<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.autoencoder_params() {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((d as u32).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
