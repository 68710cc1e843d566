//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTAD"                      magic
//! u16                         format version (1)
//! u32 + bytes                 metadata: canonical TOML, UTF-8
//! u32                         tensor count
//! repeated:
//!   u16 + bytes               tensor name, UTF-8
//!   u32 rows, u32 cols, u8 dtype, payload   (see linalg::write_tensor)
//! ```
//!
//! Tensors are written in the model's canonical order as `f64`, so
//! save → load → save reproduces the file byte for byte.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterVariant};
use crate::config::{canonical_toml, ExperimentConfig};
use crate::error::{Error, Result};
use crate::linalg::{read_tensor, write_tensor, Dtype, Rng};
use crate::merged_qkv::Channel;
use crate::model::{Model, ModelSpec, Site, Trainability};

pub const MAGIC: &[u8; 4] = b"MTAD";
pub const VERSION: u16 = 1;
/// Row order of fused `W_qkv` weights.
pub const QKV_LAYOUT: &str = "q,k,v";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRecord {
    pub site: String,
    pub variant: AdapterVariant,
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<Channel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub qkv_layout: String,
    pub seed: u64,
    pub merged: bool,
    pub model: ModelSpec,
    pub trainability: Trainability,
    #[serde(default)]
    pub adapters: Vec<AdapterRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
}

impl CheckpointMeta {
    pub fn describe(model: &Model, seed: u64, experiment: Option<&ExperimentConfig>) -> Self {
        let adapters = model
            .adapters()
            .iter()
            .map(|(site, ad)| {
                let c = ad.config();
                AdapterRecord {
                    site: site.layer_id(),
                    variant: c.variant,
                    rank: c.rank,
                    alpha: c.alpha,
                    init_std: c.init_std,
                    dropout: c.dropout,
                    channels: ad.channels().to_vec(),
                }
            })
            .collect();
        Self {
            qkv_layout: QKV_LAYOUT.to_string(),
            seed,
            merged: model.is_merged(),
            model: model.spec.clone(),
            trainability: model.trainability.clone(),
            adapters,
            experiment: experiment.cloned(),
        }
    }
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn io_to_ck(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => ck("truncated file"),
        Error::Io(io) => ck(io.to_string()),
        other => other,
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let blob = canonical_toml(meta)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let len = u32::try_from(blob.len()).map_err(|_| ck("metadata too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(blob.as_bytes())?;
    let tensors = model.named_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        let n = u16::try_from(name.len()).map_err(|_| ck("tensor name too long"))?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, m, Dtype::F64)?;
    }
    Ok(())
}

pub fn to_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, meta)?;
    Ok(buf)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_inner<R: Read>(r: &mut R) -> Result<(Model, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ck("bad magic, not an MTAD checkpoint"));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(ck(format!("unsupported format version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut blob = vec![0u8; len];
    r.read_exact(&mut blob)?;
    let text = String::from_utf8(blob).map_err(|_| ck("metadata is not UTF-8"))?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| ck(format!("metadata: {e}")))?;
    if meta.qkv_layout != QKV_LAYOUT {
        return Err(ck(format!("unsupported qkv layout {:?}", meta.qkv_layout)));
    }

    let mut model = Model::skeleton(&meta.model)?;
    let mut scratch = Rng::new(0);
    for rec in &meta.adapters {
        let cfg = AdapterConfig {
            rank: rec.rank,
            alpha: rec.alpha,
            variant: rec.variant,
            init_std: rec.init_std,
            dropout: rec.dropout,
        };
        model.attach_site(Site::parse(&rec.site)?, &cfg, &rec.channels, &mut scratch)?;
    }
    model.trainability = meta.trainability.clone();
    model.set_merged_flag(meta.merged);

    let expected: BTreeSet<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = read_u32(r)? as usize;
    if count != expected.len() {
        return Err(ck(format!("expected {} tensors, file has {count}", expected.len())));
    }
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let n = read_u16(r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ck("tensor name is not UTF-8"))?;
        if !expected.contains(&name) || !seen.insert(name.clone()) {
            return Err(ck(format!("unexpected or duplicate tensor {name}")));
        }
        let (m, _) = read_tensor(r)?;
        model
            .set_tensor(&name, m)
            .map_err(|e| ck(format!("tensor {name}: {e}")))?;
    }
    Ok((model, meta))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Model, CheckpointMeta)> {
    read_inner(r).map_err(io_to_ck)
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian;
    use crate::model::{HeadKind, Placement};

    fn adapted(fused: bool) -> Model {
        let spec = ModelSpec {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 16,
            max_seq_len: 10,
            fused_qkv: fused,
            head: HeadKind::Classifier { n_classes: 2 },
            init_std: 0.1,
        };
        let mut rng = Rng::new(1);
        let mut m = Model::build(&spec, &mut rng).unwrap();
        let placement = if fused { Placement::nlg() } else { Placement::nlu() };
        m.attach_adapters(&placement, &AdapterConfig::new(AdapterVariant::Ctcm, 2, 4.0), &mut rng)
            .unwrap();
        let names: Vec<_> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        for n in names {
            let (r, c) = m.tensor(&n).unwrap().shape();
            m.set_tensor(&n, gaussian(&mut rng, r, c, 0.3).unwrap()).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for fused in [false, true] {
            let m = adapted(fused);
            let meta = CheckpointMeta::describe(&m, 7, None);
            let bytes = to_bytes(&m, &meta).unwrap();
            let (back, meta2) = read_checkpoint(&mut bytes.as_slice()).unwrap();
            assert_eq!(meta2, meta);
            assert_eq!(back.named_tensors(), m.named_tensors());
            assert_eq!(to_bytes(&back, &meta2).unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let m = adapted(false);
        let bytes = to_bytes(&m, &CheckpointMeta::describe(&m, 0, None)).unwrap();
        assert_eq!(&bytes[..4], b"MTAD");
        assert_eq!(&bytes[4..6], &[1, 0]);
    }

    #[test]
    fn corrupt_inputs_are_clean_errors() {
        let m = adapted(false);
        let bytes = to_bytes(&m, &CheckpointMeta::describe(&m, 0, None)).unwrap();
        for cut in [0, 3, 5, 9, 100, bytes.len() - 1] {
            let err = read_checkpoint(&mut &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        }
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&mut bad_magic.as_slice()).unwrap_err().to_string().contains("magic"));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(read_checkpoint(&mut bad_version.as_slice()).unwrap_err().to_string().contains("version"));
    }
}
