//! Binary model checkpoints.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! "MILLIE01"
//! header_len, header (UTF-8 `key=value` lines; first line `format_version=1`)
//! body:  record_count, then per record:
//!        name_len, name (UTF-8), rank, dims[rank], f32 LE payload
//! crc32 (IEEE) of body
//! ```
//!
//! Header keys: `format_version`, one `class` line per class in order,
//! `backbone.input_side`, `backbone.channels` (comma separated), then
//! optional training metadata.

use std::fs;
use std::path::Path;

use crate::model::{BackboneConfig, ModelParams};
use crate::tensor::Tensor;
use crate::training::TrainedModel;

use super::{io_err, DataError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MILLIE01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    /// Every header entry in file order, including the required keys.
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Training metadata recorded alongside the parameters.
pub fn training_metadata(t: &TrainedModel) -> Vec<(String, String)> {
    vec![
        ("seed".into(), t.config.seed.to_string()),
        ("train".into(), serde_json::to_string(&t.config).expect("plain struct")),
        ("augment".into(), serde_json::to_string(&t.augment).expect("plain struct")),
        ("stopping".into(), t.stopping.to_string()),
        (
            "best_epoch".into(),
            t.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string()),
        ),
        ("epochs_run".into(), t.history.len().to_string()),
    ]
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<(), DataError> {
    let v = u32::try_from(v).map_err(|_| DataError::Format(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &ModelParams, extra: &[(String, String)]) -> Result<Vec<u8>, DataError> {
    let mut header = format!("format_version={CHECKPOINT_VERSION}\n");
    for c in &model.classes {
        header.push_str(&format!("class={c}\n"));
    }
    let channels: Vec<String> = model.backbone.channels.iter().map(usize::to_string).collect();
    header.push_str(&format!(
        "backbone.input_side={}\nbackbone.channels={}\n",
        model.backbone.input_side,
        channels.join(",")
    ));
    for (k, v) in extra {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(DataError::Format(format!("metadata entry `{k}` is not a single key=value line")));
        }
        header.push_str(&format!("{k}={v}\n"));
    }
    let mut body = Vec::new();
    push_u32(&mut body, model.params.len())?;
    for p in &model.params {
        push_u32(&mut body, p.name.len())?;
        body.extend_from_slice(p.name.as_bytes());
        push_u32(&mut body, p.value.shape().len())?;
        for &d in p.value.shape() {
            push_u32(&mut body, d)?;
        }
        for v in p.value.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, header.len())?;
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DataError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn parse_header(text: &str) -> Result<Vec<(String, String)>, DataError> {
    let mut entries = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("header line `{line}` is not key=value")))?;
        entries.push((k.to_string(), v.to_string()));
    }
    match entries.first() {
        Some((k, v)) if k == "format_version" => {
            if v.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
                return Err(DataError::UnsupportedVersion(v.clone()));
            }
        }
        _ => return Err(DataError::Format("header must start with format_version".into())),
    }
    Ok(entries)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DataError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 8 };
    let header_len = r.u32()?;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| DataError::Format("header is not UTF-8".into()))?;
    let metadata = parse_header(header)?;
    let body_start = r.pos;
    if bytes.len() < body_start + 4 {
        return Err(DataError::Format("truncated before body".into()));
    }
    let body = &bytes[body_start..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DataError::Integrity { stored, computed });
    }

    let get = |key: &str| {
        metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| DataError::Format(format!("header lacks `{key}`")))
    };
    let classes: Vec<String> = metadata.iter().filter(|(k, _)| k == "class").map(|(_, v)| v.clone()).collect();
    let input_side = get("backbone.input_side")?
        .parse()
        .map_err(|_| DataError::Format("bad backbone.input_side".into()))?;
    let channels = get("backbone.channels")?
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<usize>, _>>()
        .map_err(|_| DataError::Format("bad backbone.channels".into()))?;
    let backbone = BackboneConfig { input_side, channels };

    let mut r = Reader { bytes: body, pos: 0 };
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| DataError::Format("record name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| DataError::Format(format!("record `{name}` is too large")))?;
        let data = r
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DataError::Format(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(DataError::Format("trailing bytes after the last record".into()));
    }
    let model = ModelParams::from_tensors(backbone, classes, tensors).map_err(|e| DataError::Format(e.to_string()))?;
    Ok(Checkpoint { model, metadata })
}

pub fn save_model(model: &ModelParams, extra: &[(String, String)], path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_checkpoint(model, extra)?).map_err(io_err(path))
}

pub fn save_checkpoint(trained: &TrainedModel, path: &Path) -> Result<(), DataError> {
    save_model(&trained.model, &training_metadata(trained), path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}
