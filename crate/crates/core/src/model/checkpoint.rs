//! Checkpoint archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "XMCKPT01" (full) or "XMADPT01" (adapter-only)
//! sections   u32
//! per section:
//!   kind     u8       0 config JSON, 1 base weights, 2 adapters, 3 optimizer, 4 progress JSON
//!   length   u64      payload bytes
//!   payload
//! ```
//!
//! Weight payload: `u32` count, then per tensor `u16` name length, UTF-8 name,
//! `u32` rows, `u32` cols, `rows·cols` float32 values row-major.
//! Adapter payload: `u32` count, then per record `u16` path length, path,
//! `f64` scaling, tensor A, tensor B (each as `u32` rows, `u32` cols, float32 data).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Sublayer};
use crate::adapters::{inject, LoraConfig};
use crate::error::{Error, Result};
use crate::params::ParamKind;

const FULL_MAGIC: &[u8; 8] = b"XMCKPT01";
const ADAPTER_MAGIC: &[u8; 8] = b"XMADPT01";

const SEC_CONFIG: u8 = 0;
const SEC_BASE: u8 = 1;
const SEC_ADAPTERS: u8 = 2;
const SEC_OPTIMIZER: u8 = 3;
const SEC_PROGRESS: u8 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: u64,
    pub epoch: u64,
}

#[derive(Serialize, Deserialize)]
struct ConfigRecord {
    model: ModelConfig,
    lora: Option<LoraConfig>,
    trainable: Vec<String>,
}

/// A loaded full checkpoint.
pub struct Checkpoint {
    pub model: Model,
    pub progress: TrainProgress,
    pub optimizer: Vec<(String, Array2<f64>)>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    progress: TrainProgress,
    optimizer: &[(String, Array2<f64>)],
) -> Result<()> {
    let config = ConfigRecord {
        model: model.config.clone(),
        lora: model.lora.clone(),
        trainable: model.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect(),
    };
    let base: Vec<(&str, &Array2<f64>)> = model
        .params
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Lora)
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    let optim: Vec<(&str, &Array2<f64>)> = optimizer.iter().map(|(n, v)| (n.as_str(), v)).collect();

    let mut out = Vec::new();
    out.extend_from_slice(FULL_MAGIC);
    let sections: Vec<(u8, Vec<u8>)> = vec![
        (SEC_CONFIG, serde_json::to_vec(&config)?),
        (SEC_BASE, encode_tensors(&base)),
        (SEC_ADAPTERS, encode_adapters(model)),
        (SEC_OPTIMIZER, encode_tensors(&optim)),
        (SEC_PROGRESS, serde_json::to_vec(&progress)?),
    ];
    write_sections(&mut out, &sections);
    write_file(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sections = read_sections(&bytes, FULL_MAGIC)?;
    let config: ConfigRecord = serde_json::from_slice(section(&sections, SEC_CONFIG)?)?;
    let mut model = Model::new(config.model.clone())?;
    if let Some(lora) = &config.lora {
        inject(&mut model, lora)?;
    }
    for (name, value) in decode_tensors(section(&sections, SEC_BASE)?)? {
        assign(&mut model, &name, value)?;
    }
    apply_adapter_records(&mut model, &decode_adapters(section(&sections, SEC_ADAPTERS)?)?)?;
    let trainable: std::collections::HashSet<&str> = config.trainable.iter().map(String::as_str).collect();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let t = trainable.contains(model.params.get(id).name.as_str());
        model.params.set_trainable(id, t);
    }
    let optimizer = decode_tensors(section(&sections, SEC_OPTIMIZER)?)?;
    let progress = serde_json::from_slice(section(&sections, SEC_PROGRESS)?)?;
    Ok(Checkpoint { model, progress, optimizer })
}

/// Writes only what fine-tuning changed: LoRA records plus every other
/// trainable tensor (camera tokens, thermal adapters, heads when trained).
pub fn save_adapters(path: &Path, model: &Model) -> Result<()> {
    let lora = model.lora.as_ref().ok_or_else(|| Error::State("model has no adapters".into()))?;
    let extra: Vec<(&str, &Array2<f64>)> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable && p.kind != ParamKind::Lora)
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    let header = serde_json::json!({ "lora": lora, "token_mode": model.config.token_mode });
    let mut out = Vec::new();
    out.extend_from_slice(ADAPTER_MAGIC);
    write_sections(
        &mut out,
        &[
            (SEC_CONFIG, serde_json::to_vec(&header)?),
            (SEC_ADAPTERS, encode_adapters(model)),
            (SEC_BASE, encode_tensors(&extra)),
        ],
    );
    write_file(path, &out)
}

/// Injects and fills adapters from an adapter-only archive onto a base model
/// with matching dimensions.
pub fn load_adapters(path: &Path, model: &mut Model) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sections = read_sections(&bytes, ADAPTER_MAGIC)?;
    let header: serde_json::Value = serde_json::from_slice(section(&sections, SEC_CONFIG)?)?;
    let lora: LoraConfig = serde_json::from_value(header["lora"].clone())?;
    let mode = serde_json::from_value(header["token_mode"].clone())?;
    model.set_token_mode(mode);
    model.reset_thermal_params();
    inject(model, &lora)?;
    apply_adapter_records(model, &decode_adapters(section(&sections, SEC_ADAPTERS)?)?)?;
    for (name, value) in decode_tensors(section(&sections, SEC_BASE)?)? {
        assign(model, &name, value)?;
    }
    Ok(())
}

fn assign(model: &mut Model, name: &str, value: Array2<f64>) -> Result<()> {
    let id = model.params.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}'")))?;
    let slot = &mut model.params.get_mut(id).value;
    if slot.dim() != value.dim() {
        return Err(Error::Checkpoint(format!(
            "shape mismatch for '{name}': model {:?}, file {:?}",
            slot.dim(),
            value.dim()
        )));
    }
    *slot = value;
    Ok(())
}

struct AdapterRecord {
    path: String,
    scaling: f64,
    a: Array2<f64>,
    b: Array2<f64>,
}

fn apply_adapter_records(model: &mut Model, records: &[AdapterRecord]) -> Result<()> {
    for rec in records {
        let (block, sub) = parse_adapter_path(&rec.path)?;
        let lin = model
            .blocks
            .get_mut(block)
            .ok_or_else(|| Error::Checkpoint(format!("adapter path '{}' beyond model depth", rec.path)))?
            .sublayer_mut(sub);
        let lora = lin.lora.as_mut().ok_or_else(|| Error::Checkpoint(format!("no adapter slot at '{}'", rec.path)))?;
        lora.scaling = rec.scaling;
        let (a, b) = (lora.a, lora.b);
        for (id, value, what) in [(a, &rec.a, "A"), (b, &rec.b, "B")] {
            let slot = &mut model.params.get_mut(id).value;
            if slot.dim() != value.dim() {
                return Err(Error::Checkpoint(format!("adapter {what} shape mismatch at '{}'", rec.path)));
            }
            *slot = value.clone();
        }
    }
    Ok(())
}

fn parse_adapter_path(path: &str) -> Result<(usize, Sublayer)> {
    let bad = || Error::Checkpoint(format!("malformed adapter path '{path}'"));
    let rest = path.strip_prefix("blocks.").ok_or_else(bad)?;
    let (idx, sub) = rest.split_once('.').ok_or_else(bad)?;
    let block = idx.parse().map_err(|_| bad())?;
    let sub = Sublayer::ALL.into_iter().find(|s| s.path() == sub).ok_or_else(bad)?;
    Ok((block, sub))
}

fn encode_adapters(model: &Model) -> Vec<u8> {
    let mut records = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        for s in Sublayer::ALL {
            if let Some(lora) = &block.sublayer(s).lora {
                records.push((format!("blocks.{i}.{}", s.path()), lora.clone()));
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (path, lora) in records {
        write_name(&mut out, &path);
        out.extend_from_slice(&lora.scaling.to_le_bytes());
        write_array(&mut out, model.params.value(lora.a));
        write_array(&mut out, model.params.value(lora.b));
    }
    out
}

fn decode_adapters(bytes: &[u8]) -> Result<Vec<AdapterRecord>> {
    let mut cur = Cursor::new(bytes);
    let n = read_u32(&mut cur)?;
    (0..n)
        .map(|_| {
            let path = read_name(&mut cur)?;
            let scaling = f64::from_le_bytes(read_exact::<8>(&mut cur)?);
            let a = read_array(&mut cur)?;
            let b = read_array(&mut cur)?;
            Ok(AdapterRecord { path, scaling, a, b })
        })
        .collect()
}

fn encode_tensors(tensors: &[(&str, &Array2<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, value) in tensors {
        write_name(&mut out, name);
        write_array(&mut out, value);
    }
    out
}

fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Array2<f64>)>> {
    let mut cur = Cursor::new(bytes);
    let n = read_u32(&mut cur)?;
    (0..n).map(|_| Ok((read_name(&mut cur)?, read_array(&mut cur)?))).collect()
}

fn write_sections(out: &mut Vec<u8>, sections: &[(u8, Vec<u8>)]) {
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (kind, payload) in sections {
        out.push(*kind);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
}

fn read_sections<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Vec<(u8, &'a [u8])>> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut offset = 12;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if offset + 9 > bytes.len() {
            return Err(Error::Checkpoint("truncated section header".into()));
        }
        let kind = bytes[offset];
        let len = u64::from_le_bytes(bytes[offset + 1..offset + 9].try_into().unwrap()) as usize;
        offset += 9;
        if offset + len > bytes.len() {
            return Err(Error::Checkpoint("truncated section".into()));
        }
        out.push((kind, &bytes[offset..offset + len]));
        offset += len;
    }
    Ok(out)
}

fn section<'a>(sections: &[(u8, &'a [u8])], kind: u8) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|(k, _)| *k == kind)
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::Checkpoint(format!("missing section {kind}")))
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn write_array(out: &mut Vec<u8>, a: &Array2<f64>) {
    out.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(a.ncols() as u32).to_le_bytes());
    for v in a.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn read_exact<const N: usize>(cur: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    cur.read_exact(&mut buf).map_err(|_| Error::Checkpoint("unexpected end of data".into()))?;
    Ok(buf)
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(cur)?))
}

fn read_name(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let len = u16::from_le_bytes(read_exact::<2>(cur)?) as usize;
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(|_| Error::Checkpoint("unexpected end of data".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
}

fn read_array(cur: &mut Cursor<&[u8]>) -> Result<Array2<f64>> {
    let rows = read_u32(cur)? as usize;
    let cols = read_u32(cur)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f32::from_le_bytes(read_exact::<4>(cur)?) as f64);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rounds every parameter to float32 precision, matching what a save/load cycle yields.
pub fn round_to_storage_precision(model: &mut Model) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.get_mut(id).value.mapv_inplace(|v| v as f32 as f64);
    }
}
