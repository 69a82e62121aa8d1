//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic   "CBRA"
//! version u32
//! config  u32 byte length, then UTF-8 `key = value` lines
//! count   u32 number of parameter blocks
//! block*  u32 name length, name bytes, u32 rank, rank × u64 dims,
//!         row-major f64 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::kv::KvRecord;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CBRA";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    binio::write_string(w, &model.cfg.to_kv().to_text())?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, name, t) in model.store.iter() {
        binio::write_string(w, name)?;
        binio::write_tensor(w, t)?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// A parameter block as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_checkpoint<R: Read>(r: &mut R, path: &Path) -> Result<(ModelConfig, Vec<StoredParam>)> {
    let bad = |reason: String| Error::format(path, reason);
    let mut br = ByteReader::new(r);
    let io = |e: std::io::Error| Error::format(path, format!("truncated or corrupt: {e}"));
    let magic = br.bytes(4).map_err(io)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = br.u32().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let text = br.string(1 << 20).map_err(io)?;
    let cfg = ModelConfig::from_kv(&KvRecord::parse(&text)?)?;
    let count = br.u32().map_err(io)? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = br.string(4096).map_err(io)?;
        let (shape, data) = br.tensor_parts().map_err(io)?;
        params.push(StoredParam { name, shape, data });
    }
    if !br.at_end().map_err(io)? {
        return Err(bad("trailing bytes after last parameter block".into()));
    }
    Ok((cfg, params))
}

/// [`Error::Mismatch`] naming the first architecture field that differs.
pub fn check_architecture(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    match architecture_mismatch(found, expected) {
        Some(msg) => Err(Error::Mismatch(msg)),
        None => Ok(()),
    }
}

fn architecture_mismatch(found: &ModelConfig, expected: &ModelConfig) -> Option<String> {
    macro_rules! check {
        ($($field:ident),*) => {
            $(if found.$field != expected.$field {
                return Some(format!(
                    "{}: checkpoint has {}, configuration expects {}",
                    stringify!($field), found.$field, expected.$field
                ));
            })*
        };
    }
    check!(
        vocab_size, d_model, enc_layers, fusion_layer, bottleneck_len, heads, ffn_dim, conv_kernel,
        strategy, decoder_layers, audio_in, video_in, variant
    );
    None
}

/// Load a checkpoint. When `expected` is given, any architecture field that
/// differs is reported as [`Error::Mismatch`].
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let (cfg, params) = read_checkpoint(&mut r, path)?;
    if let Some(exp) = expected {
        check_architecture(&cfg, exp)?;
    }
    let mut model = Model::new(cfg)?;
    if params.len() != model.store.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} parameter blocks, model has {}",
            params.len(),
            model.store.len()
        )));
    }
    for p in params {
        let id = model
            .store
            .id(&p.name)
            .ok_or_else(|| Error::Mismatch(format!("unknown parameter {}", p.name)))?;
        if model.store.get(id).shape() != p.shape.as_slice() {
            return Err(Error::Mismatch(format!(
                "parameter {}: checkpoint shape {:?}, model shape {:?}",
                p.name,
                p.shape,
                model.store.get(id).shape()
            )));
        }
        model.store.set_data(id, &p.data)?;
    }
    Ok(model)
}
