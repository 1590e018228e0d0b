//! Binary checkpoint format: magic + version, the model configuration, a
//! vocabulary content hash, the named parameter table, and optional
//! optimizer/trainer state. Loading a saved checkpoint reproduces every
//! parameter bitwise.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, SummarizerLM};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"SMLMCK01";

/// Optimizer moments plus opaque trainer bookkeeping, both needed to resume
/// a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub adam_step: u64,
    /// First/second Adam moments, aligned with parameter-store order.
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
    /// Serialized trainer cursor; the training module owns its schema.
    pub cursor: String,
}

pub struct LoadedCheckpoint {
    pub model: SummarizerLM,
    pub state: Option<CheckpointState>,
    pub vocab_hash: String,
}

impl LoadedCheckpoint {
    /// Refuses to pair this checkpoint with a different vocabulary.
    pub fn ensure_vocab_hash(&self, expected: &str) -> Result<(), ModelError> {
        if self.vocab_hash != expected {
            return Err(ModelError::Compatibility(format!(
                "checkpoint was trained with vocabulary {} but {} was supplied",
                &self.vocab_hash[..12.min(self.vocab_hash.len())],
                &expected[..12.min(expected.len())]
            )));
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String, ModelError> {
    let bytes = read_bytes(r).map_err(|e| ModelError::Format(format!("{what}: {e}")))?;
    String::from_utf8(bytes).map_err(|_| ModelError::Format(format!("{what}: invalid UTF-8")))
}

/// Writes the checkpoint atomically (temp file + rename).
pub fn save_checkpoint(
    model: &SummarizerLM,
    state: Option<&CheckpointState>,
    vocab_hash: &str,
    path: &Path,
) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let write = (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            let config_json =
                serde_json::to_vec(model.config()).expect("config serializes");
            write_bytes(&mut w, &config_json)?;
            write_bytes(&mut w, vocab_hash.as_bytes())?;
            w.write_all(&(model.params().len() as u32).to_le_bytes())?;
            for (_, p) in model.params().iter() {
                write_bytes(&mut w, p.name.as_bytes())?;
                p.value.write_to(&mut w)?;
            }
            match state {
                None => w.write_all(&[0u8])?,
                Some(s) => {
                    w.write_all(&[1u8])?;
                    w.write_all(&s.adam_step.to_le_bytes())?;
                    for (m, v) in s.first_moments.iter().zip(&s.second_moments) {
                        m.write_to(&mut w)?;
                        v.write_to(&mut w)?;
                    }
                    write_bytes(&mut w, s.cursor.as_bytes())?;
                }
            }
            w.flush()
        })();
        write.map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| ModelError::Format(format!("magic: {e}")))?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!(
            "bad magic {magic:?}; not a checkpoint or unsupported version"
        )));
    }
    let config_json = read_string(&mut r, "config")?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| ModelError::Format(format!("config: {e}")))?;
    let vocab_hash = read_string(&mut r, "vocab hash")?;

    let mut model = SummarizerLM::zeroed(config)?;
    let count = read_u32(&mut r).map_err(|e| ModelError::Format(format!("param count: {e}")))? as usize;
    if count != model.params().len() {
        return Err(ModelError::Format(format!(
            "checkpoint lists {count} parameters, model defines {}",
            model.params().len()
        )));
    }
    for i in 0..count {
        let name = read_string(&mut r, "param name")?;
        let tensor = Tensor::read_from(&mut r)
            .map_err(|e| ModelError::Format(format!("param {name}: {e}")))?;
        let id = model
            .param_by_name(&name)
            .ok_or_else(|| ModelError::Format(format!("unknown parameter {name:?}")))?;
        let target = model.params_mut().get_mut(id);
        if target.value.shape() != tensor.shape() {
            return Err(ModelError::Format(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                tensor.shape(),
                target.value.shape()
            )));
        }
        target.value = tensor;
        let _ = i;
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|e| ModelError::Format(format!("state flag: {e}")))?;
    let state = if flag[0] == 1 {
        let adam_step =
            read_u64(&mut r).map_err(|e| ModelError::Format(format!("adam step: {e}")))?;
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for _ in 0..count {
            first.push(
                Tensor::read_from(&mut r)
                    .map_err(|e| ModelError::Format(format!("first moment: {e}")))?,
            );
            second.push(
                Tensor::read_from(&mut r)
                    .map_err(|e| ModelError::Format(format!("second moment: {e}")))?,
            );
        }
        let cursor = read_string(&mut r, "trainer cursor")?;
        Some(CheckpointState {
            adam_step,
            first_moments: first,
            second_moments: second,
            cursor,
        })
    } else if flag[0] == 0 {
        None
    } else {
        return Err(ModelError::Format(format!("bad state flag {}", flag[0])));
    };

    Ok(LoadedCheckpoint {
        model,
        state,
        vocab_hash,
    })
}
