//! Model checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "AORTCKPT"
//! version    u32
//! meta_len   u64, then meta_len bytes of JSON (CheckpointMeta)
//! n_params   u64, then n_params f32   (parameters in visit order)
//! n_buffers  u64, then n_buffers f32  (batch-norm running stats in visit order)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::segresnet::{ArchConfig, NormalizationMode, SegResNet};

pub const MAGIC: &[u8; 8] = b"AORTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub normalization_mode: NormalizationMode,
    pub fold: usize,
    pub repeat: usize,
    pub seed: u64,
    /// Spacing the model was trained at (mm).
    pub target_spacing: [f64; 3],
    pub crop_size: [usize; 3],
    pub epoch: usize,
    pub val_dice: f64,
    pub train_loss_history: Vec<f64>,
    pub val_dice_history: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f32>,
    pub buffers: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &mut SegResNet, meta: CheckpointMeta) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |p| params.extend_from_slice(&p.value));
        let mut buffers = Vec::new();
        model.visit_buffers(&mut |b| buffers.extend_from_slice(b));
        Self { meta, params, buffers }
    }

    /// Rebuilds the network in evaluation-ready form.
    pub fn to_model(&self) -> Result<SegResNet> {
        let mut model = SegResNet::new(self.meta.arch.clone(), self.meta.normalization_mode, 0)?;
        let (mut np, mut nb) = (0, 0);
        model.visit_params(&mut |p| np += p.len());
        model.visit_buffers(&mut |b| nb += b.len());
        if np != self.params.len() || nb != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {np} parameters and {nb} buffer values, checkpoint has {} and {}",
                self.params.len(),
                self.buffers.len()
            )));
        }
        let mut off = 0;
        model.visit_params(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&self.params[off..off + n]);
            off += n;
        });
        let mut off = 0;
        model.visit_buffers(&mut |b| {
            let n = b.len();
            b.copy_from_slice(&self.buffers[off..off + n]);
            off += n;
        });
        Ok(model)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_u64::<LittleEndian>(meta.len() as u64)?;
            w.write_all(&meta)?;
            for block in [&self.params, &self.buffers] {
                w.write_u64::<LittleEndian>(block.len() as u64)?;
                for v in block.iter() {
                    w.write_f32::<LittleEndian>(*v)?;
                }
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version} (expected {VERSION})")));
        }
        let meta_len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        if meta_len > 1 << 26 {
            return Err(bad("metadata block too large"));
        }
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta).map_err(|e| bad(&format!("metadata: {e}")))?;
        let mut blocks = Vec::new();
        for _ in 0..2 {
            let n = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated weights"))? as usize;
            if n > 1 << 32 {
                return Err(bad("weight block too large"));
            }
            let mut v = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut v).map_err(|_| bad("truncated weights"))?;
            blocks.push(v);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let buffers = blocks.pop().unwrap();
        let params = blocks.pop().unwrap();
        Ok(Self { meta, params, buffers })
    }
}
