//! Versioned binary checkpoints of a sequence in progress.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{AccuracyMatrix, ContinualLearner};

const MAGIC: &[u8; 8] = b"CATCKPT\0";
const VERSION: u32 = 1;
const HEADER: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub learner: ContinualLearner,
    pub matrix: AccuracyMatrix,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::from(&MAGIC[..]);
        out.extend(VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, self)
            .map_err(|e| Error::Format { offset: HEADER as u64, msg: e.to_string() })?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..8] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint file".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let ckpt: Checkpoint = bincode::deserialize(&bytes[HEADER..]).map_err(|e| Error::Format {
            offset: HEADER as u64,
            msg: format!("corrupt checkpoint body: {e}"),
        })?;
        ckpt.learner.config().validate()?;
        if ckpt.learner.task_count() > ckpt.matrix.len() {
            return Err(Error::Format {
                offset: HEADER as u64,
                msg: "checkpoint holds more tasks than its accuracy matrix".into(),
            });
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file so an interrupted save leaves any
    /// previous checkpoint intact.
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
