//! Binary checkpoint container.
//!
//! All integers are little-endian. Layout, version 1:
//!
//! ```text
//! magic          8 bytes   "EMOFUSE\0"
//! version        u32       major format version (1)
//! kind           u8        0 = teacher, 1 = student
//! frozen         u8        teacher freeze flag (0 for students)
//! epoch          u64       epoch the parameters were taken from (1-based)
//! seed           u64       root seed of the run
//! teacher_width  u64       width the student adapter maps to; 0 if none
//! config_len     u64
//! config         config_len bytes of UTF-8 TOML (resolved config snapshot)
//! param_count    u64
//! param_count times:
//!   name_len     u32
//!   name         name_len bytes of UTF-8
//!   ndim         u32
//!   dims         ndim × u64
//!   values       product(dims) × f64
//! digest         32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Readers reject other magic values, other major versions, digest
//! mismatches and trailing bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{AnyModel, StudentModel, TeacherModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EMOFUSE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
}

/// Metadata stored next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub frozen: bool,
    pub epoch: u64,
    pub seed: u64,
    pub teacher_width: Option<usize>,
}

fn encode(meta: &CheckpointMeta, config: &ModelConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match meta.kind {
        ModelKind::Teacher => 0,
        ModelKind::Student => 1,
    });
    out.push(u8::from(meta.frozen));
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&(meta.teacher_width.unwrap_or(0) as u64).to_le_bytes());
    let toml = config.to_toml();
    out.extend_from_slice(&(toml.len() as u64).to_le_bytes());
    out.extend_from_slice(toml.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
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
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, ModelConfig, ParamStore)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch; file is corrupt".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Teacher,
        1 => ModelKind::Student,
        k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
    };
    let frozen = r.u8()? != 0;
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let teacher_width = match r.len()? {
        0 => None,
        w => Some(w),
    };
    let config_len = r.len()?;
    let text = r.string(config_len)?;
    let config = ModelConfig::from_toml_with_env(&text, std::iter::empty())
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if params.id_of(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.add(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let meta = CheckpointMeta {
        kind,
        frozen,
        epoch,
        seed,
        teacher_width,
    };
    Ok((meta, config, params))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_teacher(path: &Path, teacher: &TeacherModel, epoch: u64) -> Result<()> {
    let meta = CheckpointMeta {
        kind: ModelKind::Teacher,
        frozen: teacher.is_frozen(),
        epoch,
        seed: teacher.config.run.seed,
        teacher_width: None,
    };
    write(path, &encode(&meta, &teacher.config, &teacher.params))
}

pub fn save_student(path: &Path, student: &StudentModel, epoch: u64) -> Result<()> {
    let meta = CheckpointMeta {
        kind: ModelKind::Student,
        frozen: false,
        epoch,
        seed: student.config.run.seed,
        teacher_width: student.adapter.as_ref().map(|a| student.params.get(a.weight).cols()),
    };
    write(path, &encode(&meta, &student.config, &student.params))
}

/// Loads either kind of model.
pub fn load(path: &Path) -> Result<(AnyModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, config, stored) = decode(&bytes)?;
    let model = match meta.kind {
        ModelKind::Teacher => {
            let mut t = TeacherModel::new(&config);
            t.params.load_values_from(&stored)?;
            if meta.frozen {
                t.freeze();
            }
            AnyModel::Teacher(t)
        }
        ModelKind::Student => {
            let mut s = StudentModel::new(&config, meta.teacher_width);
            s.params.load_values_from(&stored)?;
            AnyModel::Student(s)
        }
    };
    Ok((model, meta))
}

pub fn load_teacher(path: &Path) -> Result<TeacherModel> {
    match load(path)?.0 {
        AnyModel::Teacher(t) => Ok(t),
        AnyModel::Student(_) => Err(Error::Checkpoint(format!(
            "{} holds a student, expected a teacher",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.model.d_t = 4;
        c.model.d_a = 3;
        c.model.d_v = 2;
        c.model.d_s = 4;
        c.model.heads = 2;
        c.model.fusion_layers = 1;
        c.model.ffn_hidden = Some(8);
        c.model.max_positions = Some(16);
        c.sdmoe.experts = 2;
        c.data.synthetic_utterances = 10;
        c.resolved().unwrap()
    }

    #[test]
    fn student_round_trip_is_bitwise() {
        let cfg = small();
        let mut s = StudentModel::new(&cfg, None);
        s.params.tensors_mut()[0].data_mut()[0] = 0.123_456_789_012_345_6;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_student(&path, &s, 3).unwrap();
        let (back, meta) = load(&path).unwrap();
        assert_eq!(meta.epoch, 3);
        assert_eq!(meta.kind, ModelKind::Student);
        let AnyModel::Student(back) = back else { panic!("kind") };
        assert_eq!(back.params.checksum(), s.params.checksum());
        let probe = &generate_synthetic(&cfg, 5).unwrap()[0];
        let (a, b) = (s.logits(probe).unwrap(), back.logits(probe).unwrap());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn teacher_keeps_freeze_flag() {
        let mut t = TeacherModel::new(&small());
        t.freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_teacher(&path, &t, 1).unwrap();
        let back = load_teacher(&path).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.params.checksum(), t.params.checksum());
    }

    #[test]
    fn corruption_and_wrong_kind_are_detected() {
        let s = StudentModel::new(&small(), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_student(&path, &s, 1).unwrap();
        assert!(matches!(load_teacher(&path), Err(Error::Checkpoint(_))));
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
