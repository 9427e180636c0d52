//! Binary containers: feature packs and checkpoints.
//!
//! Feature pack layout (little-endian):
//!
//! ```text
//! magic "LGF1" | version u32 | record count u64
//! per record: id length u16 | id bytes (UTF-8) | rows u32 | dim u32
//!             | rows*dim float32, row-major
//! ```
//!
//! Values are stored as 32-bit floats and widened to f64 on load; compute
//! stays in 64-bit. A checkpoint reuses the record framing under the magic
//! "LGC1", with a JSON-encoded training config between the header and the
//! named parameter records.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, PackErrorKind, Result};
use crate::matrix::{FeatureMatrix, Mat};
use crate::model::{ProjectionHead, TrainConfig};

pub const PACK_MAGIC: [u8; 4] = *b"LGF1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LGC1";
pub const PACK_VERSION: u32 = 1;

/// Ordered collection of (item id, feature matrix) records sharing one
/// feature dimensionality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    records: Vec<(String, FeatureMatrix)>,
    index: BTreeMap<String, usize>,
}

impl FeaturePack {
    pub fn new(records: Vec<(String, FeatureMatrix)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut dim = None;
        for (pos, (id, feats)) in records.iter().enumerate() {
            if index.insert(id.clone(), pos).is_some() {
                return Err(Error::Pack {
                    offset: 0,
                    kind: PackErrorKind::DuplicateId(id.clone()),
                });
            }
            match dim {
                None => dim = Some(feats.dim()),
                Some(d) if d != feats.dim() => {
                    return Err(Error::Pack {
                        offset: 0,
                        kind: PackErrorKind::DimMismatch {
                            id: id.clone(),
                            expected: d as u32,
                            got: feats.dim() as u32,
                        },
                    })
                }
                _ => {}
            }
        }
        Ok(FeaturePack { records, index })
    }

    pub fn empty() -> Self {
        FeaturePack { records: Vec::new(), index: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Shared feature dimensionality; `None` for an empty pack.
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|(_, f)| f.dim())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureMatrix> {
        self.index.get(id).map(|&i| &self.records[i].1)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_position(&self, pos: usize) -> &FeatureMatrix {
        &self.records[pos].1
    }

    pub fn id_at(&self, pos: usize) -> &str {
        &self.records[pos].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureMatrix)> {
        self.records.iter().map(|(id, f)| (id.as_str(), f))
    }
}

// Tracks the byte offset so every parse error can point at the fault.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    fn fail(&self, kind: PackErrorKind) -> Error {
        Error::Pack { offset: self.offset, kind }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Pack {
                        offset: self.offset + filled as u64,
                        kind: PackErrorKind::Truncated { needed: buf.len() - filled },
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::Io(e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn at_eof(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::Io(e)),
            }
        }
    }
}

fn read_record<R: Read>(cur: &mut Cursor<R>) -> Result<(String, Mat)> {
    let id_len = cur.read_u16()? as usize;
    let mut id_bytes = vec![0u8; id_len];
    cur.read_exact(&mut id_bytes)?;
    let id = String::from_utf8(id_bytes).map_err(|_| cur.fail(PackErrorKind::BadId))?;
    let rows = cur.read_u32()? as usize;
    let dim = cur.read_u32()? as usize;
    if rows == 0 || dim == 0 {
        return Err(cur.fail(PackErrorKind::EmptyRecord { id }));
    }
    let mut raw = vec![0u8; rows * dim * 4];
    cur.read_exact(&mut raw)?;
    let mut data = Vec::with_capacity(rows * dim);
    for chunk in raw.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(cur.fail(PackErrorKind::NonFinite { id }));
        }
        data.push(v as f64);
    }
    Ok((id, Mat::new(rows, dim, data)))
}

fn write_record<W: Write>(w: &mut W, id: &str, mat: &Mat) -> Result<()> {
    let id_bytes = id.as_bytes();
    if id_bytes.len() > u16::MAX as usize {
        return Err(Error::Contract(format!("record id too long: {} bytes", id_bytes.len())));
    }
    w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
    w.write_all(id_bytes)?;
    w.write_all(&(mat.rows() as u32).to_le_bytes())?;
    w.write_all(&(mat.cols() as u32).to_le_bytes())?;
    for &v in mat.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(cur: &mut Cursor<R>, magic: [u8; 4]) -> Result<u64> {
    let mut got = [0u8; 4];
    cur.read_exact(&mut got)?;
    if got != magic {
        return Err(Error::Pack {
            offset: 0,
            kind: PackErrorKind::BadMagic { expected: magic },
        });
    }
    let version = cur.read_u32()?;
    if version != PACK_VERSION {
        return Err(Error::Pack {
            offset: 4,
            kind: PackErrorKind::UnsupportedVersion(version),
        });
    }
    cur.read_u64()
}

/// Serializes a pack. Values are truncated to f32 on disk.
pub fn write_pack<W: Write>(w: &mut W, pack: &FeaturePack) -> Result<()> {
    w.write_all(&PACK_MAGIC)?;
    w.write_all(&PACK_VERSION.to_le_bytes())?;
    w.write_all(&(pack.len() as u64).to_le_bytes())?;
    for (id, feats) in pack.iter() {
        write_record(w, id, feats.as_mat())?;
    }
    Ok(())
}

/// Parses a pack, validating ids, dims, and value finiteness. Every
/// failure carries the byte offset where decoding stopped.
pub fn read_pack<R: Read>(r: R) -> Result<FeaturePack> {
    let mut cur = Cursor::new(r);
    let count = read_header(&mut cur, PACK_MAGIC)?;
    let mut records = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for _ in 0..count {
        let record_offset = cur.offset;
        let (id, mat) = read_record(&mut cur)?;
        if index.contains_key(&id) {
            return Err(Error::Pack {
                offset: record_offset,
                kind: PackErrorKind::DuplicateId(id),
            });
        }
        match dim {
            None => dim = Some(mat.cols()),
            Some(d) if d != mat.cols() => {
                return Err(Error::Pack {
                    offset: record_offset,
                    kind: PackErrorKind::DimMismatch {
                        id,
                        expected: d as u32,
                        got: mat.cols() as u32,
                    },
                })
            }
            _ => {}
        }
        index.insert(id.clone(), records.len());
        records.push((id, FeatureMatrix::new(mat)?));
    }
    if !cur.at_eof()? {
        return Err(Error::Pack {
            offset: cur.offset,
            kind: PackErrorKind::TrailingBytes { trailing: 1 },
        });
    }
    Ok(FeaturePack { records, index })
}

pub fn write_pack_file(path: impl AsRef<Path>, pack: &FeaturePack) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pack(&mut w, pack)?;
    w.flush()?;
    Ok(())
}

pub fn read_pack_file(path: impl AsRef<Path>) -> Result<FeaturePack> {
    read_pack(BufReader::new(File::open(path)?))
}

const HEAD_PARAM_NAMES: [&str; 8] = [
    "audio.w1", "audio.b1", "audio.w2", "audio.b2", "text.w1", "text.b1", "text.w2", "text.b2",
];

/// Writes both heads and the training config that produced them.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    audio_head: &ProjectionHead,
    text_head: &ProjectionHead,
    cfg: &TrainConfig,
) -> Result<()> {
    audio_head.validate()?;
    text_head.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&PACK_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(cfg)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&8u64.to_le_bytes())?;
    let mats = [
        &audio_head.w1,
        &audio_head.b1,
        &audio_head.w2,
        &audio_head.b2,
        &text_head.w1,
        &text_head.b1,
        &text_head.w2,
        &text_head.b2,
    ];
    for (name, mat) in HEAD_PARAM_NAMES.iter().zip(mats) {
        write_record(&mut w, name, mat)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back; parameters come back widened to f64.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ProjectionHead, ProjectionHead, TrainConfig)> {
    let mut cur = Cursor::new(BufReader::new(File::open(path)?));
    let mut got = [0u8; 4];
    cur.read_exact(&mut got)?;
    if got != CHECKPOINT_MAGIC {
        return Err(Error::Pack {
            offset: 0,
            kind: PackErrorKind::BadMagic { expected: CHECKPOINT_MAGIC },
        });
    }
    let version = cur.read_u32()?;
    if version != PACK_VERSION {
        return Err(Error::Pack {
            offset: 4,
            kind: PackErrorKind::UnsupportedVersion(version),
        });
    }
    let config_len = cur.read_u32()? as usize;
    let mut config_bytes = vec![0u8; config_len];
    cur.read_exact(&mut config_bytes)?;
    let cfg: TrainConfig = serde_json::from_slice(&config_bytes)?;
    let count = cur.read_u64()?;

    let mut by_name: BTreeMap<String, Mat> = BTreeMap::new();
    for _ in 0..count {
        let record_offset = cur.offset;
        let (name, mat) = read_record(&mut cur)?;
        if by_name.insert(name.clone(), mat).is_some() {
            return Err(Error::Pack {
                offset: record_offset,
                kind: PackErrorKind::DuplicateId(name),
            });
        }
    }
    if !cur.at_eof()? {
        return Err(Error::Pack {
            offset: cur.offset,
            kind: PackErrorKind::TrailingBytes { trailing: 1 },
        });
    }

    let mut take = |name: &str| -> Result<Mat> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Validation(vec![format!("checkpoint missing parameter {name:?}")]))
    };
    let audio = ProjectionHead {
        w1: take("audio.w1")?,
        b1: take("audio.b1")?,
        w2: take("audio.w2")?,
        b2: take("audio.b2")?,
        final_relu: cfg.final_relu,
    };
    let text = ProjectionHead {
        w1: take("text.w1")?,
        b1: take("text.b1")?,
        w2: take("text.w2")?,
        b2: take("text.b2")?,
        final_relu: cfg.final_relu,
    };
    audio.validate()?;
    text.validate()?;
    Ok((audio, text, cfg))
}
