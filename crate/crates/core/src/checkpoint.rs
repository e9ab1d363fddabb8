//! Binary model checkpoints.
//!
//! Layout: `FCKP`, u32 version, u32 section count, then per section a 4-byte
//! tag, a u32-length-prefixed JSON header, a u32 matrix count and each
//! matrix as u32 rows, u32 cols and little-endian f64 values. Matrices are
//! stored in parameter order, so a checkpoint round-trips bit-exactly.
//! Optimizer state is not stored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ItemEmbedding};
use crate::error::{Error, Result};
use crate::fame::{FameConfig, FameLayer, FameModel};
use crate::numerics::{HasParams, Matrix, Param, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const BACKBONE_TAG: &[u8; 4] = b"BKBN";
const FAME_TAG: &[u8; 4] = b"FAME";

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ItemKind {
    Table,
    Projected,
}

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    config: BackboneConfig,
    items: ItemKind,
    num_items: usize,
    text_dim: Option<usize>,
}

struct Section {
    tag: [u8; 4],
    header: Vec<u8>,
    matrices: Vec<Matrix>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_sections(sections: &[Section]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, sections.len())?;
    for s in sections {
        out.extend_from_slice(&s.tag);
        put_u32(&mut out, s.header.len())?;
        out.extend_from_slice(&s.header);
        put_u32(&mut out, s.matrices.len())?;
        for m in &s.matrices {
            put_u32(&mut out, m.rows())?;
            put_u32(&mut out, m.cols())?;
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn decode_sections(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut sections = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let mut tag = [0u8; 4];
        tag.copy_from_slice(r.take(4)?);
        let hlen = r.u32()?;
        let header = r.take(hlen)?.to_vec();
        let n = r.u32()?;
        let mut matrices = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let rows = r.u32()?;
            let cols = r.u32()?;
            let len = rows
                .checked_mul(cols)
                .and_then(|v| v.checked_mul(8))
                .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
            let data = r
                .take(len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            matrices.push(Matrix::from_vec(rows, cols, data)?);
        }
        sections.push(Section { tag, header, matrices });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(sections)
}

fn backbone_section(b: &Backbone) -> Result<Section> {
    let (items, text_dim) = match &b.items {
        ItemEmbedding::Table(_) => (ItemKind::Table, None),
        ItemEmbedding::Projected { text, .. } => (ItemKind::Projected, Some(text.cols())),
    };
    let header = BackboneHeader {
        config: b.config.clone(),
        items,
        num_items: b.num_items(),
        text_dim,
    };
    let mut matrices = Vec::new();
    if let ItemEmbedding::Projected { text, .. } = &b.items {
        matrices.push(text.clone());
    }
    matrices.extend(b.params().into_iter().map(|p| p.value.clone()));
    Ok(Section {
        tag: *BACKBONE_TAG,
        header: serde_json::to_vec(&header)?,
        matrices,
    })
}

fn fill_params<M: HasParams>(model: &mut M, mut values: impl Iterator<Item = Matrix>, what: &str) -> Result<()> {
    for p in model.params_mut() {
        let v = values
            .next()
            .ok_or_else(|| Error::Format(format!("{what}: too few matrices")))?;
        if v.shape() != p.shape() {
            return Err(Error::Format(format!(
                "{what}: matrix is {:?}, expected {:?}",
                v.shape(),
                p.shape()
            )));
        }
        *p = Param::new(v);
    }
    if values.next().is_some() {
        return Err(Error::Format(format!("{what}: too many matrices")));
    }
    Ok(())
}

fn backbone_from_section(s: Section) -> Result<Backbone> {
    if &s.tag != BACKBONE_TAG {
        return Err(Error::Format("expected a backbone section".into()));
    }
    let header: BackboneHeader = serde_json::from_slice(&s.header)?;
    let d = header.config.d;
    let mut values = s.matrices.into_iter();
    let items = match header.items {
        ItemKind::Table => ItemEmbedding::Table(Param::zeros(header.num_items, d)),
        ItemKind::Projected => {
            let text = values
                .next()
                .ok_or_else(|| Error::Format("projected items without text matrix".into()))?;
            let td = header.text_dim.unwrap_or(text.cols());
            if text.cols() != td || text.rows() != header.num_items {
                return Err(Error::Format("text matrix shape disagrees with header".into()));
            }
            ItemEmbedding::Projected {
                text,
                weight: Param::zeros(td, d),
                bias: Param::zeros(1, d),
            }
        }
    };
    let mut b = Backbone::with_items(header.config, items, &mut Rng::new(0))?;
    fill_params(&mut b, values, "backbone")?;
    Ok(b)
}

pub fn encode_backbone(b: &Backbone) -> Result<Vec<u8>> {
    encode_sections(&[backbone_section(b)?])
}

pub fn decode_backbone(bytes: &[u8]) -> Result<Backbone> {
    let mut sections = decode_sections(bytes)?;
    if sections.len() != 1 {
        return Err(Error::Format(format!(
            "backbone checkpoint has {} sections, expected 1",
            sections.len()
        )));
    }
    backbone_from_section(sections.remove(0))
}

pub fn encode_fame(m: &FameModel) -> Result<Vec<u8>> {
    let fame = Section {
        tag: *FAME_TAG,
        header: serde_json::to_vec(&m.layer.config)?,
        matrices: m.layer.params().into_iter().map(|p| p.value.clone()).collect(),
    };
    encode_sections(&[backbone_section(&m.backbone)?, fame])
}

pub fn decode_fame(bytes: &[u8]) -> Result<FameModel> {
    let mut sections = decode_sections(bytes)?;
    if sections.len() != 2 || &sections[1].tag != FAME_TAG {
        return Err(Error::Format("not a FAME checkpoint".into()));
    }
    let fs = sections.pop().expect("two sections");
    let backbone = backbone_from_section(sections.pop().expect("two sections"))?;
    let config: FameConfig = serde_json::from_slice(&fs.header)?;
    let mut layer = FameLayer::random(config, &mut Rng::new(0))?;
    fill_params(&mut layer, fs.matrices.into_iter(), "fame layer")?;
    Ok(FameModel { backbone, layer })
}

/// True if `bytes` hold a FAME checkpoint rather than a plain backbone.
pub fn is_fame_checkpoint(bytes: &[u8]) -> bool {
    decode_sections(bytes).is_ok_and(|s| s.iter().any(|s| &s.tag == FAME_TAG))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_backbone(path: impl AsRef<Path>, b: &Backbone) -> Result<()> {
    write_bytes(path.as_ref(), &encode_backbone(b)?)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<Backbone> {
    decode_backbone(&read_bytes(path.as_ref())?)
}

pub fn save_fame(path: impl AsRef<Path>, m: &FameModel) -> Result<()> {
    write_bytes(path.as_ref(), &encode_fame(m)?)
}

pub fn load_fame(path: impl AsRef<Path>) -> Result<FameModel> {
    decode_fame(&read_bytes(path.as_ref())?)
}
