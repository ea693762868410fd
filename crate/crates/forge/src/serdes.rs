//! Binary format for instances and dataset files.
//!
//! Instance: magic "RPMI", version u16, seed u64, raster u16, answer u8,
//! n_meta u8, (attr u8, rule u8) pairs, 16 panels of 4 bytes each, then
//! 16 rasters of raster^2 bytes. Round-trips are bit-exact.
//!
//! Dataset file: magic "RPMD", version u16, count u32, raster u16, ruleset
//! (n u8 + pairs), then `count` length-prefixed (u32) instance payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::rules::{Attribute, PanelAttrs, RuleKind, RuleSpec};
use crate::{ForgeError, PuzzleInstance, Result};

const INSTANCE_MAGIC: &[u8; 4] = b"RPMI";
const DATASET_MAGIC: &[u8; 4] = b"RPMD";
const VERSION: u16 = 1;

impl PuzzleInstance {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 16 * self.raster_size as usize * self.raster_size as usize);
        out.extend_from_slice(INSTANCE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.raster_size.to_le_bytes());
        out.push(self.answer);
        out.push(self.metadata.len() as u8);
        for spec in &self.metadata {
            out.push(spec.attribute.code());
            out.push(spec.rule.code());
        }
        for p in &self.panels {
            out.extend_from_slice(&[p.shape, p.count, p.size, p.shade]);
        }
        for img in &self.images {
            out.extend_from_slice(img);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != INSTANCE_MAGIC {
            return Err(ForgeError::Format("bad instance magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(ForgeError::Format(format!(
                "unsupported instance version {version}"
            )));
        }
        let seed = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let raster_size = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        let answer = cur.take(1)?[0];
        if !(9..=16).contains(&answer) {
            return Err(ForgeError::Format(format!("answer index {answer} outside [9,16]")));
        }
        let n_meta = cur.take(1)?[0] as usize;
        let mut metadata = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let a = cur.take(1)?[0];
            let r = cur.take(1)?[0];
            metadata.push(RuleSpec {
                attribute: Attribute::from_code(a)
                    .ok_or_else(|| ForgeError::Format(format!("bad attribute code {a}")))?,
                rule: RuleKind::from_code(r)
                    .ok_or_else(|| ForgeError::Format(format!("bad rule code {r}")))?,
            });
        }
        let mut panels = Vec::with_capacity(16);
        for _ in 0..16 {
            let b = cur.take(4)?;
            panels.push(PanelAttrs {
                shape: b[0],
                count: b[1],
                size: b[2],
                shade: b[3],
            });
        }
        let px = raster_size as usize * raster_size as usize;
        let mut images = Vec::with_capacity(16);
        for _ in 0..16 {
            images.push(cur.take(px)?.to_vec());
        }
        if cur.pos != bytes.len() {
            return Err(ForgeError::Format("trailing bytes in instance".into()));
        }
        Ok(PuzzleInstance {
            seed,
            raster_size,
            panels,
            images,
            answer,
            metadata,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: u32,
    pub raster_size: u16,
    pub rules: Vec<RuleSpec>,
}

pub fn write_dataset<'a>(
    path: impl AsRef<Path>,
    header: &DatasetHeader,
    instances: impl Iterator<Item = &'a PuzzleInstance>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&header.count.to_le_bytes())?;
    w.write_all(&header.raster_size.to_le_bytes())?;
    w.write_all(&[header.rules.len() as u8])?;
    for spec in &header.rules {
        w.write_all(&[spec.attribute.code(), spec.rule.code()])?;
    }
    let mut written = 0u32;
    for inst in instances {
        let bytes = inst.to_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(&bytes)?;
        written += 1;
    }
    if written != header.count {
        return Err(ForgeError::Format(format!(
            "header promised {} instances, wrote {written}",
            header.count
        )));
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<PuzzleInstance>)> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut head = [0u8; 4];
    r.read_exact(&mut head)?;
    if &head != DATASET_MAGIC {
        return Err(ForgeError::Format(format!(
            "bad dataset magic in {}",
            path.as_ref().display()
        )));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(ForgeError::Format(format!("unsupported dataset version {version}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4);
    r.read_exact(&mut buf2)?;
    let raster_size = u16::from_le_bytes(buf2);
    let mut buf1 = [0u8; 1];
    r.read_exact(&mut buf1)?;
    let mut rules = Vec::with_capacity(buf1[0] as usize);
    for _ in 0..buf1[0] {
        let mut pair = [0u8; 2];
        r.read_exact(&mut pair)?;
        rules.push(RuleSpec {
            attribute: Attribute::from_code(pair[0])
                .ok_or_else(|| ForgeError::Format(format!("bad attribute code {}", pair[0])))?,
            rule: RuleKind::from_code(pair[1])
                .ok_or_else(|| ForgeError::Format(format!("bad rule code {}", pair[1])))?,
        });
    }
    let mut instances = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut buf4)?;
        let len = u32::from_le_bytes(buf4) as usize;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        instances.push(PuzzleInstance::from_bytes(&payload)?);
    }
    Ok((
        DatasetHeader {
            count,
            raster_size,
            rules,
        },
        instances,
    ))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ForgeError::Format(format!(
                "truncated payload at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
