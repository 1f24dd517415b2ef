//! Embedding bags, concept sets and the KDVE on-disk format.
//!
//! KDVE layout, all integers little-endian:
//!
//! ```text
//! "KDVE" | version u32 | dim u32 | bag_count u32
//! per bag: id_len u16 | id (UTF-8) | label u8 | count u32 | count*dim f32
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::Label;

pub const KDVE_MAGIC: &[u8; 4] = b"KDVE";
pub const KDVE_VERSION: u32 = 1;
pub const DEFAULT_DIM: usize = 512;
/// 7x7 token grid of a ViT-B/32 encoder at 224 px.
pub const DEFAULT_INSTANCES: usize = 49;

const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not a KDVE file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported KDVE version {found} (expected {KDVE_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("file ends early: need {needed} bytes at offset {offset}, have {available}")]
    TruncatedFile {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{extra} unread bytes after the last declared bag")]
    TrailingBytes { extra: usize },
    #[error("embedding width {found} does not match {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("bag id is not valid UTF-8")]
    InvalidId,
    #[error("bag id longer than {} bytes", u16::MAX)]
    IdTooLong,
    #[error("unknown label code {0}")]
    InvalidLabel(u8),
    #[error("bag {0:?} has no instances")]
    EmptyBag(String),
    #[error("bag {id:?} row {row} is zero or non-finite")]
    BadRow { id: String, row: usize },
    #[error("vector norm below {MIN_NORM:e}")]
    ZeroVector,
    #[error("prompt file line {line}: {reason}")]
    BadPrompt { line: usize, reason: String },
    #[error("concept set: {0}")]
    BadConcepts(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One tile's instance embeddings, stored exactly as on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBag {
    pub id: String,
    pub label: Label,
    pub dim: usize,
    /// Row-major `count x dim`.
    pub instances: Vec<f32>,
}

impl EmbeddingBag {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.instances.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.instances[i * self.dim..(i + 1) * self.dim]
    }

    /// Slide prefix of the id (`slide/...`), or the whole id.
    pub fn slide_id(&self) -> &str {
        self.id.split('/').next().unwrap_or(&self.id)
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.instances.is_empty() {
            return Err(StoreError::EmptyBag(self.id.clone()));
        }
        if self.dim == 0 || self.instances.len() % self.dim != 0 {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                found: self.instances.len(),
            });
        }
        for i in 0..self.len() {
            let row = self.row(i);
            let n: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            if !n.is_finite() || n.sqrt() <= MIN_NORM {
                return Err(StoreError::BadRow {
                    id: self.id.clone(),
                    row: i,
                });
            }
        }
        Ok(())
    }
}

pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>, StoreError> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(StoreError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, StoreError> {
    let (na, nb) = (norm(a), norm(b));
    if !(na > MIN_NORM && nb > MIN_NORM) {
        return Err(StoreError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Serializes bags into KDVE bytes. `dim` is written to the header and
/// every bag must match it.
pub fn encode_kdve(dim: usize, bags: &[EmbeddingBag]) -> Result<Vec<u8>, StoreError> {
    let payload: usize = bags
        .iter()
        .map(|b| 7 + b.id.len() + 4 * b.instances.len())
        .sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(KDVE_MAGIC);
    out.extend_from_slice(&KDVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(bags.len() as u32).to_le_bytes());
    for bag in bags {
        if bag.dim != dim {
            return Err(StoreError::DimMismatch {
                expected: dim,
                found: bag.dim,
            });
        }
        bag.validate()?;
        let id_len = u16::try_from(bag.id.len()).map_err(|_| StoreError::IdTooLong)?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(bag.id.as_bytes());
        out.push(bag.label.index() as u8);
        out.extend_from_slice(&(bag.len() as u32).to_le_bytes());
        for v in &bag.instances {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(StoreError::TruncatedFile {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses KDVE bytes, returning the header width and every bag.
pub fn decode_kdve(bytes: &[u8]) -> Result<(usize, Vec<EmbeddingBag>), StoreError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if &magic != KDVE_MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != KDVE_VERSION {
        return Err(StoreError::VersionMismatch { found: version });
    }
    let dim = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut bags = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = cur.u16()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| StoreError::InvalidId)?
            .to_owned();
        let code = cur.take(1)?[0];
        let label = Label::from_index(code as usize).ok_or(StoreError::InvalidLabel(code))?;
        let n = cur.u32()? as usize;
        let floats = n
            .checked_mul(dim)
            .and_then(|f| f.checked_mul(4))
            .ok_or(StoreError::TruncatedFile {
                offset: cur.pos,
                needed: usize::MAX,
                available: bytes.len() - cur.pos,
            })?;
        let raw = cur.take(floats)?;
        let instances = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bag = EmbeddingBag {
            id,
            label,
            dim,
            instances,
        };
        bag.validate()?;
        bags.push(bag);
    }
    if cur.pos != bytes.len() {
        return Err(StoreError::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    Ok((dim, bags))
}

/// Writes `bags` to `path`; all bags must share one width.
pub fn write_bags(bags: &[EmbeddingBag], path: impl AsRef<Path>) -> Result<(), StoreError> {
    let dim = bags.first().map_or(0, |b| b.dim);
    fs::write(path, encode_kdve(dim, bags)?)?;
    Ok(())
}

pub fn read_bags(path: impl AsRef<Path>) -> Result<Vec<EmbeddingBag>, StoreError> {
    Ok(decode_kdve(&fs::read(path)?)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptLevel {
    Instance,
    Bag,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLine {
    pub class: Label,
    pub level: PromptLevel,
    pub text: String,
}

/// Parses `class<TAB>level<TAB>text` lines. Blank lines and `#` comments
/// are skipped.
pub fn parse_prompts(src: &str) -> Result<Vec<PromptLine>, StoreError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| StoreError::BadPrompt { line: i + 1, reason };
        let mut parts = line.splitn(3, '\t');
        let (Some(class), Some(level), Some(text)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected class<TAB>level<TAB>text".into()));
        };
        let class = class.parse::<Label>().map_err(bad)?;
        let level = match level.trim() {
            "instance" => PromptLevel::Instance,
            "bag" => PromptLevel::Bag,
            other => return Err(bad(format!("unknown level {other:?}"))),
        };
        let text = text.trim();
        if text.is_empty() {
            return Err(bad("empty text".into()));
        }
        out.push(PromptLine {
            class,
            level,
            text: text.to_owned(),
        });
    }
    Ok(out)
}

pub fn format_prompts(lines: &[PromptLine]) -> String {
    lines
        .iter()
        .map(|p| {
            let level = match p.level {
                PromptLevel::Instance => "instance",
                PromptLevel::Bag => "bag",
            };
            format!("{}\t{}\t{}\n", p.class, level, p.text)
        })
        .collect()
}

/// Frozen expert knowledge: instance-level concepts and one class prompt
/// per class, all unit-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    pub dim: usize,
    /// Row-major `M x dim`.
    pub instance_concepts: Vec<f64>,
    pub instance_classes: Vec<Label>,
    pub names: Vec<String>,
    /// Indexed by [`Label::index`].
    pub class_prompts: [Vec<f64>; 2],
    pub class_prompt_names: [String; 2],
}

impl ConceptSet {
    pub fn num_instance_concepts(&self) -> usize {
        self.instance_classes.len()
    }

    pub fn concept(&self, j: usize) -> &[f64] {
        &self.instance_concepts[j * self.dim..(j + 1) * self.dim]
    }

    /// Builds a concept set from parsed prompt lines and their embeddings,
    /// matched by text.
    pub fn from_prompts(
        prompts: &[PromptLine],
        embeddings: &[EmbeddingBag],
    ) -> Result<Self, StoreError> {
        let by_id: HashMap<&str, &EmbeddingBag> =
            embeddings.iter().map(|b| (b.id.as_str(), b)).collect();
        let dim = embeddings.first().map_or(0, |b| b.dim);
        let mut set = ConceptSet {
            dim,
            instance_concepts: Vec::new(),
            instance_classes: Vec::new(),
            names: Vec::new(),
            class_prompts: [Vec::new(), Vec::new()],
            class_prompt_names: [String::new(), String::new()],
        };
        for p in prompts {
            let bag = by_id.get(p.text.as_str()).ok_or_else(|| {
                StoreError::BadConcepts(format!("no embedding for prompt {:?}", p.text))
            })?;
            if bag.dim != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    found: bag.dim,
                });
            }
            let row: Vec<f64> = bag.row(0).iter().map(|&v| f64::from(v)).collect();
            let row = unit_normalize(&row)?;
            match p.level {
                PromptLevel::Instance => {
                    set.instance_concepts.extend(row);
                    set.instance_classes.push(p.class);
                    set.names.push(p.text.clone());
                }
                PromptLevel::Bag => {
                    let slot = p.class.index();
                    if !set.class_prompts[slot].is_empty() {
                        return Err(StoreError::BadConcepts(format!(
                            "more than one class prompt for {}",
                            p.class
                        )));
                    }
                    set.class_prompts[slot] = row;
                    set.class_prompt_names[slot] = p.text.clone();
                }
            }
        }
        set.check()?;
        Ok(set)
    }

    pub fn check(&self) -> Result<(), StoreError> {
        for label in [Label::NoPlexus, Label::Plexus] {
            if self.class_prompts[label.index()].len() != self.dim {
                return Err(StoreError::BadConcepts(format!("missing class prompt for {label}")));
            }
            if !self.instance_classes.contains(&label) {
                return Err(StoreError::BadConcepts(format!(
                    "no instance concept for {label}"
                )));
            }
        }
        if self.instance_concepts.len() != self.instance_classes.len() * self.dim {
            return Err(StoreError::BadConcepts("concept matrix shape".into()));
        }
        Ok(())
    }

    /// Concept and prompt rows as KDVE records keyed by prompt text.
    pub fn to_bags(&self) -> Vec<EmbeddingBag> {
        let to32 = |r: &[f64]| r.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        let mut out: Vec<EmbeddingBag> = (0..self.num_instance_concepts())
            .map(|j| EmbeddingBag {
                id: self.names[j].clone(),
                label: self.instance_classes[j],
                dim: self.dim,
                instances: to32(self.concept(j)),
            })
            .collect();
        for label in [Label::Plexus, Label::NoPlexus] {
            out.push(EmbeddingBag {
                id: self.class_prompt_names[label.index()].clone(),
                label,
                dim: self.dim,
                instances: to32(&self.class_prompts[label.index()]),
            });
        }
        out
    }

    pub fn prompt_lines(&self) -> Vec<PromptLine> {
        let mut out: Vec<PromptLine> = self
            .names
            .iter()
            .zip(&self.instance_classes)
            .map(|(n, c)| PromptLine {
                class: *c,
                level: PromptLevel::Instance,
                text: n.clone(),
            })
            .collect();
        for label in [Label::Plexus, Label::NoPlexus] {
            out.push(PromptLine {
                class: label,
                level: PromptLevel::Bag,
                text: self.class_prompt_names[label.index()].clone(),
            });
        }
        out
    }
}
