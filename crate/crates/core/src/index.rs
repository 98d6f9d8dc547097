//! Offline gallery index: manifest/blob ingestion, validation and the
//! `MATIRIDX` binary file format.
//!
//! Layout of an index file (all integers little-endian):
//!
//! ```text
//! magic      "MATIRIDX"           8 bytes
//! version    u32
//! dimension  u32
//! images     u64
//! regions    u64
//! per image: id (u32 len + utf8), width u32, height u32,
//!            uri flag u8 (+ u32 len + utf8), region count u32,
//!            per region: mask_id u64, bbox 4 x f64, mask h u32, w u32,
//!                        run count u32, runs u32..., embedding_row u64
//! embeddings regions x dimension f32, row-major
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::bbox_from_mask;
use crate::model::{BoundingBox, ImageEntry, RegionMask, RegionRecord};

pub const MAGIC: &[u8; 8] = b"MATIRIDX";
pub const FORMAT_VERSION: u32 = 1;

const CHUNK_BYTES: usize = 1 << 20;

/// One region line of the JSONL manifest.
///
/// A line carrying only the image fields declares an image without regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<RegionMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_row: Option<usize>,
}

#[derive(Debug, Error)]
pub struct BuildError {
    /// 1-based manifest line the failure is attributed to, if any.
    pub line: Option<usize>,
    pub kind: BuildErrorKind,
}

impl fmt::Display for BuildError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "manifest line {line}: {}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

#[derive(Debug, Error)]
pub enum BuildErrorKind {
    #[error("invalid dimension {0}")]
    InvalidDimension(usize),
    #[error("cannot parse line: {0}")]
    Parse(String),
    #[error("region fields must be all present or all absent")]
    PartialRegion,
    #[error("image {image_id:?} declared with conflicting attributes: {detail}")]
    InconsistentImage { image_id: String, detail: String },
    #[error("duplicate mask {mask_id} in image {image_id:?}")]
    DuplicateMask { image_id: String, mask_id: u64 },
    #[error("mask {mask_id} of image {image_id:?} is {mask_h}x{mask_w}, image is {img_h}x{img_w}")]
    MaskSize {
        image_id: String,
        mask_id: u64,
        mask_h: u32,
        mask_w: u32,
        img_h: u32,
        img_w: u32,
    },
    #[error("mask {mask_id} of image {image_id:?} has no foreground")]
    EmptyMask { image_id: String, mask_id: u64 },
    #[error(
        "bbox of mask {mask_id} in image {image_id:?} is {manifest:?}, mask gives {derived:?}"
    )]
    BboxMismatch {
        image_id: String,
        mask_id: u64,
        manifest: [f64; 4],
        derived: [f64; 4],
    },
    #[error("embedding row {row} used twice")]
    DuplicateRow { row: usize },
    #[error("embedding row {row} outside 0..{total}")]
    RowOutOfRange { row: usize, total: usize },
    #[error("embedding size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("embedding row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("embedding row {row} has non-finite components")]
    NonFinite { row: usize },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl BuildError {
    fn at(line: usize, kind: BuildErrorKind) -> Self {
        Self {
            line: Some(line),
            kind,
        }
    }

    fn global(kind: BuildErrorKind) -> Self {
        Self { line: None, kind }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
    #[error("index file is truncated")]
    Truncated,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated
        } else {
            FormatError::Io(e)
        }
    }
}

/// Summary counts over an index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub images: usize,
    pub regions: usize,
    pub min_regions: usize,
    pub mean_regions: f64,
    pub max_regions: usize,
    pub dimension: usize,
}

/// The region-embedding store and its image metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    dimension: usize,
    version: u32,
    images: Vec<ImageEntry>,
    embeddings: Vec<f32>,
    by_id: HashMap<String, usize>,
}

impl GalleryIndex {
    /// Assembles an index from in-memory parts, validating every invariant
    /// and L2-normalizing `embeddings` (row-major, `dimension` per row).
    pub fn from_entries(
        dimension: usize,
        images: Vec<ImageEntry>,
        mut embeddings: Vec<f32>,
    ) -> Result<Self, BuildError> {
        if dimension == 0 {
            return Err(BuildError::global(BuildErrorKind::InvalidDimension(
                dimension,
            )));
        }
        let total: usize = images.iter().map(|e| e.regions.len()).sum();
        let expected = (total * dimension * 4) as u64;
        let actual = (embeddings.len() * 4) as u64;
        if expected != actual {
            return Err(BuildError::global(BuildErrorKind::SizeMismatch {
                expected,
                actual,
            }));
        }
        let mut seen_rows = vec![false; total];
        let mut by_id = HashMap::with_capacity(images.len());
        for (i, entry) in images.iter().enumerate() {
            if by_id.insert(entry.image_id.clone(), i).is_some() {
                return Err(BuildError::global(BuildErrorKind::InconsistentImage {
                    image_id: entry.image_id.clone(),
                    detail: "image id appears twice".into(),
                }));
            }
            let mut ids = std::collections::HashSet::new();
            for r in &entry.regions {
                check_region(entry, r.mask_id, &r.mask, &r.bbox).map_err(BuildError::global)?;
                if !ids.insert(r.mask_id) {
                    return Err(BuildError::global(BuildErrorKind::DuplicateMask {
                        image_id: entry.image_id.clone(),
                        mask_id: r.mask_id,
                    }));
                }
                claim_row(&mut seen_rows, r.embedding_row).map_err(BuildError::global)?;
            }
        }
        normalize_rows(&mut embeddings, dimension).map_err(BuildError::global)?;
        Ok(Self {
            dimension,
            version: FORMAT_VERSION,
            images,
            embeddings,
            by_id,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn total_regions(&self) -> usize {
        self.embeddings.len() / self.dimension
    }

    /// Row-major normalized embedding block.
    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dimension..(row + 1) * self.dimension]
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageEntry> {
        self.by_id.get(image_id).map(|&i| &self.images[i])
    }

    pub fn stats(&self) -> IndexStats {
        index_stats(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        save_index(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        load_index(path)
    }

    /// Writes the index back out as a manifest and an embedding blob.
    pub fn export_manifest(
        &self,
        mut manifest: impl Write,
        mut blob: impl Write,
    ) -> io::Result<()> {
        for entry in &self.images {
            let base = ManifestLine {
                image_id: entry.image_id.clone(),
                width: entry.width,
                height: entry.height,
                uri: entry.uri.clone(),
                mask_id: None,
                bbox: None,
                rle: None,
                embedding_row: None,
            };
            if entry.regions.is_empty() {
                serde_json::to_writer(&mut manifest, &base)?;
                manifest.write_all(b"\n")?;
            }
            for r in &entry.regions {
                let line = ManifestLine {
                    mask_id: Some(r.mask_id),
                    bbox: Some(r.bbox),
                    rle: Some(r.mask.clone()),
                    embedding_row: Some(r.embedding_row),
                    ..base.clone()
                };
                serde_json::to_writer(&mut manifest, &line)?;
                manifest.write_all(b"\n")?;
            }
        }
        write_f32_block(&mut blob, &self.embeddings)
    }
}

fn check_region(
    entry: &ImageEntry,
    mask_id: u64,
    mask: &RegionMask,
    bbox: &BoundingBox,
) -> Result<(), BuildErrorKind> {
    if mask.height() != entry.height || mask.width() != entry.width {
        return Err(BuildErrorKind::MaskSize {
            image_id: entry.image_id.clone(),
            mask_id,
            mask_h: mask.height(),
            mask_w: mask.width(),
            img_h: entry.height,
            img_w: entry.width,
        });
    }
    let derived = bbox_from_mask(mask).map_err(|_| BuildErrorKind::EmptyMask {
        image_id: entry.image_id.clone(),
        mask_id,
    })?;
    if derived != *bbox {
        return Err(BuildErrorKind::BboxMismatch {
            image_id: entry.image_id.clone(),
            mask_id,
            manifest: bbox.to_array(),
            derived: derived.to_array(),
        });
    }
    Ok(())
}

fn claim_row(seen: &mut [bool], row: usize) -> Result<(), BuildErrorKind> {
    match seen.get_mut(row) {
        None => Err(BuildErrorKind::RowOutOfRange {
            row,
            total: seen.len(),
        }),
        Some(true) => Err(BuildErrorKind::DuplicateRow { row }),
        Some(slot) => {
            *slot = true;
            Ok(())
        }
    }
}

fn normalize_rows(embeddings: &mut [f32], dimension: usize) -> Result<(), BuildErrorKind> {
    for (row, v) in embeddings.chunks_exact_mut(dimension).enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(BuildErrorKind::NonFinite { row });
        }
        let norm = v
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(BuildErrorKind::ZeroNorm { row });
        }
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    Ok(())
}

/// Reads until `buf` is full or the reader is exhausted.
fn fill(reader: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match reader.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// Reads a headerless little-endian f32 stream, returning the values and the
/// total number of bytes seen (which may exceed `expected_values * 4`).
fn read_f32_stream(reader: &mut impl Read, expected_values: usize) -> io::Result<(Vec<f32>, u64)> {
    let mut out = Vec::with_capacity(expected_values);
    let mut buf = vec![0u8; CHUNK_BYTES];
    let mut seen = 0u64;
    loop {
        let n = fill(reader, &mut buf)?;
        if n == 0 {
            break;
        }
        seen += n as u64;
        let room = (expected_values - out.len()) * 4;
        let take = n.min(room) / 4 * 4;
        out.extend(
            buf[..take]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        if n < buf.len() {
            break;
        }
    }
    Ok((out, seen))
}

fn write_f32_block(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(CHUNK_BYTES);
    for chunk in values.chunks(CHUNK_BYTES / 4) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Ingests a JSONL manifest and its embedding blob.
///
/// Regions keep manifest order within an image; images are ordered by first
/// appearance. Every stored row is L2-normalized.
pub fn build_index(
    manifest: impl BufRead,
    mut blob: impl Read,
    dimension: usize,
) -> Result<GalleryIndex, BuildError> {
    if dimension == 0 {
        return Err(BuildError::global(BuildErrorKind::InvalidDimension(
            dimension,
        )));
    }

    let mut images: Vec<ImageEntry> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut mask_ids: Vec<std::collections::HashSet<u64>> = Vec::new();
    // (row, line) pairs; rows are checked for contiguity once the total is known.
    let mut rows: Vec<(usize, usize)> = Vec::new();

    for (i, line) in manifest.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| BuildError::at(lineno, BuildErrorKind::Io(e)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| BuildError::at(lineno, BuildErrorKind::Parse(e.to_string())))?;

        let idx = match by_id.get(&rec.image_id) {
            Some(&idx) => {
                let e = &images[idx];
                if e.width != rec.width || e.height != rec.height || e.uri != rec.uri {
                    return Err(BuildError::at(
                        lineno,
                        BuildErrorKind::InconsistentImage {
                            image_id: rec.image_id,
                            detail: "width/height/uri differ from an earlier line".into(),
                        },
                    ));
                }
                idx
            }
            None => {
                by_id.insert(rec.image_id.clone(), images.len());
                images.push(ImageEntry {
                    image_id: rec.image_id.clone(),
                    width: rec.width,
                    height: rec.height,
                    uri: rec.uri.clone(),
                    regions: Vec::new(),
                });
                mask_ids.push(Default::default());
                images.len() - 1
            }
        };

        let (mask_id, bbox, mask, row) = match (rec.mask_id, rec.bbox, rec.rle, rec.embedding_row) {
            (None, None, None, None) => continue,
            (Some(m), Some(b), Some(r), Some(row)) => (m, b, r, row),
            _ => return Err(BuildError::at(lineno, BuildErrorKind::PartialRegion)),
        };
        let entry = &mut images[idx];
        check_region(entry, mask_id, &mask, &bbox).map_err(|k| BuildError::at(lineno, k))?;
        if !mask_ids[idx].insert(mask_id) {
            return Err(BuildError::at(
                lineno,
                BuildErrorKind::DuplicateMask {
                    image_id: entry.image_id.clone(),
                    mask_id,
                },
            ));
        }
        entry.regions.push(RegionRecord {
            mask_id,
            mask,
            bbox,
            embedding_row: row,
        });
        rows.push((row, lineno));
    }

    let total = rows.len();
    let mut row_line = vec![0usize; total];
    let mut seen = vec![false; total];
    for &(row, line) in &rows {
        claim_row(&mut seen, row).map_err(|k| BuildError::at(line, k))?;
        row_line[row] = line;
    }

    let expected_values = total * dimension;
    let (mut embeddings, seen_bytes) =
        read_f32_stream(&mut blob, expected_values).map_err(|e| BuildError::global(e.into()))?;
    if seen_bytes != (expected_values * 4) as u64 {
        return Err(BuildError::global(BuildErrorKind::SizeMismatch {
            expected: (expected_values * 4) as u64,
            actual: seen_bytes,
        }));
    }
    normalize_rows(&mut embeddings, dimension).map_err(|k| {
        let line = match &k {
            BuildErrorKind::ZeroNorm { row } | BuildErrorKind::NonFinite { row } => {
                Some(row_line[*row])
            }
            _ => None,
        };
        BuildError { line, kind: k }
    })?;

    Ok(GalleryIndex {
        dimension,
        version: FORMAT_VERSION,
        images,
        embeddings,
        by_id,
    })
}

pub fn index_stats(index: &GalleryIndex) -> IndexStats {
    let counts = index.images.iter().map(|e| e.regions.len());
    let regions: usize = counts.clone().sum();
    let n = index.images.len();
    IndexStats {
        images: n,
        regions,
        min_regions: counts.clone().min().unwrap_or(0),
        mean_regions: if n == 0 {
            0.0
        } else {
            regions as f64 / n as f64
        },
        max_regions: counts.max().unwrap_or(0),
        dimension: index.dimension,
    }
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub fn save_index(index: &GalleryIndex, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(index, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_index(index: &GalleryIndex, w: &mut impl Write) -> Result<(), FormatError> {
    w.write_all(MAGIC)?;
    w.write_all(&index.version.to_le_bytes())?;
    w.write_all(&(index.dimension as u32).to_le_bytes())?;
    w.write_all(&(index.images.len() as u64).to_le_bytes())?;
    w.write_all(&(index.total_regions() as u64).to_le_bytes())?;
    for e in &index.images {
        put_str(w, &e.image_id)?;
        w.write_all(&e.width.to_le_bytes())?;
        w.write_all(&e.height.to_le_bytes())?;
        match &e.uri {
            Some(uri) => {
                w.write_all(&[1])?;
                put_str(w, uri)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(e.regions.len() as u32).to_le_bytes())?;
        for r in &e.regions {
            w.write_all(&r.mask_id.to_le_bytes())?;
            for v in r.bbox.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&r.mask.height().to_le_bytes())?;
            w.write_all(&r.mask.width().to_le_bytes())?;
            w.write_all(&(r.mask.counts().len() as u32).to_le_bytes())?;
            for c in r.mask.counts() {
                w.write_all(&c.to_le_bytes())?;
            }
            w.write_all(&(r.embedding_row as u64).to_le_bytes())?;
        }
    }
    write_f32_block(w, &index.embeddings)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        let mut buf = Vec::new();
        (&mut self.inner).take(len as u64).read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(FormatError::Truncated);
        }
        String::from_utf8(buf).map_err(|_| FormatError::Corrupt("string is not utf-8".into()))
    }
}

pub fn load_index(path: impl AsRef<Path>) -> Result<GalleryIndex, FormatError> {
    read_index(BufReader::new(File::open(path)?))
}

pub fn read_index(inner: impl Read) -> Result<GalleryIndex, FormatError> {
    let mut r = Reader { inner };
    if &r.bytes::<8>()? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dimension = r.u32()? as usize;
    let n_images = r.u64()? as usize;
    let n_regions = r.u64()? as usize;
    if dimension == 0 {
        return Err(FormatError::Corrupt("dimension is zero".into()));
    }

    let mut images = Vec::with_capacity(n_images.min(1 << 20));
    let mut by_id = HashMap::with_capacity(n_images.min(1 << 20));
    let mut seen = vec![false; n_regions];
    for i in 0..n_images {
        let image_id = r.string()?;
        let width = r.u32()?;
        let height = r.u32()?;
        let uri = match r.u8()? {
            0 => None,
            1 => Some(r.string()?),
            f => return Err(FormatError::Corrupt(format!("bad uri flag {f}"))),
        };
        let n = r.u32()? as usize;
        let mut entry = ImageEntry {
            image_id,
            width,
            height,
            uri,
            regions: Vec::with_capacity(n.min(1 << 16)),
        };
        for _ in 0..n {
            let mask_id = r.u64()?;
            let bbox = BoundingBox::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let (mh, mw) = (r.u32()?, r.u32()?);
            let runs = r.u32()? as usize;
            let mut counts = Vec::with_capacity(runs.min(1 << 20));
            for _ in 0..runs {
                counts.push(r.u32()?);
            }
            let mask =
                RegionMask::new(mh, mw, counts).map_err(|e| FormatError::Corrupt(e.to_string()))?;
            let row = r.u64()? as usize;
            check_region(&entry, mask_id, &mask, &bbox)
                .map_err(|k| FormatError::Corrupt(k.to_string()))?;
            claim_row(&mut seen, row).map_err(|k| FormatError::Corrupt(k.to_string()))?;
            entry.regions.push(RegionRecord {
                mask_id,
                mask,
                bbox,
                embedding_row: row,
            });
        }
        if by_id.insert(entry.image_id.clone(), i).is_some() {
            return Err(FormatError::Corrupt(format!(
                "duplicate image {:?}",
                entry.image_id
            )));
        }
        images.push(entry);
    }
    if seen.iter().any(|s| !s) {
        return Err(FormatError::Corrupt(
            "region count disagrees with image table".into(),
        ));
    }

    let expected = n_regions * dimension;
    let (embeddings, seen_bytes) = read_f32_stream(&mut r.inner, expected)?;
    if seen_bytes < (expected * 4) as u64 {
        return Err(FormatError::Truncated);
    }
    if seen_bytes > (expected * 4) as u64 {
        return Err(FormatError::Corrupt(
            "trailing bytes after embedding block".into(),
        ));
    }

    Ok(GalleryIndex {
        dimension,
        version,
        images,
        embeddings,
        by_id,
    })
}
