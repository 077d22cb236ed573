//! On-disk formats.
//!
//! * events: JSON lines, `{"id", "label", "points": [[x, y, z, charge], ...]}`
//! * images: `ATC1` magic, LE u32 count/height/width, f32 LE row-major pixels
//! * latents: `ATL1` magic, LE u32 count/dim, f32 LE row-major values
//! * labels: CSV with header `id,label`, aligned with the binary file by index

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::latent::LatentMatrix;
use crate::pipeline::ImageGrid;
use crate::simkit::{EventCloud, Species};

pub const IMAGE_MAGIC: &[u8; 4] = b"ATC1";
pub const LATENT_MAGIC: &[u8; 4] = b"ATL1";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_events(path: &Path, events: &[EventCloud]) -> Result<()> {
    let mut out = create(path)?;
    for e in events {
        let line = serde_json::to_string(e).map_err(|err| Error::parse(path, err.to_string()))?;
        writeln!(out, "{line}").map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<EventCloud>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: EventCloud =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        event.validate()?;
        events.push(event);
    }
    Ok(events)
}

fn encode_f32_matrix(magic: &[u8; 4], header: &[u32], values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 * header.len());
    buf.extend_from_slice(magic);
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

/// Parses the magic, `header_words` u32 fields and an f32 payload of
/// `payload(header)` values.
fn decode_f32_matrix(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 4],
    header_words: usize,
    payload: impl Fn(&[u32]) -> u64,
) -> Result<(Vec<u32>, Vec<f32>)> {
    let head_len = 4 + 4 * header_words;
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < head_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: head_len as u64,
            actual: bytes.len() as u64,
        });
    }
    let header: Vec<u32> =
        bytes[4..head_len].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let count = payload(&header);
    let expected = head_len as u64 + 4 * count;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, actual: bytes.len() as u64 });
    }
    let values: Vec<f32> =
        bytes[head_len..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { path: path.to_path_buf(), index });
    }
    Ok((header, values))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::contract(format!("{what} {v} does not fit in u32")))
}

pub fn encode_images(images: &[ImageGrid]) -> Result<Vec<u8>> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::contract("all images in a dataset must share dimensions"));
    }
    let header = [to_u32(images.len(), "image count")?, to_u32(h, "height")?, to_u32(w, "width")?];
    Ok(encode_f32_matrix(IMAGE_MAGIC, &header, images.iter().flat_map(|i| i.values.iter().copied())))
}

pub fn write_images(path: &Path, images: &[ImageGrid]) -> Result<()> {
    write_bytes(path, &encode_images(images)?)
}

pub fn decode_images(path: &Path, bytes: &[u8]) -> Result<Vec<ImageGrid>> {
    let (header, values) = decode_f32_matrix(path, bytes, IMAGE_MAGIC, 3, |h| h[0] as u64 * h[1] as u64 * h[2] as u64)?;
    let (count, h, w) = (header[0] as usize, header[1] as usize, header[2] as usize);
    if count > 0 && (h == 0 || w == 0) {
        return Err(Error::parse(path, "image dimensions must be > 0"));
    }
    Ok((0..count)
        .map(|i| ImageGrid {
            height: h,
            width: w,
            values: values[i * h * w..(i + 1) * h * w].iter().map(|v| *v as f64).collect(),
        })
        .collect())
}

pub fn read_images(path: &Path) -> Result<Vec<ImageGrid>> {
    decode_images(path, &read_bytes(path)?)
}

pub fn encode_latents(latents: &LatentMatrix) -> Result<Vec<u8>> {
    let header = [to_u32(latents.rows, "latent count")?, to_u32(latents.dim, "latent dim")?];
    Ok(encode_f32_matrix(LATENT_MAGIC, &header, latents.values.iter().copied()))
}

pub fn write_latents(path: &Path, latents: &LatentMatrix) -> Result<()> {
    write_bytes(path, &encode_latents(latents)?)
}

pub fn decode_latents(path: &Path, bytes: &[u8]) -> Result<LatentMatrix> {
    let (header, values) = decode_f32_matrix(path, bytes, LATENT_MAGIC, 2, |h| h[0] as u64 * h[1] as u64)?;
    LatentMatrix::new(header[0] as usize, header[1] as usize, values.into_iter().map(f64::from).collect())
}

/// Loads an `ATL1` file, rejecting bad magic, truncation and non-finite values.
pub fn read_latents(path: &Path) -> Result<LatentMatrix> {
    decode_latents(path, &read_bytes(path)?)
}

/// One row of a labels sidecar. `label` is `None` for unlabelled events.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRow {
    pub id: String,
    pub label: Option<String>,
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let to_err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["id", "label"]).map_err(to_err)?;
    for r in rows {
        w.write_record([r.id.as_str(), r.label.as_deref().unwrap_or("")]).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        let id = record.get(0).unwrap_or("").to_string();
        let label = record.get(1).map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        rows.push(LabelRow { id, label });
    }
    Ok(rows)
}

pub fn event_label_rows(events: &[EventCloud]) -> Vec<LabelRow> {
    events.iter().map(|e| LabelRow { id: e.id.clone(), label: e.label.map(|l| l.as_str().to_string()) }).collect()
}

/// Integer class ids for label strings: species names map to their fixed
/// index, integers map to themselves, anything else is rejected.
pub fn label_ids(path: &Path, rows: &[LabelRow]) -> Result<Vec<Option<usize>>> {
    rows.iter()
        .map(|r| match r.label.as_deref() {
            None => Ok(None),
            Some(s) => {
                if let Some(sp) = Species::parse(s) {
                    Ok(Some(sp.index()))
                } else {
                    s.parse::<usize>()
                        .map(Some)
                        .map_err(|_| Error::parse(path, format!("unknown label {s:?} for id {}", r.id)))
                }
            }
        })
        .collect()
}

pub fn read_label_ids(path: &Path) -> Result<(Vec<String>, Vec<Option<usize>>)> {
    let rows = read_labels(path)?;
    let ids = label_ids(path, &rows)?;
    Ok((rows.into_iter().map(|r| r.id).collect(), ids))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
