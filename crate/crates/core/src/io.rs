//! File formats: Middlebury `.flo`, single-channel PFM, binary PPM, PNG
//! ingestion, the dataset layout, match lists and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::SamplePack;
use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::image::{Image, Mask};

const FLO_MAGIC: f32 = 202021.25;
/// Middlebury convention: components above this are unknown flow.
const FLO_UNKNOWN: f32 = 1e10;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.vectors().len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (v, &ok) in flow.vectors().iter().zip(flow.valid()) {
        let (u, w) = if ok { (v[0] as f32, v[1] as f32) } else { (FLO_UNKNOWN, FLO_UNKNOWN) };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let i32_at = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if bytes.len() < 12 || f32_at(0) != FLO_MAGIC {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let (w, h) = (i32_at(4), i32_at(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("bad dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::format(path, format!("expected {} bytes, got {}", 12 + 8 * w * h, bytes.len())));
    }
    let mut vectors = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let u = f32_at(12 + 8 * i);
        let v = f32_at(16 + 8 * i);
        let ok = u.is_finite() && v.is_finite() && u.abs() < 1e9 && v.abs() < 1e9;
        vectors.push(if ok { [u as f64, v as f64] } else { [0.0, 0.0] });
        valid.push(ok);
    }
    FlowField::from_parts(w, h, vectors, valid)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_bytes(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_bytes(path)?, path)
}

/// Single-channel little-endian PFM; rows are stored bottom to top.
pub fn encode_pfm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for x in 0..width {
            out.extend_from_slice(&(values[y * width + x] as f32).to_le_bytes());
        }
    }
    out
}

/// Splits `n` whitespace-separated header tokens (with `#` comments) off the
/// front of a netpbm-style file, returning them and the payload offset.
fn header_tokens(bytes: &[u8], n: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    if i >= bytes.len() {
        return Err(Error::format(path, "missing payload"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(s: &str, path: &Path) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(path, format!("bad dimension {s:?}")))
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "Pf" {
        return Err(Error::format(path, format!("expected single-channel Pf, got {:?}", tok[0])));
    }
    let w = parse_dim(&tok[1], path)?;
    let h = parse_dim(&tok[2], path)?;
    let scale: f64 = tok[3].parse().map_err(|_| Error::format(path, "bad scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "zero scale"));
    }
    let little = scale < 0.0;
    if bytes.len() != off + 4 * w * h {
        return Err(Error::format(path, format!("expected {} payload bytes, got {}", 4 * w * h, bytes.len() - off)));
    }
    let mut values = vec![0.0; w * h];
    for (k, chunk) in bytes[off..].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let row = h - 1 - k / w;
        values[row * w + k % w] = v as f64;
    }
    Ok((w, h, values))
}

pub fn write_pfm(path: &Path, map: &Image) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::ShapeMismatch("PFM maps are single-channel".into()));
    }
    write_bytes(path, &encode_pfm(map.width(), map.height(), map.data()))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let (w, h, v) = decode_pfm(&read_bytes(path)?, path)?;
    Image::from_vec(w, h, 1, v)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let v: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_bytes(path, &encode_pfm(mask.width(), mask.height(), &v))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (w, h, v) = decode_pfm(&read_bytes(path)?, path)?;
    Mask::from_vec(w, h, v.iter().map(|&x| x > 0.5).collect())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6, 8 bits per sample. Gray images are replicated to RGB.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(x, y);
            for c in 0..3 {
                out.push(to_u8(p[c.min(p.len() - 1)]));
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "P6" {
        return Err(Error::format(path, format!("expected P6, got {:?}", tok[0])));
    }
    let w = parse_dim(&tok[1], path)?;
    let h = parse_dim(&tok[2], path)?;
    let maxval: usize = tok[3].parse().map_err(|_| Error::format(path, "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if bytes.len() < off + 3 * w * h {
        return Err(Error::format(path, "truncated pixel data"));
    }
    let data = bytes[off..off + 3 * w * h].iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::from_vec(w, h, 3, data)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?, path)
}

/// Any 8/16-bit PNG, converted to RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let ch = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "palette not expanded")),
    };
    let line = info.line_size;
    Ok(Image::from_fn(w, h, 3, |x, y, c| {
        let px = &buf[y * line + x * ch..];
        let v = if ch < 3 { px[0] } else { px[c] };
        v as f64 / 255.0
    }))
}

/// PPM or PNG by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "png" => read_png(path),
        _ => read_ppm(path),
    }
}

/// All PPM/PNG files of a directory in name order.
pub fn read_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("ppm") | Some("png")
            )
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_image(p)).collect()
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample{index:05}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub count: usize,
    pub width: usize,
    pub height: usize,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    write_bytes(&dir.join("manifest.json"), s.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
}

/// A sample as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub query: Image,
    pub reference: Image,
    pub flow: FlowField,
    pub inj_mask: Mask,
    pub occ_mask: Mask,
}

pub fn write_sample(dir: &Path, pack: &SamplePack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(&dir.join("query.ppm"), &pack.query)?;
    write_ppm(&dir.join("reference.ppm"), &pack.reference)?;
    write_flo(&dir.join("flow.flo"), &pack.gt_flow)?;
    write_mask(&dir.join("inj_mask.pfm"), &pack.inj_mask)?;
    write_mask(&dir.join("occ_mask.pfm"), &pack.occ_mask)
}

pub fn read_sample(dir: &Path) -> Result<StoredSample> {
    Ok(StoredSample {
        query: read_ppm(&dir.join("query.ppm"))?,
        reference: read_ppm(&dir.join("reference.ppm"))?,
        flow: read_flo(&dir.join("flow.flo"))?,
        inj_mask: read_mask(&dir.join("inj_mask.pfm"))?,
        occ_mask: read_mask(&dir.join("occ_mask.pfm"))?,
    })
}

/// Sample directories of a dataset, in index order.
pub fn dataset_samples(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    let paths: Vec<PathBuf> = (0..manifest.count).map(|i| dir.join(sample_dir_name(i))).collect();
    if paths.is_empty() {
        return Err(Error::DatasetEmpty(dir.to_path_buf()));
    }
    Ok(paths)
}

/// One correspondence of a match list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub reference: [f64; 2],
    pub query: [f64; 2],
    pub confidence: f64,
}

pub fn write_matches(path: &Path, matches: &[MatchRecord]) -> Result<()> {
    let mut s = String::from("xr,yr,xq,yq,confidence\n");
    for m in matches {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.reference[0], m.reference[1], m.query[0], m.query[1], m.confidence
        ));
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_matches(path: &Path) -> Result<Vec<MatchRecord>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: bad number", n + 1)))?;
        if v.len() != 5 {
            return Err(Error::format(path, format!("line {}: expected 5 fields", n + 1)));
        }
        out.push(MatchRecord {
            reference: [v[0], v[1]],
            query: [v[2], v[3]],
            confidence: v[4],
        });
    }
    Ok(out)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: u64,
    pub params: Vec<f32>,
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * ckpt.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.arch_hash.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for p in &ckpt.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let footer = serde_json::to_vec(&ckpt.metadata).expect("metadata serializes");
    out.extend_from_slice(&(footer.len() as u32).to_le_bytes());
    out.extend_from_slice(&footer);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 24 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing PDCW magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let arch_hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let blob_end = 24usize
        .checked_add(n.checked_mul(4).ok_or_else(|| Error::format(path, "bad count"))?)
        .ok_or_else(|| Error::format(path, "bad count"))?;
    if bytes.len() < blob_end + 4 {
        return Err(Error::format(path, "truncated parameter blob"));
    }
    let params = bytes[24..blob_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let flen = u32::from_le_bytes(bytes[blob_end..blob_end + 4].try_into().unwrap()) as usize;
    let footer = bytes
        .get(blob_end + 4..blob_end + 4 + flen)
        .ok_or_else(|| Error::format(path, "truncated metadata"))?;
    let metadata = serde_json::from_slice(footer).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        arch_hash,
        params,
        metadata,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ckpt))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?, path)
}

/// Writes a CSV with a header row and one row per record.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}
