//! PFM and PNG files, and the bracket file naming convention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::consistency::BracketStack;
use crate::error::{Error, Result};
use crate::image::{HdrImage, Image, LdrImage};
use crate::radiometry::ExposureBracket;

/// Writes `PF` (RGB) or `Pf` (grey) little-endian, bottom row first.
pub fn write_pfm(path: &Path, hdr: &HdrImage) -> Result<()> {
    let (h, w, c) = hdr.shape();
    let tag = match c {
        3 => "PF",
        1 => "Pf",
        _ => return Err(Error::format(path, format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let mut out = Vec::with_capacity(32 + 4 * hdr.len());
    out.extend_from_slice(format!("{tag}\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(hdr.get(y, x, ch) as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn read_pfm(path: &Path) -> Result<HdrImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    let mut pos = 0;
    let c = match header_token(&bytes, &mut pos).as_deref() {
        Some("PF") => 3,
        Some("Pf") => 1,
        _ => return Err(bad("missing PF/Pf tag")),
    };
    let mut num = |what: &str| -> Result<String> { header_token(&bytes, &mut pos).ok_or_else(|| bad(what)) };
    let w: usize = num("width")?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = num("height")?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = num("scale")?.parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("bad scale"));
    }
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    let need = w * h * c * 4;
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    if pos + need != bytes.len() {
        return Err(bad("trailing bytes after pixel data"));
    }
    let little = scale < 0.0;
    let mut img = Image::zeros(h, w, c);
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let ch = k % c;
        let x = (k / c) % w;
        let y = h - 1 - k / (c * w);
        img.set(y, x, ch, v as f64);
    }
    HdrImage::new(img).map_err(|e| bad(&e.to_string()))
}

/// 8-bit PNG with an sRGB chunk; values are stored as `round(v * 255)`.
pub fn write_png(path: &Path, img: &LdrImage) -> Result<()> {
    let (h, w, c) = img.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::format(path, format!("PNG output needs 1 or 3 channels, not {c}"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// Reads 8- or 16-bit grey/RGB PNGs (alpha is dropped) into `[0, 1]`.
pub fn read_png(path: &Path) -> Result<LdrImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let fmt = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = dec.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(path, "palette was not expanded")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let max = if wide { 65535.0 } else { 255.0 };
    let mut img = Image::zeros(h, w, keep);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            for ch in 0..keep {
                let k = x * src_c + ch;
                let raw = if wide {
                    u16::from_be_bytes([row[2 * k], row[2 * k + 1]]) as f64
                } else {
                    row[k] as f64
                };
                img.set(y, x, ch, raw / max);
            }
        }
    }
    LdrImage::new(img)
}

/// `<stem>_ev+2.png`, `<stem>_ev-4.png`, `<stem>_ev+0.png`, `<stem>_ev+0.5.png`.
pub fn bracket_filename(stem: &str, ev: f64) -> String {
    let sign = if ev < 0.0 { '-' } else { '+' };
    format!("{stem}_ev{sign}{}.png", ev.abs())
}

/// Splits a bracket file name into stem and EV.
pub fn parse_bracket_filename(name: &str) -> Option<(String, f64)> {
    let base = name.strip_suffix(".png")?;
    let at = base.rfind("_ev")?;
    let tail = &base[at + 3..];
    if !(tail.starts_with('+') || tail.starts_with('-')) {
        return None;
    }
    let ev: f64 = tail.parse().ok()?;
    ev.is_finite().then(|| (base[..at].to_string(), ev))
}

/// Writes every bracket under `dir` and returns the paths in EV order.
pub fn write_brackets(dir: &Path, stem: &str, stack: &BracketStack) -> Result<Vec<PathBuf>> {
    stack
        .brackets()
        .iter()
        .map(|b| {
            let p = dir.join(bracket_filename(stem, b.ev));
            write_png(&p, &b.image)?;
            Ok(p)
        })
        .collect()
}

/// Loads all `<stem>_ev±N.png` files in `dir`. With several stems present,
/// `stem` must pick one.
pub fn read_brackets(dir: &Path, stem: Option<&str>) -> Result<BracketStack> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<(String, f64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((s, ev)) = parse_bracket_filename(&name) {
            if stem.is_none_or(|want| want == s) {
                found.push((s, ev, entry.path()));
            }
        }
    }
    let mut stems: Vec<&str> = found.iter().map(|f| f.0.as_str()).collect();
    stems.sort_unstable();
    stems.dedup();
    match stems.len() {
        0 => return Err(Error::format(dir, "no bracket files (<stem>_ev±N.png) found")),
        1 => {}
        _ => return Err(Error::format(dir, format!("several bracket sets present: {}", stems.join(", ")))),
    }
    found.sort_by(|a, b| a.1.total_cmp(&b.1));
    let brackets = found
        .iter()
        .map(|(_, ev, p)| ExposureBracket::new(read_png(p)?, *ev))
        .collect::<Result<_>>()?;
    BracketStack::new(brackets)
}

/// Writes `bytes` atomically enough for our purposes: to a sibling file
/// first, then renamed over `path`.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
