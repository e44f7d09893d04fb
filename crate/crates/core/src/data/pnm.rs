//! Binary masks as 8-bit PGM (P5) and colour overlays as PPM (P6).

use std::path::Path;

use crate::error::{Error, Result};

/// Mask bytes: 0 for clear, 255 for cloud.
pub fn encode_pgm(height: usize, width: usize, mask: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&v| if v >= 0.5 { 255u8 } else { 0 }));
    out
}

fn header<'a>(buf: &'a [u8], magic: &str) -> Result<(usize, usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < buf.len() && buf[i] == b'#' {
            while i < buf.len() && buf[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(std::str::from_utf8(&buf[start..i]).map_err(|_| Error::Format("bad PNM header".into()))?);
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((h, w, maxval, buf.get(i + 1..).unwrap_or(&[])))
}

/// Returns `(height, width, mask)`; 0 is clear, 1 or maxval is cloud.
pub fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let (h, w, maxval, body) = header(buf, "P5")?;
    if body.len() != h * w {
        return Err(Error::Format(format!("PGM {w}x{h}: {} data bytes", body.len())));
    }
    let mask = body
        .iter()
        .map(|&b| match b as usize {
            0 => Ok(0.0),
            v if v == 1 || v == maxval => Ok(1.0),
            v => Err(Error::Data(format!("mask value {v} is neither 0 nor {maxval}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((h, w, mask))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let buf = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_pgm(&buf).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_pgm(path: &Path, height: usize, width: usize, mask: &[f32]) -> Result<()> {
    std::fs::write(path, encode_pgm(height, width, mask))?;
    Ok(())
}

pub const TP: [u8; 3] = [255, 255, 255];
pub const TN: [u8; 3] = [0, 0, 0];
pub const FP: [u8; 3] = [255, 0, 0];
pub const FN: [u8; 3] = [0, 255, 0];

/// P6 overlay of a prediction against a reference mask.
pub fn encode_overlay(height: usize, width: usize, pred: &[f32], target: &[f32]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for (&p, &t) in pred.iter().zip(target) {
        out.extend_from_slice(match (p >= 0.5, t >= 0.5) {
            (true, true) => &TP,
            (false, false) => &TN,
            (true, false) => &FP,
            (false, true) => &FN,
        });
    }
    out
}
