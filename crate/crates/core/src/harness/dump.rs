//! Attention map export as 8-bit PGM, with optional color overlays.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::harness::model::InferOutput;
use crate::harness::synthetic::Clip;

/// Scales a map so its maximum becomes 255 and rounds to bytes. An all-zero
/// map stays zero.
pub fn quantize(map: &[f64]) -> Vec<u8> {
    let max = map.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0; map.len()];
    }
    map.iter().map(|&v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data = &bytes[at + 1..];
    if data.len() != w * h {
        return Err(bad("pixel count does not match the header"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn map_file_name(actor: usize, class: usize, frame: usize) -> String {
    format!("actor{actor}_class{class}_t{frame}.pgm")
}

/// Writes one PGM per (actor, class, frame) of the class attention maps.
pub fn dump_attention(dir: &Path, out: &InferOutput, h: usize, w: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (actors, frames, classes) = (out.pred.actors, out.pred.frames, out.pred.classes);
    let mut written = Vec::with_capacity(actors * frames * classes);
    for i in 0..actors {
        for t in 0..frames {
            let map = &out.class_maps[i * frames + t];
            for c in 0..classes {
                let row = &map.data()[c * h * w..(c + 1) * h * w];
                let path = dir.join(map_file_name(i, c, t));
                fs::write(&path, encode_pgm(w, h, &quantize(row)))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Frame `t` of the clip with a map blended in red, upsampled to the frame.
pub fn overlay(clip: &Clip, t: usize, map: &[u8], h: usize, w: usize) -> RgbImage {
    let (fw, fh) = (clip.width, clip.height);
    RgbImage::from_fn(fw as u32, fh as u32, |x, y| {
        let at = ((t * fh + y as usize) * fw + x as usize) * 3;
        let a = map[(y as usize * h / fh) * w + x as usize * w / fw] as f64 / 255.0;
        let px = &clip.pixels[at..at + 3];
        let mix = |v: u8, target: f64| ((1.0 - 0.6 * a) * v as f64 + 0.6 * a * target).round() as u8;
        Rgb([mix(px[0], 255.0), mix(px[1], 0.0), mix(px[2], 0.0)])
    })
}

/// Overlay PNGs `actor{i}_class{c}_t{t}.png` next to the maps.
pub fn dump_overlays(dir: &Path, clip: &Clip, out: &InferOutput, h: usize, w: usize) -> Result<()> {
    let (actors, frames, classes) = (out.pred.actors, out.pred.frames, out.pred.classes);
    for i in 0..actors {
        for t in 0..frames {
            let map = &out.class_maps[i * frames + t];
            for c in 0..classes {
                let q = quantize(&map.data()[c * h * w..(c + 1) * h * w]);
                let path = dir.join(format!("actor{i}_class{c}_t{t}.png"));
                overlay(clip, t, &q, h, w)
                    .save(&path)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            }
        }
    }
    Ok(())
}
