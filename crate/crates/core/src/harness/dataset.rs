//! Clip files.
//!
//! The file starts with the magic `CQVDCLIP` and a `u32` record count.
//! Each record holds `T, H0, W0, N_X, N_c` as little-endian `u32`, the
//! frame bytes (`T·H0·W0·3`, RGB), the tubes as `f32` cx, cy, w, h
//! (`N_X·T·4`, actor-major), and per actor and frame a label bitmap of
//! `ceil(N_c / 8)` bytes, least significant bit first.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::harness::synthetic::{Clip, Scenario};
use crate::matching::GroundTruth;

pub const MAGIC: &[u8; 8] = b"CQVDCLIP";

pub fn encode(clips: &[Clip]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(clips.len() as u32).to_le_bytes());
    for c in clips {
        let nx = c.gt.tubes.len();
        for v in [c.frames, c.height, c.width, nx, c.gt.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.pixels);
        for b in c.gt.tubes.iter().flatten() {
            for v in b.to_array() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let bytes = c.gt.classes.div_ceil(8);
        for labels in &c.gt.labels {
            for t in 0..c.frames {
                let mut bits = vec![0u8; bytes];
                for k in 0..c.gt.classes {
                    if labels[t * c.gt.classes + k] > 0.5 {
                        bits[k / 8] |= 1 << (k % 8);
                    }
                }
                out.extend_from_slice(&bits);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Format(format!("clip file truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }
}

/// Parses clips. Labels decode as one class per actor for the scenario;
/// the first set bit of frame 0 is taken.
pub fn decode(bytes: &[u8]) -> Result<Vec<Clip>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a clip file".into()));
    }
    let mut r = Reader { bytes, at: 8 };
    let n = r.u32()?;
    let mut clips = Vec::with_capacity(n);
    for _ in 0..n {
        let (t_n, h, w, nx, c_n) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let pixels = r.take(t_n * h * w * 3)?.to_vec();
        let mut tubes = Vec::with_capacity(nx);
        for _ in 0..nx {
            let mut tube = Vec::with_capacity(t_n);
            for _ in 0..t_n {
                tube.push(Bbox::new(r.f32()?, r.f32()?, r.f32()?, r.f32()?));
            }
            tubes.push(tube);
        }
        let nbytes = c_n.div_ceil(8);
        let mut labels = Vec::with_capacity(nx);
        for _ in 0..nx {
            let mut row = Vec::with_capacity(t_n * c_n);
            for _ in 0..t_n {
                let bits = r.take(nbytes)?;
                row.extend((0..c_n).map(|k| ((bits[k / 8] >> (k % 8)) & 1) as f64));
            }
            labels.push(row);
        }
        let classes = labels
            .iter()
            .map(|l: &Vec<f64>| l[..c_n].iter().position(|&v| v > 0.5).unwrap_or(0))
            .collect();
        clips.push(Clip {
            frames: t_n,
            height: h,
            width: w,
            pixels,
            gt: GroundTruth {
                frames: t_n,
                classes: c_n,
                tubes,
                labels,
            },
            scenario: Scenario { actors: nx, classes },
        });
    }
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes after the last clip".into()));
    }
    Ok(clips)
}

pub fn write(path: &Path, clips: &[Clip]) -> Result<()> {
    fs::write(path, encode(clips))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Clip>> {
    decode(&fs::read(path)?)
}
