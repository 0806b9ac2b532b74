//! Synthetic multi-actor clips.
//!
//! Actors are bright rectangles on a noisy gray background and do not
//! reveal their action. The action is coded by the color of a small cue
//! patch drawn just right of the actor's box, outside it, so a classifier
//! must look beyond the box and must pick the cue belonging to the right
//! actor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::geometry::{Bbox, Tube};
use crate::matching::GroundTruth;
use cqvad_tensor::Tensor;

/// Cue colors, indexed by class.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 30, 30],
    [30, 30, 230],
    [30, 200, 30],
    [220, 220, 20],
    [210, 30, 210],
    [20, 210, 210],
    [240, 140, 20],
    [120, 60, 20],
];

const ACTOR_GRAY: u8 = 245;
const BACKGROUND: f64 = 100.0;
const GAP: usize = 1;

/// What a clip contains.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub actors: usize,
    /// Action of each actor, constant over the clip.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `frames × height × width × 3` bytes.
    pub pixels: Vec<u8>,
    pub gt: GroundTruth,
    pub scenario: Scenario,
}

impl Clip {
    /// Frames scaled to `[0, 1]`, shape `[T, H0, W0, 3]`.
    pub fn frames_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new([self.frames, self.height, self.width, 3], data).expect("pixel count matches shape")
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Rect {
    fn shift(self, dx: i64, dy: i64) -> Self {
        Rect {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

struct Actor {
    body: Rect,
    cue: Rect,
    vx: i64,
    vy: i64,
}

impl Actor {
    /// Body and cue at frame `t`.
    fn at(&self, t: usize) -> (Rect, Rect) {
        let (dx, dy) = (self.vx * t as i64, self.vy * t as i64);
        (self.body.shift(dx, dy), self.cue.shift(dx, dy))
    }

    /// Bounding rectangle of body and cue over the whole clip.
    fn footprint(&self, frames: usize) -> Rect {
        let (b0, c0) = self.at(0);
        let (b1, c1) = self.at(frames - 1);
        Rect {
            x0: b0.x0.min(b1.x0),
            y0: b0.y0.min(b1.y0).min(c0.y0).min(c1.y0),
            x1: c0.x1.max(c1.x1),
            y1: b0.y1.max(b1.y1).max(c0.y1).max(c1.y1),
        }
    }
}

fn sample_actor(rng: &mut ChaCha8Rng, cfg: &Config) -> Actor {
    let (fw, fh) = (cfg.frame_w() as i64, cfg.frame_h() as i64);
    let cue = cfg.cue_size as i64;
    let t_span = cfg.clip_len as i64 - 1;
    let bw = rng.random_range(fw / 5..=fw * 3 / 10).max(2);
    let bh = rng.random_range(fh / 5..=fh * 3 / 10).max(cue);
    let (vx, vy) = (rng.random_range(-1..=1i64), rng.random_range(-1..=1i64));
    // keep body and cue in the frame at both ends of the motion
    let lo_x = (-vx * t_span).max(0);
    let hi_x = fw - bw - GAP as i64 - cue - (vx * t_span).max(0);
    let lo_y = (-vy * t_span).max(0);
    let hi_y = fh - bh - (vy * t_span).max(0);
    let x0 = rng.random_range(lo_x..=hi_x.max(lo_x));
    let y0 = rng.random_range(lo_y..=hi_y.max(lo_y));
    let cy = y0 + rng.random_range(0..=bh - cue);
    let cx = x0 + bw + GAP as i64;
    Actor {
        body: Rect { x0, y0, x1: x0 + bw, y1: y0 + bh },
        cue: Rect { x0: cx, y0: cy, x1: cx + cue, y1: cy + cue },
        vx,
        vy,
    }
}

/// Draws one clip with `actors` actors (sampled from the configured range
/// when `None`).
pub fn generate_clip(cfg: &Config, rng: &mut ChaCha8Rng, actors: Option<usize>) -> Clip {
    let n = actors.unwrap_or_else(|| rng.random_range(cfg.min_actors..=cfg.max_actors));
    let (t_n, fh, fw) = (cfg.clip_len, cfg.frame_h(), cfg.frame_w());
    let mut placed: Vec<Actor> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        let a = sample_actor(rng, cfg);
        let fp = a.footprint(t_n);
        let padded = Rect { x0: fp.x0 - 1, y0: fp.y0 - 1, x1: fp.x1 + 1, y1: fp.y1 + 1 };
        if placed.iter().all(|b| !b.footprint(t_n).overlaps(&padded)) {
            placed.push(a);
        }
        attempts += 1;
        if attempts % 200 == 0 {
            // crowded layout, start over
            placed.clear();
        }
    }
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.classes)).collect();

    let mut pixels = vec![0u8; t_n * fh * fw * 3];
    for v in pixels.iter_mut() {
        let noise = rng.random_range(-1.0..=1.0) * cfg.noise * 255.0;
        *v = (BACKGROUND + noise).round().clamp(0.0, 255.0) as u8;
    }
    let mut fill = |t: usize, r: Rect, color: [u8; 3]| {
        for y in r.y0.max(0)..r.y1.min(fh as i64) {
            for x in r.x0.max(0)..r.x1.min(fw as i64) {
                let at = ((t * fh + y as usize) * fw + x as usize) * 3;
                pixels[at..at + 3].copy_from_slice(&color);
            }
        }
    };
    let mut tubes: Vec<Tube> = Vec::with_capacity(n);
    for (a, &c) in placed.iter().zip(&classes) {
        let mut tube = Vec::with_capacity(t_n);
        for t in 0..t_n {
            let (body, cue) = a.at(t);
            fill(t, body, [ACTOR_GRAY; 3]);
            fill(t, cue, PALETTE[c % PALETTE.len()]);
            tube.push(Bbox::new(
                (body.x0 + body.x1) as f64 / (2 * fw) as f64,
                (body.y0 + body.y1) as f64 / (2 * fh) as f64,
                (body.x1 - body.x0) as f64 / fw as f64,
                (body.y1 - body.y0) as f64 / fh as f64,
            ));
        }
        tubes.push(tube);
    }
    let labels = classes
        .iter()
        .map(|&c| (0..t_n * cfg.classes).map(|k| if k % cfg.classes == c { 1.0 } else { 0.0 }).collect())
        .collect();
    Clip {
        frames: t_n,
        height: fh,
        width: fw,
        pixels,
        gt: GroundTruth {
            frames: t_n,
            classes: cfg.classes,
            tubes,
            labels,
        },
        scenario: Scenario { actors: n, classes },
    }
}

/// Generator for clip `index` of the stream seeded by `seed`; independent
/// of the order in which clips are requested.
pub fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Training clip `index` of the configured stream.
pub fn training_clip(cfg: &Config, index: u64, actors: Option<usize>) -> Clip {
    generate_clip(cfg, &mut clip_rng(cfg.seed, index), actors)
}

/// Fixed held-out clips.
pub fn eval_set(cfg: &Config, actors: Option<usize>) -> Vec<Clip> {
    (0..cfg.eval_clips as u64)
        .map(|k| generate_clip(cfg, &mut clip_rng(cfg.eval_seed, k), actors))
        .collect()
}
