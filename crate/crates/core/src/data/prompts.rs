//! Prompt sampling from ground-truth masks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_model::{BoxPrompt, MaskGrid, Point, PromptSet};
use crate::error::{shape_err, Error, Result};
use crate::metrics::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Box,
    Points,
    Coarse,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Box, PromptKind::Points, PromptKind::Coarse];
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PromptKind::Box => "box",
            PromptKind::Points => "points",
            PromptKind::Coarse => "coarse",
        };
        write!(f, "{s}")
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(PromptKind::Box),
            "points" => Ok(PromptKind::Points),
            "coarse" => Ok(PromptKind::Coarse),
            other => Err(Error::Config(format!("unknown prompt kind '{other}'"))),
        }
    }
}

const BOX_JITTER: f64 = 0.05;
const COARSE_FACTOR: usize = 8;

fn check_square(gt: &BinaryMask) -> Result<()> {
    if gt.h != gt.w || gt.h % COARSE_FACTOR != 0 {
        return Err(shape_err!("prompt sampling needs a square mask with side divisible by 8, got {}x{}", gt.h, gt.w));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth mask"));
    }
    Ok(())
}

/// Smallest half-open box containing every foreground pixel.
pub fn tight_box(gt: &BinaryMask) -> Result<BoxPrompt> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth mask"));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..gt.h {
        for x in 0..gt.w {
            if gt.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    Ok(BoxPrompt { x0: x0 as f64, y0: y0 as f64, x1: x1 as f64, y1: y1 as f64 })
}

/// Tight box with each edge moved by up to `jitter` times the box side.
pub fn jittered_box(gt: &BinaryMask, jitter: f64, rng: &mut impl Rng) -> Result<BoxPrompt> {
    let b = tight_box(gt)?;
    if jitter == 0.0 {
        return Ok(b);
    }
    let (w, h) = (b.x1 - b.x0, b.y1 - b.y0);
    let mut shift = |side: f64| rng.gen_range(-jitter..=jitter) * side;
    let (sx0, sy0, sx1, sy1) = (shift(w), shift(h), shift(w), shift(h));
    let (xr, yr) = (gt.w as f64, gt.h as f64);
    let x0 = (b.x0 + sx0).clamp(0.0, xr - 1.0);
    let y0 = (b.y0 + sy0).clamp(0.0, yr - 1.0);
    let x1 = (b.x1 + sx1).clamp(x0 + 1.0, xr);
    let y1 = (b.y1 + sy1).clamp(y0 + 1.0, yr);
    Ok(BoxPrompt { x0, y0, x1, y1 })
}

fn pixels_with(gt: &BinaryMask, value: u8) -> Vec<usize> {
    gt.data.iter().enumerate().filter(|(_, &v)| v == value).map(|(i, _)| i).collect()
}

fn pick(pool: &[usize], n: usize, w: usize, rng: &mut impl Rng, make: fn(f64, f64) -> Point) -> Vec<Point> {
    let n = n.min(pool.len());
    sample(rng, pool.len(), n)
        .into_iter()
        .map(|k| {
            let i = pool[k];
            make((i % w) as f64, (i / w) as f64)
        })
        .collect()
}

/// `positives` distinct foreground pixels and `negatives` distinct background
/// pixels, drawn uniformly. Positives come first.
pub fn sample_points(gt: &BinaryMask, positives: usize, negatives: usize, rng: &mut impl Rng) -> Result<Vec<Point>> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth mask"));
    }
    let mut pts = pick(&pixels_with(gt, 1), positives, gt.w, rng, Point::positive);
    pts.extend(pick(&pixels_with(gt, 0), negatives, gt.w, rng, Point::negative));
    Ok(pts)
}

/// Area-average down by 8, bilinear (half-pixel) up by 2, threshold at 0.5.
pub fn coarse_mask(gt: &BinaryMask) -> Result<MaskGrid> {
    check_square(gt)?;
    let s = gt.h / COARSE_FACTOR;
    let mut low = vec![0.0f64; s * s];
    for y in 0..gt.h {
        for x in 0..gt.w {
            if gt.get(y, x) {
                low[(y / COARSE_FACTOR) * s + x / COARSE_FACTOR] += 1.0;
            }
        }
    }
    let cell = (COARSE_FACTOR * COARSE_FACTOR) as f64;
    low.iter_mut().for_each(|v| *v /= cell);
    let d = 2 * s;
    let coord = |o: usize| {
        let c = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(s - 1);
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut data = vec![0.0f32; d * d];
    for oy in 0..d {
        let (y0, y1, fy) = coord(oy);
        for ox in 0..d {
            let (x0, x1, fx) = coord(ox);
            let top = low[y0 * s + x0] * (1.0 - fx) + low[y0 * s + x1] * fx;
            let bot = low[y1 * s + x0] * (1.0 - fx) + low[y1 * s + x1] * fx;
            let v = top * (1.0 - fy) + bot * fy;
            data[oy * d + ox] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(MaskGrid { side: d, data })
}

/// One prompt of the requested kind. Point prompts draw 1..=10 positives and
/// 0..=3 negatives.
pub fn sample_prompts(gt: &BinaryMask, kind: PromptKind, seed: u64) -> Result<PromptSet> {
    check_square(gt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        PromptKind::Box => PromptSet::from_box(jittered_box(gt, BOX_JITTER, &mut rng)?),
        PromptKind::Points => {
            let k = rng.gen_range(1..=10);
            let j = rng.gen_range(0..=3);
            PromptSet::from_points(sample_points(gt, k, j, &mut rng)?)
        }
        PromptKind::Coarse => PromptSet::from_mask(coarse_mask(gt)?),
    })
}

/// Exactly `count` positive clicks, as used by the point-count sweep.
pub fn sample_positive_clicks(gt: &BinaryMask, count: usize, seed: u64) -> Result<PromptSet> {
    check_square(gt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PromptSet::from_points(sample_points(gt, count, 0, &mut rng)?))
}
