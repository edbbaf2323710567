//! Region and boundary metrics for binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    /// Row-major values, each exactly 0 or 1.
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err!("mask data has {} values for {h}x{w}", data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(shape_err!("mask values must be 0 or 1"));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    /// Foreground where the logit is strictly positive.
    pub fn from_logits(h: usize, w: usize, logits: &[f64]) -> Result<Self> {
        Self::new(h, w, logits.iter().map(|&v| (v > 0.0) as u8).collect())
    }

    /// Foreground where the value is at least `threshold`.
    pub fn from_threshold(h: usize, w: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(h, w, values.iter().map(|&v| (v >= threshold) as u8).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn diagonal(&self) -> f64 {
        ((self.h * self.h + self.w * self.w) as f64).sqrt()
    }
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(shape_err!("mask shapes {}x{} and {}x{} differ", a.h, a.w, b.h, b.w));
    }
    Ok(())
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(ratio(inter, union))
}

/// Foreground pixels 4-adjacent to background or to the canvas edge.
pub fn boundary(m: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::zeros(m.h, m.w);
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == m.h || x + 1 == m.w;
            if edge || !m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1) {
                out.data[y * m.w + x] = 1;
            }
        }
    }
    out
}

/// Pixels within Chebyshev distance `d` of any set pixel of `m`.
pub fn chebyshev_dilate(m: &BinaryMask, d: usize) -> BinaryMask {
    let window = |line: &[u8]| -> Vec<u8> {
        let n = line.len();
        let mut prefix = vec![0usize; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + line[i] as usize;
        }
        (0..n).map(|i| (prefix[(i + d + 1).min(n)] > prefix[i.saturating_sub(d)]) as u8).collect()
    };
    let mut rows = vec![0u8; m.h * m.w];
    for y in 0..m.h {
        rows[y * m.w..(y + 1) * m.w].copy_from_slice(&window(&m.data[y * m.w..(y + 1) * m.w]));
    }
    let mut out = vec![0u8; m.h * m.w];
    for x in 0..m.w {
        let col: Vec<u8> = (0..m.h).map(|y| rows[y * m.w + x]).collect();
        for (y, v) in window(&col).into_iter().enumerate() {
            out[y * m.w + x] = v;
        }
    }
    BinaryMask { h: m.h, w: m.w, data: out }
}

/// Foreground restricted to the band of width `d` around its boundary.
pub fn inner_band(m: &BinaryMask, d: usize) -> BinaryMask {
    let band = chebyshev_dilate(&boundary(m), d);
    let data = m.data.iter().zip(&band.data).map(|(&a, &b)| a & b).collect();
    BinaryMask { h: m.h, w: m.w, data }
}

pub fn boundary_iou(a: &BinaryMask, b: &BinaryMask, d: usize) -> Result<f64> {
    check_shapes(a, b)?;
    if d == 0 {
        return Err(Error::Config("boundary band width must be at least 1".into()));
    }
    iou(&inner_band(a, d), &inner_band(b, d))
}

pub fn band_width(m: &BinaryMask) -> usize {
    ((0.02 * m.diagonal()).round() as usize).max(1)
}

pub fn contour_tolerance(m: &BinaryMask) -> usize {
    ((0.008 * m.diagonal()).round() as usize).max(1)
}

/// Pixels within Euclidean distance `r` of any set pixel of `m`.
pub fn disk_dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    let ri = r as i64;
    let offsets: Vec<(i64, i64)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= ri * ri)
        .collect();
    let mut out = BinaryMask::zeros(m.h, m.w);
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(y, x) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < m.h && (nx as usize) < m.w {
                    out.data[ny as usize * m.w + nx as usize] = 1;
                }
            }
        }
    }
    out
}

/// Harmonic mean of boundary precision and recall with matching tolerance `tau`.
///
/// Both boundaries empty gives 1; exactly one empty gives 0.
pub fn contour_f(pred: &BinaryMask, gt: &BinaryMask, tau: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    let bp = boundary(pred);
    let bg = boundary(gt);
    let (np, ng) = (bp.area(), bg.area());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let near_gt = disk_dilate(&bg, tau);
    let near_pred = disk_dilate(&bp, tau);
    let matched_p = bp.data.iter().zip(&near_gt.data).filter(|(&a, &b)| a == 1 && b == 1).count();
    let matched_g = bg.data.iter().zip(&near_pred.data).filter(|(&a, &b)| a == 1 && b == 1).count();
    Ok(f_measure(matched_p, np, matched_g, ng))
}

pub fn f_measure(matched_p: usize, np: usize, matched_g: usize, ng: usize) -> f64 {
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean IoU and mean boundary IoU over paired sets, each in `[0, 1]`.
pub fn miou_mbiou(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<(f64, f64)> {
    if pred.is_empty() {
        return Err(Error::Empty("metric set"));
    }
    if pred.len() != gt.len() {
        return Err(shape_err!("{} predictions for {} ground-truth masks", pred.len(), gt.len()));
    }
    let (mut si, mut sb) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        si += iou(p, g)?;
        sb += boundary_iou(p, g, band_width(g))?;
    }
    let n = pred.len() as f64;
    Ok((si / n, sb / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JfScore {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

pub fn jf_score(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<JfScore> {
    if pred.len() != gt.len() {
        return Err(shape_err!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("frame sequence"));
    }
    let (mut sj, mut sf) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sj += iou(p, g)?;
        sf += contour_f(p, g, contour_tolerance(g))?;
    }
    let n = pred.len() as f64;
    let (j, f) = (sj / n, sf / n);
    Ok(JfScore { j, f, jf: (j + f) / 2.0 })
}
