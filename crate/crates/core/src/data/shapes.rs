//! Vector shape primitives with exact point-membership tests.

/// Rigid motion about a pivot: rotate by `angle` radians, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Motion {
    pub fn identity() -> Self {
        Self { angle: 0.0, tx: 0.0, ty: 0.0, cx: 0.0, cy: 0.0 }
    }

    /// Map a point of the moved scene back to the reference scene.
    pub fn inverse_apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.tx - self.cx, y - self.ty - self.cy);
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy + self.cx, -s * dx + c * dy + self.cy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Segment with a round cap of the given radius.
    Capsule { ax: f64, ay: f64, bx: f64, by: f64, radius: f64 },
    /// Closed polygon, even-odd rule.
    Polygon { points: Vec<(f64, f64)> },
    /// `inner <= |p - c| <= outer`.
    Annulus { cx: f64, cy: f64, inner: f64, outer: f64 },
}

impl Primitive {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Primitive::Capsule { ax, ay, bx, by, radius } => {
                let (vx, vy) = (bx - ax, by - ay);
                let len2 = vx * vx + vy * vy;
                let t = if len2 == 0.0 { 0.0 } else { (((x - ax) * vx + (y - ay) * vy) / len2).clamp(0.0, 1.0) };
                let (px, py) = (ax + t * vx - x, ay + t * vy - y);
                px * px + py * py <= radius * radius
            }
            Primitive::Polygon { points } => {
                let mut inside = false;
                let n = points.len();
                let mut j = n.wrapping_sub(1);
                for i in 0..n {
                    let (xi, yi) = points[i];
                    let (xj, yj) = points[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
            Primitive::Annulus { cx, cy, inner, outer } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 >= inner * inner && d2 <= outer * outer
            }
        }
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Primitive::Capsule { ax, ay, bx, by, radius } => {
                (ax.min(*bx) - radius, ay.min(*by) - radius, ax.max(*bx) + radius, ay.max(*by) + radius)
            }
            Primitive::Polygon { points } => points.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
            Primitive::Annulus { cx, cy, outer, .. } => (cx - outer, cy - outer, cx + outer, cy + outer),
        }
    }
}

/// Union of primitives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Shape {
    pub parts: Vec<Primitive>,
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.parts.iter().any(|p| p.contains(x, y))
    }

    pub fn center(&self) -> (f64, f64) {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.parts {
            let (a, b, c, d) = p.bounds();
            x0 = x0.min(a);
            y0 = y0.min(b);
            x1 = x1.max(c);
            y1 = y1.max(d);
        }
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }

    /// Membership of every pixel center of a `side x side` grid after `motion`.
    pub fn rasterize(&self, side: usize, motion: &Motion) -> Vec<u8> {
        let mut out = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                let (u, v) = motion.inverse_apply(x as f64 + 0.5, y as f64 + 0.5);
                out[y * side + x] = self.contains(u, v) as u8;
            }
        }
        out
    }
}
