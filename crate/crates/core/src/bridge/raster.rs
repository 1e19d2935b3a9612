//! Anti-aliased coverage rasterizer on a small greyscale canvas.

/// Ink coverage in `[0, 1]` per pixel; pixel `(r, c)` covers
/// `[c, c + 1) x [r, r + 1)` in canvas coordinates.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    /// Columns at or beyond this are never drawn.
    pub clip_x: f64,
    coverage: Vec<f64>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            clip_x: width as f64,
            coverage: vec![0.0; width * height],
        }
    }

    pub fn coverage(&self) -> &[f64] {
        &self.coverage
    }

    fn put(&mut self, r: usize, c: usize, a: f64) {
        let v = &mut self.coverage[r * self.width + c];
        *v = v.max(a.clamp(0.0, 1.0));
    }

    fn col_range(&self, x0: f64, x1: f64) -> (usize, usize) {
        let hi = x1.min(self.clip_x).min(self.width as f64);
        let lo = x0.max(0.0);
        if hi <= lo {
            return (0, 0);
        }
        (lo.floor() as usize, (hi.ceil() as usize).min(self.width))
    }

    fn row_range(&self, y0: f64, y1: f64) -> (usize, usize) {
        let lo = y0.max(0.0);
        let hi = y1.min(self.height as f64);
        if hi <= lo {
            return (0, 0);
        }
        (lo.floor() as usize, (hi.ceil() as usize).min(self.height))
    }

    /// Axis-aligned rectangle with exact area coverage.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        let (c0, c1) = self.col_range(x0, x1);
        let (r0, r1) = self.row_range(y0, y1);
        for r in r0..r1 {
            let oy = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
            for c in c0..c1 {
                let ox = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
                self.put(r, c, ox * oy);
            }
        }
    }

    /// Round-capped stroke of the given width; coverage falls off linearly
    /// over one pixel around the stroke edge.
    pub fn line(&mut self, (ax, ay): (f64, f64), (bx, by): (f64, f64), width: f64) {
        let half = width / 2.0;
        let pad = half + 1.0;
        let (c0, c1) = self.col_range(ax.min(bx) - pad, ax.max(bx) + pad);
        let (r0, r1) = self.row_range(ay.min(by) - pad, ay.max(by) + pad);
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        for r in r0..r1 {
            let py = r as f64 + 0.5;
            for c in c0..c1 {
                let px = c as f64 + 0.5;
                let t = if len2 > 0.0 {
                    (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                let d = (qx * qx + qy * qy).sqrt();
                self.put(r, c, half + 0.5 - d);
            }
        }
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], width: f64) {
        for w in points.windows(2) {
            self.line(w[0], w[1], width);
        }
    }

    /// Copy every column left of the centre onto its mirror image.
    pub fn mirror_left_half(&mut self) {
        let w = self.width;
        for r in 0..self.height {
            let row = &mut self.coverage[r * w..(r + 1) * w];
            for c in 0..w / 2 {
                row[w - 1 - c] = row[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_coverage_is_fractional_area() {
        let mut cv = Canvas::new(4, 3);
        cv.fill_rect(0.5, 1.0, 2.0, 2.25);
        let c = cv.coverage();
        assert_eq!(c[4], 0.5);
        assert_eq!(c[5], 1.0);
        assert_eq!(c[2 * 4 + 1], 0.25);
        assert_eq!(c[0], 0.0);
    }

    #[test]
    fn horizontal_line_darkens_its_row() {
        let mut cv = Canvas::new(10, 5);
        cv.line((1.0, 2.5), (9.0, 2.5), 1.0);
        let c = cv.coverage();
        assert_eq!(c[2 * 10 + 4], 1.0);
        assert_eq!(c[10 + 4], 0.0);
        assert_eq!(c[4], 0.0);
    }

    #[test]
    fn clip_and_mirror_produce_symmetry() {
        let mut cv = Canvas::new(8, 2);
        cv.clip_x = 4.0;
        cv.line((0.0, 0.5), (8.0, 1.5), 1.0);
        assert!(cv.coverage()[4..8].iter().all(|&v| v == 0.0));
        cv.mirror_left_half();
        for r in 0..2 {
            for c in 0..8 {
                assert_eq!(cv.coverage()[r * 8 + c], cv.coverage()[r * 8 + 7 - c]);
            }
        }
    }
}
