//! Square crops resampled to a fixed side, with the affine map back to the
//! frame.

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::uld::BoundingBox;

/// Patch pixel `(u, v)` covers frame point `(x0 + u·scale, y0 + v·scale)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMapping {
    pub x0: f64,
    pub y0: f64,
    /// Frame pixels per patch pixel.
    pub scale: f64,
}

impl CropMapping {
    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + u * self.scale, self.y0 + v * self.scale)
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.scale, (y - self.y0) / self.scale)
    }

    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (x1, y1) = self.to_frame(b.x_tl, b.y_tl);
        let (x2, y2) = self.to_frame(b.x_br, b.y_br);
        BoundingBox {
            x_tl: x1,
            y_tl: y1,
            x_br: x2,
            y_br: y2,
        }
    }

    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (x1, y1) = self.to_patch(b.x_tl, b.y_tl);
        let (x2, y2) = self.to_patch(b.x_br, b.y_br);
        BoundingBox {
            x_tl: x1,
            y_tl: y1,
            x_br: x2,
            y_br: y2,
        }
    }
}

/// Bilinear sample of channel `c` at continuous pixel position `(x, y)`, where
/// pixel `(i, j)` has its center at `(j + 0.5, i + 0.5)`. Zero outside.
fn sample(frame: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> f64 {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (ax, ay) = (fx - x0, fy - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            frame[(c * h + yi as usize) * w + xi as usize]
        }
    };
    (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1.0, y0))
        + ay * ((1.0 - ax) * at(x0, y0 + 1.0) + ax * at(x0 + 1.0, y0 + 1.0))
}

/// Crops the square of side `side` centered on `(cx, cy)` and resamples it to
/// `out×out`. Area outside the frame reads as zero.
pub fn crop_square(frame: &Array, cx: f64, cy: f64, side: f64, out: usize) -> Result<(Array, CropMapping)> {
    let (c, h, w) = frame.dims3()?;
    if !(side.is_finite() && side > 0.0) || out == 0 || !cx.is_finite() || !cy.is_finite() {
        return Err(Error::Input(format!(
            "invalid crop: center ({cx}, {cy}), side {side}, output {out}"
        )));
    }
    let mapping = CropMapping {
        x0: cx - side / 2.0,
        y0: cy - side / 2.0,
        scale: side / out as f64,
    };
    let data = frame.data();
    let patch = Array::from_fn(&[c, out, out], |i| {
        let ch = i / (out * out);
        let v = (i / out) % out;
        let u = i % out;
        let (x, y) = mapping.to_frame(u as f64 + 0.5, v as f64 + 0.5);
        sample(data, h, w, ch, x, y)
    });
    Ok((patch, mapping))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop_reproduces_frame() {
        let f = Array::from_fn(&[3, 6, 6], |i| (i % 17) as f64);
        let (p, m) = crop_square(&f, 3.0, 3.0, 6.0, 6).unwrap();
        assert_eq!(m.scale, 1.0);
        assert!(p.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn mapping_round_trip() {
        let m = CropMapping {
            x0: -3.25,
            y0: 7.5,
            scale: 0.37,
        };
        for &(x, y) in &[(0.0, 0.0), (12.3, -4.1), (63.9, 31.0)] {
            let (u, v) = m.to_patch(x, y);
            let (x2, y2) = m.to_frame(u, v);
            assert!((x - x2).abs() <= 1e-9 && (y - y2).abs() <= 1e-9);
        }
    }

    #[test]
    fn outside_reads_zero() {
        let f = Array::full(&[3, 4, 4], 1.0);
        let (p, _) = crop_square(&f, -10.0, -10.0, 4.0, 4).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }
}
