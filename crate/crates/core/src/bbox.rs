//! Axis-aligned boxes in pixel units.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Center as (row, col) in index coordinates.
    pub fn center(&self) -> [f64; 2] {
        [self.y + self.h / 2.0 - 0.5, self.x + self.w / 2.0 - 0.5]
    }

    /// Size as (h, w).
    pub fn size(&self) -> [f64; 2] {
        [self.h, self.w]
    }

    /// Pixel mask (`1.0` inside) of the box interior on an `h × w` grid.
    pub fn fill(&self, h: usize, w: usize) -> Array2<f64> {
        let (x0, y0) = (self.x.round().max(0.0) as usize, self.y.round().max(0.0) as usize);
        let x1 = ((self.x + self.w).round().max(0.0) as usize).min(w);
        let y1 = ((self.y + self.h).round().max(0.0) as usize).min(h);
        let mut m = Array2::zeros((h, w));
        for r in y0.min(y1)..y1 {
            for c in x0.min(x1)..x1 {
                m[[r, c]] = 1.0;
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }
}

/// Tight box over the pixels with `probs >= threshold`.
pub fn box_from_mask(probs: &Array2<f64>, threshold: f64) -> Option<BBox> {
    let mut bounds: Option<[usize; 4]> = None;
    for ((r, c), &p) in probs.indexed_iter() {
        if p >= threshold {
            let b = bounds.get_or_insert([r, r, c, c]);
            b[0] = b[0].min(r);
            b[1] = b[1].max(r);
            b[2] = b[2].min(c);
            b[3] = b[3].max(c);
        }
    }
    bounds.map(|[r0, r1, c0, c1]| {
        BBox::new(c0 as f64, r0 as f64, (c1 - c0 + 1) as f64, (r1 - r0 + 1) as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_pixels() {
        let mut m = Array2::zeros((8, 9));
        m[[2, 3]] = 0.7;
        m[[5, 7]] = 0.5;
        m[[6, 1]] = 0.49;
        assert_eq!(box_from_mask(&m, 0.5), Some(BBox::new(3.0, 2.0, 5.0, 4.0)));
    }

    #[test]
    fn full_and_empty() {
        assert_eq!(box_from_mask(&Array2::ones((4, 6)), 0.5), Some(BBox::new(0.0, 0.0, 6.0, 4.0)));
        assert_eq!(box_from_mask(&Array2::from_elem((4, 6), 0.2), 0.5), None);
    }

    #[test]
    fn fill_counts_pixels() {
        let m = BBox::new(10.0, 10.0, 40.0, 20.0).fill(64, 64);
        assert_eq!(m.sum(), 800.0);
        assert_eq!(box_from_mask(&m, 0.5), Some(BBox::new(10.0, 10.0, 40.0, 20.0)));
    }

    proptest! {
        #[test]
        fn matches_brute_force(cells in proptest::collection::vec(0.0f64..1.0, 30)) {
            let m = Array2::from_shape_vec((5, 6), cells).unwrap();
            let pts: Vec<(usize, usize)> = m.indexed_iter().filter(|(_, &v)| v >= 0.5).map(|(p, _)| p).collect();
            let expected = if pts.is_empty() {
                None
            } else {
                let r0 = pts.iter().map(|p| p.0).min().unwrap();
                let r1 = pts.iter().map(|p| p.0).max().unwrap();
                let c0 = pts.iter().map(|p| p.1).min().unwrap();
                let c1 = pts.iter().map(|p| p.1).max().unwrap();
                Some(BBox::new(c0 as f64, r0 as f64, (c1 - c0 + 1) as f64, (r1 - r0 + 1) as f64))
            };
            prop_assert_eq!(box_from_mask(&m, 0.5), expected);
        }
    }
}
