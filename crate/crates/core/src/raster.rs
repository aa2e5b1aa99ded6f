//! Per-object occupancy masks on a `G x G` grid over the unit square.
//!
//! Pixel `(i, j)` covers `[i/G, (i+1)/G) x [j/G, (j+1)/G)`; `j` grows with
//! world `y`. Masks are stored as sorted lists of set-pixel indices
//! (`j * G + i`), which keeps IoU and center computation proportional to the
//! object area rather than the grid.

use crate::error::{invalid, Result};
use crate::geom::Vec2;
use crate::sim::MAX_BODIES;

pub const DEFAULT_GRID: usize = 64;
pub const MIN_GRID: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFrame {
    grid: usize,
    pixels: Vec<u32>,
    pub slot: usize,
    pub frame: usize,
}

impl MaskFrame {
    pub fn empty(grid: usize, slot: usize, frame: usize) -> Self {
        MaskFrame {
            grid,
            pixels: Vec::new(),
            slot,
            frame,
        }
    }

    /// Builds a mask from arbitrary `(i, j)` pixel coordinates.
    pub fn from_pixels(grid: usize, coords: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pixels: Vec<u32> = coords
            .into_iter()
            .filter(|&(i, j)| i < grid && j < grid)
            .map(|(i, j)| (j * grid + i) as u32)
            .collect();
        pixels.sort_unstable();
        pixels.dedup();
        MaskFrame {
            grid,
            pixels,
            slot: 0,
            frame: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.grid && j < self.grid && self.pixels.binary_search(&((j * self.grid + i) as u32)).is_ok()
    }

    /// Set pixels as `(i, j)`.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pixels
            .iter()
            .map(move |&p| (p as usize % self.grid, p as usize / self.grid))
    }

    pub fn union(&self, other: &MaskFrame) -> Result<MaskFrame> {
        check_grids(self, other)?;
        let mut pixels: Vec<u32> = self.pixels.iter().chain(&other.pixels).copied().collect();
        pixels.sort_unstable();
        pixels.dedup();
        Ok(MaskFrame {
            grid: self.grid,
            pixels,
            slot: self.slot,
            frame: self.frame,
        })
    }
}

/// Per-frame masks for each body slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    pub grid: usize,
    pub frames: Vec<[MaskFrame; MAX_BODIES]>,
}

/// Disc of `radius` around `position`: pixel `(i, j)` is set iff its center is
/// within `radius` of `position`. In-view objects smaller than a pixel still
/// mark the pixel containing them; out-of-view positions give an empty mask.
pub fn rasterize(position: Vec2, radius: f64, grid: usize) -> Result<MaskFrame> {
    if grid < MIN_GRID {
        return Err(invalid(format!("grid must be >= {MIN_GRID}")));
    }
    if !(radius > 0.0) {
        return Err(invalid("radius must be positive"));
    }
    let mut mask = MaskFrame::empty(grid, 0, 0);
    if !(position.is_finite() && position.in_unit_square()) {
        return Ok(mask);
    }
    let g = grid as f64;
    let (px, py, rp) = (position.x * g, position.y * g, radius * g);
    let rp2 = rp * rp;
    let lo = |c: f64| ((c - rp - 0.5).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + rp - 0.5).ceil().max(0.0) as usize).min(grid - 1);
    for j in lo(py)..=hi(py) {
        let dy = j as f64 + 0.5 - py;
        for i in lo(px)..=hi(px) {
            let dx = i as f64 + 0.5 - px;
            if dx * dx + dy * dy <= rp2 {
                mask.pixels.push((j * grid + i) as u32);
            }
        }
    }
    if mask.pixels.is_empty() {
        let i = (px.floor() as usize).min(grid - 1);
        let j = (py.floor() as usize).min(grid - 1);
        mask.pixels.push((j * grid + i) as u32);
    }
    Ok(mask)
}

/// Mean of the set-pixel centers, in world units. `None` for an empty mask.
pub fn center(mask: &MaskFrame) -> Option<Vec2> {
    if mask.is_empty() {
        return None;
    }
    let (mut si, mut sj) = (0.0, 0.0);
    for (i, j) in mask.pixels() {
        si += i as f64;
        sj += j as f64;
    }
    let n = mask.area() as f64;
    let g = mask.grid as f64;
    Some(Vec2::new((si / n + 0.5) / g, (sj / n + 0.5) / g))
}

/// Centers for every frame and slot; empty masks stay absent.
pub fn extract_trajectory(masks: &MaskSequence) -> Vec<[Option<Vec2>; MAX_BODIES]> {
    masks
        .frames
        .iter()
        .map(|slots| std::array::from_fn(|s| center(&slots[s])))
        .collect()
}

fn check_grids(a: &MaskFrame, b: &MaskFrame) -> Result<()> {
    if a.grid != b.grid {
        return Err(invalid(format!("mask grids differ: {} vs {}", a.grid, b.grid)));
    }
    Ok(())
}

/// Intersection over union; two empty masks count as identical.
pub fn mask_iou(a: &MaskFrame, b: &MaskFrame) -> Result<f64> {
    check_grids(a, b)?;
    let (mut i, mut k, mut inter) = (0, 0, 0usize);
    while i < a.pixels.len() && k < b.pixels.len() {
        match a.pixels[i].cmp(&b.pixels[k]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => k += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                k += 1;
            }
        }
    }
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Rasterizes per-frame slot positions. Inactive slots get empty masks.
pub fn rasterize_frames(
    frames: &[[Option<Vec2>; MAX_BODIES]],
    radii: &[f64; MAX_BODIES],
    active: &[bool; MAX_BODIES],
    grid: usize,
) -> Result<MaskSequence> {
    let mut out = Vec::with_capacity(frames.len());
    for (f, slots) in frames.iter().enumerate() {
        let mut masks: [MaskFrame; MAX_BODIES] = std::array::from_fn(|s| MaskFrame::empty(grid, s, f));
        for s in 0..MAX_BODIES {
            if let (true, Some(p)) = (active[s], slots[s]) {
                let mut m = rasterize(p, radii[s], grid)?;
                m.slot = s;
                m.frame = f;
                masks[s] = m;
            }
        }
        out.push(masks);
    }
    Ok(MaskSequence { grid, frames: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-grid enumeration, independent of the bounding-box loop.
    fn brute_disc(p: Vec2, r: f64, grid: usize) -> Vec<(usize, usize)> {
        let g = grid as f64;
        let mut out = Vec::new();
        for j in 0..grid {
            for i in 0..grid {
                let cx = (i as f64 + 0.5) - p.x * g;
                let cy = (j as f64 + 0.5) - p.y * g;
                if cx * cx + cy * cy <= (r * g) * (r * g) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn centered_disc_is_point_symmetric() {
        let m = rasterize(Vec2::new(0.5, 0.5), 0.1, 64).unwrap();
        assert!(!m.is_empty());
        for (i, j) in m.pixels() {
            assert!(m.contains(63 - i, 63 - j));
        }
        let c = center(&m).unwrap();
        assert!((c.x - 0.5).abs() <= 0.5 / 64.0 && (c.y - 0.5).abs() <= 0.5 / 64.0);
    }

    #[test]
    fn out_of_view_is_empty() {
        let m = rasterize(Vec2::new(-1.0, -1.0), 0.1, 64).unwrap();
        assert!(m.is_empty());
        assert_eq!(center(&m), None);
        assert!(rasterize(Vec2::new(f64::NAN, 0.5), 0.1, 64).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(rasterize(Vec2::new(0.5, 0.5), 0.0, 64).is_err());
        assert!(rasterize(Vec2::new(0.5, 0.5), 0.1, 4).is_err());
    }

    #[test]
    fn disc_area_matches_enumeration_and_circle() {
        for &(x, y, r) in &[(0.5, 0.5, 0.1), (0.31, 0.62, 0.0625), (0.7, 0.2, 0.08)] {
            let p = Vec2::new(x, y);
            let m = rasterize(p, r, 64).unwrap();
            let brute = brute_disc(p, r, 64);
            assert_eq!(m.area(), brute.len());
            let expected = std::f64::consts::PI * (r * 64.0).powi(2);
            assert!((m.area() as f64 - expected).abs() <= 0.1 * expected);
        }
    }

    #[test]
    fn tiny_object_marks_its_pixel() {
        let m = rasterize(Vec2::new(0.5, 0.5), 1e-4, 64).unwrap();
        assert_eq!(m.area(), 1);
        assert!(m.contains(32, 32));
    }

    #[test]
    fn single_pixel_center() {
        let m = MaskFrame::from_pixels(64, [(3, 10)]);
        assert_eq!(center(&m).unwrap(), Vec2::new(3.5 / 64.0, 10.5 / 64.0));
    }

    #[test]
    fn two_disc_union_center() {
        let a = rasterize(Vec2::new(0.25, 0.5), 0.08, 64).unwrap();
        let b = rasterize(Vec2::new(0.75, 0.5), 0.08, 64).unwrap();
        let u = a.union(&b).unwrap();
        // Oracle: mean over enumerated pixels of both discs.
        let mut pix = brute_disc(Vec2::new(0.25, 0.5), 0.08, 64);
        pix.extend(brute_disc(Vec2::new(0.75, 0.5), 0.08, 64));
        pix.sort_unstable();
        pix.dedup();
        let n = pix.len() as f64;
        let mx = pix.iter().map(|p| (p.0 as f64 + 0.5) / 64.0).sum::<f64>() / n;
        let my = pix.iter().map(|p| (p.1 as f64 + 0.5) / 64.0).sum::<f64>() / n;
        let c = center(&u).unwrap();
        assert!((c.x - mx).abs() < 1e-12 && (c.y - my).abs() < 1e-12);
        assert!((c.x - 0.5).abs() <= 1.0 / 64.0 && (c.y - 0.5).abs() <= 1.0 / 64.0);
    }

    #[test]
    fn iou_identities() {
        let a = rasterize(Vec2::new(0.4, 0.4), 0.1, 64).unwrap();
        let far = rasterize(Vec2::new(0.8, 0.8), 0.05, 64).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &far).unwrap(), 0.0);
        let e = MaskFrame::empty(64, 0, 0);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &e).unwrap(), 0.0);
        let other = MaskFrame::empty(32, 0, 0);
        assert!(mask_iou(&e, &other).is_err());
    }

    #[test]
    fn iou_of_shifted_discs_matches_pixel_count() {
        let pa = Vec2::new(0.45, 0.5);
        let pb = Vec2::new(0.55, 0.5);
        let a = rasterize(pa, 0.1, 64).unwrap();
        let b = rasterize(pb, 0.1, 64).unwrap();
        let sa = brute_disc(pa, 0.1, 64);
        let sb = brute_disc(pb, 0.1, 64);
        let inter = sa.iter().filter(|p| sb.contains(p)).count();
        let union = sa.len() + sb.len() - inter;
        assert_eq!(mask_iou(&a, &b).unwrap(), inter as f64 / union as f64);
    }

    #[test]
    fn iou_non_increasing_with_separation() {
        let a = rasterize(Vec2::new(0.3, 0.5), 0.1, 64).unwrap();
        let mut prev = 1.0;
        for k in 0..40 {
            let b = rasterize(Vec2::new(0.3 + k as f64 * 0.01, 0.5), 0.1, 64).unwrap();
            let iou = mask_iou(&a, &b).unwrap();
            assert!(iou <= prev + 1e-15, "k={k}");
            prev = iou;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn trajectory_round_trip_and_absence() {
        let frames: Vec<[Option<Vec2>; MAX_BODIES]> = (0..10)
            .map(|k| [Some(Vec2::new(0.2 + 0.05 * k as f64, 0.5)), None])
            .collect();
        let seq = rasterize_frames(&frames, &[0.05, 0.05], &[true, false], 64).unwrap();
        let rec = extract_trajectory(&seq);
        for (src, got) in frames.iter().zip(&rec) {
            let (s, g) = (src[0].unwrap(), got[0].unwrap());
            assert!((s.x - g.x).abs() <= 1.0 / 64.0 && (s.y - g.y).abs() <= 1.0 / 64.0);
            assert_eq!(got[1], None);
        }
        let empty = MaskSequence {
            grid: 64,
            frames: vec![std::array::from_fn(|s| MaskFrame::empty(64, s, 0)); 5],
        };
        assert!(extract_trajectory(&empty).iter().all(|f| f.iter().all(Option::is_none)));
        let still = vec![[Some(Vec2::new(0.37, 0.61)), None]; 6];
        let rec = extract_trajectory(&rasterize_frames(&still, &[0.05, 0.05], &[true, false], 64).unwrap());
        assert!(rec.windows(2).all(|w| w[0] == w[1]));
    }

    proptest! {
        #[test]
        fn center_round_trip_within_a_pixel(x in 0.1f64..0.9, y in 0.1f64..0.9, r in 0.01f64..0.09, grid in 16usize..128) {
            let p = Vec2::new(x, y);
            let c = center(&rasterize(p, r, grid).unwrap()).unwrap();
            let tol = 1.0 / grid as f64;
            prop_assert!((c.x - p.x).abs() <= tol && (c.y - p.y).abs() <= tol);
        }

        #[test]
        fn iou_is_symmetric(ax in 0.1f64..0.9, ay in 0.1f64..0.9, bx in 0.1f64..0.9, by in 0.1f64..0.9, r in 0.02f64..0.2) {
            let a = rasterize(Vec2::new(ax, ay), r, 64).unwrap();
            let b = rasterize(Vec2::new(bx, by), r, 64).unwrap();
            let (ab, ba) = (mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn translation_by_whole_pixels_shifts_the_mask(
            xi in 320u32..700, yi in 320u32..700, r_px in 2u32..8, kx in -8i32..8, ky in -8i32..8
        ) {
            // Dyadic coordinates keep `x * G` exact at G = 64.
            let grid = 64;
            let p = Vec2::new(xi as f64 / 1024.0, yi as f64 / 1024.0);
            let r = r_px as f64 / 64.0;
            let q = p + Vec2::new(kx as f64 / 64.0, ky as f64 / 64.0);
            let a = rasterize(p, r, grid).unwrap();
            let b = rasterize(q, r, grid).unwrap();
            let shifted: Vec<(i64, i64)> = a.pixels().map(|(i, j)| (i as i64 + kx as i64, j as i64 + ky as i64)).collect();
            let got: Vec<(i64, i64)> = b.pixels().map(|(i, j)| (i as i64, j as i64)).collect();
            let mut shifted_sorted = shifted.clone();
            shifted_sorted.sort_by_key(|&(i, j)| (j, i));
            prop_assert_eq!(shifted_sorted, got);
        }
    }
}
