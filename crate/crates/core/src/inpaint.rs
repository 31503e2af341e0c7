//! Image restoration: fast-marching inpainting and the median-filter baseline.
//!
//! The fast-marching inpainter propagates an arrival-time field `T` inward
//! from the mask boundary with a narrow-band priority queue. Masked pixels
//! are filled in ascending-`T` order from already-valued pixels within a
//! radius, each contribution weighted by a directional, a geometric-distance
//! and a level-set term and extrapolated with a first-order gradient term.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::image::{Image, Mask, check_mask};

pub const DEFAULT_RADIUS: usize = 3;

/// Per-pixel FMM state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Known,
    Band,
    Inside,
}

/// Solves `(T - Tx)^2 + (T - Ty)^2 = 1` for the upwind arrival time.
///
/// With both neighbors present and `|Tx - Ty| < 1`, returns the smallest root
/// not below `max(Tx, Ty)`; otherwise `min(neighbors) + 1`.
pub fn solve_eikonal_step(horizontal: Option<f64>, vertical: Option<f64>) -> Result<f64> {
    match (horizontal, vertical) {
        (Some(a), Some(b)) => {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Precondition("eikonal neighbor values must be finite".into()));
            }
            let diff = a - b;
            if diff.abs() >= 1.0 {
                return Ok(a.min(b) + 1.0);
            }
            let r = (2.0 - diff * diff).sqrt();
            let hi = a.max(b);
            let low_root = (a + b - r) / 2.0;
            if low_root >= hi {
                Ok(low_root)
            } else {
                Ok((a + b + r) / 2.0)
            }
        }
        (Some(a), None) | (None, Some(a)) => {
            if !a.is_finite() {
                return Err(Error::Precondition("eikonal neighbor value must be finite".into()));
            }
            Ok(a + 1.0)
        }
        (None, None) => Err(Error::Precondition(
            "eikonal update needs at least one neighbor value".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy)]
struct BandEntry {
    t: f64,
    index: usize,
}

impl PartialEq for BandEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for BandEntry {}

impl PartialOrd for BandEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so that `BinaryHeap` pops the smallest T first, ties by
// row-major index.
impl Ord for BandEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Arrival-time field and narrow band of one inpainting run.
#[derive(Debug, Clone)]
pub struct FmmState {
    height: usize,
    width: usize,
    flags: Vec<Flag>,
    t: Vec<f64>,
    band: BinaryHeap<BandEntry>,
}

impl FmmState {
    /// Band = unmasked pixels 4-adjacent to the mask (T = 0); masked pixels
    /// start INSIDE with T = +inf; everything else is KNOWN with T = 0.
    pub fn new(mask: &Mask) -> Self {
        let (height, width) = mask.shape();
        let grid = mask.to_grid();
        let mut flags = vec![Flag::Known; height * width];
        let mut t = vec![0.0; height * width];
        for (i, &m) in grid.iter().enumerate() {
            if m {
                flags[i] = Flag::Inside;
                t[i] = f64::INFINITY;
            }
        }
        let mut band = BinaryHeap::new();
        for r in 0..height {
            for c in 0..width {
                let i = r * width + c;
                if grid[i] {
                    continue;
                }
                let touches_mask = neighbors4(r, c, height, width).any(|(nr, nc)| grid[nr * width + nc]);
                if touches_mask {
                    flags[i] = Flag::Band;
                    band.push(BandEntry { t: 0.0, index: i });
                }
            }
        }
        Self {
            height,
            width,
            flags,
            t,
            band,
        }
    }

    pub fn flag(&self, row: usize, col: usize) -> Flag {
        self.flags[row * self.width + col]
    }

    pub fn arrival_time(&self, row: usize, col: usize) -> f64 {
        self.t[row * self.width + col]
    }

    fn t_if_reached(&self, r: isize, c: isize) -> Option<f64> {
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            return None;
        }
        let i = r as usize * self.width + c as usize;
        (self.flags[i] != Flag::Inside).then_some(self.t[i])
    }

    /// Minimum over the four upwind quadrant solutions at `(r, c)`.
    fn update_time(&self, r: usize, c: usize) -> f64 {
        let (r, c) = (r as isize, c as isize);
        let mut best = f64::INFINITY;
        for dr in [-1, 1] {
            for dc in [-1, 1] {
                let vertical = self.t_if_reached(r + dr, c);
                let horizontal = self.t_if_reached(r, c + dc);
                if let Ok(sol) = solve_eikonal_step(horizontal, vertical) {
                    best = best.min(sol);
                }
            }
        }
        best
    }

    /// Gradient of T at `(r, c)` from reached neighbors: central differences,
    /// one-sided at gaps, zero when no neighbor is reached.
    fn time_gradient(&self, r: usize, c: usize) -> (f64, f64) {
        let here = self.t[r * self.width + c];
        let (ri, ci) = (r as isize, c as isize);
        let axis = |minus: Option<f64>, plus: Option<f64>| match (minus, plus) {
            (Some(m), Some(p)) => (p - m) * 0.5,
            (None, Some(p)) => p - here,
            (Some(m), None) => here - m,
            (None, None) => 0.0,
        };
        let gy = axis(self.t_if_reached(ri - 1, ci), self.t_if_reached(ri + 1, ci));
        let gx = axis(self.t_if_reached(ri, ci - 1), self.t_if_reached(ri, ci + 1));
        (gy, gx)
    }
}

fn neighbors4(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (r.wrapping_sub(1), c),
        (r + 1, c),
        (r, c.wrapping_sub(1)),
        (r, c + 1),
    ];
    cand.into_iter().filter(move |&(nr, nc)| nr < h && nc < w)
}

/// One processed masked pixel, in processing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillEvent {
    pub row: usize,
    pub col: usize,
    pub arrival_time: f64,
}

/// Fast-marching inpainting of the masked pixels of `image`.
pub fn telea_inpaint(image: &Image, mask: &Mask, radius: usize) -> Result<Image> {
    telea_inpaint_traced(image, mask, radius).map(|(img, _)| img)
}

/// As [`telea_inpaint`], also returning the order in which masked pixels were
/// filled.
pub fn telea_inpaint_traced(image: &Image, mask: &Mask, radius: usize) -> Result<(Image, Vec<FillEvent>)> {
    check_mask(image, mask)?;
    let (h, w, channels) = image.shape();
    if mask.len() * 2 > h * w {
        return Err(Error::Precondition(format!(
            "mask covers {} of {} pixels; at most half may be erased",
            mask.len(),
            h * w
        )));
    }
    if radius == 0 {
        return Err(Error::Precondition("inpainting radius must be at least 1".into()));
    }

    let mut out = image.clone();
    let mut has_value: Vec<bool> = mask.to_grid().iter().map(|m| !m).collect();
    let mut state = FmmState::new(mask);
    let mut trace = Vec::with_capacity(mask.len());

    let rad = radius as isize;
    let offsets: Vec<(isize, isize)> = (-rad..=rad)
        .flat_map(|dy| (-rad..=rad).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| (dy != 0 || dx != 0) && dy * dy + dx * dx <= rad * rad)
        .collect();

    let mut acc = vec![0.0; channels];
    while let Some(BandEntry { t, index }) = state.band.pop() {
        if state.flags[index] == Flag::Known {
            continue;
        }
        state.flags[index] = Flag::Known;
        let (r, c) = (index / w, index % w);

        if !has_value[index] {
            fill_pixel(&mut out, &has_value, &state, r, c, &offsets, &mut acc);
            has_value[index] = true;
            trace.push(FillEvent {
                row: r,
                col: c,
                arrival_time: t,
            });
        }

        for (nr, nc) in neighbors4(r, c, h, w) {
            let ni = nr * w + nc;
            if state.flags[ni] == Flag::Inside {
                let nt = state.update_time(nr, nc);
                state.t[ni] = nt;
                state.flags[ni] = Flag::Band;
                state.band.push(BandEntry { t: nt, index: ni });
            }
        }
    }
    Ok((out, trace))
}

#[allow(clippy::too_many_arguments)]
fn fill_pixel(
    out: &mut Image,
    has_value: &[bool],
    state: &FmmState,
    r: usize,
    c: usize,
    offsets: &[(isize, isize)],
    acc: &mut [f64],
) {
    let (h, w, _) = out.shape();
    let t_here = state.t[r * w + c];
    let (gy, gx) = state.time_gradient(r, c);
    let gnorm = gy.hypot(gx);
    let normal = if gnorm > 0.0 { Some((gy / gnorm, gx / gnorm)) } else { None };

    acc.iter_mut().for_each(|a| *a = 0.0);
    let mut weight_sum = 0.0;
    for &(dy, dx) in offsets {
        let (qr, qc) = (r as isize + dy, c as isize + dx);
        if qr < 0 || qc < 0 || qr as usize >= h || qc as usize >= w {
            continue;
        }
        let (qr, qc) = (qr as usize, qc as usize);
        let qi = qr * w + qc;
        if !has_value[qi] {
            continue;
        }
        // r = p - q
        let (ry, rx) = (-(dy as f64), -(dx as f64));
        let len2 = ry * ry + rx * rx;
        let len = len2.sqrt();
        let dir = match normal {
            Some((ny, nx)) => ((ry * ny + rx * nx) / len).abs().max(1e-6),
            None => 1.0,
        };
        let dst = 1.0 / len2;
        let lev = 1.0 / (1.0 + (t_here - state.t[qi]).abs());
        let weight = dir * dst * lev;
        for (ch, a) in acc.iter_mut().enumerate() {
            let (iy, ix) = value_gradient(out, has_value, qr, qc, ch);
            *a += weight * (out.get(qr, qc, ch) + iy * ry + ix * rx);
        }
        weight_sum += weight;
    }
    for (ch, a) in acc.iter().enumerate() {
        let v = if weight_sum > 0.0 { a / weight_sum } else { 0.0 };
        out.set(r, c, ch, v);
    }
}

/// Image gradient at `(r, c)` over valued pixels, central where possible.
fn value_gradient(img: &Image, has_value: &[bool], r: usize, c: usize, ch: usize) -> (f64, f64) {
    let (h, w, _) = img.shape();
    let here = img.get(r, c, ch);
    let valued = |rr: isize, cc: isize| -> Option<f64> {
        if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
            return None;
        }
        let (rr, cc) = (rr as usize, cc as usize);
        has_value[rr * w + cc].then(|| img.get(rr, cc, ch))
    };
    let axis = |minus: Option<f64>, plus: Option<f64>| match (minus, plus) {
        (Some(m), Some(p)) => (p - m) * 0.5,
        (None, Some(p)) => p - here,
        (Some(m), None) => here - m,
        (None, None) => 0.0,
    };
    let (ri, ci) = (r as isize, c as isize);
    (
        axis(valued(ri - 1, ci), valued(ri + 1, ci)),
        axis(valued(ri, ci - 1), valued(ri, ci + 1)),
    )
}

/// Per-channel median over a `window × window` neighborhood with
/// clamp-to-border replication.
pub fn median_filter(image: &Image, window: usize) -> Result<Image> {
    check_window(window)?;
    let (h, w, _) = image.shape();
    let mut out = image.clone();
    let mut buf = Vec::with_capacity(window * window);
    for r in 0..h {
        for c in 0..w {
            median_at(image, &mut out, r, c, window, &mut buf);
        }
    }
    Ok(out)
}

/// Median filter applied only at masked pixels.
pub fn median_restore_masked(image: &Image, mask: &Mask, window: usize) -> Result<Image> {
    check_window(window)?;
    check_mask(image, mask)?;
    let mut out = image.clone();
    let mut buf = Vec::with_capacity(window * window);
    for &(r, c) in mask.coords() {
        median_at(image, &mut out, r, c, window, &mut buf);
    }
    Ok(out)
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "median window must be odd and at least 3, got {window}"
        )));
    }
    Ok(())
}

fn median_at(src: &Image, out: &mut Image, r: usize, c: usize, window: usize, buf: &mut Vec<f64>) {
    let (h, w, channels) = src.shape();
    let half = (window / 2) as isize;
    for ch in 0..channels {
        buf.clear();
        for dy in -half..=half {
            for dx in -half..=half {
                let rr = (r as isize + dy).clamp(0, h as isize - 1) as usize;
                let cc = (c as isize + dx).clamp(0, w as isize - 1) as usize;
                buf.push(src.get(rr, cc, ch));
            }
        }
        buf.sort_by(f64::total_cmp);
        out.set(r, c, ch, buf[buf.len() / 2]);
    }
}
