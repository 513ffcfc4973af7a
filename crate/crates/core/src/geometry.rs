//! Window rectangles, four-window patch groups, and pairwise overlaps.
//!
//! A patch group places four equal square windows in a 2x2 arrangement:
//! window 1 top-left, 2 top-right, 3 bottom-left, 4 bottom-right. Along each
//! axis the two window rows (or columns) start at `first <= second`, and the
//! shift `second - first` is capped so adjacent windows share at least
//! `min_overlap` pixels along that axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!(
                "window must be non-empty, got {height}x{width}"
            )));
        }
        Ok(Self {
            top,
            left,
            height,
            width,
        })
    }

    /// Window covering a whole `height x width` image.
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Same size, shifted into coordinates relative to `origin`'s top-left.
    fn relative_to(&self, origin: &Window) -> Window {
        Window {
            top: self.top - origin.top,
            left: self.left - origin.left,
            height: self.height,
            width: self.width,
        }
    }
}

/// Intersection of two windows in global and both windows' local coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub global: Window,
    pub local_a: Window,
    pub local_b: Window,
}

pub fn overlap_rect(a: &Window, b: &Window) -> Option<Overlap> {
    let top = a.top.max(b.top);
    let left = a.left.max(b.left);
    let bottom = a.bottom().min(b.bottom());
    let right = a.right().min(b.right());
    if bottom <= top || right <= left {
        return None;
    }
    let global = Window {
        top,
        left,
        height: bottom - top,
        width: right - left,
    };
    Some(Overlap {
        global,
        local_a: global.relative_to(a),
        local_b: global.relative_to(b),
    })
}

/// Overlap of windows `k < l` of a patch group; indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlapSpec {
    pub pair: (usize, usize),
    pub global: Window,
    pub local_k: Window,
    pub local_l: Window,
}

/// The six window pairs in evaluation order.
pub const PAIRS: [(usize, usize); 6] = [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisPlacement {
    pub first: usize,
    pub second: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGroup {
    pub image_id: ImageId,
    pub windows: [Window; 4],
}

impl PatchGroup {
    /// Window `k` with 1-based indexing.
    pub fn window(&self, k: usize) -> &Window {
        &self.windows[k - 1]
    }
}

/// Patch-group layout parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub img_h: usize,
    pub img_w: usize,
    pub win: usize,
    pub min_overlap: usize,
}

impl GroupLayout {
    pub fn new(img_h: usize, img_w: usize, win: usize, min_overlap: usize) -> Result<Self> {
        if win == 0 || win > img_h || win > img_w {
            return Err(Error::InfeasibleLayout(format!(
                "window {win} does not fit a {img_h}x{img_w} image"
            )));
        }
        if min_overlap >= win {
            return Err(Error::InfeasibleLayout(format!(
                "min_overlap {min_overlap} must be smaller than window {win}"
            )));
        }
        Ok(Self {
            img_h,
            img_w,
            win,
            min_overlap,
        })
    }

    /// Largest shift between the two rows (or columns) along an axis of `extent` pixels.
    fn max_shift(&self, extent: usize) -> usize {
        (self.win - self.min_overlap.max(1)).min(extent - self.win)
    }

    fn check_axis(&self, p: AxisPlacement, extent: usize, axis: &str) -> Result<()> {
        if p.second < p.first
            || p.second - p.first > self.max_shift(extent)
            || p.second + self.win > extent
        {
            return Err(Error::InfeasibleLayout(format!(
                "{axis} placement {p:?} violates window {} / min_overlap {} in extent {extent}",
                self.win, self.min_overlap
            )));
        }
        Ok(())
    }

    pub fn place(&self, image_id: ImageId, rows: AxisPlacement, cols: AxisPlacement) -> Result<PatchGroup> {
        self.check_axis(rows, self.img_h, "row")?;
        self.check_axis(cols, self.img_w, "column")?;
        let w = |top, left| Window {
            top,
            left,
            height: self.win,
            width: self.win,
        };
        Ok(PatchGroup {
            image_id,
            windows: [
                w(rows.first, cols.first),
                w(rows.first, cols.second),
                w(rows.second, cols.first),
                w(rows.second, cols.second),
            ],
        })
    }

    fn sample_axis<R: Rng + ?Sized>(&self, extent: usize, rng: &mut R) -> AxisPlacement {
        let last = extent - self.win;
        let max_shift = self.max_shift(extent);
        // Uniform over unordered start pairs whose shift is within range.
        loop {
            let a = rng.random_range(0..=last);
            let b = rng.random_range(0..=last);
            let (first, second) = if a <= b { (a, b) } else { (b, a) };
            if second - first <= max_shift {
                return AxisPlacement { first, second };
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, image_id: ImageId, rng: &mut R) -> PatchGroup {
        let rows = self.sample_axis(self.img_h, rng);
        let cols = self.sample_axis(self.img_w, rng);
        self.place(image_id, rows, cols)
            .expect("sampled placement is feasible by construction")
    }
}

pub fn sample_patch_group<R: Rng + ?Sized>(
    image_id: ImageId,
    img_h: usize,
    img_w: usize,
    win: usize,
    min_overlap: usize,
    rng: &mut R,
) -> Result<PatchGroup> {
    Ok(GroupLayout::new(img_h, img_w, win, min_overlap)?.sample(image_id, rng))
}

/// The first `n` of the six pair overlaps, in [`PAIRS`] order.
pub fn enumerate_pairs(group: &PatchGroup, n: usize) -> Result<Vec<OverlapSpec>> {
    if n > PAIRS.len() {
        return Err(Error::Precondition(format!("at most 6 pairs, requested {n}")));
    }
    PAIRS[..n]
        .iter()
        .map(|&(k, l)| {
            let o = overlap_rect(group.window(k), group.window(l)).ok_or_else(|| {
                Error::InfeasibleLayout(format!("windows {k} and {l} do not overlap"))
            })?;
            Ok(OverlapSpec {
                pair: (k, l),
                global: o.global,
                local_k: o.local_a,
                local_l: o.local_b,
            })
        })
        .collect()
}
