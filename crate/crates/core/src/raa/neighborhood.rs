use crate::error::{RaaError, Result};

/// Local windows `K(i)` for every pixel of an `h×w` grid, stored CSR-style.
///
/// Pixels are row-major ids `y·w + x`. Each list is row-major ordered and
/// truncated at the borders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub include_self: bool,
    offsets: Vec<usize>,
    ids: Vec<usize>,
}

impl Neighborhoods {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.ids[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Range of pair slots belonging to pixel `i`.
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Total number of `(i, j ∈ K(i))` pairs.
    pub fn pair_count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }
}

pub fn build_neighborhoods(h: usize, w: usize, window: usize, include_self: bool) -> Result<Neighborhoods> {
    if window % 2 == 0 {
        return Err(RaaError::Config(format!("window must be odd, got {window}")));
    }
    if h == 0 || w == 0 {
        return Err(RaaError::Config("grid dimensions must be >= 1".into()));
    }
    let r = (window / 2) as isize;
    let mut offsets = Vec::with_capacity(h * w + 1);
    let mut ids = Vec::new();
    offsets.push(0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ny in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for nx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    if !include_self && ny == y && nx == x {
                        continue;
                    }
                    ids.push(ny as usize * w + nx as usize);
                }
            }
            offsets.push(ids.len());
        }
    }
    Ok(Neighborhoods {
        h,
        w,
        window,
        include_self,
        offsets,
        ids,
    })
}
