//! Run-length encoded binary masks over a row-major pixel grid.
//!
//! Wire form is `"<width>x<height>:<run> <run> ..."`. Runs alternate
//! background/foreground starting with background (the first run may be 0)
//! and must sum to `width * height`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("malformed mask header `{0}` (expected `<w>x<h>:runs`)")]
    Header(String),
    #[error("malformed run `{0}`")]
    Run(String),
    #[error("runs cover {covered} pixels but grid has {expected}")]
    Coverage { covered: u64, expected: u64 },
}

/// Binary mask, stored as sorted, disjoint, non-adjacent foreground
/// intervals `[start, end)` over linear pixel indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    width: u32,
    height: u32,
    spans: Vec<(u64, u64)>,
}

impl RleMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            spans: Vec::new(),
        }
    }

    /// Builds a mask from raw foreground spans; spans are sorted and coalesced.
    pub fn from_spans(width: u32, height: u32, mut spans: Vec<(u64, u64)>) -> Self {
        let limit = width as u64 * height as u64;
        spans.retain(|&(s, e)| s < e);
        spans.sort_unstable();
        let mut out: Vec<(u64, u64)> = Vec::with_capacity(spans.len());
        for (s, e) in spans {
            let (s, e) = (s.min(limit), e.min(limit));
            if s >= e {
                continue;
            }
            match out.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => out.push((s, e)),
            }
        }
        Self {
            width,
            height,
            spans: out,
        }
    }

    /// Rasterizes the pixel rectangle `[x0, x1) x [y0, y1)`, clipped to the grid.
    pub fn from_rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let (x0, x1) = (x0.min(width), x1.min(width));
        let (y0, y1) = (y0.min(height), y1.min(height));
        let mut spans = Vec::new();
        if x0 < x1 {
            for y in y0..y1 {
                let row = y as u64 * width as u64;
                spans.push((row + x0 as u64, row + x1 as u64));
            }
        }
        Self::from_spans(width, height, spans)
    }

    /// Builds a mask from a per-pixel predicate. Intended for tests and small grids.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut spans = Vec::new();
        let mut open: Option<u64> = None;
        for y in 0..height {
            for x in 0..width {
                let idx = y as u64 * width as u64 + x as u64;
                match (f(x, y), open) {
                    (true, None) => open = Some(idx),
                    (false, Some(s)) => {
                        spans.push((s, idx));
                        open = None;
                    }
                    _ => {}
                }
            }
        }
        if let Some(s) = open {
            spans.push((s, width as u64 * height as u64));
        }
        Self::from_spans(width, height, spans)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn spans(&self) -> &[(u64, u64)] {
        &self.spans
    }

    pub fn area(&self) -> u64 {
        self.spans.iter().map(|(s, e)| e - s).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = y as u64 * self.width as u64 + x as u64;
        let pos = self.spans.partition_point(|&(_, e)| e <= idx);
        self.spans.get(pos).is_some_and(|&(s, _)| s <= idx)
    }

    pub fn intersection_area(&self, other: &RleMask) -> u64 {
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < self.spans.len() && j < other.spans.len() {
            let (a0, a1) = self.spans[i];
            let (b0, b1) = other.spans[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                total += hi - lo;
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn union(&self, other: &RleMask) -> RleMask {
        let mut spans = self.spans.clone();
        spans.extend_from_slice(&other.spans);
        RleMask::from_spans(self.width, self.height, spans)
    }

    /// Tight pixel bounds `(x0, y0, x1, y1)` with exclusive upper corners.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        if self.spans.is_empty() {
            return None;
        }
        let w = self.width as u64;
        let (mut x0, mut y0, mut x1, mut y1) = (u64::MAX, u64::MAX, 0, 0);
        for &(s, e) in &self.spans {
            let (sy, ey) = (s / w, (e - 1) / w);
            y0 = y0.min(sy);
            y1 = y1.max(ey + 1);
            if sy == ey {
                x0 = x0.min(s % w);
                x1 = x1.max((e - 1) % w + 1);
            } else {
                x0 = 0;
                x1 = w;
            }
        }
        Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
    }

    fn runs(&self) -> Vec<u64> {
        let total = self.width as u64 * self.height as u64;
        let mut runs = Vec::with_capacity(self.spans.len() * 2 + 1);
        let mut cursor = 0;
        for &(s, e) in &self.spans {
            runs.push(s - cursor);
            runs.push(e - s);
            cursor = e;
        }
        if cursor < total || runs.is_empty() {
            runs.push(total - cursor);
        }
        runs
    }
}

impl fmt::Display for RleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}:", self.width, self.height)?;
        for (i, r) in self.runs().iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

impl FromStr for RleMask {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (dims, body) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| MaskError::Header(s.to_string()))?;
        let (w, h) = dims
            .split_once('x')
            .ok_or_else(|| MaskError::Header(dims.to_string()))?;
        let width: u32 = w.trim().parse().map_err(|_| MaskError::Header(dims.to_string()))?;
        let height: u32 = h.trim().parse().map_err(|_| MaskError::Header(dims.to_string()))?;
        let expected = width as u64 * height as u64;

        let mut cursor = 0u64;
        let mut spans = Vec::new();
        for (i, tok) in body.split_whitespace().enumerate() {
            let run: u64 = tok.parse().map_err(|_| MaskError::Run(tok.to_string()))?;
            if i % 2 == 1 && run > 0 {
                spans.push((cursor, cursor + run));
            }
            cursor += run;
        }
        if cursor != expected {
            return Err(MaskError::Coverage {
                covered: cursor,
                expected,
            });
        }
        Ok(RleMask::from_spans(width, height, spans))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_and_prints() {
        let m: RleMask = "4x2:1 2 3 2".parse().unwrap();
        assert_eq!(m.area(), 4);
        assert!(m.contains(1, 0) && m.contains(2, 0) && !m.contains(3, 0));
        assert!(m.contains(2, 1) && m.contains(3, 1));
        assert_eq!(m.to_string(), "4x2:1 2 3 2");
        assert_eq!(m.bounds(), Some((1, 0, 4, 2)));
    }

    #[test]
    fn rejects_bad_coverage() {
        assert!(matches!("4x2:1 2".parse::<RleMask>(), Err(MaskError::Coverage { .. })));
        assert!("4by2:8".parse::<RleMask>().is_err());
    }

    #[test]
    fn rect_area_and_bounds() {
        let m = RleMask::from_rect(10, 10, 2, 3, 5, 7);
        assert_eq!(m.area(), 12);
        assert_eq!(m.bounds(), Some((2, 3, 5, 7)));
    }

    fn brute_inter(a: &RleMask, b: &RleMask) -> u64 {
        let mut n = 0;
        for y in 0..a.height() {
            for x in 0..a.width() {
                if a.contains(x, y) && b.contains(x, y) {
                    n += 1;
                }
            }
        }
        n
    }

    proptest! {
        #[test]
        fn string_form_round_trips(bits in proptest::collection::vec(any::<bool>(), 48)) {
            let m = RleMask::from_fn(8, 6, |x, y| bits[(y * 8 + x) as usize]);
            let back: RleMask = m.to_string().parse().unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn intersection_matches_pixel_loop(
            a in proptest::collection::vec(any::<bool>(), 64),
            b in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let ma = RleMask::from_fn(8, 8, |x, y| a[(y * 8 + x) as usize]);
            let mb = RleMask::from_fn(8, 8, |x, y| b[(y * 8 + x) as usize]);
            prop_assert_eq!(ma.intersection_area(&mb), brute_inter(&ma, &mb));
            let u = ma.union(&mb);
            prop_assert_eq!(u.area(), ma.area() + mb.area() - brute_inter(&ma, &mb));
        }
    }
}
