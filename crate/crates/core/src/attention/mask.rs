use crate::error::{shape_err, Result};

/// Additive value for excluded (query, key) pairs. Large enough that the
/// softmax weight underflows to exactly zero, finite so gradients stay finite.
pub const MASK_SENTINEL: f64 = -1e9;

/// Per-window additive attention mask, `[windows, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowMask {
    windows: usize,
    tokens: usize,
    additive: Vec<f64>,
}

impl WindowMask {
    pub fn zeros(windows: usize, tokens: usize) -> Self {
        Self {
            windows,
            tokens,
            additive: vec![0.0; windows * tokens * tokens],
        }
    }

    pub fn from_exclusions(windows: usize, tokens: usize, excluded: &[bool]) -> Result<Self> {
        if excluded.len() != windows * tokens * tokens {
            return Err(shape_err(format!(
                "exclusion map of {} entries for {windows} windows of {tokens} tokens",
                excluded.len()
            )));
        }
        Ok(Self {
            windows,
            tokens,
            additive: excluded
                .iter()
                .map(|&e| if e { MASK_SENTINEL } else { 0.0 })
                .collect(),
        })
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn additive(&self) -> &[f64] {
        &self.additive
    }

    pub fn is_excluded(&self, window: usize, q: usize, k: usize) -> bool {
        self.additive[(window * self.tokens + q) * self.tokens + k] != 0.0
    }

    pub fn is_all_zero(&self) -> bool {
        self.additive.iter().all(|&v| v == 0.0)
    }

    /// 1 where attention is allowed, 0 where excluded.
    pub fn keep(&self) -> Vec<f64> {
        self.additive
            .iter()
            .map(|&v| if v == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Index of the first query row with every key excluded, if any.
    pub fn degenerate_row(&self) -> Option<usize> {
        self.additive
            .chunks(self.tokens)
            .position(|row| row.iter().all(|&v| v != 0.0))
    }
}

/// Mask for attention over windows of a feature map cyclically shifted by
/// `(-shift, -shift)`. Tokens that came from different regions of the
/// unshifted map may not attend to each other.
pub fn build_shift_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<WindowMask> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(shape_err(format!("{h}x{w} is not divisible by window {m}")));
    }
    if shift >= m {
        return Err(shape_err(format!("shift {shift} must be smaller than window {m}")));
    }
    let (gh, gw) = (h / m, w / m);
    let n = m * m;
    if shift == 0 {
        return Ok(WindowMask::zeros(gh * gw, n));
    }
    // Label the shifted map with the three bands per axis.
    let band = |pos: usize, len: usize| -> usize {
        if pos < len - m {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let mut excluded = vec![false; gh * gw * n * n];
    for wy in 0..gh {
        for wx in 0..gw {
            let win = wy * gw + wx;
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = (wy * m + t / m, wx * m + t % m);
                    band(y, h) * 3 + band(x, w)
                })
                .collect();
            for q in 0..n {
                for k in 0..n {
                    excluded[(win * n + q) * n + k] = labels[q] != labels[k];
                }
            }
        }
    }
    WindowMask::from_exclusions(gh * gw, n, &excluded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_all_zero() {
        let m = build_shift_mask(14, 14, 7, 0).unwrap();
        assert!(m.is_all_zero());
        assert_eq!((m.windows(), m.tokens()), (4, 49));
    }

    #[test]
    fn rejects_bad_shift() {
        assert!(build_shift_mask(14, 14, 7, 7).is_err());
        assert!(build_shift_mask(15, 14, 7, 3).is_err());
    }

    #[test]
    fn symmetric_with_open_diagonal() {
        let m = build_shift_mask(14, 14, 7, 3).unwrap();
        for w in 0..m.windows() {
            for q in 0..49 {
                assert!(!m.is_excluded(w, q, q));
                for k in 0..49 {
                    assert_eq!(m.is_excluded(w, q, k), m.is_excluded(w, k, q));
                }
            }
        }
        assert!(m.degenerate_row().is_none());
    }
}
