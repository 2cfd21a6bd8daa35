/// Relative-position lookup for an `M x M` window:
/// `index[q,k] = (dy + M - 1) * (2M - 1) + (dx + M - 1)` with
/// `(dy, dx) = pos(q) - pos(k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativePositionIndex {
    window: usize,
    index: Vec<usize>,
}

impl RelativePositionIndex {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Number of distinct offsets, `(2M - 1)^2`.
    pub fn table_len(&self) -> usize {
        (2 * self.window - 1).pow(2)
    }

    pub fn get(&self, q: usize, k: usize) -> usize {
        self.index[q * self.tokens() + k]
    }

    /// Row-major `N x N` table.
    pub fn as_slice(&self) -> &[usize] {
        &self.index
    }
}

pub fn relative_position_index(m: usize) -> RelativePositionIndex {
    assert!(m >= 1, "window must be positive");
    let n = m * m;
    let side = 2 * m - 1;
    let mut index = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = ((q / m) as isize, (q % m) as isize);
        for k in 0..n {
            let (ky, kx) = ((k / m) as isize, (k % m) as isize);
            let dy = (qy - ky + m as isize - 1) as usize;
            let dx = (qx - kx + m as isize - 1) as usize;
            index.push(dy * side + dx);
        }
    }
    RelativePositionIndex { window: m, index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn diagonal_is_center() {
        let idx = relative_position_index(2);
        for q in 0..4 {
            assert_eq!(idx.get(q, q), 4);
        }
    }

    #[test]
    fn hand_enumerated_m2() {
        let idx = relative_position_index(2);
        // q=(0,0), k=(1,1): offset (-1,-1)
        assert_eq!(idx.get(0, 3), 0);
        assert_eq!(idx.get(3, 0), 8);
        assert_eq!(idx.get(0, 1), 3);
        // q=(0,1), k=(1,0): offset (-1,+1)
        assert_eq!(idx.get(1, 2), 2);
    }

    #[test]
    fn covers_every_offset() {
        for m in 2..=7 {
            let idx = relative_position_index(m);
            let set: BTreeSet<usize> = idx.as_slice().iter().copied().collect();
            assert_eq!(set, (0..idx.table_len()).collect());
        }
    }
}
