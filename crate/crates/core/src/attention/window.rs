//! Window tiling and cyclic shifts, expressed as gather indices so the same
//! maps drive both plain tensors and the tape.

use crate::error::{shape_err, Result};
use crate::numcore::{Tape, Tensor, Var};

fn check_tiling(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(shape_err(format!(
            "spatial dims {h}x{w} are not divisible by window {m}"
        )));
    }
    Ok(())
}

/// Source index (into `[b,h,w,c]`) of every element of the partitioned
/// `[b*(h/M)*(w/M), M*M, c]` layout. Windows are ordered batch-major, then
/// row-major over the window grid; tokens row-major inside a window.
pub fn partition_index(b: usize, h: usize, w: usize, c: usize, m: usize) -> Result<Vec<usize>> {
    check_tiling(h, w, m)?;
    let (gh, gw) = (h / m, w / m);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wy in 0..gh {
            for wx in 0..gw {
                for ty in 0..m {
                    for tx in 0..m {
                        let (y, x) = (wy * m + ty, wx * m + tx);
                        let base = ((bi * h + y) * w + x) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Source index for `roll(x, (-shift, -shift))` on `[b,h,w,c]`:
/// `out[y, x] = in[(y + shift) mod h, (x + shift) mod w]`. A negative shift
/// rolls the other way.
pub fn roll_index(b: usize, h: usize, w: usize, c: usize, shift: isize) -> Vec<usize> {
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as isize + shift).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize + shift).rem_euclid(w as isize) as usize;
                let base = ((bi * h + sy) * w + sx) * c;
                index.extend(base..base + c);
            }
        }
    }
    index
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (dst, &src) in index.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// `outer[inner[i]]`: first apply `outer`'s layout, then gather by `inner`.
fn compose(outer: &[usize], inner: &[usize]) -> Vec<usize> {
    inner.iter().map(|&i| outer[i]).collect()
}

pub fn window_partition(x: &Tensor, m: usize) -> Result<Tensor> {
    let [b, h, w, c] = x.shape()[..] else {
        return Err(shape_err(format!("window_partition needs [b,h,w,c], got {:?}", x.shape())));
    };
    let index = partition_index(b, h, w, c, m)?;
    let data = index.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(&[b * (h / m) * (w / m), m * m, c], data)
}

pub fn window_reverse(windows: &Tensor, m: usize, h: usize, w: usize) -> Result<Tensor> {
    let [nw, n, c] = windows.shape()[..] else {
        return Err(shape_err(format!("window_reverse needs [nw,N,c], got {:?}", windows.shape())));
    };
    check_tiling(h, w, m)?;
    let per_image = (h / m) * (w / m);
    if n != m * m || nw % per_image != 0 {
        return Err(shape_err(format!(
            "{nw} windows of {n} tokens cannot tile {h}x{w} with window {m}"
        )));
    }
    let b = nw / per_image;
    let inv = invert(&partition_index(b, h, w, c, m)?);
    let data = inv.iter().map(|&i| windows.data()[i]).collect();
    Tensor::new(&[b, h, w, c], data)
}

/// Cyclic shift by `-shift` followed by window partitioning, on the tape.
pub fn shift_partition(tape: &mut Tape, x: Var, m: usize, shift: usize) -> Result<Var> {
    let [b, h, w, c] = tape.shape(x)[..] else {
        return Err(shape_err(format!("expected [b,h,w,c], got {:?}", tape.shape(x))));
    };
    let part = partition_index(b, h, w, c, m)?;
    let index = if shift == 0 {
        part
    } else {
        compose(&roll_index(b, h, w, c, shift as isize), &part)
    };
    tape.gather(x, &[b * (h / m) * (w / m), m * m, c], index)
}

/// Inverse of [`shift_partition`].
pub fn reverse_unshift(
    tape: &mut Tape,
    windows: Var,
    m: usize,
    b: usize,
    h: usize,
    w: usize,
    shift: usize,
) -> Result<Var> {
    let c = *tape.shape(windows).last().expect("rank >= 1");
    let part = partition_index(b, h, w, c, m)?;
    let forward = if shift == 0 {
        part
    } else {
        compose(&roll_index(b, h, w, c, shift as isize), &part)
    };
    if forward.len() != tape.value(windows).len() {
        return Err(shape_err(format!(
            "windows {:?} do not match image {b}x{h}x{w}x{c}",
            tape.shape(windows)
        )));
    }
    tape.gather(windows, &[b, h, w, c], invert(&forward))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn single_tile() {
        let x = Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = window_partition(&x, 2).unwrap();
        assert_eq!(w.shape(), &[1, 4, 1]);
        assert_eq!(w.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn four_windows() {
        let x = seq(&[1, 4, 4, 1]);
        let w = window_partition(&x, 2).unwrap();
        assert_eq!(w.shape(), &[4, 4, 1]);
        // window 0 = rows 0-1, cols 0-1
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn indivisible_dims_fail() {
        assert!(window_partition(&seq(&[1, 5, 4, 1]), 2).is_err());
        assert!(window_reverse(&seq(&[3, 4, 1]), 2, 4, 4).is_err());
    }

    #[test]
    fn roll_moves_content_up_left() {
        let idx = roll_index(1, 3, 3, 1, 1);
        // out[0,0] = in[1,1]
        assert_eq!(idx[0], 4);
        let back = roll_index(1, 3, 3, 1, -1);
        let composed: Vec<usize> = back.iter().map(|&i| idx[i]).collect();
        assert_eq!(composed, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn shifted_partition_round_trips_on_tape() {
        let x = seq(&[2, 4, 4, 3]);
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let p = shift_partition(&mut tape, v, 2, 1).unwrap();
        let r = reverse_unshift(&mut tape, p, 2, 2, 4, 4, 1).unwrap();
        assert_eq!(tape.tensor(r), x);
    }
}
