//! Brute-force label recovery for exact-pool pyramids: average-pool the
//! child down to the parent's scale and find the parent cell it matches.

use crate::error::{Error, Result};
use crate::pyramid::Raster;
use crate::Scalar;

/// Best and runner-up distances closer than this are a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleMatch {
    pub label: usize,
    /// Squared L2 distance to the best cell.
    pub best: f64,
    pub runner_up: f64,
}

/// Scores every one of the `4^n` parent cells against the pooled child.
pub fn locate_oracle_scored<T: Scalar>(parent: &Raster<T>, child: &Raster<T>, n: usize) -> Result<OracleMatch> {
    let side = 1usize << n;
    let (ph, pw) = (parent.height(), parent.width());
    if ph % side != 0 || pw % side != 0 {
        return Err(Error::ShapeMismatch(format!(
            "parent {ph}x{pw} not divisible into {side}x{side} cells"
        )));
    }
    let (bh, bw) = (ph / side, pw / side);
    if child.height() != bh * side || child.width() != bw * side || child.channels() != parent.channels() {
        return Err(Error::ShapeMismatch(format!(
            "child {}x{} does not pool to a {bh}x{bw} cell",
            child.height(),
            child.width()
        )));
    }
    let pooled = child.avg_pool(side);
    let mut scores = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let cell = parent.crop(i * bh, j * bw, bh, bw)?;
            let d: f64 = cell
                .data()
                .iter()
                .zip(pooled.data())
                .map(|(a, b)| {
                    let e = a.to_f64_lossy() - b.to_f64_lossy();
                    e * e
                })
                .sum();
            scores.push(d);
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (best, second) = (scores[order[0]], scores[order[1]]);
    Ok(OracleMatch {
        label: order[0],
        best,
        runner_up: second,
    })
}

/// Label of the parent cell the child pools onto; `AmbiguousMatch` if two
/// cells fit equally well.
pub fn locate_oracle<T: Scalar>(parent: &Raster<T>, child: &Raster<T>, n: usize) -> Result<usize> {
    let m = locate_oracle_scored(parent, child, n)?;
    if m.runner_up - m.best <= TIE_TOLERANCE {
        return Err(Error::AmbiguousMatch(m.best, m.runner_up));
    }
    Ok(m.label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n1_exact_copy_of_block_3() {
        // 4x4 parent, 2x2 cells with distinct values
        let mut parent = Raster::<f64>::new(4, 4, 3);
        for y in 0..4 {
            for x in 0..4 {
                let cell = (y / 2) * 2 + x / 2;
                let v = 0.1 + 0.2 * cell as f64 + 0.01 * ((y % 2) * 2 + x % 2) as f64;
                parent.pixel_mut(y, x).fill(v);
            }
        }
        // child at double resolution whose 2x2 pooling reproduces cell 3
        let block = parent.crop(2, 2, 2, 2).unwrap();
        let mut child = Raster::<f64>::new(4, 4, 3);
        for y in 0..4 {
            for x in 0..4 {
                let v = block.pixel(y / 2, x / 2)[0];
                child.pixel_mut(y, x).fill(v);
            }
        }
        assert_eq!(locate_oracle(&parent, &child, 1).unwrap(), 3);
    }

    #[test]
    fn flat_parent_is_ambiguous() {
        let parent = Raster::filled(4, 4, &[0.5f64, 0.5, 0.5]);
        let child = Raster::filled(4, 4, &[0.5f64, 0.5, 0.5]);
        assert!(matches!(
            locate_oracle(&parent, &child, 1),
            Err(Error::AmbiguousMatch(..))
        ));
    }

    #[test]
    fn indivisible_parent_is_rejected() {
        let parent = Raster::<f64>::new(5, 5, 3);
        let child = Raster::<f64>::new(5, 5, 3);
        assert!(locate_oracle(&parent, &child, 1).is_err());
    }
}
