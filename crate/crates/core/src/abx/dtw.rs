use ndarray::ArrayView2;

use super::AbxError;

/// Frames scaled to unit norm, with zero-norm frames flagged.
#[derive(Debug, Clone)]
pub struct NormedFrames {
    dim: usize,
    data: Vec<f64>,
    zero: Vec<bool>,
}

impl NormedFrames {
    pub fn new(frames: ArrayView2<'_, f32>) -> Self {
        let dim = frames.ncols();
        let mut data = Vec::with_capacity(frames.len());
        let mut zero = Vec::with_capacity(frames.nrows());
        for row in frames.rows() {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm > 0.0 {
                data.extend(row.iter().map(|&v| f64::from(v) / norm));
                zero.push(false);
            } else {
                data.extend(std::iter::repeat_n(0.0, dim));
                zero.push(true);
            }
        }
        Self { dim, data, zero }
    }

    pub fn len(&self) -> usize {
        self.zero.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zero.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `1 - cos(a_i, b_j)`; 0 between two zero frames, 1 between a zero and
    /// a non-zero frame.
    pub fn cost(&self, i: usize, other: &NormedFrames, j: usize) -> f64 {
        match (self.zero[i], other.zero[j]) {
            (true, true) => 0.0,
            (true, false) | (false, true) => 1.0,
            (false, false) => {
                let a = &self.data[i * self.dim..(i + 1) * self.dim];
                let b = &other.data[j * other.dim..(j + 1) * other.dim];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (1.0 - dot).clamp(0.0, 2.0)
            }
        }
    }
}

/// DTW over cosine frame costs with steps (1,0), (0,1), (1,1).
///
/// The optimal path minimizes the summed cost; among equal-cost paths the
/// one with the fewest nodes is taken. Returns the summed cost divided by the
/// number of path nodes.
pub fn dtw_normed(x: &NormedFrames, y: &NormedFrames) -> f64 {
    let (n, m) = (x.len(), y.len());
    // (cost, path length) per cell of the current and previous row.
    let mut prev: Vec<(f64, u32)> = vec![(f64::INFINITY, 0); m];
    let mut cur: Vec<(f64, u32)> = vec![(f64::INFINITY, 0); m];
    for i in 0..n {
        for j in 0..m {
            let c = x.cost(i, y, j);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, u32::MAX);
                if i > 0 && j > 0 {
                    best = better(best, prev[j - 1]);
                }
                if i > 0 {
                    best = better(best, prev[j]);
                }
                if j > 0 {
                    best = better(best, cur[j - 1]);
                }
                best
            };
            cur[j] = (best.0 + c, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, len) = prev[m - 1];
    cost / f64::from(len)
}

fn better(a: (f64, u32), b: (f64, u32)) -> (f64, u32) {
    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Average cosine distance along the DTW alignment path of `x` and `y`.
pub fn dtw_distance(x: ArrayView2<'_, f32>, y: ArrayView2<'_, f32>) -> Result<f64, AbxError> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(AbxError::EmptySequence);
    }
    if x.ncols() != y.ncols() {
        return Err(AbxError::DimMismatch { left: x.ncols(), right: y.ncols() });
    }
    Ok(dtw_normed(&NormedFrames::new(x), &NormedFrames::new(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn identical_sequences() {
        let x = array![[1.0f32, 2.0], [0.0, 1.0], [-3.0, 0.5]];
        assert!(dtw_distance(x.view(), x.view()).unwrap() < 1e-12);
    }

    #[test]
    fn orthogonal_single_frames() {
        assert_eq!(dtw_distance(array![[1.0f32, 0.0]].view(), array![[0.0f32, 1.0]].view()).unwrap(), 1.0);
    }

    #[test]
    fn two_against_one() {
        let x = array![[1.0f32, 0.0], [0.0, 1.0]];
        let y = array![[1.0f32, 0.0]];
        assert_eq!(dtw_distance(x.view(), y.view()).unwrap(), 0.5);
    }

    #[test]
    fn zero_frames() {
        let z = array![[0.0f32, 0.0]];
        let v = array![[0.0f32, 3.0]];
        assert_eq!(dtw_distance(z.view(), z.view()).unwrap(), 0.0);
        assert_eq!(dtw_distance(z.view(), v.view()).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let e = Array2::<f32>::zeros((0, 2));
        let a = array![[1.0f32, 0.0]];
        assert!(matches!(dtw_distance(e.view(), a.view()), Err(AbxError::EmptySequence)));
        assert!(matches!(dtw_distance(a.view(), array![[1.0f32]].view()), Err(AbxError::DimMismatch { .. })));
    }

    #[test]
    fn prefers_shorter_of_equal_cost_paths() {
        // All costs zero: the diagonal path has 3 nodes, others have more.
        let x = array![[1.0f32, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert_eq!(dtw_distance(x.view(), x.view()).unwrap(), 0.0);
        let a = array![[1.0f32, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let b = array![[1.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]];
        // The diagonal costs 1; the 4-node path through (0,1) and (1,2) costs 0.
        assert_eq!(dtw_distance(a.view(), b.view()).unwrap(), 0.0);
    }
}
