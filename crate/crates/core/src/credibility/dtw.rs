//! Dynamic time warping over scalar or multichannel series.

use super::CredibilityError;

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    pub distance: f64,
    /// Index pairs `(i, j)` from `(0, 0)` to `(n-1, m-1)`.
    pub path: Vec<(usize, usize)>,
}

fn row_cost(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Align two multichannel series (rows are time samples). The local cost
/// is the Euclidean distance between rows; steps are (1,0), (0,1), (1,1).
pub fn dtw_align_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DtwResult, CredibilityError> {
    if a.is_empty() || b.is_empty() {
        return Err(CredibilityError::Empty);
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let c = row_cost(&a[i], &b[j]);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = best.min(acc[at(i - 1, j - 1)]);
                }
                if i > 0 {
                    best = best.min(acc[at(i - 1, j)]);
                }
                if j > 0 {
                    best = best.min(acc[at(i, j - 1)]);
                }
                best
            };
            acc[at(i, j)] = c + prev;
        }
    }
    // Backtrack, preferring the diagonal on ties.
    let (mut i, mut j) = (n - 1, m - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        let (ni, nj) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let d = acc[at(i - 1, j - 1)];
            let up = acc[at(i - 1, j)];
            let left = acc[at(i, j - 1)];
            if d <= up && d <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        distance: acc[at(n - 1, m - 1)],
        path,
    })
}

/// Scalar-series DTW with local cost `|a_i - b_j|`.
pub fn dtw_align(a: &[f64], b: &[f64]) -> Result<DtwResult, CredibilityError> {
    let ra: Vec<Vec<f64>> = a.iter().map(|&x| vec![x]).collect();
    let rb: Vec<Vec<f64>> = b.iter().map(|&x| vec![x]).collect();
    dtw_align_rows(&ra, &rb)
}

/// Expand both series along the warp path so they have equal length.
pub fn warp<T: Clone>(a: &[T], b: &[T], path: &[(usize, usize)]) -> (Vec<T>, Vec<T>) {
    path.iter().map(|&(i, j)| (a[i].clone(), b[j].clone())).unzip()
}
