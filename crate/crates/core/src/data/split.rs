use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ResponseData;
use crate::error::{GmfError, Result};
use crate::scalar::Scalar;

const MAX_SPLIT_ATTEMPTS: usize = 200;

fn observed_cells(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    mask.indexed_iter().filter(|(_, &b)| b).map(|(ij, _)| ij).collect()
}

/// True when every row and column that has an observed cell in `original`
/// keeps at least one in `train`.
fn keeps_coverage(original: &Array2<bool>, train: &Array2<bool>) -> bool {
    let rows_ok = original
        .axis_iter(Axis(0))
        .zip(train.axis_iter(Axis(0)))
        .all(|(o, t)| !o.iter().any(|&b| b) || t.iter().any(|&b| b));
    let cols_ok = original
        .axis_iter(Axis(1))
        .zip(train.axis_iter(Axis(1)))
        .all(|(o, t)| !o.iter().any(|&b| b) || t.iter().any(|&b| b));
    rows_ok && cols_ok
}

/// Splits the observed cells into training and test masks.
///
/// `round(fraction · observed)` test cells (at least one) are drawn
/// uniformly without replacement. Draws that would leave a row or column
/// without training cells are rejected and redrawn a bounded number of
/// times.
pub fn holdout_split<T: Scalar>(
    data: &ResponseData<T>,
    fraction: f64,
    seed: u64,
) -> Result<(Array2<bool>, Array2<bool>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(GmfError::InvalidInput(format!("holdout fraction {fraction} must lie in (0, 1)")));
    }
    let original = data.mask();
    let mut cells = observed_cells(original);
    let n_test = ((fraction * cells.len() as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        cells.shuffle(&mut rng);
        let mut train = original.clone();
        let mut test = Array2::from_elem(original.dim(), false);
        for &(i, j) in &cells[..n_test.min(cells.len())] {
            train[(i, j)] = false;
            test[(i, j)] = true;
        }
        if keeps_coverage(original, &train) {
            return Ok((train, test));
        }
    }
    Err(GmfError::SplitInfeasible(format!(
        "could not hold out {n_test} of {} cells while keeping a training cell in every row and column",
        cells.len()
    )))
}

/// Partitions the observed cells of `mask` into `folds` test masks of
/// near-equal size, each of which leaves every row and column with at
/// least one training cell.
pub fn cell_folds(mask: &Array2<bool>, folds: usize, seed: u64) -> Result<Vec<Array2<bool>>> {
    if folds < 2 {
        return Err(GmfError::InvalidInput("cross-validation needs at least 2 folds".into()));
    }
    let mut cells = observed_cells(mask);
    if cells.len() < folds {
        return Err(GmfError::SplitInfeasible(format!(
            "{} observed cells cannot fill {folds} folds",
            cells.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..MAX_SPLIT_ATTEMPTS {
        cells.shuffle(&mut rng);
        let mut tests = vec![Array2::from_elem(mask.dim(), false); folds];
        for (k, &(i, j)) in cells.iter().enumerate() {
            tests[k % folds][(i, j)] = true;
        }
        for test in &tests {
            let train = ndarray::Zip::from(mask).and(test).map_collect(|&o, &t| o && !t);
            if !keeps_coverage(mask, &train) {
                continue 'attempt;
            }
        }
        return Ok(tests);
    }
    Err(GmfError::SplitInfeasible(format!(
        "no {folds}-fold partition keeps a training cell in every row and column"
    )))
}
