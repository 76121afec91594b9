//! Turning the real-valued assistant matrix into a one-hot cell→node
//! assignment.
//!
//! All three rules are deterministic; ties go to the lowest row index, then
//! the lowest column index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which assignments the binary matrix may express.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GitMode {
    /// Permutation: every cell a distinct node (square only).
    Bijective,
    /// Every node used at least once, duplicates allowed for the rest.
    Surjective,
    /// Plain row-wise argmax.
    Unconstrained,
}

impl std::str::FromStr for GitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bijective" => Ok(GitMode::Bijective),
            "surjective" => Ok(GitMode::Surjective),
            "unconstrained" => Ok(GitMode::Unconstrained),
            other => Err(Error::config(format!(
                "unknown git mode `{other}` (expected bijective, surjective or unconstrained)"
            ))),
        }
    }
}

/// Visiting order of the non-repetitive greedy assignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GreedyOrder {
    /// Repeatedly take the largest entry among free rows and free columns.
    #[default]
    Global,
    /// Rows in index order, each taking its best free column.
    RowOrder,
}

impl std::str::FromStr for GreedyOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(GreedyOrder::Global),
            "row-order" => Ok(GreedyOrder::RowOrder),
            other => Err(Error::config(format!("unknown greedy order `{other}` (expected global or row-order)"))),
        }
    }
}

fn matrix_dims<T: Scalar>(psi: &Tensor<T>) -> Result<(usize, usize)> {
    let [r, c] = psi.as_matrix()?;
    Ok((r, c))
}

fn one_hot<T: Scalar>(rows: usize, cols: usize, assignment: &[usize]) -> Tensor<T> {
    let mut phi = Tensor::zeros(&[rows, cols]);
    for (i, &j) in assignment.iter().enumerate() {
        phi.data_mut()[i * cols + j] = T::one();
    }
    phi
}

fn row_argmax<T: Scalar>(row: &[T], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if !allowed(j) {
            continue;
        }
        // Strict comparison keeps the lowest index on ties.
        if best.is_none_or(|b| v > row[b]) {
            best = Some(j);
        }
    }
    best
}

/// Entry coordinates sorted by value descending, then row, then column.
fn ranked_entries<T: Scalar>(psi: &Tensor<T>, cols: usize) -> Vec<(usize, usize)> {
    let data = psi.data();
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| data[b].as_f64().total_cmp(&data[a].as_f64()).then(a.cmp(&b)));
    idx.into_iter().map(|k| (k / cols, k % cols)).collect()
}

/// Column chosen by each row under the plain argmax rule.
pub fn assign_rowwise<T: Scalar>(psi: &Tensor<T>) -> Result<Vec<usize>> {
    let (rows, cols) = matrix_dims(psi)?;
    if cols == 0 {
        return Err(Error::dim("cannot binarize a matrix with no columns"));
    }
    Ok((0..rows).map(|i| row_argmax(&psi.data()[i * cols..][..cols], |_| true).unwrap()).collect())
}

pub fn binarize_rowwise<T: Scalar>(psi: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = matrix_dims(psi)?;
    Ok(one_hot(rows, cols, &assign_rowwise(psi)?))
}

/// Permutation chosen by the non-repetitive greedy rule.
pub fn assign_bijective<T: Scalar>(psi: &Tensor<T>, order: GreedyOrder) -> Result<Vec<usize>> {
    let (n, cols) = matrix_dims(psi)?;
    if n != cols {
        return Err(Error::dim(format!("bijective assignment needs a square matrix, got {n}×{cols}")));
    }
    let mut col_used = vec![false; n];
    let mut assignment = vec![usize::MAX; n];
    match order {
        GreedyOrder::Global => {
            let mut left = n;
            for (i, j) in ranked_entries(psi, n) {
                if left == 0 {
                    break;
                }
                if assignment[i] == usize::MAX && !col_used[j] {
                    assignment[i] = j;
                    col_used[j] = true;
                    left -= 1;
                }
            }
        }
        GreedyOrder::RowOrder => {
            for (i, slot) in assignment.iter_mut().enumerate() {
                let j = row_argmax(&psi.data()[i * n..][..n], |j| !col_used[j]).expect("a free column remains");
                *slot = j;
                col_used[j] = true;
            }
        }
    }
    Ok(assignment)
}

pub fn binarize_bijective<T: Scalar>(psi: &Tensor<T>, order: GreedyOrder) -> Result<Tensor<T>> {
    let (n, _) = matrix_dims(psi)?;
    Ok(one_hot(n, n, &assign_bijective(psi, order)?))
}

/// Covering assignment: the global greedy first gives every column its best
/// free row, then the leftover rows take their plain argmax.
pub fn assign_surjective<T: Scalar>(psi: &Tensor<T>) -> Result<Vec<usize>> {
    let (rows, cols) = matrix_dims(psi)?;
    if rows < cols {
        return Err(Error::dim(format!("surjective assignment needs rows ≥ columns, got {rows}×{cols}")));
    }
    let mut col_used = vec![false; cols];
    let mut assignment = vec![usize::MAX; rows];
    let mut left = cols;
    for (i, j) in ranked_entries(psi, cols) {
        if left == 0 {
            break;
        }
        if assignment[i] == usize::MAX && !col_used[j] {
            assignment[i] = j;
            col_used[j] = true;
            left -= 1;
        }
    }
    for (i, slot) in assignment.iter_mut().enumerate() {
        if *slot == usize::MAX {
            *slot = row_argmax(&psi.data()[i * cols..][..cols], |_| true).unwrap();
        }
    }
    Ok(assignment)
}

pub fn binarize_surjective<T: Scalar>(psi: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = matrix_dims(psi)?;
    Ok(one_hot(rows, cols, &assign_surjective(psi)?))
}

pub fn assign<T: Scalar>(psi: &Tensor<T>, mode: GitMode, order: GreedyOrder) -> Result<Vec<usize>> {
    match mode {
        GitMode::Bijective => assign_bijective(psi, order),
        GitMode::Surjective => assign_surjective(psi),
        GitMode::Unconstrained => assign_rowwise(psi),
    }
}

pub fn binarize<T: Scalar>(psi: &Tensor<T>, mode: GitMode, order: GreedyOrder) -> Result<Tensor<T>> {
    let (rows, cols) = matrix_dims(psi)?;
    Ok(one_hot(rows, cols, &assign(psi, mode, order)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rowwise_examples() {
        assert_eq!(binarize_rowwise(&m(&[&[0.2, 0.7], &[0.5, 0.1]])).unwrap(), m(&[&[0., 1.], &[1., 0.]]));
        assert_eq!(binarize_rowwise(&m(&[&[0.5, 0.5]])).unwrap(), m(&[&[1., 0.]]));
        assert_eq!(
            binarize_rowwise(&m(&[&[3., 1.], &[2., 9.], &[4., 0.]])).unwrap(),
            m(&[&[1., 0.], &[0., 1.], &[1., 0.]])
        );
    }

    #[test]
    fn bijective_examples() {
        let g = GreedyOrder::Global;
        assert_eq!(binarize_bijective(&m(&[&[0.9, 0.8], &[0.85, 0.1]]), g).unwrap(), Tensor::eye(2));
        let witness = m(&[&[0.6, 0.9], &[0.8, 0.95]]);
        assert_eq!(binarize_bijective(&witness, g).unwrap(), Tensor::eye(2));
        assert_eq!(
            binarize_bijective(&witness, GreedyOrder::RowOrder).unwrap(),
            m(&[&[0., 1.], &[1., 0.]])
        );
        assert!(matches!(binarize_bijective(&m(&[&[1., 2.]]), g), Err(Error::Dimension(_))));
    }

    #[test]
    fn bijective_ties_prefer_lowest_row_then_column() {
        let flat = Tensor::<f64>::full(&[3, 3], 0.5);
        assert_eq!(binarize_bijective(&flat, GreedyOrder::Global).unwrap(), Tensor::eye(3));
    }

    #[test]
    fn surjective_examples() {
        let psi = m(&[&[3., 1.], &[2., 9.], &[4., 0.]]);
        assert_eq!(assign_surjective(&psi).unwrap(), vec![0, 1, 0]);
        let sq = m(&[&[0.6, 0.9], &[0.8, 0.95]]);
        assert_eq!(binarize_surjective(&sq).unwrap(), binarize_bijective(&sq, GreedyOrder::Global).unwrap());
        assert!(matches!(binarize_surjective(&m(&[&[1., 2.]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("surjective".parse::<GitMode>().unwrap(), GitMode::Surjective);
        assert_eq!("row-order".parse::<GreedyOrder>().unwrap(), GreedyOrder::RowOrder);
        assert!("sinkhorn".parse::<GitMode>().is_err());
    }
}
