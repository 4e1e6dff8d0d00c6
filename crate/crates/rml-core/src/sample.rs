//! The universal data carrier: `n` vectors in `R^d`, optionally paired with
//! covariates in `R^p`.

use crate::linalg::Matrix;

#[derive(Debug, Clone)]
pub struct SampleBatch {
    data: Matrix,
    covariates: Option<Matrix>,
}

impl SampleBatch {
    pub fn new(data: Matrix) -> Self {
        SampleBatch {
            data,
            covariates: None,
        }
    }

    pub fn with_covariates(data: Matrix, covariates: Matrix) -> Self {
        assert_eq!(
            data.rows(),
            covariates.rows(),
            "covariate row count must match data"
        );
        SampleBatch {
            data,
            covariates: Some(covariates),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        SampleBatch::new(Matrix::from_rows(rows))
    }

    /// 1-D batch from a flat slice of scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        SampleBatch::new(Matrix::from_vec(values.len(), 1, values.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.as_ref().map_or(0, Matrix::cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn covariate(&self, i: usize) -> Option<&[f64]> {
        self.covariates.as_ref().map(|c| c.row(i))
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn covariates(&self) -> Option<&Matrix> {
        self.covariates.as_ref()
    }

    /// Column `j` as an owned vector (used by per-location metrics).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.data[(i, j)]).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.iter_rows()
    }
}
